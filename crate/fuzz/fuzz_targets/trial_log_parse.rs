#![no_main]

use blockquant::search::{parse_trial_log, write_trial_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trials) = parse_trial_log(text) {
        let again = parse_trial_log(&write_trial_log(&trials)).expect("written log parses");
        assert_eq!(again.len(), trials.len());
    }
});
