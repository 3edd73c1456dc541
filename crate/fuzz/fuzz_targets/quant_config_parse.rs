#![no_main]

use blockquant::linalg::QuantConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(q) = serde_json::from_slice::<QuantConfig>(data) else {
        return;
    };
    let text = serde_json::to_string(&q).expect("configs serialize");
    assert_eq!(
        serde_json::from_str::<QuantConfig>(&text).expect("round trip"),
        q
    );
});
