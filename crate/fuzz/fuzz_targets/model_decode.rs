#![no_main]

use blockquant::model_zoo::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_model(data) {
        assert_eq!(
            decode_model(&encode_model(&m)).expect("re-encoded model decodes"),
            m
        );
    }
});
