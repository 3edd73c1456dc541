#![no_main]

use blockquant::quantizer::BlockFormat;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(f) = serde_json::from_slice::<BlockFormat>(data) else {
        return;
    };
    if f.validate().is_ok() {
        let _ = (f.element_bits(), f.shared_bits(), f.transposed());
        let text = serde_json::to_string(&f).expect("formats serialize");
        assert_eq!(
            serde_json::from_str::<BlockFormat>(&text).expect("round trip"),
            f
        );
    }
});
