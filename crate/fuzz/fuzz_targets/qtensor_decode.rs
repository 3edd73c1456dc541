#![no_main]

use blockquant::quantizer::{decode_qtensor, dequantize, encode_qtensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(q) = decode_qtensor(data) {
        let again = decode_qtensor(&encode_qtensor(&q)).expect("re-encoded tensor decodes");
        assert_eq!(again, q);
        let _ = dequantize(&q);
    }
});
