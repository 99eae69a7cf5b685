//! Arbitrary bytes must either fail cleanly or round-trip exactly.

#![no_main]

use dzl_core::video_io::{decode_pgm, encode_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_pgm(data) {
        let bytes = encode_pgm(&frame);
        let again = decode_pgm(&bytes).expect("re-encoded frame parses");
        assert_eq!(frame.width(), again.width());
        assert_eq!(frame.height(), again.height());
        assert_eq!(frame.data(), again.data());
    }
});
