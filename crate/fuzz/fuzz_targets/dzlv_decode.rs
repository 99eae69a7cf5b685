#![no_main]

use dzl_core::video_io::{decode_dzlv, encode_dzlv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = decode_dzlv(data) {
        let bytes = encode_dzlv(&clip);
        let again = decode_dzlv(&bytes).expect("re-encoded clip parses");
        assert_eq!(clip.len(), again.len());
        assert_eq!(clip.width(), again.width());
        assert_eq!(clip.height(), again.height());
        for (a, b) in clip.frames().iter().zip(again.frames()) {
            assert_eq!(a.data(), b.data());
        }
    }
});
