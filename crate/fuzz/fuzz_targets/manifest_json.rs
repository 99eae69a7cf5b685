#![no_main]

use dzl_core::synth::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = parse_manifest(data) {
        let json = serde_json::to_vec(&entries).expect("entries serialize");
        let again = parse_manifest(&json).expect("re-encoded manifest parses");
        assert_eq!(
            serde_json::to_string(&entries).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }
});
