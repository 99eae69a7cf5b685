//! Hostile shuffle records: validation may reject them but must not
//! panic, and records that validate must survive a JSON round trip.

#![no_main]

use dzl_core::disarrange::DisarrangeRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(rec) = serde_json::from_slice::<DisarrangeRecord>(data) else {
        return;
    };
    if rec.validate().is_ok() {
        let json = serde_json::to_vec(&rec).expect("record serializes");
        let again: DisarrangeRecord = serde_json::from_slice(&json).expect("round trip parses");
        again.validate().expect("round trip stays valid");
        assert_eq!(rec.permutation, again.permutation);
        assert_eq!(rec.labels, again.labels);
        assert_eq!(rec.source_of(), again.source_of());
    }
});
