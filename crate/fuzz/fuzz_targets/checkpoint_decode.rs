#![no_main]

use dzl_core::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint parses");
        assert_eq!(ck.seed, again.seed);
        assert_eq!(ck.standardized, again.standardized);
        assert_eq!(ck.params.feature_dim, again.params.feature_dim);
        assert_eq!(ck.params.hidden, again.params.hidden);
        assert_eq!(ck.params.n_layers, again.params.n_layers);
        assert_eq!(ck.params.param_slices(), again.params.param_slices());
    }
});
