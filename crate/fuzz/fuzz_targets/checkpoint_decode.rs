#![no_main]

use emkd::checkpoint::{examples_from_checkpoint, params_from_checkpoint, Checkpoint};
use emkd::data::Split;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert!(again.bitwise_eq(&ck));
        let _ = params_from_checkpoint(&ck);
        let _ = examples_from_checkpoint(&ck, Split::Train);
        let _ = examples_from_checkpoint(&ck, Split::Eval);
    }
});
