#![no_main]

use diffusion::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Accepted input re-encodes to a stable canonical form.
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("canonical encoding decodes");
        assert_eq!(again.encode(), bytes);
    }
});
