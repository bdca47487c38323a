#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::train::Checkpoint;
use sha2::{Digest, Sha256};

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::decode(data);
    // With a valid trailer the body parser itself is exercised.
    let mut sealed = data.to_vec();
    sealed.extend_from_slice(&Sha256::digest(data));
    if let Ok(c) = Checkpoint::decode(&sealed) {
        assert_eq!(c.encode(), sealed);
    }
});
