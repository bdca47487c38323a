#![no_main]
use std::path::Path;

use libfuzzer_sys::fuzz_target;
use patchforge::dataio::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text, Path::new("fuzz.tsv")) {
        assert!(entries.iter().all(|e| !e.image_path.as_os_str().is_empty()));
    }
});
