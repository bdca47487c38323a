#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::puzzle::{labels_to_text, parse_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(labels) = parse_labels(text) {
        assert_eq!(parse_labels(&labels_to_text(&labels)).unwrap(), labels);
    }
});
