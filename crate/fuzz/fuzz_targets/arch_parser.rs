#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::archspec::{compute_rf_profile, parse_arch};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(arch) = parse_arch(text) else { return };
    let _ = compute_rf_profile(&arch);
    let again = parse_arch(&arch.to_text()).expect("printed architecture parses");
    assert_eq!(again, arch);
});
