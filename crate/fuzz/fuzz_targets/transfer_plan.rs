#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::transfer::{parse_transfer_file, TransferPlan};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = TransferPlan::parse(text) {
        assert_eq!(TransferPlan::parse(&plan.to_text()).expect("printed plan parses"), plan);
    }
    let _ = parse_transfer_file(text);
});
