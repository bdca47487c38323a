#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::report::{summarize, svg_plot, Table};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Table::parse("fuzz", text) {
        let _ = summarize(std::slice::from_ref(&t));
        for y in 0..t.columns.len() {
            let _ = svg_plot(&t, None, y);
        }
    }
});
