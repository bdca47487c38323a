#![no_main]
use libfuzzer_sys::fuzz_target;
use patchforge::config::KvFile;
use patchforge::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = KvFile::parse(text);
    // Architecture files named in the config are not followed.
    if text.contains("arch") {
        return;
    }
    if let Ok(cfg) = TrainConfig::parse(text) {
        assert_eq!(TrainConfig::parse(&cfg.to_text()).expect("resolved config parses"), cfg);
    }
});
