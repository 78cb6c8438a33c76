#![no_main]

use gcq::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::parse(text) {
        let canonical = config.serialize();
        let again = RunConfig::parse(&canonical).expect("serialized config parses");
        assert_eq!(again.serialize(), canonical);
    }
});
