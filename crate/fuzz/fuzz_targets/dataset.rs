#![no_main]

use gcq::gridworld::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = Dataset::from_bytes(data) {
        assert_eq!(set.to_bytes(), data);
    }
});
