#![no_main]

use gcq::autodiff::Mlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = Mlp::from_bytes(data) {
        assert_eq!(net.to_bytes(), data);
    }
});
