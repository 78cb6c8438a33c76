#![no_main]

use gcq::pnm::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = Image::parse(data) {
        let bytes = image.to_bytes();
        assert_eq!(Image::parse(&bytes).expect("written image parses"), image);
    }
});
