#![no_main]

use gcq::codebook::CodebookTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = CodebookTable::from_bytes(data) {
        assert_eq!(table.to_bytes(), data);
    }
});
