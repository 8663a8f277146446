#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = rtpmix::io::parse_csv(text) {
            assert_eq!(table.rows.len(), table.lines.len());
        }
    }
});
