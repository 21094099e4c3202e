#![no_main]

use flowreg::io::parse_header;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(header) = parse_header(data) {
        let again = serde_json::to_vec(&header).unwrap();
        assert_eq!(parse_header(&again).unwrap(), header);
    }
});
