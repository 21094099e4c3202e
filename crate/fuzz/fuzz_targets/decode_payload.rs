#![no_main]

use flowreg::io::{decode_payload, parse_header};
use libfuzzer_sys::fuzz_target;

// Input layout: little-endian u16 header length, JSON header, raw payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let len = usize::from(u16::from_le_bytes([data[0], data[1]]));
    let Some(header) = data.get(2..2 + len) else { return };
    let Ok(header) = parse_header(header) else { return };
    let payload = &data[2 + len..];
    if let Ok(array) = decode_payload(&header, payload) {
        assert_eq!(array.encode(), payload);
    }
});
