#![no_main]

use flowreg::io::{encode_pgm, parse_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(pgm) = parse_pgm(data) {
        assert!(pgm.samples.iter().all(|&s| s <= pgm.maxval));
        assert_eq!(parse_pgm(&encode_pgm(&pgm)).unwrap(), pgm);
        if let Ok(img) = pgm.to_image() {
            assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
});
