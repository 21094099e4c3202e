#![no_main]

use flowreg_cli::RegisterArgs;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(args) = serde_json::from_slice::<RegisterArgs>(data) {
        let _ = args.registration_config().validate();
    }
});
