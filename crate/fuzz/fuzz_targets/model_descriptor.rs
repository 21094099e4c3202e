#![no_main]

use flowreg::io::parse_header;
use flowreg::{ModelDescriptor, VelocityModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(header) = parse_header(data) else { return };
    let Some(model) = header.extra.get("model") else { return };
    let Ok(desc) = serde_json::from_value::<ModelDescriptor>(model.clone()) else { return };
    if let Ok(model) = VelocityModel::from_descriptor(&desc) {
        assert_eq!(model.descriptor(), desc);
    }
});
