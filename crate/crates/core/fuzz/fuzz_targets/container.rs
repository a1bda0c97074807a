#![no_main]

use kwspot_core::container::{model_from_container, Container};
use kwspot_core::detector::QuantizedModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // compare bytes rather than values: NaN payloads are legal tensor data
        let bytes = c.encode();
        assert_eq!(Container::decode(&bytes).unwrap().encode(), bytes);
        let _ = model_from_container(&c);
        let _ = QuantizedModel::from_container(&c);
    }
});
