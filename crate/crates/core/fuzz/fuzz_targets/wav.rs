#![no_main]

use kwspot_core::dataio::{encode_wav, parse_wav};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = parse_wav(data) {
        assert!(clip.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        // anything we accept must survive a trip through our own encoder
        let again = parse_wav(&encode_wav(&clip)).unwrap();
        assert_eq!(again.sample_rate, clip.sample_rate);
        assert_eq!(again.samples.len(), clip.samples.len());
    }
});
