#![no_main]
use libfuzzer_sys::fuzz_target;
use tdfn::data::{encode_idx_images, parse_idx_images};

fuzz_target!(|data: &[u8]| {
    if let Ok(parsed) = parse_idx_images(data) {
        assert_eq!(parsed.pixels.len(), parsed.count * parsed.rows * parsed.cols);
        assert!(parsed.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let bytes: Vec<Vec<u8>> = parsed
            .pixels
            .chunks(parsed.rows * parsed.cols)
            .map(|img| img.iter().map(|&p| (p * 255.0).round() as u8).collect())
            .collect();
        if parsed.rows * parsed.cols > 0 {
            let again = parse_idx_images(&encode_idx_images(parsed.rows, parsed.cols, &bytes)).unwrap();
            assert_eq!(again, parsed);
        }
    }
});
