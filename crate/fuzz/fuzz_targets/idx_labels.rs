#![no_main]
use libfuzzer_sys::fuzz_target;
use tdfn::data::{encode_idx_labels, parse_idx_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_idx_labels(data) {
        assert!(labels.iter().all(|&l| l <= 9));
        assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }
});
