#![no_main]
use libfuzzer_sys::fuzz_target;
use tdfn::viz::{encode_pgm, parse_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = parse_pgm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height);
        if img.maxval == 255 {
            assert_eq!(parse_pgm(&encode_pgm(img.width, img.height, &img.pixels)).unwrap(), img);
        }
    }
});
