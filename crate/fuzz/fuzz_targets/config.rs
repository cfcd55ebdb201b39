#![no_main]
use libfuzzer_sys::fuzz_target;
use tdfn::config::{RunConfig, TrainConfig};

fuzz_target!(|text: &str| {
    if let Ok(c) = TrainConfig::parse(text) {
        let rendered = c.render();
        assert_eq!(TrainConfig::parse(&rendered).unwrap().render(), rendered);
    }
    if let Ok(c) = RunConfig::parse(text) {
        let rendered = c.render();
        assert_eq!(RunConfig::parse(&rendered).unwrap().render(), rendered);
    }
});
