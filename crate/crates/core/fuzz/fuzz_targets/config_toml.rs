#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::config::Config;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = Config::parse(text) {
        let _ = cfg.check();
    }
});
