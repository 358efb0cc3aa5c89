#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::sim::SimProgram;

fuzz_target!(|text: &str| {
    if let Ok(p) = SimProgram::parse(text) {
        assert_eq!(SimProgram::parse(&p.render()).expect("rendered program parses"), p);
    }
});
