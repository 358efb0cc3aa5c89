#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::model::{Document, KernelState, Lineage, SkillCard};

fuzz_target!(|text: &str| {
    let _ = KernelState::from_json(text);
    let _ = SkillCard::from_json(text);
    let _ = Lineage::from_json(text);
});
