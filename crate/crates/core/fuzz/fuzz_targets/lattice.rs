#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::sim::LatticeSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<LatticeSpec>(data) {
        if spec.check().is_ok() && spec.actions.len() <= 12 {
            let _ = spec.registry();
        }
    }
});
