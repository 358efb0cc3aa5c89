#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::gate::parse_runner_request;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = parse_runner_request(data) {
        let bytes = serde_json::to_vec(&req).unwrap();
        let again = parse_runner_request(&bytes).expect("reparse");
        assert_eq!(serde_json::to_value(&req).unwrap(), serde_json::to_value(&again).unwrap());
    }
});
