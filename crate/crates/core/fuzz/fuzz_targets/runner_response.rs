#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::gate::parse_runner_response;

fuzz_target!(|data: &[u8]| {
    if let Ok(resp) = parse_runner_response(data) {
        let bytes = serde_json::to_vec(&resp).unwrap();
        parse_runner_response(&bytes).expect("reparse");
    }
});
