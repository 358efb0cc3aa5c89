#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::lift::parse_lift_response;

fuzz_target!(|data: &[u8]| {
    let _ = parse_lift_response(data);
});
