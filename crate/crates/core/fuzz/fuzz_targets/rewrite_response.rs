#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::rewrite::parse_rewrite_response;

fuzz_target!(|data: &[u8]| {
    let _ = parse_rewrite_response(data);
});
