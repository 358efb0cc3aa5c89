#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::rewrite::{extract_code_block, parse_chat_response};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = extract_code_block(text);
    }
    if let Ok(body) = serde_json::from_slice::<serde_json::Value>(data) {
        let _ = parse_chat_response(&body);
    }
});
