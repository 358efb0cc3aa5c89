#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::materialize::SubmissionEvent;
use lineage_core::store::parse_jsonl;

fuzz_target!(|text: &str| {
    let _ = parse_jsonl::<SubmissionEvent>(text);
});
