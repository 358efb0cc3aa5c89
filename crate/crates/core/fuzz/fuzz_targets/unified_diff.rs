#![no_main]

use libfuzzer_sys::fuzz_target;
use lineage_core::diff::{apply_diff, make_diff, parse_diff};

// Input is `base \0 diff`; without a separator the whole input is the diff.
fuzz_target!(|text: &str| {
    let (base, diff) = text.split_once('\0').unwrap_or(("", text));
    let _ = parse_diff(diff);
    let _ = apply_diff(base, diff);
    let d = make_diff(base, diff);
    assert_eq!(apply_diff(base, &d).expect("own diff applies"), diff);
});
