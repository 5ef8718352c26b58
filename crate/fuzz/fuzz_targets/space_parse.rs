#![no_main]

use factorstore::hte::{parse_assignments, SearchSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = SearchSpace::parse(text);
    let _ = parse_assignments(text);
});
