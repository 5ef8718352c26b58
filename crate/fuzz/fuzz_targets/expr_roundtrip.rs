#![no_main]

use factorstore::expr::parse;
use libfuzzer_sys::fuzz_target;

// Whatever parses must render to text that parses back to the same tree.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(expr) = parse(text) else { return };
    let rendered = expr.to_string();
    let again = parse(&rendered).expect("rendered expression must parse");
    assert_eq!(again.canonical_key(), expr.canonical_key(), "{rendered}");
});
