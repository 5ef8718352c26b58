#![no_main]

use factorstore::expr::parse;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Err(e) = parse(text) {
            assert!(e.offset() <= text.len());
        }
    }
});
