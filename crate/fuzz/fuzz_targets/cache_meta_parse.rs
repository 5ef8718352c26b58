#![no_main]

use factorstore::cache::EntryMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = EntryMeta::parse(text) {
        assert_eq!(EntryMeta::parse(&meta.render()).unwrap(), meta);
    }
});
