#![no_main]

use factorstore::storage::InstrumentPool;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pool) = InstrumentPool::parse("p", text) {
        assert_eq!(InstrumentPool::parse("p", &pool.render()).unwrap(), pool);
    }
});
