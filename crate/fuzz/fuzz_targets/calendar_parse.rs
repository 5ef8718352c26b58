#![no_main]

use factorstore::storage::Calendar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cal) = Calendar::parse("day", text) {
        assert_eq!(Calendar::parse("day", &cal.render()).unwrap(), cal);
    }
});
