#![no_main]

use factorstore::storage::AttributeSeries;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(series) = AttributeSeries::decode(data) {
        assert_eq!(series.encode(), data);
    }
});
