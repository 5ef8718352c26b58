#![no_main]

use factorstore::dataset::{AlignedFrame, FrameIndex};
use libfuzzer_sys::fuzz_target;

// Input: index text, a NUL byte, then the binary payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(index) = std::str::from_utf8(&data[..split]) else { return };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    let _ = FrameIndex::parse(index);
    let ncols = match payload.get(..4) {
        Some(h) => u32::from_le_bytes(h.try_into().unwrap()) as usize,
        None => 1,
    };
    if ncols > 64 {
        return;
    }
    let columns = (0..ncols).map(|i| format!("c{i}")).collect();
    if let Ok(frame) = AlignedFrame::decode(columns, payload, index) {
        assert_eq!(frame.encode_payload(), payload);
    }
});
