//! Binary layout of an attribute series: a little-endian `u32` start index
//! followed by consecutive little-endian `f32` values.

use super::StorageError;

pub const HEADER_BYTES: usize = 4;
pub const VALUE_BYTES: usize = 4;

/// One instrument's values for one attribute, positionally aligned to the
/// calendar starting at `start_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSeries {
    pub start_index: u32,
    pub values: Vec<f32>,
}

impl AttributeSeries {
    pub fn encode(&self) -> Vec<u8> {
        encode_series(self.start_index, &self.values)
    }

    /// Strict decode: the payload must be a whole number of records.
    pub fn decode(bytes: &[u8]) -> Result<Self, StorageError> {
        if bytes.len() < HEADER_BYTES {
            return Err(StorageError::Corrupt(format!(
                "series file of {} bytes has no header",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_BYTES..];
        if !body.len().is_multiple_of(VALUE_BYTES) {
            return Err(StorageError::Corrupt(format!(
                "series payload of {} bytes is not a multiple of {VALUE_BYTES}",
                body.len()
            )));
        }
        Ok(AttributeSeries {
            start_index: u32::from_le_bytes(bytes[..HEADER_BYTES].try_into().unwrap()),
            values: decode_values(body),
        })
    }

    /// Index one past the last stored value.
    pub fn end_index(&self) -> u64 {
        self.start_index as u64 + self.values.len() as u64
    }
}

pub fn encode_series(start_index: u32, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + VALUE_BYTES * values.len());
    out.extend_from_slice(&start_index.to_le_bytes());
    out.extend_from_slice(&encode_values(values));
    out
}

pub fn encode_values(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(VALUE_BYTES * values.len());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes whole records; a trailing partial record is ignored.
pub fn decode_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(VALUE_BYTES)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_values() {
        let bytes = encode_series(2, &[10.0, 11.0]);
        let mut expected = vec![2, 0, 0, 0];
        expected.extend_from_slice(&10.0f32.to_le_bytes());
        expected.extend_from_slice(&11.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 12);
    }

    #[test]
    fn empty_series_is_header_only() {
        assert_eq!(encode_series(7, &[]), vec![7, 0, 0, 0]);
    }

    #[test]
    fn strict_decode_rejects_ragged_payload() {
        assert!(AttributeSeries::decode(&[1, 0, 0]).is_err());
        assert!(AttributeSeries::decode(&[1, 0, 0, 0, 9]).is_err());
        let s = AttributeSeries::decode(&encode_series(3, &[f32::NAN, 1.5])).unwrap();
        assert_eq!(s.start_index, 3);
        assert!(s.values[0].is_nan());
        assert_eq!(s.values[1], 1.5);
        assert_eq!(s.end_index(), 5);
    }
}
