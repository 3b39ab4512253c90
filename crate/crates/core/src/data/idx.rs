//! The IDX container used by the MNIST distribution files.

use std::path::Path;

use super::DataError;

const MAGIC_1D: u32 = 0x0000_0801;
const MAGIC_3D: u32 = 0x0000_0803;

/// An unsigned-byte array with its declared dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl IdxArray {
    /// Only rank 1 and rank 3 arrays are representable.
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, DataError> {
        if dims.len() != 1 && dims.len() != 3 {
            return Err(DataError::Format(format!("IDX arrays must have rank 1 or 3, got {}", dims.len())));
        }
        let n = dims.iter().product::<usize>();
        if n != data.len() {
            return Err(DataError::Format(format!("dims {dims:?} need {n} bytes, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let word = |i: usize| -> Option<u32> { bytes.get(4 * i..4 * i + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())) };
    let magic = word(0).ok_or(DataError::IdxHeader)?;
    let rank = match magic {
        MAGIC_1D => 1,
        MAGIC_3D => 3,
        other => return Err(DataError::IdxMagic(other)),
    };
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize).ok_or(DataError::IdxHeader))
        .collect::<Result<Vec<_>, _>>()?;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::Format(format!("IDX dims {dims:?} overflow")))?;
    let payload = &bytes[4 * (rank + 1)..];
    if payload.len() < expected {
        return Err(DataError::IdxTruncated { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(DataError::IdxTrailing { extra: payload.len() - expected });
    }
    IdxArray::new(dims, payload.to_vec())
}

pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let magic = if array.dims.len() == 1 { MAGIC_1D } else { MAGIC_3D };
    let mut out = Vec::with_capacity(4 * (array.dims.len() + 1) + array.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn parses_small_image_file() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims(), &[1, 2, 2]);
        assert_eq!(a.data(), &[1, 2, 3, 4]);
    }

    #[test]
    fn rejection_reasons_are_distinct() {
        let bad_magic = [0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 7];
        assert_eq!(parse_idx(&bad_magic), Err(DataError::IdxMagic(0x0802)));
        assert!(DataError::IdxMagic(0x0802).to_string().contains("unsupported magic"));
        let truncated = [0, 0, 8, 1, 0, 0, 0, 2, 9];
        assert_eq!(parse_idx(&truncated), Err(DataError::IdxTruncated { expected: 2, got: 1 }));
        assert!(parse_idx(&truncated).unwrap_err().to_string().contains("truncated"));
        let trailing = [0, 0, 8, 1, 0, 0, 0, 1, 9, 9];
        assert_eq!(parse_idx(&trailing), Err(DataError::IdxTrailing { extra: 1 }));
        assert_eq!(parse_idx(&[0, 0, 8, 3, 0, 0, 0, 1]), Err(DataError::IdxHeader));
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(rank3 in any::<bool>(), a in 0usize..5, b in 0usize..5, c in 0usize..5, seed in any::<u8>()) {
            let dims = if rank3 { vec![a, b, c] } else { vec![a * b + c] };
            let n: usize = dims.iter().product();
            let data = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let arr = IdxArray::new(dims, data).unwrap();
            prop_assert_eq!(parse_idx(&write_idx(&arr)).unwrap(), arr);
        }
    }
}
