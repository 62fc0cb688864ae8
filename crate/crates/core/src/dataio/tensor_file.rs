//! Minimal binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "EXPT"
//! 4       1         version (1)
//! 5       1         dtype code (0 = f32, 1 = i32)
//! 6       1         rank r (1..=255)
//! 7       4*r       dims, u32 each, every dim >= 1
//! 7+4r    4*prod    payload, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"EXPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DtypeCode {
    F32 = 0,
    I32 = 1,
}

impl DtypeCode {
    pub fn from_byte(b: u8) -> Result<Self, FormatError> {
        match b {
            0 => Ok(DtypeCode::F32),
            1 => Ok(DtypeCode::I32),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DtypeCode {
        match self {
            TensorData::F32(_) => DtypeCode::F32,
            TensorData::I32(_) => DtypeCode::I32,
        }
    }
}

/// A shaped, typed array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, FormatError> {
        validate_shape(&shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(FormatError::CountMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, FormatError> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Self, FormatError> {
        Self::new(shape, TensorData::I32(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DtypeCode {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, TensorData) {
        (self.shape, self.data)
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Total encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        header_len(self.shape.len()) + 4 * self.data.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &dim in &self.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 7 {
            return Err(FormatError::Truncated {
                expected: 7,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        if bytes[4] != VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[4]));
        }
        let dtype = DtypeCode::from_byte(bytes[5])?;
        let rank = bytes[6] as usize;
        let header = header_len(rank);
        if bytes.len() < header {
            return Err(FormatError::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        validate_shape(&shape)?;
        let count: usize = shape.iter().product();
        let expected = header + 4 * count;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes {
                expected,
                found: bytes.len(),
            });
        }
        let words = bytes[header..].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let data = match dtype {
            DtypeCode::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DtypeCode::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
        };
        Ok(Self { shape, data })
    }
}

fn header_len(rank: usize) -> usize {
    4 + 1 + 1 + 1 + 4 * rank
}

fn validate_shape(shape: &[usize]) -> Result<(), FormatError> {
    if shape.is_empty()
        || shape.len() > u8::MAX as usize
        || shape.iter().any(|&d| d == 0 || d > u32::MAX as usize)
    {
        return Err(FormatError::InvalidShape {
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_is_31_bytes() {
        let t = TensorFile::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 31);
        assert_eq!(&bytes[..4], b"EXPT");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[27..31], &4.0f32.to_le_bytes());
        assert_eq!(TensorFile::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            TensorFile::f32(vec![0], vec![]),
            Err(FormatError::InvalidShape { .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(matches!(
            TensorFile::i32(vec![3], vec![1, 2]),
            Err(FormatError::CountMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn large_feature_matrix_payload_size() {
        let t = TensorFile::f32(vec![500, 768], vec![0.0; 500 * 768]).unwrap();
        assert_eq!(t.encoded_len() - header_len(2), 500 * 768 * 4);
        assert_eq!(t.encode().len(), 15 + 1_536_000);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = TensorFile::i32(vec![1], vec![7]).unwrap().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(
            TensorFile::decode(&bytes),
            Err(FormatError::BadMagic { found: *b"XXXX" })
        );
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = TensorFile::i32(vec![1], vec![7]).unwrap().encode();
        bytes[5] = 9;
        assert_eq!(TensorFile::decode(&bytes), Err(FormatError::UnknownDtype(9)));
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let bytes = TensorFile::f32(vec![2, 3], vec![0.5; 6]).unwrap().encode();
        let full = bytes.len();
        assert_eq!(full, 15 + 24);
        let cut = &bytes[..full - 5];
        assert_eq!(
            TensorFile::decode(cut),
            Err(FormatError::Truncated {
                expected: full,
                found: full - 5
            })
        );
    }

    #[test]
    fn file_round_trip_and_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.expt");
        let t = TensorFile::i32(vec![2, 1, 3], vec![-1, 0, 1, i32::MAX, i32::MIN, 5]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);

        let missing = read_tensor(dir.path().join("nope.expt")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        std::fs::write(&path, b"XXXX\x01\x00\x01").unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                source: FormatError::BadMagic { .. },
                ..
            }
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = TensorFile> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n).prop_map({
                    let shape = shape.clone();
                    move |bits| {
                        TensorFile::f32(shape.clone(), bits.into_iter().map(f32::from_bits).collect())
                            .unwrap()
                    }
                }),
                prop::collection::vec(any::<i32>(), n)
                    .prop_map(move |v| TensorFile::i32(shape.clone(), v).unwrap()),
            ]
        })
    }

    fn bitwise(t: &TensorFile) -> (Vec<usize>, Vec<u32>) {
        let bits = match t.data() {
            TensorData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::I32(v) => v.iter().map(|x| *x as u32).collect(),
        };
        (t.shape().to_vec(), bits)
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(t in arb_tensor()) {
            let back = TensorFile::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(bitwise(&back), bitwise(&t));
        }
    }
}
