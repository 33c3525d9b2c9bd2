//! Dense tensors and the `.scft` container.
//!
//! A `.scft` file is an 8-byte header followed by `ndim` little-endian `u64`
//! dimensions and the raw little-endian row-major payload:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SCFT`                            |
//! | 4      | 1    | version, always `1`                     |
//! | 5      | 1    | dtype code (0=f32, 1=f64, 2=u8, 3=i32)  |
//! | 6      | 1    | ndim (1..=8)                            |
//! | 7      | 1    | reserved, always `0`                    |
//! | 8      | 8·n  | dims                                    |
//!
//! Volumetric data is stored with axis order `(channel, z, y, x)`.

use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SCFT";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 8;
const HEADER_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionMismatch(u8),
    #[error("unknown dtype code {0}")]
    UnsupportedDType(u8),
    #[error("nonzero reserved byte {0}")]
    Reserved(u8),
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<u64>),
    #[error("dimension product overflows")]
    DimsOverflow,
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("data length {data} does not match shape product {expected}")]
    LengthMismatch { data: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::I32,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
            DType::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorIoError> {
        if shape.is_empty() || shape.len() > MAX_NDIM || shape.contains(&0) {
            return Err(TensorIoError::InvalidShape(
                shape.iter().map(|&s| s as u64).collect(),
            ));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or(TensorIoError::DimsOverflow)?;
        if expected != data.len() {
            return Err(TensorIoError::LengthMismatch {
                data: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorIoError> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, TensorData) {
        (self.shape, self.data)
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// Float payload upcast to f64. Integer tensors are rejected.
    pub fn to_f64_vec(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Some(v.clone()),
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            _ => None,
        }
    }

    /// Integer payload widened to i32. Float tensors are rejected.
    pub fn to_i32_vec(&self) -> Option<Vec<i32>> {
        match &self.data {
            TensorData::I32(v) => Some(v.clone()),
            TensorData::U8(v) => Some(v.iter().map(|&x| x as i32).collect()),
            _ => None,
        }
    }

    /// Serialized `.scft` bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + 8 * self.ndim() + self.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.ndim() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < HEADER_LEN {
            return Err(TensorIoError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("slice of length 4");
        if magic != MAGIC {
            return Err(TensorIoError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(TensorIoError::VersionMismatch(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5]).ok_or(TensorIoError::UnsupportedDType(bytes[5]))?;
        let ndim = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(TensorIoError::Reserved(bytes[7]));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(TensorIoError::Truncated {
                expected: dims_end,
                actual: bytes.len(),
            });
        }
        let dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if ndim == 0 || ndim > MAX_NDIM || dims.contains(&0) {
            return Err(TensorIoError::InvalidShape(dims));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .ok_or(TensorIoError::DimsOverflow)?;
        let payload_len = count
            .checked_mul(dtype.size())
            .ok_or(TensorIoError::DimsOverflow)?;
        let expected = dims_end
            .checked_add(payload_len)
            .ok_or(TensorIoError::DimsOverflow)?;
        if bytes.len() < expected {
            return Err(TensorIoError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(TensorIoError::TrailingBytes(bytes.len() - expected));
        }
        let payload = &bytes[dims_end..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
        };
        let shape = dims.into_iter().map(|d| d as usize).collect();
        Tensor::new(shape, data)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), TensorIoError> {
    fs::write(path, t.encode())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let bytes = fs::read(path)?;
    Tensor::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f64_2x2_is_56_bytes() {
        let t = Tensor::from_f64(vec![2, 2], vec![0.0; 4]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 56);
        assert_eq!(&bytes[0..8], &[b'S', b'C', b'F', b'T', 1, 1, 2, 0]);
    }

    #[test]
    fn u8_payload_follows_16_byte_header() {
        let t = Tensor::new(vec![3], TensorData::U8(vec![1, 2, 3])).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 19);
        assert_eq!(&bytes[16..], &[0x01, 0x02, 0x03]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Tensor::from_f64(vec![1], vec![1.0]).unwrap().encode();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(TensorIoError::BadMagic(m)) if &m == b"XXXX"
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = Tensor::from_f64(vec![1], vec![1.0]).unwrap().encode();
        bytes[4] = 2;
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(TensorIoError::VersionMismatch(2))
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut bytes = Tensor::from_i32(vec![2, 3], vec![1; 6]).unwrap().encode();
        bytes.pop();
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Tensor::from_i32(vec![2], vec![1, 2]).unwrap().encode();
        bytes.push(0);
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(TensorIoError::TrailingBytes(1))
        ));
    }

    #[test]
    fn overflowing_dims_rejected() {
        let mut bytes = vec![b'S', b'C', b'F', b'T', 1, 2, 2, 0];
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            Tensor::decode(&bytes),
            Err(TensorIoError::DimsOverflow)
        ));
    }

    #[test]
    fn constructor_validates_shape() {
        assert!(Tensor::from_f64(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f64(vec![1; 9], vec![1.0]).is_err());
        assert!(Tensor::from_f64(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.scft");
        let t = Tensor::from_i32(vec![2, 1, 3], vec![-1, 0, 1, 2, i32::MIN, i32::MAX]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(1usize..4, 1..=MAX_NDIM), 0u8..4).prop_flat_map(|(shape, code)| {
            let n: usize = shape.iter().product();
            let data = match code {
                0 => prop::collection::vec(any::<f32>(), n)
                    .prop_map(TensorData::F32)
                    .boxed(),
                1 => prop::collection::vec(any::<f64>(), n)
                    .prop_map(TensorData::F64)
                    .boxed(),
                2 => prop::collection::vec(any::<u8>(), n)
                    .prop_map(TensorData::U8)
                    .boxed(),
                _ => prop::collection::vec(any::<i32>(), n)
                    .prop_map(TensorData::I32)
                    .boxed(),
            };
            data.prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
        })
    }

    proptest! {
        // Compared on bytes so NaN payloads count as bit-identical.
        #[test]
        fn encode_decode_is_identity(t in arb_tensor()) {
            let bytes = t.encode();
            let back = Tensor::decode(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
