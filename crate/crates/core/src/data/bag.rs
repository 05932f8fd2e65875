//! Binary feature-bag files.
//!
//! Layout, all little-endian: magic `SSPE`, `u16` version (1), `u8` modality
//! (0 histology, 1 genomic), `u8` reserved (0), `u32` M, `u32` d, then `M·d`
//! binary32 values row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const BAG_MAGIC: [u8; 4] = *b"SSPE";
pub const BAG_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Histology,
    Genomic,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Histology => 0,
            Modality::Genomic => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Histology),
            1 => Some(Modality::Genomic),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BagError {
    #[error("bad magic {0:?}, expected \"SSPE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported bag version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown modality code {0}")]
    BadModality(u8),
    #[error("nonzero reserved byte {0}")]
    BadReserved(u8),
    #[error("truncated bag: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("bag has {extra} bytes past the declared payload")]
    TrailingBytes { extra: usize },
    #[error("bag must have at least one instance and one feature (got {m}x{d})")]
    Empty { m: usize, d: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("cannot read bag {path}: {message}")]
    Io { path: String, message: String },
}

/// One patient-modality instance set: `M×d` embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag<F> {
    pub modality: Modality,
    pub features: Tensor<F>,
}

impl<F: Scalar> FeatureBag<F> {
    pub fn new(modality: Modality, features: Tensor<F>) -> Result<Self, BagError> {
        let [m, d] = features.shape();
        if m == 0 || d == 0 {
            return Err(BagError::Empty { m, d });
        }
        if let Some(k) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(BagError::NonFinite { row: k / d, col: k % d });
        }
        Ok(Self { modality, features })
    }

    pub fn instances(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [m, d] = self.features.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * m * d);
        out.extend_from_slice(&BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.push(0);
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &v in self.features.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BagError> {
        if bytes.len() < 4 {
            return Err(BagError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != BAG_MAGIC {
            return Err(BagError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(BagError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != BAG_VERSION {
            return Err(BagError::UnsupportedVersion(version));
        }
        let modality = Modality::from_code(bytes[6]).ok_or(BagError::BadModality(bytes[6]))?;
        if bytes[7] != 0 {
            return Err(BagError::BadReserved(bytes[7]));
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if m == 0 || d == 0 {
            return Err(BagError::Empty { m, d });
        }
        let expected = m
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(BagError::Truncated { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(BagError::TrailingBytes { extra: bytes.len() - expected });
        }
        let data: Vec<F> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| F::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(modality, Tensor::from_vec(m, d, data).unwrap())
    }

    pub fn save(&self, path: &Path) -> Result<(), BagError> {
        fs::write(path, self.to_bytes())
            .map_err(|e| BagError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, BagError> {
        let bytes = fs::read(path)
            .map_err(|e| BagError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bag(rows: &[[f32; 2]]) -> FeatureBag<f32> {
        FeatureBag::new(Modality::Histology, Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn small_bag_round_trips() {
        let b = bag(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let back = FeatureBag::<f32>::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = FeatureBag::new(Modality::Genomic, Tensor::<f32>::from_rows(&[[1.0f32]])).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"SSPE");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = bag(&[[1.0, 2.0]]).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(FeatureBag::<f32>::from_bytes(&bytes), Err(BagError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = bag(&[[1.0, 2.0]]).to_bytes();
        bytes[4] = 2;
        assert_eq!(FeatureBag::<f32>::from_bytes(&bytes), Err(BagError::UnsupportedVersion(2)));
    }

    #[test]
    fn oversized_declaration_is_truncation() {
        let mut bytes = bag(&[[1.0, 2.0], [3.0, 4.0]]).to_bytes();
        bytes[8] = 3;
        assert_eq!(
            FeatureBag::<f32>::from_bytes(&bytes),
            Err(BagError::Truncated { expected: 16 + 24, actual: 16 + 16 })
        );
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = bag(&[[1.0, 2.0], [3.0, 4.0]]).to_bytes();
        bytes[16 + 12..16 + 16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(FeatureBag::<f32>::from_bytes(&bytes), Err(BagError::NonFinite { row: 1, col: 1 }));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bitwise(m in 1usize..12, d in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..m * d).map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)).collect();
            let b = FeatureBag::new(Modality::Genomic, Tensor::from_vec(m, d, data).unwrap()).unwrap();
            let bytes = b.to_bytes();
            let back = FeatureBag::<f32>::from_bytes(&bytes).unwrap();
            prop_assert!(back.features.data().iter().zip(b.features.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = FeatureBag::<f32>::from_bytes(&bytes);
        }
    }
}
