use std::path::Path;

use super::{io_err, DataError};
use crate::tensor::{Mask, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"FVTG";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Clip-level video features with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `L_v × D_v`
    pub features: Tensor,
    pub mask: Mask,
    /// Seconds per clip.
    pub clip_len: f64,
}

impl FeatureSequence {
    pub fn new(features: Tensor, clip_len: f64) -> Self {
        let mask = Mask::all_valid(features.rows());
        Self {
            features,
            mask,
            clip_len,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Word-level query features, `L_q × D_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTokens {
    pub tokens: Tensor,
    pub mask: Mask,
}

impl QueryTokens {
    pub fn new(tokens: Tensor) -> Self {
        let mask = Mask::all_valid(tokens.rows());
        Self { tokens, mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serialises a 2-D tensor: `FVTG`, version, rows, dim (all u32 LE), then
/// `rows·dim` little-endian f32 values.
pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let (rows, dim) = if t.shape().len() == 2 {
        (t.shape()[0], t.shape()[1])
    } else {
        t.matrix_dims()
    };
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor, DataError> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    let need = rows * dim * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        return Err(DataError::Truncated);
    }
    if payload.len() > need {
        return Err(DataError::TrailingBytes);
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinite(i));
        }
        data.push(v as f64);
    }
    Ok(Tensor::new(vec![rows, dim], data)?)
}

pub fn write_feature_file(path: impl AsRef<Path>, t: &Tensor) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(t)).map_err(io_err(path))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_roundtrip() {
        let t = Tensor::zeros(&[3, 4]);
        assert_eq!(decode_features(&encode_features(&t)).unwrap(), t);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_features(&Tensor::zeros(&[3, 4]));
        bytes.pop();
        let err = decode_features(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
        assert!(matches!(
            decode_features(&bytes[..10]),
            Err(DataError::Truncated)
        ));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_features(&Tensor::zeros(&[1, 1]));
        bytes[4] = 9;
        assert!(matches!(
            decode_features(&bytes),
            Err(DataError::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(DataError::BadMagic)));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = encode_features(&Tensor::zeros(&[1, 2]));
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_features(&bytes),
            Err(DataError::NonFinite(1))
        ));
    }
}
