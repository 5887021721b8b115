//! Binary multi-scale tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GGHLTENS"
//! version    u16      1
//! scales     u8
//! per scale:
//!   stride   u16
//!   height   u32
//!   width    u32
//!   channels u32
//!   values   height * width * channels f32, row-major, channels last
//! ```
//!
//! Label files carry `13 + C` channels per cell: heat, obj, the nine box
//! code values, `C` class values, region id and area factor. Prediction
//! files carry `10 + C`: obj, the nine box code values and `C` raw class
//! scores.

use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use thiserror::Error;

use crate::assign::{LabelScale, LabelTensorSet};
use crate::codec::CODE_LEN;
use crate::loss::{PredictionScale, PredictionTensorSet};

pub const MAGIC: &[u8; 8] = b"GGHLTENS";
pub const VERSION: u16 = 1;

/// Channels of a label file besides the class channels.
pub const LABEL_FIXED_CHANNELS: usize = 4 + CODE_LEN;
/// Channels of a prediction file besides the class channels.
pub const PREDICTION_FIXED_CHANNELS: usize = 1 + CODE_LEN;

const HEADER_LEN: usize = 8 + 2 + 1;
const SCALE_HEADER_LEN: usize = 2 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported tensor file version {found}, expected {VERSION}")]
    VersionMismatch { found: u16 },
    #[error("truncated payload: need {needed} bytes at offset {offset}, file has {len}")]
    TruncatedPayload { offset: usize, needed: usize, len: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("channel layout: {0}")]
    ChannelMismatch(String),
    #[error("{0} does not fit the file header")]
    TooLarge(String),
}

/// One scale of a tensor file. Values are held as `f64` but are always
/// representable as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorScale {
    pub stride: u32,
    pub data: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub scales: Vec<TensorScale>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorIoError> {
        let count = u8::try_from(self.scales.len()).map_err(|_| TensorIoError::TooLarge("scale count".into()))?;
        let payload: usize = self.scales.iter().map(|s| SCALE_HEADER_LEN + 4 * s.data.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(count);
        for s in &self.scales {
            let stride =
                u16::try_from(s.stride).map_err(|_| TensorIoError::TooLarge(format!("stride {}", s.stride)))?;
            let (h, w, c) = s.data.dim();
            out.extend_from_slice(&stride.to_le_bytes());
            for d in [h, w, c] {
                let d = u32::try_from(d).map_err(|_| TensorIoError::TooLarge(format!("dimension {d}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in s.data.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        r.take(MAGIC.len())?;
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(TensorIoError::VersionMismatch { found: version });
        }
        let count = r.take(1)?[0];
        let mut scales = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let stride = u16::from_le_bytes(r.array()?) as u32;
            let h = u32::from_le_bytes(r.array()?) as usize;
            let w = u32::from_le_bytes(r.array()?) as usize;
            let c = u32::from_le_bytes(r.array()?) as usize;
            let n = h
                .checked_mul(w)
                .and_then(|v| v.checked_mul(c))
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| TensorIoError::TooLarge(format!("{h}x{w}x{c} scale")))?;
            let raw = r.take(n)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let data = Array3::from_shape_vec((h, w, c), values).expect("length checked above");
            scales.push(TensorScale { stride, data });
        }
        if r.pos != bytes.len() {
            return Err(TensorIoError::TrailingData(bytes.len() - r.pos));
        }
        Ok(Self { scales })
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorIoError> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: &Path) -> Result<Self, TensorIoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(TensorIoError::TruncatedPayload {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TensorIoError> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }
}

fn class_count(channels: usize, fixed: usize, what: &str) -> Result<usize, TensorIoError> {
    channels.checked_sub(fixed).filter(|&n| n > 0).ok_or_else(|| {
        TensorIoError::ChannelMismatch(format!("{what} need more than {fixed} channels, found {channels}"))
    })
}

fn same_class_count(scales: &[TensorScale], fixed: usize, what: &str) -> Result<usize, TensorIoError> {
    let first = scales
        .first()
        .ok_or_else(|| TensorIoError::ChannelMismatch(format!("{what} file has no scales")))?;
    let nc = class_count(first.data.dim().2, fixed, what)?;
    if scales.iter().any(|s| s.data.dim().2 != first.data.dim().2) {
        return Err(TensorIoError::ChannelMismatch(format!(
            "{what} scales disagree on channel count"
        )));
    }
    Ok(nc)
}

impl LabelTensorSet {
    pub fn to_tensor_file(&self) -> TensorFile {
        let nc = self.num_classes;
        let scales = self
            .scales
            .iter()
            .map(|s| {
                let mut data = Array3::zeros((s.height(), s.width(), LABEL_FIXED_CHANNELS + nc));
                data.slice_mut(s![.., .., 0]).assign(&s.heat);
                data.slice_mut(s![.., .., 1]).assign(&s.obj);
                data.slice_mut(s![.., .., 2..2 + CODE_LEN]).assign(&s.obb);
                data.slice_mut(s![.., .., 2 + CODE_LEN..2 + CODE_LEN + nc])
                    .assign(&s.cls);
                data.slice_mut(s![.., .., 2 + CODE_LEN + nc])
                    .assign(&s.region_id.mapv(f64::from));
                data.slice_mut(s![.., .., 3 + CODE_LEN + nc]).assign(&s.xi);
                TensorScale { stride: s.stride, data }
            })
            .collect();
        TensorFile { scales }
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self, TensorIoError> {
        let nc = same_class_count(&tf.scales, LABEL_FIXED_CHANNELS, "label")?;
        let scales = tf
            .scales
            .iter()
            .map(|t| {
                let d = &t.data;
                LabelScale {
                    stride: t.stride,
                    heat: d.slice(s![.., .., 0]).to_owned(),
                    obj: d.slice(s![.., .., 1]).to_owned(),
                    obb: d.slice(s![.., .., 2..2 + CODE_LEN]).to_owned(),
                    cls: d.slice(s![.., .., 2 + CODE_LEN..2 + CODE_LEN + nc]).to_owned(),
                    region_id: d.slice(s![.., .., 2 + CODE_LEN + nc]).mapv(|v| v as i32),
                    xi: d.slice(s![.., .., 3 + CODE_LEN + nc]).to_owned(),
                }
            })
            .collect();
        Ok(Self {
            num_classes: nc,
            scales,
        })
    }
}

impl PredictionTensorSet {
    pub fn to_tensor_file(&self) -> TensorFile {
        let nc = self.num_classes;
        let scales = self
            .scales
            .iter()
            .map(|s| {
                let mut data = Array3::zeros((s.height(), s.width(), PREDICTION_FIXED_CHANNELS + nc));
                data.slice_mut(s![.., .., 0]).assign(&s.obj);
                data.slice_mut(s![.., .., 1..1 + CODE_LEN]).assign(&s.obb);
                data.slice_mut(s![.., .., 1 + CODE_LEN..]).assign(&s.cls);
                TensorScale { stride: s.stride, data }
            })
            .collect();
        TensorFile { scales }
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self, TensorIoError> {
        let nc = same_class_count(&tf.scales, PREDICTION_FIXED_CHANNELS, "prediction")?;
        let scales = tf
            .scales
            .iter()
            .map(|t| {
                let d = &t.data;
                PredictionScale {
                    stride: t.stride,
                    obj: d.slice(s![.., .., 0]).to_owned(),
                    obb: d.slice(s![.., .., 1..1 + CODE_LEN]).to_owned(),
                    cls: d.slice(s![.., .., 1 + CODE_LEN..]).to_owned(),
                }
            })
            .collect();
        Ok(Self {
            num_classes: nc,
            scales,
        })
    }
}

pub fn write_labels(path: &Path, labels: &LabelTensorSet) -> Result<(), TensorIoError> {
    labels.to_tensor_file().write(path)
}

pub fn read_labels(path: &Path) -> Result<LabelTensorSet, TensorIoError> {
    LabelTensorSet::from_tensor_file(&TensorFile::read(path)?)
}

pub fn write_predictions(path: &Path, preds: &PredictionTensorSet) -> Result<(), TensorIoError> {
    preds.to_tensor_file().write(path)
}

pub fn read_predictions(path: &Path) -> Result<PredictionTensorSet, TensorIoError> {
    PredictionTensorSet::from_tensor_file(&TensorFile::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TensorFile {
        let data = Array3::from_shape_fn((2, 3, 4), |(y, x, c)| (y * 100 + x * 10 + c) as f64 * 0.5);
        TensorFile {
            scales: vec![TensorScale { stride: 8, data }],
        }
    }

    #[test]
    fn header_bytes() {
        let bytes = small().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"GGHLTENS");
        assert_eq!(&bytes[8..11], &[1, 0, 1]);
        assert_eq!(&bytes[11..13], &[8, 0]);
        assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
        assert_eq!(&bytes[17..21], &[3, 0, 0, 0]);
        assert_eq!(&bytes[21..25], &[4, 0, 0, 0]);
        // second value is channel 1 of cell (0, 0): 0.5f32
        assert_eq!(&bytes[29..33], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 25 + 4 * 24);
    }

    #[test]
    fn round_trip() {
        let tf = small();
        assert_eq!(TensorFile::from_bytes(&tf.to_bytes().unwrap()).unwrap(), tf);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = small().to_bytes().unwrap();
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(TensorIoError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..9]),
            Err(TensorIoError::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bad), Err(TensorIoError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            TensorFile::from_bytes(&bad),
            Err(TensorIoError::VersionMismatch { found: 2 })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            TensorFile::from_bytes(&long),
            Err(TensorIoError::TrailingData(1))
        ));
    }

    #[test]
    fn channel_validation() {
        let tf = small();
        assert!(matches!(
            LabelTensorSet::from_tensor_file(&tf),
            Err(TensorIoError::ChannelMismatch(_))
        ));
        assert!(matches!(
            PredictionTensorSet::from_tensor_file(&tf),
            Err(TensorIoError::ChannelMismatch(_))
        ));
    }
}
