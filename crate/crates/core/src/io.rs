//! Binary tensor, label and checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! tensor:     "TNSR" u32 version=1, u8 dtype=1 (f64), u8 ndim, ndim × u64 dims, payload
//! labels:     "LBLS" u32 version=1, u64 count, count × u32 class index
//! checkpoint: "CKPT" u32 version=1, then until EOF:
//!             u32 name_len, name (UTF-8), u8 ndim, ndim × u64 dims, payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";
pub const LABELS_MAGIC: [u8; 4] = *b"LBLS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let avail = self.remaining().min(4);
        if avail < 4 {
            let found = self.bytes[self.pos..self.pos + avail].to_vec();
            if found != expected[..avail] {
                return Err(FormatError::BadMagic { expected, found });
            }
        }
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    /// `u8 ndim`, dims, then the f64 payload.
    fn shaped_payload(&mut self) -> Result<(Vec<usize>, Vec<f64>), FormatError> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::InvalidShape)?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((shape, data))
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn push_shaped(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path) -> impl Fn(FormatError) -> Error + '_ {
    move |kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * (t.ndim() + t.numel()));
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    push_shaped(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    match r.u8()? {
        DTYPE_F64 => {}
        d => return Err(FormatError::UnsupportedDtype(d)),
    }
    let (shape, data) = r.shaped_payload()?;
    r.finish()?;
    Tensor::new(shape, data).map_err(|_| FormatError::InvalidShape)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(t))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&read_file(path)?).map_err(format_err(path))
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * labels.len());
    out.extend_from_slice(&LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(LABELS_MAGIC)?;
    r.version()?;
    let count = r.u64()? as usize;
    if count.checked_mul(4).is_none_or(|n| n > r.remaining()) {
        return Err(FormatError::Truncated {
            needed: count.saturating_mul(4),
            available: r.remaining(),
        });
    }
    let labels = (0..count)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(labels)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?).map_err(format_err(path))
}

/// Named parameter groups persisted together, e.g. `online` (θ) and `target` (ξ).
///
/// Record names are `<group>.<parameter>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub online: ParamSet,
    pub target: Option<ParamSet>,
}

const ONLINE_GROUP: &str = "online.";
const TARGET_GROUP: &str = "target.";

impl Checkpoint {
    pub fn records(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .online
            .iter()
            .map(|(n, t)| (format!("{ONLINE_GROUP}{n}"), t))
            .collect();
        if let Some(target) = &self.target {
            out.extend(target.iter().map(|(n, t)| (format!("{TARGET_GROUP}{n}"), t)));
        }
        out
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in ckpt.records() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        push_shaped(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let mut online = ParamSet::new();
    let mut target = ParamSet::new();
    while r.remaining() > 0 {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::InvalidName)?;
        let (shape, data) = r.shaped_payload()?;
        let t = Tensor::new(shape, data).map_err(|_| FormatError::InvalidShape)?;
        if let Some(n) = name.strip_prefix(ONLINE_GROUP) {
            online.insert(n, t);
        } else if let Some(n) = name.strip_prefix(TARGET_GROUP) {
            target.insert(n, t);
        } else {
            return Err(FormatError::InvalidName);
        }
    }
    Ok(Checkpoint {
        online,
        target: (!target.is_empty()).then_some(target),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?).map_err(format_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 42);
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_tensor(&Tensor::vector(vec![1.0]));
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn version_and_dtype_checked() {
        let mut bytes = encode_tensor(&Tensor::vector(vec![1.0]));
        bytes[4] = 2;
        assert_eq!(decode_tensor(&bytes), Err(FormatError::UnsupportedVersion(2)));
        let mut bytes = encode_tensor(&Tensor::vector(vec![1.0]));
        bytes[8] = 4;
        assert_eq!(decode_tensor(&bytes), Err(FormatError::UnsupportedDtype(4)));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode_tensor(&Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        for cut in 4..bytes.len() {
            assert!(
                matches!(decode_tensor(&bytes[..cut]), Err(FormatError::Truncated { .. })),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode_tensor(&long), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn labels_round_trip_and_truncation() {
        let labels = vec![0, 3, 1, 1, 2];
        let bytes = encode_labels(&labels);
        assert_eq!(decode_labels(&bytes).unwrap(), labels);
        assert!(matches!(
            decode_labels(&bytes[..bytes.len() - 2]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"TNSR");
        assert!(matches!(decode_labels(&bad), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn checkpoint_round_trip_keeps_groups() {
        let mut online = ParamSet::new();
        online.insert("encoder.0.weight", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        online.insert("predictor.0.bias", Tensor::vector(vec![0.5]));
        let target = online.without(crate::model::Component::Predictor);
        let ckpt = Checkpoint {
            online,
            target: Some(target),
        };
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(&bytes[..4], b"CKPT");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn load_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.tnsr");
        let err = load_tensor(&path).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("missing.tnsr"));
    }

    fn any_tensor() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(1usize..5, 0..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            proptest::collection::vec(any::<f64>(), n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bitwise(t in any_tensor()) {
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }
    }
}
