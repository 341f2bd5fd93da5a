//! `XDSC` descriptor files: one file per image.
//!
//! ```text
//! magic     4 bytes "XDSC"
//! version   u32     1
//! dim       u32     descriptor dimension
//! flags     u32     reserved, must be 0
//! count     u64     number of records
//! records   count x (x f32, y f32, scale f32, orientation f32, desc f32 x dim)
//! ```
//!
//! All values little-endian; total size `24 + count * (16 + 4 * dim)`.

use std::path::Path;

use crate::binio::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{Feature, Point};

const MAGIC: &[u8; 4] = b"XDSC";
const VERSION: u32 = 1;
pub const DESCRIPTOR_HEADER_LEN: u64 = 24;

pub fn descriptor_file_size(dim: usize, count: usize) -> u64 {
    DESCRIPTOR_HEADER_LEN + count as u64 * (16 + 4 * dim as u64)
}

pub fn write_descriptor_file(path: &Path, dim: usize, features: &[Feature]) -> Result<()> {
    let context = path.display().to_string();
    let mut enc = Encoder::with_capacity(descriptor_file_size(dim, features.len()) as usize);
    enc.bytes(MAGIC);
    enc.u32(VERSION);
    enc.u32(dim as u32);
    enc.u32(0);
    enc.u64(features.len() as u64);
    for (i, f) in features.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::InvalidRecord {
                context,
                record: i as u64,
                message: format!("descriptor has {} components, file dimension is {dim}", f.dim()),
            });
        }
        enc.f32(f.pos.x);
        enc.f32(f.pos.y);
        enc.f32(f.scale);
        enc.f32(f.orientation);
        for &v in &f.desc {
            enc.f32(v);
        }
    }
    enc.write_to(path)
}

pub fn read_descriptor_file(path: &Path) -> Result<(usize, Vec<Feature>)> {
    let bytes = binio::read_file(path)?;
    read_descriptor_file_bytes(&bytes, &path.display().to_string())
}

/// Parses and validates a descriptor file, returning `(dim, features)`.
pub fn read_descriptor_file_bytes(bytes: &[u8], context: &str) -> Result<(usize, Vec<Feature>)> {
    let mut dec = Decoder::new(bytes, context);
    dec.magic(MAGIC)?;
    let version = dec.u32()?;
    if version != VERSION {
        return Err(dec.format_error(format!("unsupported version {version}")));
    }
    let dim = dec.u32()? as usize;
    let flags = dec.u32()?;
    if flags != 0 {
        return Err(dec.format_error(format!("unknown flags {flags:#x}")));
    }
    let count = dec.u64()?;
    let record_len = 16 + 4 * dim as u64;
    let expected = count
        .checked_mul(record_len)
        .and_then(|b| b.checked_add(DESCRIPTOR_HEADER_LEN))
        .ok_or_else(|| dec.format_error(format!("record count {count} overflows")))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        let complete = (actual - DESCRIPTOR_HEADER_LEN) / record_len;
        return Err(Error::Truncated {
            context: format!("{context}: header declares {count} records, file holds {complete}"),
            offset: DESCRIPTOR_HEADER_LEN + complete * record_len,
            needed: expected - actual,
        });
    }
    if actual > expected {
        return Err(dec.format_error(format!(
            "{} trailing bytes after record {count}",
            actual - expected
        )));
    }
    let mut features = Vec::with_capacity(count as usize);
    for i in 0..count {
        let bad = |message: String| Error::InvalidRecord {
            context: context.to_string(),
            record: i,
            message,
        };
        let x = dec.f32()?;
        let y = dec.f32()?;
        let scale = dec.f32()?;
        let orientation = dec.f32()?;
        let pos = Point::new(x, y);
        if !pos.is_normalized() {
            return Err(bad(format!("keypoint ({x}, {y}) outside [0,1]^2")));
        }
        let mut desc = Vec::with_capacity(dim);
        for c in 0..dim {
            let v = dec.f32()?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("descriptor component {c} is {v}")));
            }
            desc.push(v);
        }
        features.push(Feature {
            pos,
            scale,
            orientation,
            desc,
        });
    }
    dec.finish()?;
    Ok((dim, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_with_header_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.xdsc");
        write_descriptor_file(&p, 128, &[]).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24);
        let (dim, feats) = read_descriptor_file(&p).unwrap();
        assert_eq!(dim, 128);
        assert!(feats.is_empty());
    }

    #[test]
    fn short_file_reports_truncation_offset() {
        let feats: Vec<_> = (0..10)
            .map(|i| Feature::new(Point::new(0.1, 0.2), vec![i as f32; 4]))
            .collect();
        let mut enc_bytes = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.xdsc");
            write_descriptor_file(&p, 4, &feats).unwrap();
            std::fs::read(&p).unwrap()
        };
        assert_eq!(enc_bytes.len() as u64, descriptor_file_size(4, 10));
        enc_bytes.truncate(enc_bytes.len() - 32);
        match read_descriptor_file_bytes(&enc_bytes, "t.xdsc") {
            Err(Error::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 24 + 9 * 32);
                assert_eq!(needed, 32);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xdsc");
        let feats = vec![
            Feature::new(Point::new(0.5, 0.5), vec![1.0]),
            Feature::new(Point::new(1.5, 0.5), vec![1.0]),
        ];
        write_descriptor_file(&p, 1, &feats).unwrap();
        match read_descriptor_file(&p) {
            Err(Error::InvalidRecord { record, .. }) => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"NOPE");
        assert!(matches!(read_descriptor_file_bytes(&bytes, "c"), Err(Error::Format { .. })));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_descriptor_file_bytes(&bytes, "c"), Err(Error::Format { .. })));
    }

    #[test]
    fn negative_descriptor_component_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.xdsc");
        write_descriptor_file(&p, 2, &[Feature::new(Point::new(0.0, 1.0), vec![3.0, -1.0])]).unwrap();
        assert!(matches!(read_descriptor_file(&p), Err(Error::InvalidRecord { record: 0, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_then_read_is_identity(
            dim in 1usize..40,
            raw in proptest::collection::vec((0.0f32..=1.0, 0.0f32..=1.0, any::<f32>(), -4.0f32..4.0), 0..20),
            seed in any::<u32>(),
        ) {
            let feats: Vec<Feature> = raw
                .iter()
                .enumerate()
                .map(|(i, &(x, y, s, o))| Feature {
                    pos: Point::new(x, y),
                    scale: s,
                    orientation: o,
                    desc: (0..dim).map(|c| ((seed as usize + i * 31 + c * 7) % 256) as f32 * 0.5).collect(),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.xdsc");
            write_descriptor_file(&p, dim, &feats).unwrap();
            let (d, back) = read_descriptor_file(&p).unwrap();
            prop_assert_eq!(d, dim);
            prop_assert_eq!(back.len(), feats.len());
            for (a, b) in back.iter().zip(&feats) {
                prop_assert_eq!(a.pos, b.pos);
                prop_assert_eq!(a.desc.clone(), b.desc.clone());
                prop_assert_eq!(a.scale.to_bits(), b.scale.to_bits());
                prop_assert_eq!(a.orientation.to_bits(), b.orientation.to_bits());
            }
        }
    }
}
