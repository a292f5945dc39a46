//! Little-endian fixed-layout binary formats.
//!
//! ```text
//! FMAP: magic "FMAP" | version u32 = 1 | dtype u32 = 0 (f32) | C u32 | H u32 | W u32 | C*H*W f32
//! LMAP: magic "LMAP" | version u32 = 1 | H u32 | W u32 | H*W u8
//! SMAP: magic "SMAP" | version u32 = 1 | H u32 | W u32 | H*W f32
//! ```

use std::fs;
use std::path::Path;

use super::maps::{BinaryOutlierMap, FeatureMap, LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const LMAP_MAGIC: &[u8; 4] = b"LMAP";
pub const SMAP_MAGIC: &[u8; 4] = b"SMAP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            Error::DimOverflow(format!("read of {n} bytes at offset {}", self.pos))
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.bytes).into_owned(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Unsupported {
                field: "version",
                value: v,
            });
        }
        Ok(())
    }

    fn f32_payload(&mut self, count: usize) -> Result<Vec<f32>> {
        let nbytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::DimOverflow(format!("{count} f32 values")))?;
        let raw = self.take(nbytes)?;
        let mut out = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite { position: i });
            }
            out.push(v);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(Error::TrailingBytes(rest));
        }
        Ok(())
    }
}

fn checked_count(dims: &[u32]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))
    })
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{v} does not fit in u32")))
}

fn push_f32_payload<T: Real>(out: &mut Vec<u8>, values: &[T]) -> Result<()> {
    for (position, &v) in values.iter().enumerate() {
        let x = v.to_f32_lossy();
        if !x.is_finite() {
            return Err(Error::NonFinite { position });
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serializes a feature map; values are rounded to `f32`.
pub fn encode_feature_map<T: Real>(map: &FeatureMap<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 4 * map.data().len());
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in [map.channels(), map.height(), map.width()] {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    push_f32_payload(&mut out, map.data())?;
    Ok(out)
}

pub fn decode_feature_map<T: Real>(bytes: &[u8]) -> Result<FeatureMap<T>> {
    let mut r = Reader::new(bytes);
    r.magic(FMAP_MAGIC)?;
    r.version()?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Unsupported {
            field: "dtype",
            value: dtype,
        });
    }
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let count = checked_count(&[c, h, w])?;
    let values = r.f32_payload(count)?;
    r.finish()?;
    FeatureMap::new(
        c as usize,
        h as usize,
        w as usize,
        values.into_iter().map(T::from_f32_exact).collect(),
    )
}

pub fn encode_label_map(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + map.labels().len());
    out.extend_from_slice(LMAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.height())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.width())?.to_le_bytes());
    out.extend_from_slice(map.labels());
    Ok(out)
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new(bytes);
    r.magic(LMAP_MAGIC)?;
    r.version()?;
    let (h, w) = (r.u32()?, r.u32()?);
    let count = checked_count(&[h, w])?;
    let labels = r.take(count)?.to_vec();
    r.finish()?;
    LabelMap::new(h as usize, w as usize, labels)
}

pub fn encode_score_map<T: Real>(map: &ScoreMap<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * map.scores().len());
    out.extend_from_slice(SMAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.height())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(map.width())?.to_le_bytes());
    push_f32_payload(&mut out, map.scores())?;
    Ok(out)
}

pub fn decode_score_map<T: Real>(bytes: &[u8]) -> Result<ScoreMap<T>> {
    let mut r = Reader::new(bytes);
    r.magic(SMAP_MAGIC)?;
    r.version()?;
    let (h, w) = (r.u32()?, r.u32()?);
    let count = checked_count(&[h, w])?;
    let values = r.f32_payload(count)?;
    r.finish()?;
    ScoreMap::new(
        h as usize,
        w as usize,
        values.into_iter().map(T::from_f32_exact).collect(),
    )
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_feature_map<T: Real>(map: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_feature_map(map)?)
}

pub fn load_feature_map<T: Real>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    decode_feature_map(&read(path.as_ref())?)
}

pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_label_map(map)?)
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_map(&read(path.as_ref())?)
}

pub fn save_outlier_map(map: &BinaryOutlierMap, path: impl AsRef<Path>) -> Result<()> {
    save_label_map(map.as_label_map(), path)
}

pub fn load_outlier_map(path: impl AsRef<Path>) -> Result<BinaryOutlierMap> {
    BinaryOutlierMap::from_label_map(load_label_map(path)?)
}

pub fn save_score_map<T: Real>(map: &ScoreMap<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_score_map(map)?)
}

pub fn load_score_map<T: Real>(path: impl AsRef<Path>) -> Result<ScoreMap<T>> {
    decode_score_map(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_map_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.fmap");
        let map = FeatureMap::<f64>::zeros(3, 2, 2).unwrap();
        save_feature_map(&map, &path).unwrap();
        assert_eq!(load_feature_map::<f64>(&path).unwrap(), map);
    }

    #[test]
    fn header_layout_is_fixed() {
        let map = FeatureMap::new(1, 1, 2, vec![1.0_f32, -2.0]).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(&bytes[12..24], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn bad_magic_rejected() {
        let map = FeatureMap::<f32>::zeros(1, 1, 1).unwrap();
        let mut bytes = encode_feature_map(&map).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_feature_map::<f32>(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn value_overflowing_f32_rejected_on_save() {
        let map = FeatureMap::new(1, 1, 2, vec![0.0_f64, 1e300]).unwrap();
        assert!(matches!(
            encode_feature_map(&map),
            Err(Error::NonFinite { position: 1 })
        ));
    }

    #[test]
    fn nan_payload_rejected_on_load_with_position() {
        let map = FeatureMap::<f32>::zeros(1, 1, 3).unwrap();
        let mut bytes = encode_feature_map(&map).unwrap();
        bytes[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_feature_map::<f32>(&bytes),
            Err(Error::NonFinite { position: 1 })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let map = FeatureMap::<f32>::zeros(2, 2, 2).unwrap();
        let bytes = encode_feature_map(&map).unwrap();
        assert!(matches!(
            decode_feature_map::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn huge_dims_rejected_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FMAP");
        for v in [1u32, 0, u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = decode_feature_map::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, Error::DimOverflow(_) | Error::Truncated { .. }));
    }

    #[test]
    fn wrong_version_and_dtype_rejected() {
        let map = FeatureMap::<f32>::zeros(1, 1, 1).unwrap();
        let mut bytes = encode_feature_map(&map).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_feature_map::<f32>(&bytes),
            Err(Error::Unsupported { field: "version", .. })
        ));
        bytes[4] = 1;
        bytes[8] = 1;
        assert!(matches!(
            decode_feature_map::<f32>(&bytes),
            Err(Error::Unsupported { field: "dtype", .. })
        ));
    }

    #[test]
    fn label_and_score_maps_round_trip() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 255, 4, 0]).unwrap();
        assert_eq!(decode_label_map(&encode_label_map(&l).unwrap()).unwrap(), l);
        let bytes = encode_label_map(&l).unwrap();
        assert_eq!(&bytes[..4], b"LMAP");
        assert_eq!(bytes.len(), 16 + 6);

        let s = ScoreMap::new(1, 2, vec![0.5_f32, -3.25]).unwrap();
        let bytes = encode_score_map(&s).unwrap();
        assert_eq!(&bytes[..4], b"SMAP");
        assert_eq!(decode_score_map::<f32>(&bytes).unwrap(), s);
    }

    #[test]
    fn outlier_loader_rejects_class_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.lmap");
        save_label_map(&LabelMap::new(1, 2, vec![0, 3]).unwrap(), &path).unwrap();
        assert!(load_outlier_map(&path).is_err());
    }

    proptest! {
        #[test]
        fn f32_maps_round_trip_bit_exactly(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in proptest::collection::vec(-1e6f32..1e6, 64)
        ) {
            let data: Vec<f32> = (0..c * h * w).map(|i| seed[i % seed.len()]).collect();
            let map = FeatureMap::new(c, h, w, data).unwrap();
            let back = decode_feature_map::<f32>(&encode_feature_map(&map).unwrap()).unwrap();
            prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back, map);
        }
    }
}
