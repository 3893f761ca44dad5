//! `XFTC` feature caches.
//!
//! Header: magic, version `u32`, width `u32`, height `u32`, mode `u8`
//! (0 sparse, 1 semi-dense), descriptor dim `u32`, count `u32`. Then the
//! f32 arrays x, y, score, descriptors (count x dim) and reliability.
//! Semi-dense files append the per-point extraction scale.

use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::Keypoint;
use crate::matcher::{FeatureMode, FeatureSet};

use super::{atomic_write, check_version, put_f32s, put_u32, Reader};

pub const FEATURES_MAGIC: [u8; 4] = *b"XFTC";
pub const FEATURES_VERSION: u32 = 1;
pub const FEATURES_HEADER_BYTES: usize = 25;

pub fn encode_features(set: &FeatureSet) -> Result<Vec<u8>> {
    set.validate()?;
    let n = set.len();
    let mut out = Vec::with_capacity(FEATURES_HEADER_BYTES + n * (4 * (set.dim + 5)));
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    put_u32(&mut out, set.image_size.0)?;
    put_u32(&mut out, set.image_size.1)?;
    out.push(match set.mode {
        FeatureMode::Sparse => 0,
        FeatureMode::SemiDense => 1,
    });
    put_u32(&mut out, set.dim)?;
    put_u32(&mut out, n)?;
    let col = |f: fn(&Keypoint) -> f32| set.keypoints.iter().map(f).collect::<Vec<f32>>();
    put_f32s(&mut out, &col(|k| k.x));
    put_f32s(&mut out, &col(|k| k.y));
    put_f32s(&mut out, &col(|k| k.score));
    put_f32s(&mut out, &set.descriptors);
    put_f32s(&mut out, &set.reliability);
    if set.mode == FeatureMode::SemiDense {
        put_f32s(&mut out, &set.scales);
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, "feature cache");
    r.magic(&FEATURES_MAGIC)?;
    check_version(r.u32()?, FEATURES_VERSION)?;
    let (w, h) = (r.u32()? as usize, r.u32()? as usize);
    let mode = match r.u8()? {
        0 => FeatureMode::Sparse,
        1 => FeatureMode::SemiDense,
        m => return Err(Error::Corrupt(format!("unknown feature mode {m}"))),
    };
    let dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let per_point = dim + if mode == FeatureMode::SemiDense { 5 } else { 4 };
    let need = n.checked_mul(per_point).and_then(|v| v.checked_mul(4));
    if need != Some(r.remaining()) {
        return Err(Error::Truncated(format!(
            "feature cache: {n} points of dim {dim} need {need:?} bytes, {} present",
            r.remaining()
        )));
    }
    let (x, y, score) = (r.f32s(n)?, r.f32s(n)?, r.f32s(n)?);
    let descriptors = r.f32s(n * dim)?;
    let reliability = r.f32s(n)?;
    let scales = match mode {
        FeatureMode::SemiDense => r.f32s(n)?,
        FeatureMode::Sparse => vec![1.0; n],
    };
    r.finish()?;
    let set = FeatureSet {
        image_size: (w, h),
        mode,
        keypoints: (0..n).map(|k| Keypoint { x: x[k], y: y[k], score: score[k] }).collect(),
        descriptors,
        dim,
        reliability,
        scales,
    };
    set.validate()?;
    Ok(set)
}

pub fn save_features(set: &FeatureSet, path: &Path) -> Result<()> {
    atomic_write(path, &encode_features(set)?)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, mode: FeatureMode) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut set = FeatureSet::empty((640, 480), mode, 64);
        for _ in 0..n {
            set.keypoints.push(Keypoint {
                x: rng.random_range(0.0..640.0),
                y: rng.random_range(0.0..480.0),
                score: rng.random(),
            });
            let d: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            set.descriptors.extend(d.iter().map(|v| v / norm));
            set.reliability.push(rng.random());
            set.scales.push(if mode == FeatureMode::Sparse { 1.0 } else { 0.65 });
        }
        set
    }

    #[test]
    fn sparse_size_and_round_trip() {
        let set = random_set(4096, FeatureMode::Sparse);
        let bytes = encode_features(&set).unwrap();
        assert_eq!(bytes.len(), FEATURES_HEADER_BYTES + 4096 * (3 * 4 + 64 * 4 + 4));
        assert_eq!(decode_features(&bytes).unwrap(), set);
    }

    #[test]
    fn semi_dense_round_trip_keeps_scales() {
        let set = random_set(100, FeatureMode::SemiDense);
        assert_eq!(decode_features(&encode_features(&set).unwrap()).unwrap(), set);
        let empty = FeatureSet::empty((32, 32), FeatureMode::Sparse, 64);
        assert_eq!(decode_features(&encode_features(&empty).unwrap()).unwrap(), empty);
    }

    #[test]
    fn corruption_rejected() {
        let bytes = encode_features(&random_set(10, FeatureMode::Sparse)).unwrap();
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(matches!(decode_features(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Version { .. })));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut huge = bytes.clone();
        huge[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_features(&huge), Err(Error::Truncated(_))));
    }
}
