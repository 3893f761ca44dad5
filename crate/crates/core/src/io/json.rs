//! JSON outputs and the pair manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, HomographyPair};
use crate::matcher::MatchSet;

use super::atomic_write;

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub xa: f32,
    pub ya: f32,
    pub xb: f32,
    pub yb: f32,
    pub confidence: f32,
}

impl MatchRecord {
    pub fn from_matches(m: &MatchSet) -> Vec<MatchRecord> {
        (0..m.len())
            .map(|k| MatchRecord {
                xa: m.coords_a[k].0,
                ya: m.coords_a[k].1,
                xb: m.coords_b[k].0,
                yb: m.coords_b[k].1,
                confidence: m.confidence[k],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Pixel `i` spans `[i, i+1)`.
    #[default]
    Continuous,
    /// Pixel `i` is the point `i` (OpenCV, HPatches files).
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default)]
    pub name: Option<String>,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    /// Row-major, maps image A to image B.
    pub homography: [f64; 9],
    #[serde(default)]
    pub convention: Convention,
}

/// Reads a JSON array of entries or one entry per line. Relative image
/// paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<HomographyPair>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    };
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            if e.homography.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("{}: entry {k} has a non-finite homography", path.display())));
            }
            let h = Homography::from_row_major(e.homography);
            Ok(HomographyPair {
                name: e.name.unwrap_or_else(|| format!("pair{k:04}")),
                image_a: base.join(e.image_a),
                image_b: base.join(e.image_b),
                homography: match e.convention {
                    Convention::Continuous => h,
                    Convention::Index => Homography::from_index_convention(&h),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_array_and_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"[{"image_a":"a.pgm","image_b":"b.pgm","homography":[1,0,2,0,1,0,0,0,1]}]"#).unwrap();
        let pairs = read_manifest(&p).unwrap();
        assert_eq!(pairs[0].image_a, dir.path().join("a.pgm"));
        assert_eq!(pairs[0].homography.apply((1.0, 1.0)), (3.0, 1.0));
        std::fs::write(
            &p,
            "{\"name\":\"x\",\"image_a\":\"/a\",\"image_b\":\"b\",\"homography\":[2,0,0,0,2,0,0,0,1],\"convention\":\"index\"}\n\n",
        )
        .unwrap();
        let pairs = read_manifest(&p).unwrap();
        assert_eq!(pairs[0].name, "x");
        assert_eq!(pairs[0].image_a, PathBuf::from("/a"));
        // index 1 doubles to index 2, i.e. continuous 1.5 to 2.5
        let (x, _) = pairs[0].homography.apply((1.5, 1.5));
        assert!((x - 2.5).abs() < 1e-12);
    }

    #[test]
    fn match_records_serialise_flat() {
        let m = MatchSet {
            pairs: vec![(0, 1)],
            coords_a: vec![(1.0, 2.0)],
            coords_b: vec![(3.0, 4.0)],
            offset_logits: Vec::new(),
            confidence: vec![0.5],
        };
        let s = serde_json::to_string(&MatchRecord::from_matches(&m)).unwrap();
        assert_eq!(s, r#"[{"xa":1.0,"ya":2.0,"xb":3.0,"yb":4.0,"confidence":0.5}]"#);
    }
}
