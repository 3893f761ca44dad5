//! Keypoint supervision: which pixel of each 8x8 cell (if any) is a keypoint.

use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{CELL, DUSTBIN};
use crate::image::GrayImage;

use super::losses::{t_idx, KpTarget};

/// Per-cell labels over a `ceil(H/8) x ceil(W/8)` grid, row-major.
/// `Some((tx, ty))` marks the keypoint position inside the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLabels {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<(usize, usize)>>,
}

impl CellLabels {
    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Loss targets for batch slot `b`.
    pub fn targets(&self, b: usize) -> Vec<KpTarget> {
        self.cells
            .iter()
            .enumerate()
            .map(|(k, c)| KpTarget {
                b,
                i: k / self.cols,
                j: k % self.cols,
                t_idx: c.map_or(DUSTBIN, |(tx, ty)| t_idx(tx, ty)),
            })
            .collect()
    }

    /// Labels from scored pixel positions; the highest score in a cell wins.
    pub fn from_points(width: usize, height: usize, points: &[(f32, f32, f32)]) -> Self {
        let (rows, cols) = (height.div_ceil(CELL), width.div_ceil(CELL));
        let mut best: Vec<Option<(f32, usize, usize)>> = vec![None; rows * cols];
        for &(x, y, s) in points {
            if !(x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height) {
                continue;
            }
            let (px, py) = (x as usize, y as usize);
            let k = (py / CELL) * cols + px / CELL;
            if best[k].is_none_or(|(bs, _, _)| s > bs) {
                best[k] = Some((s, px % CELL, py % CELL));
            }
        }
        CellLabels {
            rows,
            cols,
            cells: best.into_iter().map(|b| b.map(|(_, tx, ty)| (tx, ty))).collect(),
        }
    }
}

/// Source of keypoint labels for a training image.
pub trait KeypointTeacher {
    fn labels(&self, image: &GrayImage) -> CellLabels;
}

/// Harris corner response, thresholded relative to its maximum, with the
/// arg-max taken per cell.
#[derive(Debug, Clone, Copy)]
pub struct HarrisTeacher {
    pub k: f32,
    /// Fraction of the image maximum a response must exceed.
    pub relative_threshold: f32,
    /// Half-width of the box window summing the structure tensor.
    pub window: usize,
    /// Pixels this close to the border are never labelled.
    pub border: usize,
}

impl Default for HarrisTeacher {
    fn default() -> Self {
        HarrisTeacher {
            k: 0.04,
            relative_threshold: 0.01,
            window: 2,
            border: 4,
        }
    }
}

impl HarrisTeacher {
    /// Harris response per pixel.
    pub fn response(&self, img: &GrayImage) -> Vec<f32> {
        let (w, h) = (img.width, img.height);
        let at = |x: isize, y: isize| img.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize);
        let mut ixx = vec![0f32; w * h];
        let mut iyy = vec![0f32; w * h];
        let mut ixy = vec![0f32; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                let k = y as usize * w + x as usize;
                ixx[k] = gx * gx;
                iyy[k] = gy * gy;
                ixy[k] = gx * gy;
            }
        }
        let (sxx, syy, sxy) = (box_sum(&ixx, w, h, self.window), box_sum(&iyy, w, h, self.window), box_sum(&ixy, w, h, self.window));
        (0..w * h)
            .map(|k| {
                let tr = sxx[k] + syy[k];
                sxx[k] * syy[k] - sxy[k] * sxy[k] - self.k * tr * tr
            })
            .collect()
    }
}

fn box_sum(v: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let mut rows = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = v[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

impl KeypointTeacher for HarrisTeacher {
    fn labels(&self, image: &GrayImage) -> CellLabels {
        let (w, h) = (image.width, image.height);
        let r = self.response(image);
        let max = r.iter().copied().fold(0f32, f32::max);
        let thr = (self.relative_threshold * max).max(1e-6);
        let mut points = Vec::new();
        for y in self.border..h.saturating_sub(self.border) {
            for x in self.border..w.saturating_sub(self.border) {
                let s = r[y * w + x];
                if s > thr {
                    points.push((x as f32 + 0.5, y as f32 + 0.5, s));
                }
            }
        }
        CellLabels::from_points(w, h, &points)
    }
}

/// Fixed keypoints loaded from disk, used in place of a detector.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedTeacher {
    pub points: Vec<(f32, f32, f32)>,
}

impl PrecomputedTeacher {
    /// Whitespace separated `x y [score]` per line; `#` starts a comment.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f32>, _> = line.split_whitespace().map(str::parse).collect();
            match vals.as_deref() {
                Ok([x, y]) => points.push((*x, *y, 1.0)),
                Ok([x, y, s]) => points.push((*x, *y, *s)),
                _ => {
                    return Err(Error::Corrupt(format!("{}:{}: expected `x y [score]`", path.display(), n + 1)));
                }
            }
        }
        Ok(PrecomputedTeacher { points })
    }
}

impl KeypointTeacher for PrecomputedTeacher {
    fn labels(&self, image: &GrayImage) -> CellLabels {
        CellLabels::from_points(image.width, image.height, &self.points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn square() -> GrayImage {
        let mut img = GrayImage::filled(64, 64, 0.0);
        for y in 20..44 {
            for x in 20..44 {
                img.pixels[y * 64 + x] = 1.0;
            }
        }
        img
    }

    #[test]
    fn harris_fires_at_square_corners_only() {
        let labels = HarrisTeacher::default().labels(&square());
        assert_eq!((labels.rows, labels.cols), (8, 8));
        let on: Vec<usize> = (0..64).filter(|&k| labels.cells[k].is_some()).collect();
        // corners at pixels 20 and 43 fall in cells 2 and 5
        for k in &on {
            let (i, j) = (k / 8, k % 8);
            assert!([2, 5].contains(&i) && [2, 5].contains(&j), "cell {i},{j}");
        }
        assert_eq!(on.len(), 4);
        let t = labels.targets(1);
        assert_eq!(t.len(), 64);
        assert_eq!(t.iter().filter(|t| t.t_idx == DUSTBIN).count(), 60);
        assert!(t.iter().all(|t| t.b == 1));
    }

    #[test]
    fn flat_image_has_no_keypoints() {
        let labels = HarrisTeacher::default().labels(&GrayImage::filled(40, 24, 0.3));
        assert_eq!((labels.rows, labels.cols), (3, 5));
        assert_eq!(labels.positives(), 0);
    }

    #[test]
    fn precomputed_points_strongest_wins() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# x y score\n3.5 2.5 0.1\n5.5 1.5 0.9\n17 9\n").unwrap();
        let t = PrecomputedTeacher::read(f.path()).unwrap();
        let labels = t.labels(&GrayImage::filled(24, 16, 0.0));
        assert_eq!(labels.cells[0], Some((5, 1)));
        assert_eq!(labels.cells[3 + 2], Some((1, 1)));
        assert_eq!(labels.positives(), 2);
        writeln!(f, "1 2 3 4").unwrap();
        assert!(PrecomputedTeacher::read(f.path()).is_err());
    }
}
