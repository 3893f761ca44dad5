//! Homography estimation (normalized DLT, RANSAC) and the evaluation metrics:
//! corner error, MHA, mean inlier ratio.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar projective map in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography { m: Matrix3::identity() }
    }

    pub fn from_row_major(v: [f64; 9]) -> Self {
        Homography {
            m: Matrix3::from_row_slice(&v),
        }
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_row_major([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    /// Scaled so that `h33 = 1` when `|h33| > 1e-8`.
    pub fn normalized(&self) -> Self {
        let s = self.m[(2, 2)];
        if s.abs() > 1e-8 {
            Homography { m: self.m / s }
        } else {
            *self
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.det().abs() <= 1e-10 {
            return Err(Error::Degenerate("homography is not invertible".into()));
        }
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Ok(Homography { m: inv }.normalized())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Homography { m: self.m * other.m }.normalized()
    }

    /// Maps a point; points sent to infinity come back as non-finite values.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let v = self.m * Vector3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    }

    /// Converts a matrix written for integer pixel indices (pixel centers at
    /// integers) to the continuous convention used here (centers at `i+0.5`).
    pub fn from_index_convention(h: &Homography) -> Self {
        Self::translation(0.5, 0.5)
            .compose(h)
            .compose(&Self::translation(-0.5, -0.5))
    }

    pub fn to_index_convention(&self) -> Self {
        Self::translation(-0.5, -0.5)
            .compose(self)
            .compose(&Self::translation(0.5, 0.5))
    }
}

fn hartley(points: &[(f64, f64)]) -> Result<(Matrix3<f64>, Vec<(f64, f64)>)> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_dist = points.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::Degenerate("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    Ok((t, points.iter().map(|p| (s * (p.0 - cx), s * (p.1 - cy))).collect()))
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = (b.0 - a.0).hypot(b.1 - a.1) * (c.0 - a.0).hypot(c.1 - a.1);
    area.abs() <= 1e-9 * scale.max(1e-300)
}

fn minimal_set_degenerate(p: &[(f64, f64)]) -> bool {
    p.len() == 4
        && (collinear(p[0], p[1], p[2])
            || collinear(p[0], p[1], p[3])
            || collinear(p[0], p[2], p[3])
            || collinear(p[1], p[2], p[3]))
}

/// Normalized direct linear transform from `>= 4` correspondences `a -> b`.
pub fn dlt_homography(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<Homography> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("point lists differ in length".into()));
    }
    if a.len() < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 pairs, got {}", a.len())));
    }
    if minimal_set_degenerate(a) || minimal_set_degenerate(b) {
        return Err(Error::Degenerate("three of four points are collinear".into()));
    }
    let (ta, na) = hartley(a)?;
    let (tb, nb) = hartley(b)?;
    let rows = (2 * a.len()).max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (k, (&(x, y), &(u, v))) in na.iter().zip(&nb).enumerate() {
        let r = 2 * k;
        m.row_mut(r)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        m.row_mut(r + 1)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    if svd.singular_values[order[1]] <= 1e-10 * svd.singular_values[order[8]] {
        return Err(Error::Degenerate("correspondences do not determine a homography".into()));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tb_inv = tb.try_inverse().expect("similarity is invertible");
    let out = Homography { m: tb_inv * hn * ta }.normalized();
    if !out.m.iter().all(|v| v.is_finite()) || out.det().abs() <= 1e-10 {
        return Err(Error::Degenerate("estimated homography is singular".into()));
    }
    Ok(out)
}

/// Mean of the forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: (f64, f64), b: (f64, f64)) -> f64 {
    let fa = h.apply(a);
    let bb = h_inv.apply(b);
    let e = 0.5 * ((fa.0 - b.0).hypot(fa.1 - b.1) + (bb.0 - a.0).hypot(bb.1 - a.1));
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            threshold_px: 3.0,
            max_iters: 5000,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// `None` when no model gathered 4 inliers.
    pub homography: Option<Homography>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        inlier_count(&self.inliers)
    }
}

fn inlier_mask(h: &Homography, a: &[(f64, f64)], b: &[(f64, f64)], threshold: f64) -> Option<Vec<bool>> {
    let h_inv = h.inverse().ok()?;
    Some(
        a.iter()
            .zip(b)
            .map(|(&p, &q)| symmetric_transfer_error(h, &h_inv, p, q) < threshold)
            .collect(),
    )
}

fn select(points: &[(f64, f64)], mask: &[bool]) -> Vec<(f64, f64)> {
    points.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
}

/// Plain RANSAC over 4-point samples with adaptive iteration count and a
/// least-squares refit on the final inlier set.
pub fn ransac_homography<R: Rng>(
    a: &[(f64, f64)],
    b: &[(f64, f64)],
    params: &RansacParams,
    rng: &mut R,
) -> Result<RansacResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("point lists differ in length".into()));
    }
    let n = a.len();
    let failure = |iterations| RansacResult {
        homography: None,
        inliers: vec![false; n],
        iterations,
    };
    if n < 4 {
        return Ok(failure(0));
    }
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut needed = params.max_iters;
    let mut it = 0;
    while it < needed.min(params.max_iters) {
        it += 1;
        let idx = sample(rng, n, 4);
        let sa: Vec<_> = idx.iter().map(|i| a[i]).collect();
        let sb: Vec<_> = idx.iter().map(|i| b[i]).collect();
        let Ok(h) = dlt_homography(&sa, &sb) else { continue };
        let Some(mask) = inlier_mask(&h, a, b, params.threshold_px) else { continue };
        let count = inlier_count(&mask);
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            let w = count as f64 / n as f64;
            if w >= 1.0 {
                needed = it;
            } else if w > 0.0 {
                let k = (1.0 - params.confidence).ln() / (1.0 - w.powi(4)).ln();
                if k.is_finite() {
                    needed = (k.ceil() as usize).max(1);
                }
            }
            best = Some((count, mask));
        }
    }
    let Some((count, mut mask)) = best else { return Ok(failure(it)) };
    if count < 4 {
        return Ok(failure(it));
    }
    let mut h = dlt_homography(&select(a, &mask), &select(b, &mask))?;
    if let Some(refit_mask) = inlier_mask(&h, a, b, params.threshold_px) {
        if inlier_count(&refit_mask) >= count {
            mask = refit_mask;
            if let Ok(h2) = dlt_homography(&select(a, &mask), &select(b, &mask)) {
                h = h2;
            }
        }
    }
    Ok(RansacResult {
        homography: Some(h),
        inliers: mask,
        iterations: it,
    })
}

/// Mean distance between the four image corners warped by both matrices.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, image_size: (usize, usize)) -> Result<f64> {
    for h in [h_est, h_gt] {
        if h.det().abs() <= 1e-10 {
            return Err(Error::Degenerate("homography is not invertible".into()));
        }
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    Ok(corners
        .iter()
        .map(|&c| {
            let (p, q) = (h_est.apply(c), h_gt.apply(c));
            (p.0 - q.0).hypot(p.1 - q.1)
        })
        .sum::<f64>()
        / 4.0)
}

/// Fraction of errors `<= t` for each threshold.
pub fn mha(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
            }
        })
        .collect()
}

pub fn inlier_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

pub fn mean_inlier_ratio(mask: &[bool]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("empty match set".into()));
    }
    Ok(inlier_count(mask) as f64 / mask.len() as f64)
}

pub const MHA_THRESHOLDS: [f64; 3] = [3.0, 5.0, 7.0];

/// Per-pair evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub name: String,
    pub matches: usize,
    pub inliers: usize,
    /// Infinite when estimation failed.
    pub corner_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Threshold in pixels (as a string key) to accuracy.
    pub mha: BTreeMap<String, f64>,
    /// Over pairs with an estimate.
    pub mean_corner_error: f64,
    pub mir: f64,
    pub inliers: f64,
    pub pairs: usize,
    pub failures: usize,
    pub per_pair: Vec<PairResult>,
}

impl EvalReport {
    /// Aggregates pair results; failed estimates count as misses at every
    /// threshold and as a zero inlier ratio.
    pub fn from_pairs(per_pair: Vec<PairResult>, thresholds: &[f64]) -> Self {
        let errors: Vec<f64> = per_pair.iter().map(|p| p.corner_error).collect();
        let acc = mha(&errors, thresholds);
        let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
        let n = per_pair.len().max(1) as f64;
        EvalReport {
            mha: thresholds.iter().zip(acc).map(|(t, a)| (format!("{t}"), a)).collect(),
            mean_corner_error: if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            mir: per_pair
                .iter()
                .map(|p| if p.matches == 0 { 0.0 } else { p.inliers as f64 / p.matches as f64 })
                .sum::<f64>()
                / n,
            inliers: per_pair.iter().map(|p| p.inliers as f64).sum::<f64>() / n,
            pairs: per_pair.len(),
            failures: errors.iter().filter(|e| !e.is_finite()).count(),
            per_pair,
        }
    }
}

/// One reference/target pair with its ground-truth homography (continuous
/// convention).
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyPair {
    pub name: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub homography: Homography,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["ppm", "pgm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads an HPatches-style tree: each sequence directory holds `1..6` images
/// and `H_1_n` files of nine row-major numbers in pixel-index convention.
pub fn read_hpatches(root: &Path) -> Result<Vec<HomographyPair>> {
    let mut seqs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seqs.sort();
    let mut pairs = Vec::new();
    for seq in seqs {
        let Some(reference) = find_image(&seq, "1") else { continue };
        for n in 2..=6 {
            let hfile = seq.join(format!("H_1_{n}"));
            let Some(target) = find_image(&seq, &n.to_string()) else { continue };
            if !hfile.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&hfile)?;
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Corrupt(format!("{}: {e}", hfile.display())))?;
            let vals: [f64; 9] = vals
                .try_into()
                .map_err(|_| Error::Corrupt(format!("{}: expected 9 numbers", hfile.display())))?;
            let name = format!(
                "{}/{n}",
                seq.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            );
            pairs.push(HomographyPair {
                name,
                image_a: reference.clone(),
                image_b: target,
                homography: Homography::from_index_convention(&Homography::from_row_major(vals)),
            });
        }
    }
    Ok(pairs)
}
