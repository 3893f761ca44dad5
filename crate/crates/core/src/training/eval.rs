//! Held-out evaluation on warped pairs: coarse cell matching precision and
//! end-point error before and after offset refinement.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heads::CELL;
use crate::image::GrayImage;
use crate::matcher::{mnn_from_similarity, offset_from_logits};
use crate::model::XFeatModel;
use crate::nn::ForwardCtx;
use crate::tensor::Tensor;

use super::warp::WarpPair;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WarpMatchStats {
    pub matches: usize,
    pub correct: usize,
    /// `correct / matches`.
    pub precision: f64,
    /// Mean error of correct matches placed at the matched cell center.
    pub coarse_epe: f64,
    /// Mean error of the same matches after offset refinement.
    pub refined_epe: f64,
}

/// Mutual nearest neighbours between the image-1 cells whose centers land
/// inside image 2 and all image-2 cells. A match is correct when the cell
/// center lies within `radius` pixels of the true position.
pub fn evaluate_pairs(model: &XFeatModel<f32>, pairs: &[&WarpPair], radius: f64) -> Result<WarpMatchStats> {
    let mut s = WarpMatchStats::default();
    let (mut coarse, mut fine) = (0.0, 0.0);
    for pair in pairs {
        let out = model.infer(&GrayImage::batch(&[&pair.image1, &pair.image2])?)?;
        let (h, w) = (out.feats.shape()[2], out.feats.shape()[3]);
        let (w2, h2) = (pair.image2.width as f64, pair.image2.height as f64);
        let mut cells1 = Vec::new();
        let mut truth = Vec::new();
        for i in 0..pair.image1.height / CELL {
            for j in 0..pair.image1.width / CELL {
                let c = ((CELL * j) as f64 + 4.0, (CELL * i) as f64 + 4.0);
                let (x, y) = pair.homography.apply(c);
                if x >= 0.0 && y >= 0.0 && x < w2 && y < h2 {
                    cells1.push((0, i, j));
                    truth.push((x, y));
                }
            }
        }
        if cells1.len() < 2 {
            continue;
        }
        let cells2: Vec<_> = (0..h).flat_map(|i| (0..w).map(move |j| (1, i, j))).collect();
        let f1 = out.feats.gather_cells(&cells1)?.l2_normalize_rows()?;
        let f2 = out.feats.gather_cells(&cells2)?.l2_normalize_rows()?;
        let sim = f1.matmul(&f2.transpose()?)?;
        let mnn = mnn_from_similarity(sim.data(), cells1.len(), cells2.len(), -1.0);
        s.matches += mnn.len();
        let mut good = Vec::new();
        for &(a, b) in &mnn {
            let (_, bi, bj) = cells2[b];
            let center = ((CELL * bj) as f64 + 4.0, (CELL * bi) as f64 + 4.0);
            let (tx, ty) = truth[a];
            let err = (center.0 - tx).hypot(center.1 - ty);
            if err <= radius {
                good.push((a, b));
                coarse += err;
            }
        }
        if good.is_empty() {
            continue;
        }
        s.correct += good.len();
        let fa = f1.gather_rows(&good.iter().map(|g| g.0).collect::<Vec<_>>())?;
        let fb = f2.gather_rows(&good.iter().map(|g| g.1).collect::<Vec<_>>())?;
        let logits: Tensor<f32> = model.refine_logits(&fa, &fb, &mut ForwardCtx::eval())?;
        for (k, &(a, b)) in good.iter().enumerate() {
            let o = offset_from_logits(&logits.data()[k * 64..(k + 1) * 64])?;
            let (_, bi, bj) = cells2[b];
            let p = ((CELL * bj + o.x) as f64 + 0.5, (CELL * bi + o.y) as f64 + 0.5);
            let (tx, ty) = truth[a];
            fine += (p.0 - tx).hypot(p.1 - ty);
        }
    }
    if s.matches > 0 {
        s.precision = s.correct as f64 / s.matches as f64;
    }
    if s.correct > 0 {
        s.coarse_epe = coarse / s.correct as f64;
        s.refined_epe = fine / s.correct as f64;
    }
    Ok(s)
}
