//! Keypoint head on space-to-depth cells, heatmap reassembly and detection.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BasicLayer, Conv2d, ForwardCtx, ParamStore};
use crate::tensor::{bilinear_resize, depth_to_space, space_to_depth, Float, Tensor};

/// Cell side of the keypoint grid.
pub const CELL: usize = 8;
/// Logit index meaning "no keypoint in this cell".
pub const DUSTBIN: usize = 64;

#[derive(Debug, Clone)]
pub struct KeypointHead {
    layers: Vec<BasicLayer>,
    out: Conv2d,
}

impl KeypointHead {
    pub(crate) fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, hidden: usize) -> Self {
        let c0 = CELL * CELL;
        let layers = (0..3)
            .map(|i| {
                let cin = if i == 0 { c0 } else { hidden };
                BasicLayer::new(store, rng, &format!("keypoint_head.{i}"), cin, hidden, 1, 1, true)
            })
            .collect();
        let out = Conv2d::new(store, rng, "keypoint_head.out", hidden, DUSTBIN + 1, 1, 1, true);
        KeypointHead { layers, out }
    }

    pub fn conv_layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.layers.iter().map(|l| &l.conv).collect();
        v.push(&self.out);
        v
    }

    /// `[N,1,H,W]` image (sides divisible by 8) to `[N,65,H/8,W/8]` logits.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, ctx: &mut ForwardCtx<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = space_to_depth(image, CELL)?;
        for layer in &self.layers {
            x = layer.forward(store, ctx, &x)?;
        }
        self.out.forward(store, ctx, &x)
    }
}

/// Softmax over the 65 channels, dustbin dropped, cells unfolded into a
/// `[N,1,H,W]` heatmap.
pub fn reassemble_heatmap<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *logits.shape() else {
        return Err(Error::shape("reassemble_heatmap", format!("expected NCHW, got {:?}", logits.shape())));
    };
    if c != DUSTBIN + 1 {
        return Err(Error::shape("reassemble_heatmap", format!("expected 65 channels, got {c}")));
    }
    let probs = logits.detach().softmax(1)?;
    let hw = h * w;
    let mut kept = Vec::with_capacity(n * DUSTBIN * hw);
    for b in 0..n {
        kept.extend_from_slice(&probs.data()[b * c * hw..][..DUSTBIN * hw]);
    }
    depth_to_space(&Tensor::from_vec(kept, &[n, DUSTBIN, h, w])?, CELL)
}

/// `sigmoid(R_logits)` bilinearly upsampled by 8 to pixel resolution.
pub fn reliability_full_res<T: Float>(rel_logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = *rel_logits.shape() else {
        return Err(Error::shape("reliability_full_res", "expected NCHW"));
    };
    bilinear_resize(&rel_logits.detach().sigmoid()?, h * CELL, w * CELL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub top_k: usize,
    pub nms_radius: usize,
    pub threshold: f32,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            top_k: 4096,
            nms_radius: 2,
            threshold: 0.05,
        }
    }
}

/// Detected point in continuous image coordinates (pixel `i` spans
/// `[i, i+1)`, so a detection on pixel `(px, py)` sits at `(px+0.5, py+0.5)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

impl Keypoint {
    pub fn pixel(&self) -> (usize, usize) {
        (self.x.floor() as usize, self.y.floor() as usize)
    }
}

/// NMS, threshold, `score = heat * reliability`, top-k.
///
/// `heatmap` and `reliability` are single `[H,W]` planes (any leading unit
/// dims allowed); only the top-left `valid_w x valid_h` region is searched.
pub fn detect_keypoints(
    heatmap: &Tensor<f32>,
    reliability: &Tensor<f32>,
    valid: (usize, usize),
    params: &DetectParams,
) -> Result<Vec<Keypoint>> {
    let plane = |t: &Tensor<f32>| -> Result<(usize, usize)> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::shape("detect_keypoints", format!("expected a single plane, got {s:?}")));
        }
        Ok((s[s.len() - 1], s[s.len() - 2]))
    };
    let (w, h) = plane(heatmap)?;
    if plane(reliability)? != (w, h) {
        return Err(Error::shape("detect_keypoints", "heatmap and reliability differ in size"));
    }
    let (vw, vh) = (valid.0.min(w), valid.1.min(h));
    let heat = heatmap.data();
    let rel = reliability.data();
    let r = params.nms_radius;

    let mut found: Vec<(f32, usize)> = Vec::new();
    for y in 0..vh {
        for x in 0..vw {
            let idx = y * w + x;
            let v = heat[idx];
            if v < params.threshold {
                continue;
            }
            let mut is_max = true;
            'win: for yy in y.saturating_sub(r)..(y + r + 1).min(vh) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(vw) {
                    let q = yy * w + xx;
                    if q != idx && (heat[q] > v || (heat[q] == v && q < idx)) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                found.push((v * rel[idx], idx));
            }
        }
    }
    found.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    found.truncate(params.top_k);
    Ok(found
        .into_iter()
        .map(|(score, idx)| Keypoint {
            x: (idx % w) as f32 + 0.5,
            y: (idx / w) as f32 + 0.5,
            score,
        })
        .collect())
}
