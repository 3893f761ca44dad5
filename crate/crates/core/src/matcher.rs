//! Descriptor sampling, mutual nearest neighbours, offset refinement and the
//! sparse / semi-dense extraction pipelines.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{detect_keypoints, reassemble_heatmap, reliability_full_res, DetectParams, Keypoint, CELL};
use crate::model::XFeatModel;
use crate::nn::{ForwardCtx, Linear, ParamStore};
use crate::tensor::{bicubic_sample, bilinear_resize, gemm, Float, Tensor};

/// Number of offset classes predicted by the refiner (one per pixel of a cell).
pub const OFFSET_CLASSES: usize = CELL * CELL;
/// Processing scales of the semi-dense pipeline.
pub const SEMI_DENSE_SCALES: [f32; 2] = [0.65, 1.3];
/// Candidates closer than this (original-frame pixels) are merged.
pub const DEDUP_RADIUS: f32 = 2.0;

/// MLP over `concat(f_a, f_b)` emitting 64 offset logits.
#[derive(Debug, Clone)]
pub struct Refiner {
    layers: Vec<Linear>,
}

impl Refiner {
    pub(crate) fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, dim: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![2 * dim];
        widths.extend_from_slice(hidden);
        widths.push(OFFSET_CLASSES);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("refiner.{i}"), w[0], w[1]))
            .collect();
        Refiner { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn forward<T: Float>(
        &self,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        fa: &Tensor<T>,
        fb: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut x = fa.concat_cols(fb)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(store, ctx, &x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    Sparse,
    SemiDense,
}

/// Per-image extraction result.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `(W, H)` of the original image.
    pub image_size: (usize, usize),
    pub mode: FeatureMode,
    pub keypoints: Vec<Keypoint>,
    /// Row-major `len x dim`, unit-norm rows.
    pub descriptors: Vec<f32>,
    pub dim: usize,
    pub reliability: Vec<f32>,
    /// Processing scale each point was extracted at (1.0 in sparse mode).
    pub scales: Vec<f32>,
}

impl FeatureSet {
    pub fn empty(image_size: (usize, usize), mode: FeatureMode, dim: usize) -> Self {
        FeatureSet {
            image_size,
            mode,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            dim,
            reliability: Vec::new(),
            scales: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks that the per-point arrays agree in length.
    pub fn validate(&self) -> Result<()> {
        let n = self.keypoints.len();
        if self.descriptors.len() != n * self.dim || self.reliability.len() != n || self.scales.len() != n {
            return Err(Error::Corrupt("feature set arrays disagree in length".into()));
        }
        Ok(())
    }

    /// Rows `idx` as an `[len, dim]` tensor.
    fn rows(&self, idx: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for i in idx {
            data.extend_from_slice(self.descriptor(i));
            n += 1;
        }
        Tensor::from_vec(data, &[n, self.dim])
    }
}

/// Bicubic samples of `feats` (`[1,D,h,w]` or `[D,h,w]`) at image-frame
/// points, L2-normalized. `ratio` maps image coordinates to the processing
/// frame the map was computed in.
pub fn sample_descriptors(feats: &Tensor<f32>, points: &[(f32, f32)], ratio: (f32, f32)) -> Result<Vec<f32>> {
    let uv: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| ((x * ratio.0) as f64 / CELL as f64, (y * ratio.1) as f64 / CELL as f64))
        .collect();
    let rows = bicubic_sample(feats, &uv)?;
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    Ok(rows.l2_normalize_rows()?.to_vec())
}

fn single_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match *image.shape() {
        [1, 1, h, w] | [1, h, w] => image.reshape(&[1, 1, h, w]),
        [h, w] => image.reshape(&[1, 1, h, w]),
        _ => Err(Error::shape("extract", format!("expected one grayscale image, got {:?}", image.shape()))),
    }
}

/// Sparse pipeline: detect with score `K * R`, then sample descriptors.
pub fn extract_sparse(model: &XFeatModel<f32>, image: &Tensor<f32>, params: &DetectParams) -> Result<FeatureSet> {
    let image = single_image(image)?;
    let out = model.infer(&image)?;
    let heat = reassemble_heatmap(&out.kpt_logits)?;
    let rel = reliability_full_res(&out.rel_logits)?;
    let keypoints = detect_keypoints(&heat, &rel, out.image_size, params)?;
    let pw = rel.shape()[3];
    let points: Vec<(f32, f32)> = keypoints.iter().map(|k| (k.x, k.y)).collect();
    let descriptors = sample_descriptors(&out.feats, &points, (1.0, 1.0))?;
    let reliability = keypoints
        .iter()
        .map(|k| {
            let (px, py) = k.pixel();
            rel.data()[py * pw + px]
        })
        .collect();
    Ok(FeatureSet {
        image_size: out.image_size,
        mode: FeatureMode::Sparse,
        scales: vec![1.0; keypoints.len()],
        keypoints,
        descriptors,
        dim: out.feats.shape()[1],
        reliability,
    })
}

/// Size of the image at processing scale `s`.
pub fn scaled_size(image_size: (usize, usize), s: f32) -> (usize, usize) {
    (
        (image_size.0 as f64 * s as f64).round() as usize,
        (image_size.1 as f64 * s as f64).round() as usize,
    )
}

/// Image-to-processing-frame ratio for scale `s` (exact for the rounded size).
pub fn scale_ratio(image_size: (usize, usize), s: f32) -> (f32, f32) {
    let (ws, hs) = scaled_size(image_size, s);
    (ws as f32 / image_size.0 as f32, hs as f32 / image_size.1 as f32)
}

/// Candidate grid `(cols, rows)` at scale `s`: cells whose center pixel
/// `8j + 4` lies inside the resized image.
pub fn semi_dense_grid(image_size: (usize, usize), s: f32) -> (usize, usize) {
    let (ws, hs) = scaled_size(image_size, s);
    let half = CELL / 2;
    (ws.saturating_sub(half).div_ceil(CELL), hs.saturating_sub(half).div_ceil(CELL))
}

/// Semi-dense pipeline: every cell at both scales is a candidate scored by
/// its reliability; near-duplicates across scales are merged, keeping the
/// more reliable one, and the `top_n` most reliable survive.
pub fn semi_dense_extract(model: &XFeatModel<f32>, image: &Tensor<f32>, top_n: usize) -> Result<FeatureSet> {
    let image = single_image(image)?;
    let size = (image.shape()[3], image.shape()[2]);
    let dim = model.config.backbone.descriptor_dim;
    struct Cand {
        x: f32,
        y: f32,
        rel: f32,
        scale: f32,
        desc: Vec<f32>,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for &s in &SEMI_DENSE_SCALES {
        let (ws, hs) = scaled_size(size, s);
        if ws < 32 || hs < 32 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is too small at scale {s}",
                size.0, size.1
            )));
        }
        let out = model.infer(&bilinear_resize(&image, hs, ws)?)?;
        let [_, d, fh, fw] = *out.feats.shape() else { unreachable!() };
        let feats = out.feats.data();
        let rel = out.rel_logits.sigmoid()?;
        let (rx, ry) = (size.0 as f32 / ws as f32, size.1 as f32 / hs as f32);
        let (cols, rows) = semi_dense_grid(size, s);
        debug_assert!(cols <= fw && rows <= fh);
        for i in 0..rows {
            for j in 0..cols {
                let mut desc: Vec<f32> = (0..d).map(|c| feats[(c * fh + i) * fw + j]).collect();
                let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                desc.iter_mut().for_each(|v| *v /= norm);
                cands.push(Cand {
                    x: (CELL * j + CELL / 2) as f32 * rx,
                    y: (CELL * i + CELL / 2) as f32 * ry,
                    rel: rel.data()[i * fw + j],
                    scale: s,
                    desc,
                });
            }
        }
    }
    // stable: equal reliabilities keep scale-then-raster order
    cands.sort_by(|a, b| b.rel.partial_cmp(&a.rel).unwrap_or(Ordering::Equal));

    let mut set = FeatureSet::empty(size, FeatureMode::SemiDense, dim);
    let mut grid: HashMap<(i64, i64), Vec<(f32, f32)>> = HashMap::new();
    let key = |x: f32, y: f32| ((x / DEDUP_RADIUS).floor() as i64, (y / DEDUP_RADIUS).floor() as i64);
    for c in cands {
        if set.len() >= top_n {
            break;
        }
        let (gx, gy) = key(c.x, c.y);
        let collides = (gx - 1..=gx + 1).any(|kx| {
            (gy - 1..=gy + 1).any(|ky| {
                grid.get(&(kx, ky)).is_some_and(|pts| {
                    pts.iter().any(|&(px, py)| (px - c.x).hypot(py - c.y) <= DEDUP_RADIUS)
                })
            })
        });
        if collides {
            continue;
        }
        grid.entry((gx, gy)).or_default().push((c.x, c.y));
        set.keypoints.push(Keypoint {
            x: c.x,
            y: c.y,
            score: c.rel,
        });
        set.descriptors.extend_from_slice(&c.desc);
        set.reliability.push(c.rel);
        set.scales.push(c.scale);
    }
    Ok(set)
}

/// Index pairs with their coordinates and, once refined, offset logits and
/// confidences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub coords_a: Vec<(f32, f32)>,
    pub coords_b: Vec<(f32, f32)>,
    /// `len x 64`, empty for coarse matches.
    pub offset_logits: Vec<f32>,
    pub confidence: Vec<f32>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Running row and column maxima of a similarity matrix fed in row blocks.
/// Ties resolve to the lowest index in both directions.
struct MnnAccumulator {
    cols: usize,
    row_best: Vec<(f32, usize)>,
    col_best: Vec<(f32, usize)>,
}

impl MnnAccumulator {
    fn new(cols: usize) -> Self {
        MnnAccumulator {
            cols,
            row_best: Vec::new(),
            col_best: vec![(f32::NEG_INFINITY, usize::MAX); cols],
        }
    }

    fn feed(&mut self, block: &[f32]) {
        for row in block.chunks(self.cols) {
            let i = self.row_best.len();
            let mut best = (f32::NEG_INFINITY, usize::MAX);
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, j);
                }
                if v > self.col_best[j].0 {
                    self.col_best[j] = (v, i);
                }
            }
            self.row_best.push(best);
        }
    }

    fn finish(self, min_sim: f32) -> Vec<(usize, usize)> {
        self.row_best
            .iter()
            .enumerate()
            .filter(|&(i, &(v, j))| j != usize::MAX && self.col_best[j].1 == i && v >= min_sim)
            .map(|(i, &(_, j))| (i, j))
            .collect()
    }
}

/// Mutual nearest neighbours of a row-major `n x m` similarity matrix.
pub fn mnn_from_similarity(sim: &[f32], n: usize, m: usize, min_sim: f32) -> Vec<(usize, usize)> {
    assert_eq!(sim.len(), n * m);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut acc = MnnAccumulator::new(m);
    acc.feed(sim);
    acc.finish(min_sim)
}

const MNN_BLOCK_ROWS: usize = 256;

/// Coarse MNN matching by cosine similarity (descriptors are unit norm).
/// Coarse matches carry confidence 1.
pub fn mnn_match(a: &FeatureSet, b: &FeatureSet, min_cossim: f32) -> Result<MatchSet> {
    if a.dim != b.dim {
        return Err(Error::shape("mnn_match", format!("descriptor dims {} vs {}", a.dim, b.dim)));
    }
    let (n, m, d) = (a.len(), b.len(), a.dim);
    if n == 0 || m == 0 {
        return Ok(MatchSet::default());
    }
    let mut acc = MnnAccumulator::new(m);
    let mut block = vec![0.0f32; MNN_BLOCK_ROWS * m];
    for start in (0..n).step_by(MNN_BLOCK_ROWS) {
        let rows = MNN_BLOCK_ROWS.min(n - start);
        let out = &mut block[..rows * m];
        gemm(
            false,
            true,
            rows,
            m,
            d,
            1.0,
            &a.descriptors[start * d..(start + rows) * d],
            &b.descriptors,
            0.0,
            out,
        );
        acc.feed(out);
    }
    let pairs = acc.finish(min_cossim);
    let coord = |k: &Keypoint| (k.x, k.y);
    Ok(MatchSet {
        coords_a: pairs.iter().map(|&(i, _)| coord(&a.keypoints[i])).collect(),
        coords_b: pairs.iter().map(|&(_, j)| coord(&b.keypoints[j])).collect(),
        confidence: vec![1.0; pairs.len()],
        offset_logits: Vec::new(),
        pairs,
    })
}

/// Decoded offset: the argmax cell pixel `(x, y)` and its softmax probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offset {
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
}

/// Argmax over 64 logits laid out as `o(row y, col x)` at flat index
/// `8*y + x`; ties go to the lowest index.
pub fn offset_from_logits<T: Float>(logits: &[T]) -> Result<Offset> {
    if logits.len() != OFFSET_CLASSES {
        return Err(Error::shape("offset_from_logits", format!("expected 64 logits, got {}", logits.len())));
    }
    let (k, max) = logits
        .iter()
        .enumerate()
        .fold((0, logits[0]), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
    let z: T = logits.iter().map(|&v| (v - max).exp()).sum();
    Ok(Offset {
        x: k % CELL,
        y: k / CELL,
        confidence: (T::one() / z).as_f64(),
    })
}

/// Runs the refiner on every coarse pair, moves the `b` coordinate to the
/// predicted pixel of its cell and drops pairs below `conf_threshold`.
pub fn refine_matches(
    model: &XFeatModel<f32>,
    a: &FeatureSet,
    b: &FeatureSet,
    coarse: &MatchSet,
    conf_threshold: f32,
) -> Result<MatchSet> {
    if 2 * a.dim != model.refiner.input_width() || a.dim != b.dim {
        return Err(Error::shape(
            "refine_matches",
            format!("refiner takes {} inputs, descriptors are {}", model.refiner.input_width(), a.dim),
        ));
    }
    if coarse.is_empty() {
        return Ok(MatchSet::default());
    }
    let fa = a.rows(coarse.pairs.iter().map(|p| p.0))?;
    let fb = b.rows(coarse.pairs.iter().map(|p| p.1))?;
    let logits = model.refine_logits(&fa, &fb, &mut ForwardCtx::eval())?;
    let mut out = MatchSet::default();
    for (k, (&(ia, ib), row)) in coarse.pairs.iter().zip(logits.data().chunks(OFFSET_CLASSES)).enumerate() {
        let off = offset_from_logits(row)?;
        if off.confidence < conf_threshold as f64 {
            continue;
        }
        let kb = &b.keypoints[ib];
        let (rx, ry) = scale_ratio(b.image_size, b.scales[ib]);
        let refine_axis = |v: f32, r: f32, o: usize| {
            let origin = (v * r / CELL as f32).floor() * CELL as f32;
            (origin + o as f32 + 0.5) / r
        };
        out.pairs.push((ia, ib));
        out.coords_a.push(coarse.coords_a[k]);
        out.coords_b.push((refine_axis(kb.x, rx, off.x), refine_axis(kb.y, ry, off.y)));
        out.offset_logits.extend_from_slice(row);
        out.confidence.push(off.confidence as f32);
    }
    Ok(out)
}

/// Extract-free matching of two cached sets: MNN, then optional refinement.
pub fn match_features(
    model: Option<&XFeatModel<f32>>,
    a: &FeatureSet,
    b: &FeatureSet,
    min_cossim: f32,
    conf_threshold: Option<f32>,
) -> Result<MatchSet> {
    let coarse = mnn_match(a, b, min_cossim)?;
    match (model, conf_threshold) {
        (Some(m), Some(conf)) => refine_matches(m, a, b, &coarse, conf),
        (None, Some(_)) => Err(Error::InvalidArgument("refinement needs a model".into())),
        _ => Ok(coarse),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> FeatureSet {
        let mut s = FeatureSet::empty((100, 100), FeatureMode::Sparse, 64);
        for k in 0..n {
            let mut d: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nrm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            d.iter_mut().for_each(|v| *v /= nrm);
            s.descriptors.extend(d);
            s.keypoints.push(Keypoint {
                x: k as f32 + 0.5,
                y: 3.5,
                score: 1.0,
            });
            s.reliability.push(0.5);
            s.scales.push(1.0);
        }
        s
    }

    #[test]
    fn identical_sets_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_set(&mut rng, 300);
        let m = mnn_match(&a, &a, -1.0).unwrap();
        assert_eq!(m.pairs, (0..300).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(m.confidence.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn min_cossim_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_set(&mut rng, 20), random_set(&mut rng, 25));
        let all = mnn_match(&a, &b, -1.0).unwrap();
        let strict = mnn_match(&a, &b, 0.99).unwrap();
        assert!(!all.is_empty());
        assert!(strict.is_empty());
    }

    /// Exhaustive double argmax.
    fn oracle(sim: &[f32], n: usize, m: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            let j = (0..m).fold(0, |b, j| if sim[i * m + j] > sim[i * m + b] { j } else { b });
            let back = (0..n).fold(0, |b, r| if sim[r * m + j] > sim[b * m + j] { r } else { b });
            if back == i {
                out.push((i, j));
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mnn_matches_oracle_and_is_symmetric(seed in any::<u64>(), n in 1usize..40, m in 1usize..40, levels in 0u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim: Vec<f32> = (0..n * m)
                .map(|_| {
                    let v: f32 = rng.random_range(-1.0..1.0);
                    if levels == 0 { v } else { (v * levels as f32).round() / levels as f32 }
                })
                .collect();
            let got = mnn_from_similarity(&sim, n, m, -1.0);
            prop_assert_eq!(&got, &oracle(&sim, n, m));
            let mut t = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    t[j * n + i] = sim[i * m + j];
                }
            }
            let mut swapped: Vec<(usize, usize)> = mnn_from_similarity(&t, m, n, -1.0).into_iter().map(|(j, i)| (i, j)).collect();
            swapped.sort();
            prop_assert_eq!(got, swapped);
        }
    }

    #[test]
    fn offset_convention_row_is_y() {
        let mut o = vec![0.0f64; 64];
        o[2 * 8 + 5] = 10.0;
        let off = offset_from_logits(&o).unwrap();
        assert_eq!((off.x, off.y), (5, 2));
        assert!(off.confidence > 0.99);
        let u = offset_from_logits(&[0.0f32; 64]).unwrap();
        assert!((u.confidence - 1.0 / 64.0).abs() < 1e-7);
        assert_eq!((u.x, u.y), (0, 0));
        assert!(offset_from_logits(&[0.0f32; 63]).is_err());
    }

    #[test]
    fn shifted_logits_keep_offset_and_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let o: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let a = offset_from_logits(&o).unwrap();
            let b = offset_from_logits(&o.iter().map(|v| v + c).collect::<Vec<_>>()).unwrap();
            assert_eq!((a.x, a.y), (b.x, b.y));
            assert!((a.confidence - b.confidence).abs() <= 1e-6);
        }
    }

    #[test]
    fn sampling_at_cell_center_returns_normalized_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, h, w) = (64, 4, 5);
        let f: Vec<f32> = (0..d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = Tensor::from_vec(f.clone(), &[1, d, h, w]).unwrap();
        let (i, j) = (2, 3);
        let desc = sample_descriptors(&feats, &[(8.0 * j as f32 + 4.0, 8.0 * i as f32 + 4.0)], (1.0, 1.0)).unwrap();
        let cell: Vec<f32> = (0..d).map(|c| f[(c * h + i) * w + j]).collect();
        let nrm = cell.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, b) in desc.iter().zip(&cell) {
            assert!((a - b / nrm).abs() <= 1e-6);
        }
        let pts: Vec<(f32, f32)> = (0..50).map(|_| (rng.random_range(0.0..40.0), rng.random_range(0.0..32.0))).collect();
        let many = sample_descriptors(&feats, &pts, (1.0, 1.0)).unwrap();
        for row in many.chunks(d) {
            assert!((row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() <= 1e-5);
        }
        assert!(sample_descriptors(&feats, &[], (1.0, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn semi_dense_grid_counts_64() {
        // 64*0.65 = 41.6 -> 42 px -> cells with center 8j+4 < 42: 5 per side;
        // 64*1.3 = 83.2 -> 83 px -> 10 per side.
        let model = XFeatModel::<f32>::reduced(0).unwrap();
        let img = Tensor::from_vec((0..64 * 64).map(|k| ((k * 31) % 97) as f32 / 97.0).collect(), &[1, 1, 64, 64]).unwrap();
        let set = semi_dense_extract(&model, &img, usize::MAX).unwrap();
        assert_eq!(semi_dense_grid((64, 64), 0.65), (5, 5));
        assert_eq!(semi_dense_grid((64, 64), 1.3), (10, 10));
        // dedup can only remove points
        assert!(set.len() <= 125 && set.len() > 100);
        assert!(set.reliability.windows(2).all(|w| w[0] >= w[1]));
        for (i, a) in set.keypoints.iter().enumerate() {
            assert!(a.x < 64.0 && a.y < 64.0);
            for b in &set.keypoints[i + 1..] {
                assert!((a.x - b.x).hypot(a.y - b.y) > DEDUP_RADIUS);
            }
        }
        let small = semi_dense_extract(&model, &img, 30).unwrap();
        assert_eq!(small.len(), 30);
        assert_eq!(small.reliability[..], set.reliability[..30]);
    }

    #[test]
    fn refinement_moves_within_cell_and_respects_threshold() {
        let model = XFeatModel::<f32>::reduced(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_set(&mut rng, 40);
        let coarse = mnn_match(&a, &a, -1.0).unwrap();
        let none = refine_matches(&model, &a, &a, &coarse, 1.01).unwrap();
        assert!(none.is_empty());
        let all = refine_matches(&model, &a, &a, &coarse, 0.0).unwrap();
        assert_eq!(all.len(), 40);
        for (k, &(_, ib)) in all.pairs.iter().enumerate() {
            let kb = &a.keypoints[ib];
            let (x, y) = all.coords_b[k];
            assert_eq!((x / 8.0).floor(), (kb.x / 8.0).floor());
            assert_eq!((y / 8.0).floor(), (kb.y / 8.0).floor());
            assert!((x - kb.x).hypot(y - kb.y) <= 8.0 * 2f32.sqrt());
        }
        assert_eq!(all.offset_logits.len(), 40 * 64);
    }
}
