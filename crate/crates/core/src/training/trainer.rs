//! Training samples, the per-step loss computation and the training loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::GrayImage;
use crate::model::{ModelConfig, XFeatModel};
use crate::nn::ForwardCtx;
use crate::tensor::{Float, Tensor};

use super::losses::{
    loss_dual_softmax, loss_fine, loss_keypoint, loss_reliability_with_target, reliability_targets,
    select_keypoint_targets, total_loss, KpTarget, LossParts, LossWeights,
};
use super::optim::{staircase_lr, Adam, AdamConfig};
use super::teacher::{CellLabels, KeypointTeacher};
use super::textures::procedural_texture;
use super::warp::{grid_correspondences, synth_warp_pair, WarpPair, WarpParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub width: usize,
    pub height: usize,
    /// Number of base images warped on the fly.
    pub dataset_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    pub temperature: f64,
    pub weights: LossWeights,
    pub max_correspondences: usize,
    /// Dustbin cells kept per keypoint cell.
    pub dustbin_ratio: f64,
    pub warp: WarpParams,
    /// Share of batch slots drawn from synthetic warps when posed pairs are
    /// also supplied.
    pub synthetic_fraction: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::reference(),
            seed: 0,
            steps: 160_000,
            batch_size: 10,
            width: 800,
            height: 600,
            dataset_size: 1000,
            lr: 3e-4,
            lr_decay: 0.5,
            lr_decay_every: 30_000,
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            temperature: 0.1,
            weights: LossWeights::default(),
            max_correspondences: 1024,
            dustbin_ratio: 1.0,
            warp: WarpParams::default(),
            synthetic_fraction: 0.4,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Small single-core setup: reduced model, 2 pairs of 256x256 per step,
    /// 50 base textures, a higher learning rate and a heavier fine loss.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::reduced(),
            steps: 2000,
            batch_size: 2,
            width: 256,
            height: 256,
            dataset_size: 50,
            lr: 3e-3,
            weights: LossWeights {
                gamma: 8.0,
                ..LossWeights::default()
            },
            log_every: 50,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::Config("batch_size and dataset_size must be positive".into()));
        }
        if self.width < 128 || self.height < 128 {
            return Err(Error::Config(format!("training images must be at least 128x128, got {}x{}", self.width, self.height)));
        }
        if !(0.0..=1.0).contains(&self.synthetic_fraction) {
            return Err(Error::Config("synthetic_fraction must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.temperature > 0.0 && self.dustbin_ratio >= 0.0) {
            return Err(Error::Config("lr and temperature must be positive, dustbin_ratio non-negative".into()));
        }
        Ok(())
    }
}

/// A warped pair with keypoint labels for both views.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub pair: WarpPair,
    pub labels1: CellLabels,
    pub labels2: CellLabels,
}

impl TrainSample {
    pub fn new(pair: WarpPair, teacher: &dyn KeypointTeacher) -> Self {
        let labels1 = teacher.labels(&pair.image1);
        let labels2 = teacher.labels(&pair.image2);
        TrainSample { pair, labels1, labels2 }
    }

    /// A real pair related by `h` (A to B), both views resized to
    /// `size` with the homography adjusted to match.
    pub fn from_posed<R: Rng>(
        image_a: &GrayImage,
        image_b: &GrayImage,
        h: &Homography,
        size: (usize, usize),
        max_correspondences: usize,
        teacher: &dyn KeypointTeacher,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = |img: &GrayImage| {
            Homography::from_row_major([
                size.0 as f64 / img.width as f64,
                0.0,
                0.0,
                0.0,
                size.1 as f64 / img.height as f64,
                0.0,
                0.0,
                0.0,
                1.0,
            ])
        };
        let homography = scale(image_b).compose(h).compose(&scale(image_a).inverse()?);
        let correspondences = grid_correspondences(&homography, size, size, max_correspondences, rng);
        let pair = WarpPair {
            image1: image_a.resize(size.0, size.1)?,
            image2: image_b.resize(size.0, size.1)?,
            homography,
            correspondences,
        };
        Ok(TrainSample::new(pair, teacher))
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pair.image1.width, self.pair.image1.height)
    }
}

/// `count` procedural textures; texture `k` depends only on `seed` and `k`.
pub fn procedural_bases(count: usize, width: usize, height: usize, seed: u64) -> Vec<GrayImage> {
    (0..count as u64)
        .map(|k| procedural_texture(width, height, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)))
        .collect()
}

/// `count` fixed warped pairs of procedural textures, as in
/// [`procedural_bases`], each with its own seeded warp.
pub fn synthetic_dataset(
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
    warp: &WarpParams,
    max_correspondences: usize,
    teacher: &dyn KeypointTeacher,
) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    procedural_bases(count, width, height, seed)
        .iter()
        .map(|img| Ok(TrainSample::new(synth_warp_pair(img, warp, max_correspondences, &mut rng)?, teacher)))
        .collect()
}

/// Keypoint targets of a batch laid out as all first views then all second
/// views.
pub fn batch_keypoint_labels(batch: &[&TrainSample]) -> Vec<KpTarget> {
    let n = batch.len();
    let mut out: Vec<KpTarget> = batch.iter().enumerate().flat_map(|(b, s)| s.labels1.targets(b)).collect();
    out.extend(batch.iter().enumerate().flat_map(|(b, s)| s.labels2.targets(n + b)));
    out
}

/// Loss terms for one batch plus the reliability targets used.
pub struct BatchLosses<T: Float> {
    pub parts: LossParts<T>,
    pub reliability_targets: Vec<Vec<T>>,
    pub pairs_used: usize,
    pub correspondences: usize,
}

/// Forward of `batch` and the four losses. Matching terms are averaged over
/// pairs with at least two correspondences. Passing `fixed_targets` replaces
/// the reliability targets derived from the current descriptors.
pub fn compute_losses<T: Float>(
    model: &XFeatModel<T>,
    batch: &[&TrainSample],
    kp_targets: &[KpTarget],
    temperature: f64,
    ctx: &mut ForwardCtx<T>,
    fixed_targets: Option<&[Vec<T>]>,
) -> Result<BatchLosses<T>> {
    let Some(first) = batch.first() else {
        return Err(Error::InvalidArgument("empty training batch".into()));
    };
    let size = first.size();
    if batch.iter().any(|s| s.size() != size || (s.pair.image2.width, s.pair.image2.height) != size) {
        return Err(Error::InvalidArgument("training batch images differ in size".into()));
    }
    let n = batch.len();
    let views: Vec<&GrayImage> = batch
        .iter()
        .map(|s| &s.pair.image1)
        .chain(batch.iter().map(|s| &s.pair.image2))
        .collect();
    let images = GrayImage::batch(&views)?.cast::<T>();
    let out = model.forward(&images, ctx)?;

    let mut ds = Vec::new();
    let mut rel = Vec::new();
    let mut fine = Vec::new();
    let mut targets_used = Vec::new();
    let mut correspondences = 0;
    for (b, s) in batch.iter().enumerate() {
        let c = &s.pair.correspondences;
        if c.len() < 2 {
            log::warn!("pair {b} has {} correspondences, skipped", c.len());
            continue;
        }
        correspondences += c.len();
        let cells1: Vec<_> = c.cells1().into_iter().map(|(i, j)| (b, i, j)).collect();
        let cells2: Vec<_> = c.cells2().into_iter().map(|(i, j)| (n + b, i, j)).collect();
        let f1 = out.feats.gather_cells(&cells1)?.l2_normalize_rows()?;
        let f2 = out.feats.gather_cells(&cells2)?.l2_normalize_rows()?;
        let r1 = out.rel_logits.gather_cells(&cells1)?;
        let r2 = out.rel_logits.gather_cells(&cells2)?;
        let target = match fixed_targets {
            Some(t) => t
                .get(ds.len())
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("fewer fixed reliability targets than pairs".into()))?,
            None => reliability_targets(&f1, &f2, temperature)?,
        };
        ds.push(loss_dual_softmax(&f1, &f2, temperature)?);
        rel.push(loss_reliability_with_target(&r1, &r2, &target)?);
        let logits = model.refine_logits(&f1, &f2, ctx)?;
        fine.push(loss_fine(&logits, &c.offsets2())?);
        targets_used.push(target);
    }
    let mean = |v: Vec<Tensor<T>>| -> Result<Tensor<T>> {
        let k = v.len();
        let mut it = v.into_iter();
        let Some(first) = it.next() else {
            return Ok(Tensor::scalar(T::zero()));
        };
        it.try_fold(first, |a, b| a.add(&b))?.scale(1.0 / k as f64)
    };
    let pairs_used = ds.len();
    let parts = LossParts {
        ds: mean(ds)?,
        rel: mean(rel)?,
        fine: mean(fine)?,
        kp: loss_keypoint(&out.kpt_logits, kp_targets)?,
    };
    Ok(BatchLosses {
        parts,
        reliability_targets: targets_used,
        pairs_used,
        correspondences,
    })
}

/// Loss values after one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub ds: f64,
    pub rel: f64,
    pub fine: f64,
    pub kp: f64,
    pub total: f64,
    pub correspondences: usize,
    pub keypoint_cells: usize,
}

pub struct Trainer {
    pub model: XFeatModel<f32>,
    pub config: TrainConfig,
    adam: Adam<f32>,
    step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: XFeatModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A11);
        Ok(Trainer {
            model,
            adam: Adam::new(config.adam),
            config,
            step: 0,
            rng,
        })
    }

    /// Fresh model from `config.model` seeded by `config.seed`.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let model = XFeatModel::new(config.model.clone(), config.seed)?;
        Trainer::new(model, config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        staircase_lr(self.config.lr, self.config.lr_decay, self.config.lr_decay_every, self.step)
    }

    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepReport> {
        let labels = batch_keypoint_labels(batch);
        let kp_targets = select_keypoint_targets(&labels, self.config.dustbin_ratio, &mut self.rng);
        let mut ctx = ForwardCtx::train();
        let losses = compute_losses(&self.model, batch, &kp_targets, self.config.temperature, &mut ctx, None)?;
        let total = total_loss(&losses.parts, &self.config.weights)?;
        let value = total.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let lr = self.learning_rate();
        total.backward()?;
        let grads = ctx.grads();
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradients"));
        }
        self.adam.step(self.model.params_mut(), &grads, lr);
        self.model.apply_bn_updates(&mut ctx, self.config.bn_momentum);
        self.step += 1;
        let p = &losses.parts;
        Ok(StepReport {
            step: self.step,
            lr,
            ds: p.ds.item()? as f64,
            rel: p.rel.item()? as f64,
            fine: p.fine.item()? as f64,
            kp: p.kp.item()? as f64,
            total: value as f64,
            correspondences: losses.correspondences,
            keypoint_cells: kp_targets.len(),
        })
    }

    /// Runs `steps` updates on random batches of fixed samples.
    pub fn fit<F: FnMut(&StepReport)>(&mut self, data: &[TrainSample], steps: u64, mut on_step: F) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = sample(&mut self.rng, data.len(), self.config.batch_size.min(data.len()));
            let batch: Vec<&TrainSample> = idx.iter().map(|k| &data[k]).collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Trains on fresh synthetic warps of `bases`, drawn per batch slot
    /// from the trainer's seeded generator. When `real` is non-empty each
    /// slot is synthetic with probability `synthetic_fraction`.
    pub fn fit_online<F: FnMut(&StepReport)>(
        &mut self,
        bases: &[GrayImage],
        teacher: &dyn KeypointTeacher,
        real: &[TrainSample],
        steps: u64,
        mut on_step: F,
    ) -> Result<Vec<StepReport>> {
        if bases.is_empty() && real.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let mut fresh = Vec::new();
            let mut picked = Vec::new();
            for _ in 0..self.config.batch_size {
                let synthetic = real.is_empty() || (!bases.is_empty() && self.rng.random_bool(self.config.synthetic_fraction));
                if synthetic {
                    let base = &bases[self.rng.random_range(0..bases.len())];
                    let pair = synth_warp_pair(base, &self.config.warp, self.config.max_correspondences, &mut self.rng)?;
                    fresh.push(TrainSample::new(pair, teacher));
                } else {
                    picked.push(self.rng.random_range(0..real.len()));
                }
            }
            let batch: Vec<&TrainSample> = picked.iter().map(|&k| &real[k]).chain(fresh.iter()).collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::teacher::HarrisTeacher;
    use crate::training::warp::synth_warp_pair_with;

    fn tiny(seed: u64) -> Vec<TrainSample> {
        synthetic_dataset(2, 128, 128, seed, &WarpParams::default(), 1024, &HarrisTeacher::default()).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            width: 128,
            height: 128,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let data = tiny(3);
        let run = || {
            let mut t = Trainer::from_config(tiny_config()).unwrap();
            t.fit(&data, 3, |_| {}).unwrap();
            t.model.params().iter().map(|p| p.data.clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posed_pair_homography_follows_resize() {
        let a = procedural_texture(200, 160, 1);
        let h = Homography::translation(8.0, 4.0);
        let b = a.warp(&h, 200, 160, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TrainSample::from_posed(&a, &b, &h, (128, 128), 1024, &HarrisTeacher::default(), &mut rng).unwrap();
        let (x, y) = s.pair.homography.apply((64.0, 64.0));
        assert!((x - (64.0 + 8.0 * 128.0 / 200.0)).abs() < 1e-9 && (y - (64.0 + 4.0 * 128.0 / 160.0)).abs() < 1e-9);
        assert!(s.pair.correspondences.len() > 100);
        let mut cfg = tiny_config();
        cfg.batch_size = 3;
        let mut t = Trainer::from_config(cfg).unwrap();
        let bases = procedural_bases(2, 128, 128, 0);
        let r = t.fit_online(&bases, &HarrisTeacher::default(), std::slice::from_ref(&s), 2, |_| {}).unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn batch_labels_cover_both_views() {
        let data = tiny(1);
        let batch: Vec<&TrainSample> = data.iter().collect();
        let labels = batch_keypoint_labels(&batch);
        assert_eq!(labels.len(), 4 * 16 * 16);
        assert_eq!(labels.iter().map(|l| l.b).max(), Some(3));
    }

    #[test]
    fn fixed_targets_reproduce_free_targets() {
        let data = tiny(2);
        let batch: Vec<&TrainSample> = data.iter().collect();
        let m = XFeatModel::<f32>::reduced(0).unwrap();
        let free = compute_losses(&m, &batch, &[], 0.1, &mut ForwardCtx::eval(), None).unwrap();
        let fixed = compute_losses(&m, &batch, &[], 0.1, &mut ForwardCtx::eval(), Some(&free.reliability_targets)).unwrap();
        assert_eq!(free.parts.rel.item().unwrap(), fixed.parts.rel.item().unwrap());
        assert_eq!(free.pairs_used, 2);
    }

    #[test]
    fn memorises_a_single_pair() {
        let img = procedural_texture(128, 128, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Homography::translation(5.0, 3.0);
        let pair = synth_warp_pair_with(&img, h, &WarpParams::none(), 1024, &mut rng).unwrap();
        let data = vec![TrainSample::new(pair, &HarrisTeacher::default())];
        let mut t = Trainer::from_config(TrainConfig { lr: 1e-3, ..tiny_config() }).unwrap();
        let r = t.fit(&data, 200, |_| {}).unwrap();
        let (first, last) = (r[0].total, r.last().unwrap().total);
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }
}
