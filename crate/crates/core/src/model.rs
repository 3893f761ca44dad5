//! The full network: backbone, keypoint head and match refiner over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, EncoderFeatures, FeatureMaps};
use crate::error::{Error, Result};
use crate::heads::{KeypointHead, CELL};
use crate::matcher::Refiner;
use crate::nn::{Conv2d, ForwardCtx, Param, ParamStore};
use crate::tensor::{pad_replicate, FlopCounter, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub keypoint_hidden: usize,
    /// Hidden widths of the refinement MLP; the output is always 64 logits.
    pub refiner_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn reference() -> Self {
        ModelConfig {
            backbone: BackboneConfig::reference(),
            keypoint_hidden: 64,
            refiner_hidden: vec![128, 128],
        }
    }

    pub fn reduced() -> Self {
        ModelConfig {
            backbone: BackboneConfig::reduced(),
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.keypoint_hidden == 0 || self.refiner_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Raw network outputs for a batch, all at 1/8 of the padded input.
#[derive(Debug, Clone)]
pub struct ModelOutput<T: Float = f32> {
    pub feats: Tensor<T>,
    pub rel_logits: Tensor<T>,
    pub kpt_logits: Tensor<T>,
    /// Unpadded input size `(W, H)`.
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct XFeatModel<T: Float = f32> {
    pub config: ModelConfig,
    params: ParamStore<T>,
    pub backbone: Backbone,
    pub keypoint_head: KeypointHead,
    pub refiner: Refiner,
}

impl<T: Float> XFeatModel<T> {
    /// Fresh model with Kaiming-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &mut rng, &config.backbone)?;
        let keypoint_head = KeypointHead::new(&mut params, &mut rng, config.keypoint_hidden);
        let refiner = Refiner::new(&mut params, &mut rng, config.backbone.descriptor_dim, &config.refiner_hidden);
        Ok(XFeatModel {
            config,
            params,
            backbone,
            keypoint_head,
            refiner,
        })
    }

    pub fn reference(seed: u64) -> Result<Self> {
        Self::new(ModelConfig::reference(), seed)
    }

    pub fn reduced(seed: u64) -> Result<Self> {
        Self::new(ModelConfig::reduced(), seed)
    }

    /// Builds the layout for `config` and fills it from named tensors. Every
    /// parameter must be supplied exactly once with a matching shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, shape, data) in tensors {
            let id = model
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter {name}")))?;
            if seen[id] {
                return Err(Error::Corrupt(format!("duplicate parameter {name}")));
            }
            let p = model.params.get_mut(id);
            if p.shape != shape || data.len() != p.data.len() {
                return Err(Error::Corrupt(format!("parameter {name}: shape {shape:?}, expected {:?}", p.shape)));
            }
            p.data = data;
            seen[id] = true;
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::Corrupt(format!("missing parameter {}", model.params.get(id).name)));
        }
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.by_name(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.by_name_mut(name)
    }

    /// Same weights in another float type.
    pub fn cast<U: Float>(&self) -> XFeatModel<U> {
        let tensors = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.iter().map(|v| U::lit(v.as_f64())).collect()))
            .collect();
        XFeatModel::from_named(self.config.clone(), tensors).expect("same layout")
    }

    /// The 23 convolutions of the descriptor pathway.
    pub fn descriptor_convs(&self) -> Vec<&Conv2d> {
        self.backbone.conv_layers()
    }

    /// Every convolution, descriptor pathway first, then the keypoint head.
    pub fn all_convs(&self) -> Vec<&Conv2d> {
        let mut v = self.backbone.conv_layers();
        v.extend(self.keypoint_head.conv_layers());
        v
    }

    /// Replicate-pads `[N,1,H,W]` so both sides are multiples of 8.
    pub fn pad_input(images: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = *images.shape() else {
            return Err(Error::shape("pad_input", format!("expected [N,1,H,W], got {:?}", images.shape())));
        };
        if c != 1 {
            return Err(Error::shape("pad_input", format!("expected one channel, got {c}")));
        }
        if h < 32 || w < 32 {
            return Err(Error::InvalidArgument(format!("image {w}x{h} is smaller than 32x32")));
        }
        pad_replicate(images, h.next_multiple_of(CELL) - h, w.next_multiple_of(CELL) - w)
    }

    pub fn forward_encoder(&self, padded: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> Result<EncoderFeatures<T>> {
        self.backbone.forward_encoder(&self.params, ctx, padded)
    }

    pub fn fuse_pyramid(&self, enc: &EncoderFeatures<T>, ctx: &mut ForwardCtx<T>) -> Result<FeatureMaps<T>> {
        self.backbone.fuse_pyramid(&self.params, ctx, enc)
    }

    pub fn keypoint_logits(&self, padded: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> Result<Tensor<T>> {
        self.keypoint_head.forward(&self.params, ctx, padded)
    }

    /// Offset logits `[n,64]` for descriptor rows `fa`, `fb` (`[n,D]` each).
    pub fn refine_logits(&self, fa: &Tensor<T>, fb: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> Result<Tensor<T>> {
        self.refiner.forward(&self.params, ctx, fa, fb)
    }

    /// Full forward on a `[N,1,H,W]` batch in `[0,1]`.
    pub fn forward(&self, images: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> Result<ModelOutput<T>> {
        let padded = Self::pad_input(images)?;
        let image_size = (images.shape()[3], images.shape()[2]);
        let enc = self.forward_encoder(&padded, ctx)?;
        let maps = self.fuse_pyramid(&enc, ctx)?;
        let kpt_logits = self.keypoint_logits(&padded, ctx)?;
        Ok(ModelOutput {
            feats: maps.feats,
            rel_logits: maps.rel_logits,
            kpt_logits,
            image_size,
        })
    }

    /// Eval-mode forward without gradient tracking.
    pub fn infer(&self, images: &Tensor<T>) -> Result<ModelOutput<T>> {
        self.forward(images, &mut ForwardCtx::eval())
    }

    /// Eval-mode forward charging every convolution to `counter`.
    pub fn infer_counted(&self, images: &Tensor<T>, counter: &mut FlopCounter) -> Result<ModelOutput<T>> {
        self.forward(images, &mut ForwardCtx::eval().with_counter(counter))
    }

    /// Folds the batch statistics of a training forward into the running
    /// BN estimates.
    pub fn apply_bn_updates(&mut self, ctx: &mut ForwardCtx<T>, momentum: f64) {
        for (mean_id, var_id, moments) in ctx.take_bn_updates() {
            let mut mean = std::mem::take(&mut self.params.get_mut(mean_id).data);
            let mut var = std::mem::take(&mut self.params.get_mut(var_id).data);
            moments.update_running(&mut mean, &mut var, momentum);
            self.params.get_mut(mean_id).data = mean;
            self.params.get_mut(var_id).data = var;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv_output_dim;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..h * w).map(|k| ((k * 7919) % 251) as f32 / 250.0).collect();
        Tensor::from_vec(data, &[1, 1, h, w]).unwrap()
    }

    #[test]
    fn reference_has_23_descriptor_convs() {
        let m = XFeatModel::<f32>::reference(0).unwrap();
        assert_eq!(m.descriptor_convs().len(), 23);
        let mut outs = Vec::new();
        for b in 1..=6 {
            let last = m
                .descriptor_convs()
                .into_iter()
                .filter(|c| c.name.starts_with(&format!("backbone.block{b}.")))
                .next_back()
                .unwrap()
                .out_channels;
            outs.push(last);
        }
        assert_eq!(outs, [4, 8, 24, 64, 64, 128]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = XFeatModel::<f32>::reference(11).unwrap();
        let b = XFeatModel::<f32>::reference(11).unwrap();
        let c = XFeatModel::<f32>::reference(12).unwrap();
        let bits = |m: &XFeatModel<f32>| -> Vec<u32> { m.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn encoder_level_shapes_256() {
        let m = XFeatModel::<f32>::reference(0).unwrap();
        let enc = m.forward_encoder(&image(256, 256), &mut ForwardCtx::eval()).unwrap();
        assert_eq!(enc.level8.shape(), &[1, 24, 32, 32]);
        assert_eq!(enc.level16.shape(), &[1, 64, 16, 16]);
        assert_eq!(enc.level32.shape(), &[1, 128, 8, 8]);
        let out = m.infer(&image(256, 256)).unwrap();
        assert_eq!(out.kpt_logits.shape(), &[1, 65, 32, 32]);
    }

    #[test]
    fn non_multiple_input_is_padded() {
        let m = XFeatModel::<f32>::reduced(0).unwrap();
        let out = m.infer(&image(50, 70)).unwrap();
        assert_eq!(out.feats.shape(), &[1, 64, 7, 9]);
        assert_eq!(out.rel_logits.shape(), &[1, 1, 7, 9]);
        assert_eq!(out.kpt_logits.shape(), &[1, 65, 7, 9]);
        assert_eq!(out.image_size, (70, 50));
        assert!(m.infer(&image(20, 70)).is_err());
    }

    #[test]
    fn flop_total_matches_layer_table_480x640() {
        let m = XFeatModel::<f32>::reference(0).unwrap();
        let mut counter = FlopCounter::new();
        m.infer_counted(&image(480, 640), &mut counter).unwrap();
        // layer table: (cin, cout, k, stride) for the encoder, then 1x1 layers at 1/8, 1/16, 1/32
        let ch = [4, 8, 24, 64, 64, 128];
        let counts = [2, 2, 3, 3, 3, 3];
        let strides = [2, 2, 2, 2, 2, 1];
        let (mut h, mut w, mut cin) = (480u64, 640u64, 1u64);
        let mut total = 0u64;
        let mut dims = Vec::new();
        for b in 0..6 {
            for l in 0..counts[b] {
                if l == 0 && strides[b] == 2 {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                total += h * w * cin * ch[b] * 9;
                cin = ch[b];
            }
            dims.push((h, w));
        }
        let (h8, w8) = dims[2];
        total += h8 * w8 * 24 * 64 + dims[3].0 * dims[3].1 * 64 * 64 + dims[5].0 * dims[5].1 * 128 * 64;
        total += 3 * h8 * w8 * 64 * 64 + h8 * w8 * 64;
        total += h8 * w8 * (64 * 64 * 3 + 64 * 65);
        assert_eq!((h8, w8), (60, 80));
        assert_eq!(counter.total(), total);
        assert_eq!(counter.entries().len(), 27);
        assert_eq!(conv_output_dim(75, 3, 2, 1), 38);
    }

    #[test]
    fn zero_projections_give_spatially_constant_features() {
        let mut m = XFeatModel::<f32>::reduced(1).unwrap();
        for name in ["backbone.proj8", "backbone.proj16", "backbone.proj32"] {
            m.param_mut(&format!("{name}.weight")).unwrap().data.fill(0.0);
            m.param_mut(&format!("{name}.bias")).unwrap().data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.01);
        }
        let out = m.infer(&image(64, 96)).unwrap();
        let hw = 8 * 12;
        for plane in out.feats.data().chunks(hw).chain(out.rel_logits.data().chunks(hw)) {
            // bilinear blending of a constant can differ from it by an ulp
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() <= 1e-5 * plane[0].abs().max(1.0)));
        }
    }

    #[test]
    fn skip_connection_is_live() {
        let mut cfg = ModelConfig::reduced();
        let with = XFeatModel::<f32>::new(cfg.clone(), 4).unwrap().infer(&image(64, 64)).unwrap();
        cfg.backbone.skip_connection = false;
        let without = XFeatModel::<f32>::new(cfg, 4).unwrap().infer(&image(64, 64)).unwrap();
        assert_ne!(with.feats.data(), without.feats.data());
    }

    #[test]
    fn brightness_changes_values_not_shapes() {
        let m = XFeatModel::<f32>::reduced(2).unwrap();
        let img = image(64, 64);
        let a = m.infer(&img).unwrap();
        let b = m.infer(&img.scale(2.0).unwrap()).unwrap();
        assert_eq!(a.feats.shape(), b.feats.shape());
        assert_ne!(a.feats.data(), b.feats.data());
    }

    #[test]
    fn zero_keypoint_head_gives_uniform_cells() {
        let mut m = XFeatModel::<f32>::reduced(0).unwrap();
        for name in ["keypoint_head.out.weight", "keypoint_head.out.bias"] {
            m.param_mut(name).unwrap().data.fill(0.0);
        }
        let hm = crate::heads::reassemble_heatmap(&m.infer(&image(64, 64)).unwrap().kpt_logits).unwrap();
        assert!(hm.data().iter().all(|&v| (v - 1.0 / 65.0).abs() < 1e-7));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ModelConfig::reference();
        cfg.backbone.block_strides = vec![2, 2, 2, 2, 1, 1];
        assert!(XFeatModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn cast_preserves_values() {
        let m = XFeatModel::<f32>::reduced(3).unwrap();
        let d = m.cast::<f64>();
        for (a, b) in m.params().iter().zip(d.params().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x as f64 == *y));
        }
    }
}
