//! Encoder with the tripling channel schedule, pyramid fusion into the dense
//! descriptor map `F`, and the reliability logits `R`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BasicLayer, Conv2d, ForwardCtx, ParamStore};
use crate::tensor::{bilinear_resize, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block_channels: Vec<usize>,
    pub block_layer_counts: Vec<usize>,
    /// Stride of the first layer of each block.
    pub block_strides: Vec<usize>,
    pub fusion_layers: usize,
    /// Kernel size of the fusion layers (1 or 3).
    pub fusion_kernel: usize,
    pub descriptor_dim: usize,
    /// Add the projected 1/8 level before the last fusion layer.
    pub skip_connection: bool,
}

impl BackboneConfig {
    pub fn reference() -> Self {
        BackboneConfig {
            block_channels: vec![4, 8, 24, 64, 64, 128],
            block_layer_counts: vec![2, 2, 3, 3, 3, 3],
            block_strides: vec![2, 2, 2, 2, 2, 1],
            fusion_layers: 3,
            fusion_kernel: 1,
            descriptor_dim: 64,
            skip_connection: true,
        }
    }

    /// Narrow variant used for gradient checks and desk-scale training.
    pub fn reduced() -> Self {
        BackboneConfig {
            block_channels: vec![2, 4, 6, 8, 8, 16],
            ..Self::reference()
        }
    }

    /// Block indices whose outputs are the 1/8, 1/16 and 1/32 taps.
    pub fn taps(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let mut cumulative = 1;
        let mut taps = [None; 3];
        for (b, &s) in self.block_strides.iter().enumerate() {
            cumulative *= s;
            match cumulative {
                8 if taps[0].is_none() => taps[0] = Some(b),
                16 if taps[1].is_none() => taps[1] = Some(b),
                32 => taps[2] = Some(b),
                _ => {}
            }
        }
        match taps {
            [Some(a), Some(b), Some(c)] => Ok([a, b, c]),
            _ => Err(Error::Config(format!(
                "block strides {:?} do not reach 1/8, 1/16 and 1/32",
                self.block_strides
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.block_channels.len();
        if n == 0 || self.block_layer_counts.len() != n || self.block_strides.len() != n {
            return Err(Error::Config("block lists must be non-empty and of equal length".into()));
        }
        if self.block_channels.contains(&0) || self.block_layer_counts.contains(&0) {
            return Err(Error::Config("block channels and layer counts must be positive".into()));
        }
        if self.block_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Config("block strides must be 1 or 2".into()));
        }
        if self.block_strides.iter().product::<usize>() != 32 {
            return Err(Error::Config("total stride must be 32".into()));
        }
        if self.fusion_layers == 0 || !matches!(self.fusion_kernel, 1 | 3) || self.descriptor_dim == 0 {
            return Err(Error::Config("invalid fusion block".into()));
        }
        Ok(())
    }
}

/// Encoder taps at 1/8, 1/16 and 1/32 resolution.
#[derive(Debug, Clone)]
pub struct EncoderFeatures<T: Float = f32> {
    pub level8: Tensor<T>,
    pub level16: Tensor<T>,
    pub level32: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FeatureMaps<T: Float = f32> {
    /// Dense descriptors `[N, D, H/8, W/8]`.
    pub feats: Tensor<T>,
    /// Reliability before the sigmoid, `[N, 1, H/8, W/8]`.
    pub rel_logits: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    blocks: Vec<Vec<BasicLayer>>,
    projections: [Conv2d; 3],
    fusion: Vec<BasicLayer>,
    reliability: Conv2d,
    taps: [usize; 3],
}

impl Backbone {
    pub(crate) fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: &BackboneConfig) -> Result<Self> {
        let taps = config.taps()?;
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (b, ((&c, &layers), &stride)) in config
            .block_channels
            .iter()
            .zip(&config.block_layer_counts)
            .zip(&config.block_strides)
            .enumerate()
        {
            let block = (0..layers)
                .map(|l| {
                    let (cin, s) = if l == 0 { (c_in, stride) } else { (c, 1) };
                    BasicLayer::new(store, rng, &format!("backbone.block{}.{l}", b + 1), cin, c, 3, s, true)
                })
                .collect();
            blocks.push(block);
            c_in = c;
        }
        let d = config.descriptor_dim;
        let projections = [("proj8", taps[0]), ("proj16", taps[1]), ("proj32", taps[2])].map(|(name, tap)| {
            Conv2d::new(store, rng, &format!("backbone.{name}"), config.block_channels[tap], d, 1, 1, true)
        });
        let fusion = (0..config.fusion_layers)
            .map(|i| {
                let last = i + 1 == config.fusion_layers;
                BasicLayer::new(store, rng, &format!("backbone.fusion.{i}"), d, d, config.fusion_kernel, 1, !last)
            })
            .collect();
        let reliability = Conv2d::new(store, rng, "backbone.reliability", d, 1, 1, 1, true);
        Ok(Backbone {
            config: config.clone(),
            blocks,
            projections,
            fusion,
            reliability,
            taps,
        })
    }

    /// Every convolution on the descriptor pathway, in execution order.
    pub fn conv_layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.blocks.iter().flatten().map(|l| &l.conv).collect();
        v.extend(self.projections.iter());
        v.extend(self.fusion.iter().map(|l| &l.conv));
        v.push(&self.reliability);
        v
    }

    /// Runs the six blocks on a `[N,1,H,W]` image whose sides are multiples
    /// of 8.
    pub fn forward_encoder<T: Float>(
        &self,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        image: &Tensor<T>,
    ) -> Result<EncoderFeatures<T>> {
        if image.dims() != 4 || image.shape()[1] != 1 {
            return Err(Error::shape("forward_encoder", format!("expected [N,1,H,W], got {:?}", image.shape())));
        }
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in block {
                x = layer.forward(store, ctx, &x)?;
            }
            outs.push(x.clone());
        }
        Ok(EncoderFeatures {
            level8: outs[self.taps[0]].clone(),
            level16: outs[self.taps[1]].clone(),
            level32: outs[self.taps[2]].clone(),
        })
    }

    pub fn fuse_pyramid<T: Float>(
        &self,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        enc: &EncoderFeatures<T>,
    ) -> Result<FeatureMaps<T>> {
        let [n, _, h, w] = *enc.level8.shape() else {
            return Err(Error::shape("fuse_pyramid", "level8 must be NCHW"));
        };
        for lvl in [&enc.level16, &enc.level32] {
            if lvl.dims() != 4 || lvl.shape()[0] != n {
                return Err(Error::shape("fuse_pyramid", format!("level shape {:?}", lvl.shape())));
            }
        }
        let p8 = self.projections[0].forward(store, ctx, &enc.level8)?;
        let p16 = self.projections[1].forward(store, ctx, &enc.level16)?;
        let p32 = self.projections[2].forward(store, ctx, &enc.level32)?;
        let mut x = p8
            .add(&bilinear_resize(&p16, h, w)?)?
            .add(&bilinear_resize(&p32, h, w)?)?;
        let (last, body) = self.fusion.split_last().expect("fusion block is non-empty");
        for layer in body {
            x = layer.forward(store, ctx, &x)?;
        }
        if self.config.skip_connection {
            x = x.add(&p8)?;
        }
        let feats = last.forward(store, ctx, &x)?;
        let rel_logits = self.reliability.forward(store, ctx, &x)?;
        Ok(FeatureMaps { feats, rel_logits })
    }
}
