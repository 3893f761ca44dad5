//! Parameter storage and the layer types the model is assembled from.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{batch_norm2d, conv2d, conv2d_counted, BatchMoments, FlopCounter, Float, Tensor, BN_EPS};

/// A named parameter buffer. Non-trainable entries hold BN running stats.
#[derive(Debug, Clone)]
pub struct Param<T: Float = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Ordered parameter list with lookup by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            data,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id_of(name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.id_of(name).map(move |i| &mut self.params[i])
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }
}

/// Per-forward state: mode flags, the optional FLOP counter, the leaf tensor
/// created for each parameter, and BN statistics to fold in afterwards.
pub struct ForwardCtx<'a, T: Float = f32> {
    training: bool,
    track_grad: bool,
    counter: Option<&'a mut FlopCounter>,
    leaves: BTreeMap<usize, Tensor<T>>,
    bn_updates: Vec<(usize, usize, BatchMoments<T>)>,
}

impl<'a, T: Float> ForwardCtx<'a, T> {
    /// Inference: running BN statistics, no gradient tracking.
    pub fn eval() -> Self {
        Self::new(false, false)
    }

    /// Training: batch BN statistics and gradients on trainable parameters.
    pub fn train() -> Self {
        Self::new(true, true)
    }

    pub fn new(training: bool, track_grad: bool) -> Self {
        ForwardCtx {
            training,
            track_grad,
            counter: None,
            leaves: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn with_counter(mut self, counter: &'a mut FlopCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub(crate) fn param(&mut self, store: &ParamStore<T>, id: usize) -> Result<Tensor<T>> {
        if let Some(t) = self.leaves.get(&id) {
            return Ok(t.clone());
        }
        let p = store.get(id);
        let t = Tensor::leaf(p.data.clone(), &p.shape, self.track_grad && p.trainable)?;
        self.leaves.insert(id, t.clone());
        Ok(t)
    }

    /// Gradients of every parameter leaf touched by this forward pass,
    /// ordered by parameter id.
    pub fn grads(&self) -> Vec<(usize, Vec<T>)> {
        self.leaves
            .iter()
            .filter_map(|(&id, t)| t.grad().map(|g| (id, g)))
            .collect()
    }

    /// BN statistics gathered in training mode as
    /// `(running_mean id, running_var id, moments)`.
    pub fn take_bn_updates(&mut self) -> Vec<(usize, usize, BatchMoments<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

fn kaiming_uniform<T: Float, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

/// Square-kernel convolution with `padding = (k-1)/2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    weight: usize,
    bias: Option<usize>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.push(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            kaiming_uniform(rng, fan_in, out_channels * fan_in),
            true,
        );
        let bias = bias.then(|| store.push(format!("{name}.bias"), vec![out_channels], vec![T::zero(); out_channels], true));
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, ctx: &mut ForwardCtx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = ctx.param(store, self.weight)?;
        let b = match self.bias {
            Some(id) => Some(ctx.param(store, id)?),
            None => None,
        };
        let pad = (self.kernel - 1) / 2;
        match ctx.counter.as_deref_mut() {
            Some(counter) => conv2d_counted(x, &w, b.as_ref(), self.stride, pad, counter, &self.name),
            None => conv2d(x, &w, b.as_ref(), self.stride, pad),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm2d {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.push(format!("{name}.weight"), vec![channels], vec![T::one(); channels], true),
            beta: store.push(format!("{name}.bias"), vec![channels], vec![T::zero(); channels], true),
            running_mean: store.push(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels], false),
            running_var: store.push(format!("{name}.running_var"), vec![channels], vec![T::one(); channels], false),
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, ctx: &mut ForwardCtx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gamma = ctx.param(store, self.gamma)?;
        let beta = ctx.param(store, self.beta)?;
        let (y, moments) = batch_norm2d(
            x,
            &gamma,
            &beta,
            &store.get(self.running_mean).data,
            &store.get(self.running_var).data,
            ctx.training,
            BN_EPS,
        )?;
        if let Some(m) = moments {
            ctx.bn_updates.push((self.running_mean, self.running_var, m));
        }
        Ok(y)
    }
}

/// conv (no bias) -> BatchNorm -> optional ReLU.
#[derive(Debug, Clone)]
pub struct BasicLayer {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl BasicLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        BasicLayer {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
            relu,
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, ctx: &mut ForwardCtx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(store, ctx, x)?;
        let y = self.bn.forward(store, ctx, &y)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

/// Fully connected layer on `[n, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub(crate) fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        Linear {
            in_features,
            out_features,
            weight: store.push(
                format!("{name}.weight"),
                vec![out_features, in_features],
                kaiming_uniform(rng, in_features, in_features * out_features),
                true,
            ),
            bias: store.push(format!("{name}.bias"), vec![out_features], vec![T::zero(); out_features], true),
        }
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, ctx: &mut ForwardCtx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.dims() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::shape(
                "linear",
                format!("expected [n,{}], got {:?}", self.in_features, x.shape()),
            ));
        }
        let w = ctx.param(store, self.weight)?;
        let b = ctx.param(store, self.bias)?;
        x.linear(&w, Some(&b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = kaiming_uniform(&mut rng, 24, 10_000);
        let bound = 0.5;
        assert!(v.iter().all(|x| x.abs() < bound));
        assert!(v.iter().any(|x| x.abs() > 0.45));
    }

    #[test]
    fn basic_layer_registers_named_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        BasicLayer::new(&mut store, &mut rng, "b.0", 3, 5, 3, 2, true);
        let names: Vec<_> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["b.0.conv.weight", "b.0.bn.weight", "b.0.bn.bias", "b.0.bn.running_mean", "b.0.bn.running_var"]
        );
        assert_eq!(store.trainable_count(), 5 * 3 * 9 + 10);
    }

    #[test]
    fn training_forward_collects_bn_updates_and_grads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = BasicLayer::new(&mut store, &mut rng, "l", 1, 2, 3, 1, true);
        let x = Tensor::from_vec((0..32).map(|v| (v as f64 * 0.37).sin()).collect(), &[2, 1, 4, 4]).unwrap();
        let mut counter = FlopCounter::new();
        let mut ctx = ForwardCtx::train().with_counter(&mut counter);
        layer.forward(&store, &mut ctx, &x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(ctx.take_bn_updates().len(), 1);
        let ids: Vec<usize> = ctx.grads().iter().map(|g| g.0).collect();
        assert_eq!(ids, [0, 1, 2]);
        drop(ctx);
        assert_eq!(counter.total(), 4 * 4 * 2 * 9);
    }
}
