use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics observed in training mode.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<T>,
}

impl<T: Float> BatchMoments<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Channel-wise normalization of an `[N,C,H,W]` tensor followed by the
/// affine `gamma * x_hat + beta`.
///
/// In training mode batch statistics are used and returned so the caller can
/// update its running estimates; in eval mode the running statistics are used.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    training: bool,
    eps: f64,
) -> Result<(Tensor<T>, Option<BatchMoments<T>>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape("batch_norm2d", format!("expected NCHW, got {:?}", input.shape())));
    };
    for (what, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(Error::shape("batch_norm2d", format!("{what} has {len} entries for {c} channels")));
        }
    }
    let hw = h * w;
    let m = n * hw;
    if training && m == 0 {
        return Err(Error::InvalidArgument("batch_norm2d on an empty batch".into()));
    }
    let x = input.data();
    let eps = T::lit(eps);

    let (mean, var_biased): (Vec<T>, Vec<T>) = if training {
        let mf = T::lit(m as f64);
        (0..c)
            .map(|ch| {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mu = s / mf;
                let mut v = T::zero();
                for b in 0..n {
                    for &xv in &x[(b * c + ch) * hw..][..hw] {
                        v += (xv - mu) * (xv - mu);
                    }
                }
                (mu, v / mf)
            })
            .unzip()
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for k in base..base + hw {
                let xh = (x[k] - mean[ch]) * inv_std[ch];
                x_hat[k] = xh;
                out[k] = g * xh + bt;
            }
        }
    }

    let moments = training.then(|| {
        let correction = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
        BatchMoments {
            mean: mean.clone(),
            var: var_biased.iter().map(|&v| v * correction).collect(),
        }
    });

    let gamma_t = gamma.clone();
    let y = Tensor::from_op(
        "batch_norm2d",
        out,
        input.shape().to_vec(),
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gy| {
            let mut gx = vec![T::zero(); gy.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for k in base..base + hw {
                        sum_dy += gy[k];
                        sum_dy_xh += gy[k] * x_hat[k];
                    }
                }
                gb[ch] = sum_dy;
                gg[ch] = sum_dy_xh;
                let g = gamma_t.data()[ch];
                if training {
                    let mf = T::lit(m as f64);
                    let scale = g * inv_std[ch] / mf;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            gx[k] = scale * (mf * gy[k] - sum_dy - x_hat[k] * sum_dy_xh);
                        }
                    }
                } else {
                    let scale = g * inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            gx[k] = scale * gy[k];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    )?;
    Ok((y, moments))
}
