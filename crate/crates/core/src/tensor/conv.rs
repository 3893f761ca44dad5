use super::{gemm, Float, FlopCounter, Tensor};
use crate::error::{Error, Result};

/// `floor((size + 2*padding - kernel) / stride) + 1`.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let p = self.h_out * self.w_out;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.h_out * self.w_out;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an `[N,C,H,W]` input with an
/// `[C_out,C_in,k,k]` kernel. `k` must be 1 or 3, `stride` 1 or 2 and
/// `padding == (k-1)/2`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv_impl(input, weight, bias, stride, padding, None)
}

/// [`conv2d`] that also charges the layer to `counter` under `name`.
pub fn conv2d_counted<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    counter: &mut FlopCounter,
    name: &str,
) -> Result<Tensor<T>> {
    conv_impl(input, weight, bias, stride, padding, Some((counter, name)))
}

fn conv_impl<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    counter: Option<(&mut FlopCounter, &str)>,
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = *input.shape() else {
        return Err(Error::shape("conv2d", format!("input must be NCHW, got {:?}", input.shape())));
    };
    let [c_out, wc_in, k, k2] = *weight.shape() else {
        return Err(Error::shape("conv2d", format!("weight must be rank 4, got {:?}", weight.shape())));
    };
    if wc_in != c_in || k != k2 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) || padding != (k - 1) / 2 {
        return Err(Error::InvalidArgument(format!(
            "conv2d supports k in {{1,3}}, stride in {{1,2}}, padding (k-1)/2; got k={k} stride={stride} padding={padding}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
        }
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel")));
    }
    let g = Geometry {
        c_in,
        h,
        w,
        k,
        stride,
        pad: padding,
        h_out: conv_output_dim(h, k, stride, padding),
        w_out: conv_output_dim(w, k, stride, padding),
    };
    let p = g.h_out * g.w_out;
    let ckk = c_in * k * k;

    let mut out = vec![T::zero(); n * c_out * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
    for b in 0..n {
        let x = &input.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        let y = &mut out[b * c_out * p..(b + 1) * c_out * p];
        gemm(false, false, c_out, p, ckk, T::one(), weight.data(), rhs, T::zero(), y);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    if let Some((counter, name)) = counter {
        counter.record(name, g.h_out, g.w_out, c_in, c_out, k);
    }

    let x_t = input.clone();
    let w_t = weight.clone();
    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        "conv2d",
        out,
        vec![n, c_out, g.h_out, g.w_out],
        parents,
        Box::new(move |gy| {
            let need_x = x_t.requires_grad();
            let need_w = w_t.requires_grad();
            let mut gx = need_x.then(|| vec![T::zero(); n * c_in * h * w]);
            let mut gw = need_w.then(|| vec![T::zero(); c_out * ckk]);
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
            let mut dcols = vec![T::zero(); if need_x { ckk * p } else { 0 }];
            for b in 0..n {
                let dy = &gy[b * c_out * p..(b + 1) * c_out * p];
                let x = &x_t.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
                if let Some(gw) = gw.as_mut() {
                    let rhs: &[T] = if g.is_pointwise() {
                        x
                    } else {
                        g.im2col(x, &mut cols);
                        &cols
                    };
                    gemm(false, true, c_out, ckk, p, T::one(), dy, rhs, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dxb = &mut gx[b * c_in * h * w..(b + 1) * c_in * h * w];
                    if g.is_pointwise() {
                        gemm(true, false, ckk, p, c_out, T::one(), w_t.data(), dy, T::zero(), dxb);
                    } else {
                        gemm(true, false, ckk, p, c_out, T::one(), w_t.data(), dy, T::zero(), &mut dcols);
                        g.col2im_add(&dcols, dxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); c_out];
                for b in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += gy[(b * c_out + co) * p..(b * c_out + co + 1) * p].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation with zero padding.
    fn naive_conv(
        x: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (co, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_scale_case_and_flops() {
        let x = Tensor::<f32>::from_vec(vec![3.0], &[1, 1, 1, 1]).unwrap();
        let w = Tensor::<f32>::from_vec(vec![2.0], &[1, 1, 1, 1]).unwrap();
        let mut c = FlopCounter::new();
        let y = conv2d_counted(&x, &w, None, 1, 0, &mut c, "l").unwrap();
        assert_eq!(y.data(), &[6.0]);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn flops_count_output_positions() {
        let x = Tensor::<f32>::zeros(&[1, 4, 600, 800]);
        let w = Tensor::<f32>::zeros(&[8, 4, 3, 3]);
        let mut c = FlopCounter::new();
        conv2d_counted(&x, &w, None, 1, 1, &mut c, "l").unwrap();
        assert_eq!(c.total(), 138_240_000);
        let mut c = FlopCounter::new();
        let y = conv2d_counted(&x, &w, None, 2, 1, &mut c, "l").unwrap();
        assert_eq!(y.shape(), &[1, 8, 300, 400]);
        assert_eq!(c.total(), 300 * 400 * 4 * 8 * 9);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, c, h, w, co, k, s) in &[
            (1, 1, 5, 5, 1, 3, 1),
            (2, 3, 5, 5, 4, 3, 1),
            (2, 3, 7, 6, 2, 3, 2),
            (1, 4, 5, 3, 3, 1, 1),
            (1, 2, 5, 5, 3, 1, 2),
        ] {
            let x = rand_vec(&mut rng, n * c * h * w);
            let wt = rand_vec(&mut rng, co * c * k * k);
            let pad = (k - 1) / 2;
            let want = naive_conv(&x, (n, c, h, w), &wt, (co, k), s, pad);
            let xt = Tensor::<f64>::from_vec(x, &[n, c, h, w]).unwrap();
            let wtt = Tensor::<f64>::from_vec(wt, &[co, c, k, k]).unwrap();
            let got = conv2d(&xt, &wtt, None, s, pad).unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
            // f32 path on the 5x5 case
            let got32 = conv2d(&xt.cast::<f32>(), &wtt.cast::<f32>(), None, s, pad).unwrap();
            for (a, b) in got32.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1), (1, 2)] {
            let (n, c, h, w, co) = (2, 2, 5, 4, 3);
            let pad = (k - 1) / 2;
            let x0 = rand_vec(&mut rng, n * c * h * w);
            let w0 = rand_vec(&mut rng, co * c * k * k);
            let b0 = rand_vec(&mut rng, co);
            let ho = conv_output_dim(h, k, s, pad);
            let wo = conv_output_dim(w, k, s, pad);
            let proj = Tensor::<f64>::from_vec(rand_vec(&mut rng, n * co * ho * wo), &[n * co * ho * wo]).unwrap();
            let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv2d(x, wt, Some(b), s, pad).unwrap();
                y.reshape(&[y.len()]).unwrap().mul(&proj).unwrap().sum().unwrap()
            };
            let x = Tensor::leaf(x0.clone(), &[n, c, h, w], true).unwrap();
            let wt = Tensor::leaf(w0.clone(), &[co, c, k, k], true).unwrap();
            let b = Tensor::leaf(b0.clone(), &[co], true).unwrap();
            loss(&x, &wt, &b).backward().unwrap();
            let eps = 1e-5;
            let check = |which: usize, base: &[f64], analytic: &[f64]| {
                for idx in 0..base.len() {
                    let mut p = base.to_vec();
                    let eval = |p: Vec<f64>| {
                        let mk = |v: Vec<f64>, sh: &[usize]| Tensor::from_vec(v, sh).unwrap();
                        match which {
                            0 => loss(&mk(p, &[n, c, h, w]), &mk(w0.clone(), &[co, c, k, k]), &mk(b0.clone(), &[co])),
                            1 => loss(&mk(x0.clone(), &[n, c, h, w]), &mk(p, &[co, c, k, k]), &mk(b0.clone(), &[co])),
                            _ => loss(&mk(x0.clone(), &[n, c, h, w]), &mk(w0.clone(), &[co, c, k, k]), &mk(p, &[co])),
                        }
                        .item()
                        .unwrap()
                    };
                    p[idx] += eps;
                    let lp = eval(p.clone());
                    p[idx] -= 2.0 * eps;
                    let lm = eval(p);
                    let num = (lp - lm) / (2.0 * eps);
                    assert!((num - analytic[idx]).abs() < 1e-7, "k={k} s={s} param {which}[{idx}]");
                }
            };
            check(0, &x0, &x.grad().unwrap());
            check(1, &w0, &wt.grad().unwrap());
            check(2, &b0, &b.grad().unwrap());
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), None, 1, 2).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 3, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 1, 0).is_err());
    }
}
