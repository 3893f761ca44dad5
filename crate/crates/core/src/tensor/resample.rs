//! Resampling and rearrangement ops.
//!
//! Continuous coordinates follow the half-pixel convention: sample `i` covers
//! `[i, i+1)` and its center sits at `i + 0.5`.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Catmull-Rom cubic parameter.
pub const CATMULL_ROM_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn nchw<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected NCHW, got {:?}", t.shape()))),
    }
}

/// Source taps for one output coordinate of a half-pixel linear resize.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of an `[N,C,H,W]` tensor to `out_h x out_w`
/// (half-pixel centers, edge clamped, no antialiasing).
pub fn bilinear_resize<T: Float>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw("bilinear_resize", input)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilinear_resize {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let planes = n * c;
    let src = input.data();
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let top = plane[a.lo * w + b.lo] * (T::one() - fx) + plane[a.lo * w + b.hi] * fx;
                let bot = plane[a.hi * w + b.lo] * (T::one() - fx) + plane[a.hi * w + b.hi] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::from_op(
        "bilinear_resize",
        out,
        vec![n, c, out_h, out_w],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gin = &mut gx[p * h * w..(p + 1) * h * w];
                let gout = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, a) in ty.iter().enumerate() {
                    let fy = T::lit(a.frac);
                    for (ox, b) in tx.iter().enumerate() {
                        let fx = T::lit(b.frac);
                        let v = gout[oy * out_w + ox];
                        gin[a.lo * w + b.lo] += v * (T::one() - fy) * (T::one() - fx);
                        gin[a.lo * w + b.hi] += v * (T::one() - fy) * fx;
                        gin[a.hi * w + b.lo] += v * fy * (T::one() - fx);
                        gin[a.hi * w + b.hi] += v * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Catmull-Rom interpolation of a `[C,h,w]` (or `[1,C,h,w]`) map at
/// continuous `(u, v)` points, returning `[len, C]`.
///
/// Sampling at a cell center `(j + 0.5, i + 0.5)` reproduces `map[:, i, j]`.
/// Points outside the map are clamped to the border and neighbors are
/// replicated. The result is not differentiable.
pub fn bicubic_sample<T: Float>(map: &Tensor<T>, points: &[(f64, f64)]) -> Result<Tensor<T>> {
    let (c, h, w) = match *map.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "bicubic_sample",
                format!("expected [C,h,w] or [1,C,h,w], got {:?}", map.shape()),
            ))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("bicubic_sample on an empty map".into()));
    }
    let data = map.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(points.len() * c);
    for &(u, v) in points {
        let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
        let (xs, wx) = cubic_taps(x, w);
        let (ys, wy) = cubic_taps(y, h);
        for ch in 0..c {
            let plane = &data[ch * hw..(ch + 1) * hw];
            let mut acc = 0.0;
            for (yy, &wyv) in ys.iter().zip(&wy) {
                let row = &plane[yy * w..(yy + 1) * w];
                let mut r = 0.0;
                for (xx, &wxv) in xs.iter().zip(&wx) {
                    r += row[*xx].as_f64() * wxv;
                }
                acc += r * wyv;
            }
            out.push(T::lit(acc));
        }
    }
    Tensor::from_vec(out, &[points.len(), c])
}

fn cubic_taps(x: f64, size: usize) -> ([usize; 4], [f64; 4]) {
    let x0 = x.floor();
    let t = x - x0;
    let base = x0 as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    (
        [clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)],
        [
            cubic_weight(t + 1.0),
            cubic_weight(t),
            cubic_weight(1.0 - t),
            cubic_weight(2.0 - t),
        ],
    )
}

/// Rearranges each `block x block` patch into channels:
/// `out[n, c*b*b + dy*b + dx, i, j] = in[n, c, b*i + dy, b*j + dx]`.
pub fn space_to_depth<T: Float>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw("space_to_depth", input)?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("{h}x{w} is not divisible by block {block}"),
        ));
    }
    let (oh, ow, bb) = (h / block, w / block, block * block);
    let perm = s2d_permutation(n, c, h, w, block);
    let src = input.data();
    let data: Vec<T> = perm.iter().map(|&k| src[k]).collect();
    let len = data.len();
    Tensor::from_op(
        "space_to_depth",
        data,
        vec![n, c * bb, oh, ow],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![T::zero(); len];
            for (o, &k) in perm.iter().enumerate() {
                gx[k] = g[o];
            }
            vec![Some(gx)]
        }),
    )
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<T: Float>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [n, cb, h, w] = nchw("depth_to_space", input)?;
    let bb = block * block;
    if block == 0 || cb % bb != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("{cb} channels not divisible by {bb}"),
        ));
    }
    let c = cb / bb;
    // perm maps output(s2d) index -> input(image) index; invert it here.
    let perm = s2d_permutation(n, c, h * block, w * block, block);
    let src = input.data();
    let mut data = vec![T::zero(); src.len()];
    for (o, &k) in perm.iter().enumerate() {
        data[k] = src[o];
    }
    Tensor::from_op(
        "depth_to_space",
        data,
        vec![n, c, h * block, w * block],
        vec![input.clone()],
        Box::new(move |g| vec![Some(perm.iter().map(|&k| g[k]).collect())]),
    )
}

/// For every element of the space-to-depth output (row-major), the index of
/// its source pixel in the image tensor.
fn s2d_permutation(n: usize, c: usize, h: usize, w: usize, b: usize) -> Vec<usize> {
    let (oh, ow) = (h / b, w / b);
    let mut perm = Vec::with_capacity(n * c * h * w);
    for bi in 0..n {
        for ci in 0..c {
            for dy in 0..b {
                for dx in 0..b {
                    for i in 0..oh {
                        for j in 0..ow {
                            perm.push(((bi * c + ci) * h + b * i + dy) * w + b * j + dx);
                        }
                    }
                }
            }
        }
    }
    perm
}

/// Edge-replicating pad on the bottom and right of an `[N,C,H,W]` tensor.
pub fn pad_replicate<T: Float>(input: &Tensor<T>, pad_bottom: usize, pad_right: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw("pad_replicate", input)?;
    if pad_bottom == 0 && pad_right == 0 {
        return Ok(input.clone());
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("pad_replicate on an empty tensor".into()));
    }
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let mut src_index = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            let sy = y.min(h - 1);
            for x in 0..ow {
                src_index.push((p * h + sy) * w + x.min(w - 1));
            }
        }
    }
    let data = src_index.iter().map(|&k| input.data()[k]).collect();
    let len = input.len();
    Tensor::from_op(
        "pad_replicate",
        data,
        vec![n, c, oh, ow],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![T::zero(); len];
            for (o, &k) in src_index.iter().enumerate() {
                gx[k] += g[o];
            }
            vec![Some(gx)]
        }),
    )
}
