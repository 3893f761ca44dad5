//! Dual-softmax, reliability, fine-offset and keypoint losses and their
//! linear combination.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{CELL, DUSTBIN};
use crate::tensor::{Float, Tensor};

/// Linear index of in-cell position `(t_x, t_y)`.
pub fn t_idx(tx: usize, ty: usize) -> usize {
    debug_assert!(tx < CELL && ty < CELL);
    tx + CELL * ty
}

/// Inverse of [`t_idx`]; `None` for the dustbin.
pub fn t_idx_position(idx: usize) -> Option<(usize, usize)> {
    (idx < DUSTBIN).then_some((idx % CELL, idx / CELL))
}

/// `S = F1 F2^T / tau`.
pub fn similarity<T: Float>(f1: &Tensor<T>, f2: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    f1.matmul(&f2.transpose()?)?.scale(1.0 / tau)
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean over rows of `-log softmax_r(S)_ii - log softmax_r(S^T)_ii`.
pub fn loss_dual_softmax<T: Float>(f1: &Tensor<T>, f2: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if f1.shape() != f2.shape() || f1.dims() != 2 {
        return Err(Error::shape("loss_dual_softmax", format!("{:?} vs {:?}", f1.shape(), f2.shape())));
    }
    let n = f1.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument("dual-softmax needs at least 2 correspondences".into()));
    }
    let s = similarity(f1, f2, tau)?;
    let rows = s.log_softmax(1)?.pick(&diagonal(n))?.mean()?;
    let cols = s.transpose()?.log_softmax(1)?.pick(&diagonal(n))?.mean()?;
    rows.add(&cols)?.scale(-1.0)
}

/// Detached reliability targets `max_r softmax_r(S) ⊙ max_r softmax_r(S^T)`.
pub fn reliability_targets<T: Float>(f1: &Tensor<T>, f2: &Tensor<T>, tau: f64) -> Result<Vec<T>> {
    let s = similarity(&f1.detach(), &f2.detach(), tau)?;
    let n = s.shape()[0];
    let row_max = |p: &Tensor<T>| -> Vec<T> {
        p.data()
            .chunks(p.shape()[1])
            .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
            .collect()
    };
    let r1 = row_max(&s.softmax(1)?);
    let r2 = row_max(&s.transpose()?.softmax(1)?);
    debug_assert_eq!(r1.len(), n);
    Ok(r1.iter().zip(&r2).map(|(&a, &b)| a * b).collect())
}

/// `mean|sigmoid(R1) - target| + mean|sigmoid(R2) - target|` with the target
/// computed from the descriptors and cut from the graph.
pub fn loss_reliability<T: Float>(
    r1_logits: &Tensor<T>,
    r2_logits: &Tensor<T>,
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    tau: f64,
) -> Result<Tensor<T>> {
    let target = reliability_targets(f1, f2, tau)?;
    loss_reliability_with_target(r1_logits, r2_logits, &target)
}

pub fn loss_reliability_with_target<T: Float>(
    r1_logits: &Tensor<T>,
    r2_logits: &Tensor<T>,
    target: &[T],
) -> Result<Tensor<T>> {
    let n = target.len();
    if r1_logits.len() != n || r2_logits.len() != n {
        return Err(Error::shape(
            "loss_reliability",
            format!("{} and {} logits for {n} targets", r1_logits.len(), r2_logits.len()),
        ));
    }
    let t = Tensor::from_vec(target.to_vec(), &[n])?;
    let one = |r: &Tensor<T>| -> Result<Tensor<T>> { r.reshape(&[n])?.sigmoid()?.sub(&t)?.abs()?.mean() };
    one(r1_logits)?.add(&one(r2_logits)?)
}

/// `-mean log softmax(o_i)[y_i * 8 + x_i]` for ground-truth offsets `(x, y)`.
pub fn loss_fine<T: Float>(logits: &Tensor<T>, offsets: &[(usize, usize)]) -> Result<Tensor<T>> {
    if logits.dims() != 2 || logits.shape()[1] != CELL * CELL || logits.shape()[0] != offsets.len() {
        return Err(Error::shape(
            "loss_fine",
            format!("logits {:?} for {} offsets", logits.shape(), offsets.len()),
        ));
    }
    if offsets.is_empty() {
        return Err(Error::InvalidArgument("loss_fine on an empty set".into()));
    }
    if let Some(bad) = offsets.iter().find(|(x, y)| *x >= CELL || *y >= CELL) {
        return Err(Error::InvalidArgument(format!("offset {bad:?} outside the 8x8 cell")));
    }
    let idx: Vec<usize> = offsets.iter().map(|&(x, y)| t_idx(x, y)).collect();
    logits.log_softmax(1)?.pick(&idx)?.mean()?.scale(-1.0)
}

/// Supervised cell of the keypoint map: batch index, cell row and column,
/// and class `0..=64` (64 is the dustbin).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KpTarget {
    pub b: usize,
    pub i: usize,
    pub j: usize,
    pub t_idx: usize,
}

/// Keeps every keypoint cell and a uniform sample of dustbin cells no larger
/// than `cap_ratio` times the keypoint-cell count. Order is preserved.
pub fn select_keypoint_targets<R: Rng>(labels: &[KpTarget], cap_ratio: f64, rng: &mut R) -> Vec<KpTarget> {
    let positives = labels.iter().filter(|l| l.t_idx != DUSTBIN).count();
    let dust: Vec<usize> = (0..labels.len()).filter(|&k| labels[k].t_idx == DUSTBIN).collect();
    let cap = (cap_ratio * positives as f64).floor() as usize;
    let mut keep = vec![true; labels.len()];
    if dust.len() > cap {
        dust.iter().for_each(|&k| keep[k] = false);
        for s in sample(rng, dust.len(), cap) {
            keep[dust[s]] = true;
        }
    }
    labels.iter().zip(keep).filter(|(_, k)| *k).map(|(l, _)| *l).collect()
}

/// `-mean log softmax(k_ij)[t_idx]` over the given cells of `[B,65,h,w]`
/// logits. No cells gives a zero loss.
pub fn loss_keypoint<T: Float>(logits: &Tensor<T>, targets: &[KpTarget]) -> Result<Tensor<T>> {
    if logits.dims() != 4 || logits.shape()[1] != DUSTBIN + 1 {
        return Err(Error::shape("loss_keypoint", format!("expected [B,65,h,w], got {:?}", logits.shape())));
    }
    if let Some(bad) = targets.iter().find(|t| t.t_idx > DUSTBIN) {
        return Err(Error::InvalidArgument(format!("t_idx {} outside 0..=64", bad.t_idx)));
    }
    if targets.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    let cells: Vec<(usize, usize, usize)> = targets.iter().map(|t| (t.b, t.i, t.j)).collect();
    let idx: Vec<usize> = targets.iter().map(|t| t.t_idx).collect();
    logits.gather_cells(&cells)?.log_softmax(1)?.pick(&idx)?.mean()?.scale(-1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only(index: usize) -> Self {
        let mut w = [0.0; 4];
        w[index] = 1.0;
        LossWeights {
            alpha: w[0],
            beta: w[1],
            gamma: w[2],
            delta: w[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative with one positive: {w:?}")));
        }
        Ok(())
    }
}

/// The four scalar loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossParts<T: Float = f32> {
    pub ds: Tensor<T>,
    pub rel: Tensor<T>,
    pub fine: Tensor<T>,
    pub kp: Tensor<T>,
}

/// `alpha L_ds + beta L_rel + gamma L_fine + delta L_kp`.
pub fn total_loss<T: Float>(parts: &LossParts<T>, w: &LossWeights) -> Result<Tensor<T>> {
    for (name, p) in [("ds", &parts.ds), ("rel", &parts.rel), ("fine", &parts.fine), ("kp", &parts.kp)] {
        if p.len() != 1 {
            return Err(Error::shape("total_loss", format!("{name} is not a scalar")));
        }
        if !p.data()[0].is_finite() {
            return Err(Error::NonFinite("total_loss"));
        }
    }
    parts
        .ds
        .scale(w.alpha)?
        .add(&parts.rel.scale(w.beta)?)?
        .add(&parts.fine.scale(w.gamma)?)?
        .add(&parts.kp.scale(w.delta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        let t = Tensor::from_vec((0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n, d]).unwrap();
        t.l2_normalize_rows().unwrap()
    }

    #[test]
    fn dual_softmax_orthogonal_closed_form() {
        let f1 = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let f2 = Tensor::<f64>::from_vec(vec![0.0, 1.0, 0.0, 0.0], &[2, 2]).unwrap();
        let l = loss_dual_softmax(&f1, &f2, 0.1).unwrap().item().unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() <= 1e-6);
        assert!(loss_dual_softmax(&f1.gather_rows(&[0]).unwrap(), &f2.gather_rows(&[0]).unwrap(), 0.1).is_err());
    }

    #[test]
    fn dual_softmax_decreases_with_separation() {
        let eye = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let mut last = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let l = loss_dual_softmax(&eye, &eye, 1.0 / c).unwrap().item().unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn dual_softmax_matches_loop_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, tau) = (6, 0.1);
        let (f1, f2) = (rows(&mut rng, n, 5), rows(&mut rng, n, 5));
        let s = |i: usize, j: usize| -> f64 {
            (0..5).map(|k| f1.data()[i * 5 + k] * f2.data()[j * 5 + k]).sum::<f64>() / tau
        };
        let mut want = 0.0;
        for i in 0..n {
            let zr: f64 = (0..n).map(|j| s(i, j).exp()).sum();
            let zc: f64 = (0..n).map(|j| s(j, i).exp()).sum();
            want -= (s(i, i).exp() / zr).ln() + (s(i, i).exp() / zc).ln();
        }
        want /= n as f64;
        let got = loss_dual_softmax(&f1, &f2, tau).unwrap().item().unwrap();
        assert!((got - want).abs() <= 1e-6);
        let swapped = loss_dual_softmax(&f2, &f1, tau).unwrap().item().unwrap();
        assert!((got - swapped).abs() <= 1e-6);
    }

    #[test]
    fn reliability_closed_forms_and_detach() {
        let n = 4;
        let f = Tensor::<f64>::leaf(vec![0.0; n * 3], &[n, 3], true).unwrap();
        let g = Tensor::<f64>::leaf(vec![0.0; n * 3], &[n, 3], true).unwrap();
        assert_eq!(reliability_targets(&f, &g, 0.1).unwrap(), vec![0.0625; n]);
        let r_vals: Vec<f64> = vec![-1.0, 0.0, 0.5, 2.0];
        let r1 = Tensor::leaf(r_vals.clone(), &[n], true).unwrap();
        let r2 = Tensor::leaf(r_vals.iter().map(|v| -v).collect(), &[n], true).unwrap();
        let loss = loss_reliability(&r1, &r2, &f, &g, 0.1).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want: f64 = r_vals.iter().map(|&v| (sig(v) - 0.0625).abs() + (sig(-v) - 0.0625).abs()).sum::<f64>() / n as f64;
        assert!((loss.item().unwrap() - want).abs() < 1e-12);
        loss.backward().unwrap();
        assert!(r1.grad().is_some());
        assert!(f.grad().is_none() && g.grad().is_none());

        let logit = |p: f64| (p / (1.0 - p)).ln();
        let exact = Tensor::<f64>::from_vec(vec![logit(0.0625); n], &[n]).unwrap();
        let zero = loss_reliability_with_target(&exact, &exact, &[0.0625; 4]).unwrap().item().unwrap();
        assert!(zero.abs() < 1e-12);
    }

    #[test]
    fn fine_closed_forms_and_oracle() {
        let uniform = Tensor::<f64>::zeros(&[5, 64]);
        let l = loss_fine(&uniform, &[(0, 0), (7, 7), (3, 2), (1, 6), (4, 4)]).unwrap().item().unwrap();
        assert!((l - 64f64.ln()).abs() <= 1e-6);
        let mut peaked = vec![0.0f64; 64];
        peaked[t_idx(5, 2)] = 10.0;
        let l = loss_fine(&Tensor::from_vec(peaked, &[1, 64]).unwrap(), &[(5, 2)]).unwrap().item().unwrap();
        assert!(l < 0.01);
        assert!(loss_fine(&Tensor::<f64>::zeros(&[1, 64]), &[(8, 0)]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20;
        let o: Vec<f64> = (0..n * 64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gt: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..8), rng.random_range(0..8))).collect();
        let mut want = 0.0;
        for (i, &(x, y)) in gt.iter().enumerate() {
            let row = &o[i * 64..(i + 1) * 64];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y * 8 + x].exp() / z).ln();
        }
        want /= n as f64;
        let got = loss_fine(&Tensor::from_vec(o, &[n, 64]).unwrap(), &gt).unwrap().item().unwrap();
        assert!((got - want).abs() <= 1e-6);
    }

    #[test]
    fn t_idx_round_trip() {
        assert_eq!(t_idx(3, 2), 19);
        let mut seen = [false; 64];
        for ty in 0..8 {
            for tx in 0..8 {
                let k = t_idx(tx, ty);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(t_idx_position(k), Some((tx, ty)));
            }
        }
        assert_eq!(t_idx_position(64), None);
    }

    #[test]
    fn keypoint_uniform_is_log65() {
        let k = Tensor::<f64>::zeros(&[2, 65, 3, 3]);
        let targets = [
            KpTarget { b: 0, i: 0, j: 1, t_idx: 19 },
            KpTarget { b: 1, i: 2, j: 2, t_idx: 64 },
        ];
        let l = loss_keypoint(&k, &targets).unwrap().item().unwrap();
        assert!((l - 65f64.ln()).abs() <= 1e-6);
        assert!(loss_keypoint(&k, &[KpTarget { b: 0, i: 0, j: 0, t_idx: 65 }]).is_err());
        assert_eq!(loss_keypoint(&k, &[]).unwrap().item().unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn dustbin_cap_respected(seed in any::<u64>(), n in 0usize..200, p_pos in 0.0f64..1.0, cap in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<KpTarget> = (0..n)
                .map(|k| KpTarget { b: 0, i: k / 16, j: k % 16, t_idx: if rng.random_bool(p_pos) { rng.random_range(0..64) } else { 64 } })
                .collect();
            let sel = select_keypoint_targets(&labels, cap, &mut rng);
            let pos = labels.iter().filter(|l| l.t_idx != 64).count();
            let sel_pos = sel.iter().filter(|l| l.t_idx != 64).count();
            let sel_dust = sel.len() - sel_pos;
            prop_assert_eq!(sel_pos, pos);
            prop_assert!(sel_dust as f64 <= cap * pos as f64);
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let s = |v: f64| Tensor::<f64>::scalar(v);
        let parts = LossParts { ds: s(1.0), rel: s(2.0), fine: s(3.0), kp: s(4.0) };
        assert_eq!(total_loss(&parts, &LossWeights::default()).unwrap().item().unwrap(), 10.0);
        assert_eq!(total_loss(&parts, &LossWeights::only(0)).unwrap().item().unwrap(), 1.0);
        let zeros = LossParts { ds: s(0.0), rel: s(0.0), fine: s(0.0), kp: s(0.0) };
        assert_eq!(total_loss(&zeros, &LossWeights::default()).unwrap().item().unwrap(), 0.0);
        assert!(LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, delta: 0.0 }.validate().is_err());
    }
}
