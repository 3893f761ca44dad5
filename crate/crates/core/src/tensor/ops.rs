use super::{gemm, numel, Float, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tensor<T> {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(
            op,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::lit(s);
        self.unary("scale", |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Self> {
        let s = T::lit(s);
        self.unary("add_scalar", |v| v + s, |_, _| T::one())
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn abs(&self) -> Result<Self> {
        self.unary("abs", |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sum(&self) -> Result<Self> {
        let s: T = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        self.sum()?.scale(1.0 / self.len() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = matrix_dims("transpose", self)?;
        let src = self.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op(
            "transpose",
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let mut data = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, T::one(), self.data(), other.data(), T::zero(), &mut data);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, T::one(), g, b.data(), T::zero(), &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, T::one(), a.data(), g, T::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Fully connected layer: `x [n,in] . w[out,in]^T + b[out]`.
    pub fn linear(&self, weight: &Self, bias: Option<&Self>) -> Result<Self> {
        let (n, din) = matrix_dims("linear", self)?;
        let (dout, din2) = matrix_dims("linear", weight)?;
        if din != din2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
            }
        }
        let mut data = vec![T::zero(); n * dout];
        gemm(false, true, n, dout, din, T::one(), self.data(), weight.data(), T::zero(), &mut data);
        if let Some(b) = bias {
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(b.data()).for_each(|(y, &b)| *y += b);
            }
        }
        let (x, w) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            "linear",
            data,
            vec![n, dout],
            parents,
            Box::new(move |g| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); n * din];
                    gemm(false, false, n, din, dout, T::one(), g, w.data(), T::zero(), &mut gx);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(true, false, dout, din, n, T::one(), g, x.data(), T::zero(), &mut gw);
                    gw
                });
                let mut out = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push(Some(gb));
                }
                out
            }),
        )
    }

    /// `[n,p] ++ [n,q] -> [n,p+q]`.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (n, p) = matrix_dims("concat_cols", self)?;
        let (n2, q) = matrix_dims("concat_cols", other)?;
        if n != n2 {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(&self.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&other.data()[r * q..(r + 1) * q]);
        }
        Tensor::from_op(
            "concat_cols",
            data,
            vec![n, p + q],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Concatenation along the leading axis.
    pub fn cat0(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cat0 of nothing".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.dims() == 0 || &p.shape()[1..] != tail {
                return Err(Error::shape("cat0", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
            lead += p.shape()[0];
        }
        let mut data = Vec::with_capacity(lead * numel(tail));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        Tensor::from_op(
            "cat0",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                lens.iter()
                    .map(|&l| {
                        let s = g[off..off + l].to_vec();
                        off += l;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.dims() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} for {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let data = softmax_raw(self.data(), outer, len, inner);
        let y = data.clone();
        Tensor::from_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += g[base + a * inner] * y[base + a * inner];
                        }
                        for a in 0..len {
                            let k = base + a * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.dims() {
            return Err(Error::InvalidArgument(format!(
                "log_softmax axis {axis} for {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..len {
                    m = m.max(x[base + a * inner]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    s += (x[base + a * inner] - m).exp();
                }
                let lse = m + s.ln();
                for a in 0..len {
                    data[base + a * inner] = x[base + a * inner] - lse;
                }
            }
        }
        let y = data.clone();
        Tensor::from_op(
            "log_softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut gs = T::zero();
                        for a in 0..len {
                            gs += g[base + a * inner];
                        }
                        for a in 0..len {
                            let k = base + a * inner;
                            gx[k] = g[k] - y[k].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `out[r] = x[r, index[r]]` for a matrix `x`.
    pub fn pick(&self, index: &[usize]) -> Result<Self> {
        let (n, c) = matrix_dims("pick", self)?;
        if index.len() != n {
            return Err(Error::shape("pick", format!("{} rows, {} indices", n, index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!("pick index {bad} out of range 0..{c}")));
        }
        let data = index.iter().enumerate().map(|(r, &i)| self.data()[r * c + i]).collect();
        let index = index.to_vec();
        Tensor::from_op(
            "pick",
            data,
            vec![n],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * c];
                for (r, &i) in index.iter().enumerate() {
                    gx[r * c + i] = g[r];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Rows of a matrix, in the given order (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let (n, c) = matrix_dims("gather_rows", self)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range 0..{n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&self.data()[r * c..(r + 1) * c]);
        }
        let rows = rows.to_vec();
        Tensor::from_op(
            "gather_rows",
            data,
            vec![rows.len(), c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * c];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[k * c + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Channel vectors of an `[N,C,H,W]` map at `(batch, row, col)` cells,
    /// returned as `[len, C]`.
    pub fn gather_cells(&self, cells: &[(usize, usize, usize)]) -> Result<Self> {
        let [nb, c, h, w] = *self.shape() else {
            return Err(Error::shape("gather_cells", format!("expected NCHW, got {:?}", self.shape())));
        };
        for &(b, i, j) in cells {
            if b >= nb || i >= h || j >= w {
                return Err(Error::InvalidArgument(format!(
                    "cell ({b},{i},{j}) outside map {:?}",
                    self.shape()
                )));
            }
        }
        let hw = h * w;
        let src = self.data();
        let mut data = Vec::with_capacity(cells.len() * c);
        for &(b, i, j) in cells {
            let base = b * c * hw + i * w + j;
            data.extend((0..c).map(|ch| src[base + ch * hw]));
        }
        let cells = cells.to_vec();
        let total = self.len();
        Tensor::from_op(
            "gather_cells",
            data,
            vec![cells.len(), c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); total];
                for (k, &(b, i, j)) in cells.iter().enumerate() {
                    let base = b * c * hw + i * w + j;
                    for ch in 0..c {
                        gx[base + ch * hw] += g[k * c + ch];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Each row divided by its L2 norm (norms below 1e-12 are clamped).
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (n, c) = matrix_dims("l2_normalize_rows", self)?;
        let eps = T::lit(1e-12);
        let norms: Vec<T> = self
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let data: Vec<T> = self
            .data()
            .chunks(c)
            .zip(&norms)
            .flat_map(|(r, &nrm)| r.iter().map(move |&v| v / nrm))
            .collect();
        let y = data.clone();
        Tensor::from_op(
            "l2_normalize_rows",
            data,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * c];
                for r in 0..n {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_raw<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..len {
                m = m.max(x[base + a * inner]);
            }
            let mut s = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - m).exp();
                out[base + a * inner] = e;
                s += e;
            }
            for a in 0..len {
                out[base + a * inner] /= s;
            }
        }
    }
    out
}
