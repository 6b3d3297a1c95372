use rand::{Rng, RngCore};

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{numel, Result, Scalar, Tensor, TensorError};
use crate::par;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Parameter(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// `(outer, extent, inner)` view of a shape around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if !(t > F::zero()) || !t.is_finite() {
        return Err(TensorError::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // Innermost axis handled as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    loop {
        for j in 0..run {
            out.push(data[offset + j * run_stride]);
        }
        // advance odometer over axes [0, last)
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn map_unary<F: Scalar>(x: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    x.iter().map(|&v| f(v)).collect()
}

impl<F: Scalar> Tensor<F> {
    fn binary_check(&self, other: &Tensor<F>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_check(other, "add")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op("add", data, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_check(other, "sub")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op("sub", data, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(map_unary(g, |v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_check(other, "mul")?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("mul", data, self.shape().to_vec(), &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let bd = b.data();
                g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()
            });
            let gb = need[1].then(|| {
                let ad = a.data();
                g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        let data = map_unary(&self.data(), |v| v * s);
        Tensor::from_op("scale", data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(map_unary(g, |v| v * s))]
        })
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let data = map_unary(&self.data(), |v| v + s);
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Adds a `[n]` vector along the last axis.
    pub fn add_bias(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let n = *self.shape().last().unwrap();
        if bias.shape() != [n] {
            return Err(shape_err("add_bias", self.shape(), bias.shape()));
        }
        let data = {
            let (x, b) = (self.data(), bias.data());
            x.chunks(n)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &c)| v + c))
                .collect()
        };
        Ok(Tensor::from_op("add_bias", data, self.shape().to_vec(), &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![F::zero(); n];
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        }))
    }

    /// Repeats size-1 axes to reach `shape` (same rank).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let src = self.shape().to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1)
            || shape.contains(&0)
        {
            return Err(shape_err("broadcast_to", &src, shape));
        }
        let src_strides: Vec<usize> = strides(&src)
            .iter()
            .zip(&src)
            .map(|(&st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let out_shape = shape.to_vec();
        let index_map = broadcast_index(&out_shape, &src_strides);
        let data = {
            let x = self.data();
            index_map.iter().map(|&i| x[i]).collect()
        };
        let n_src = self.numel();
        Ok(Tensor::from_op("broadcast_to", data, out_shape, &[self], move |g, _| {
            let mut acc = vec![F::zero(); n_src];
            for (&i, &v) in index_map.iter().zip(g) {
                acc[i] = acc[i] + v;
            }
            vec![Some(acc)]
        }))
    }

    pub fn exp(&self) -> Tensor<F> {
        let data = map_unary(&self.data(), |v| v.exp());
        let y = data.clone();
        Tensor::from_op("exp", data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().zip(&y).map(|(&g, &y)| g * y).collect())]
        })
    }

    pub fn log(&self) -> Tensor<F> {
        let data = map_unary(&self.data(), |v| v.ln());
        let x = self.clone();
        Tensor::from_op("log", data, self.shape().to_vec(), &[self], move |g, _| {
            let xd = x.data();
            vec![Some(g.iter().zip(xd.iter()).map(|(&g, &x)| g / x).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<F> {
        let data = map_unary(&self.data(), |v| if v > F::zero() { v } else { F::zero() });
        let x = self.clone();
        Tensor::from_op("relu", data, self.shape().to_vec(), &[self], move |g, _| {
            let xd = x.data();
            vec![Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect(),
            )]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        let data = map_unary(&self.data(), |x| {
            half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
        });
        let x = self.clone();
        Tensor::from_op("gelu", data, self.shape().to_vec(), &[self], move |g, _| {
            let xd = x.data();
            vec![Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(&g, &x)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let d = half * (F::one() + th)
                            + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x);
                        g * d
                    })
                    .collect(),
            )]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, false);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", out, vec![m, n], &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![F::zero(); m * k];
                gemm(m, n, k, g, false, &b.data(), true, &mut d, false);
                d
            });
            let gb = need[1].then(|| {
                let mut d = vec![F::zero(); k * n];
                gemm(k, m, n, &a.data(), true, g, false, &mut d, false);
                d
            });
            vec![ga, gb]
        }))
    }

    /// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            let (ad, bd) = (&ad[..], &bd[..]);
            par::for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(m, k, n, &ad[i * m * k..], false, &bd[i * k * n..], false, c, false)
            });
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("bmm", out, vec![bs, m, n], &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let bd = b.data();
                let bd = &bd[..];
                let mut d = vec![F::zero(); bs * m * k];
                par::for_each_chunk_mut(&mut d, m * k, |i, c| {
                    gemm(m, n, k, &g[i * m * n..], false, &bd[i * k * n..], true, c, false)
                });
                d
            });
            let gb = need[1].then(|| {
                let ad = a.data();
                let ad = &ad[..];
                let mut d = vec![F::zero(); bs * k * n];
                par::for_each_chunk_mut(&mut d, k * n, |i, c| {
                    gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, c, false)
                });
                d
            });
            vec![ga, gb]
        }))
    }

    /// Batched `[b, m, k] x [b, n, k]^T -> [b, m, n]`.
    pub fn bmm_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![F::zero(); bs * m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            let (ad, bd) = (&ad[..], &bd[..]);
            par::for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(m, k, n, &ad[i * m * k..], false, &bd[i * n * k..], true, c, false)
            });
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("bmm_nt", out, vec![bs, m, n], &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let bd = b.data();
                let bd = &bd[..];
                let mut d = vec![F::zero(); bs * m * k];
                par::for_each_chunk_mut(&mut d, m * k, |i, c| {
                    gemm(m, n, k, &g[i * m * n..], false, &bd[i * n * k..], false, c, false)
                });
                d
            });
            let gb = need[1].then(|| {
                let ad = a.data();
                let ad = &ad[..];
                let mut d = vec![F::zero(); bs * n * k];
                par::for_each_chunk_mut(&mut d, n * k, |i, c| {
                    gemm(n, m, k, &g[i * m * n..], true, &ad[i * m * k..], false, c, false)
                });
                d
            });
            vec![ga, gb]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Parameter(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let shape = self.shape().to_vec();
        let data = permute_data(&self.data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let back_shape = out_shape.clone();
        Ok(Tensor::from_op("permute", data, out_shape, &[self], move |g, _| {
            vec![Some(permute_data(g, &back_shape, &inverse))]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<F>> {
        check_axis("transpose", self.shape(), a.max(b))?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        if len == 0 || start + len > n {
            return Err(TensorError::Parameter(format!(
                "narrow: range {start}..{} exceeds extent {n}",
                start + len
            )));
        }
        let data = {
            let x = self.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            out
        };
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op("narrow", data, shape, &[self], move |g, _| {
            let mut d = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                d[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Parameter("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = axis_layout(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &e) in views.iter().zip(&extents) {
                    data.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", data, shape, parts, move |g, need| {
            let mut grads: Vec<Vec<F>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &e) in grads.iter_mut().zip(&extents) {
                    gp.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(need)
                .map(|(g, &n)| n.then_some(g))
                .collect()
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<F> {
        let s = self.data().iter().copied().sum::<F>();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![1], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel();
        let s = self.data().iter().copied().sum::<F>() / F::from_f64(n as f64);
        Tensor::from_op("mean", vec![s], vec![1], &[self], move |g, _| {
            vec![Some(vec![g[0] / F::from_f64(n as f64); n])]
        })
    }

    /// Sums out `axis`, removing it (rank-1 results keep shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let mut out = vec![F::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for j in 0..n {
                    let row = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, &v)| *a = *a + v);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op("sum_axis", out, shape, &[self], move |g, _| {
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(d)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(F::one() / F::from_f64(n as f64)))
    }

    /// `exp(x_i / T) / sum_j exp(x_j / T)` along `axis`, max-shifted.
    pub fn softmax(&self, axis: usize, temperature: F) -> Result<Tensor<F>> {
        check_axis("softmax", self.shape(), axis)?;
        check_temperature(temperature)?;
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let mut y = vec![F::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut m = F::neg_infinity();
                    for j in 0..n {
                        m = m.max(x[at(j)] / temperature);
                    }
                    let mut s = F::zero();
                    for j in 0..n {
                        let e = (x[at(j)] / temperature - m).exp();
                        y[at(j)] = e;
                        s = s + e;
                    }
                    for j in 0..n {
                        y[at(j)] = y[at(j)] / s;
                    }
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op("softmax", y, self.shape().to_vec(), &[self], move |g, _| {
            let mut d = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: F = (0..n).map(|j| g[at(j)] * saved[at(j)]).sum();
                    for j in 0..n {
                        d[at(j)] = saved[at(j)] * (g[at(j)] - dot) / temperature;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// `x_i / T - logsumexp_j(x_j / T)` along `axis`.
    pub fn log_softmax(&self, axis: usize, temperature: F) -> Result<Tensor<F>> {
        check_axis("log_softmax", self.shape(), axis)?;
        check_temperature(temperature)?;
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let mut y = vec![F::zero(); self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut m = F::neg_infinity();
                    for j in 0..n {
                        m = m.max(x[at(j)] / temperature);
                    }
                    let s: F = (0..n).map(|j| (x[at(j)] / temperature - m).exp()).sum();
                    let lse = m + s.ln();
                    for j in 0..n {
                        y[at(j)] = x[at(j)] / temperature - lse;
                    }
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op("log_softmax", y, self.shape().to_vec(), &[self], move |g, _| {
            let mut d = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let gs: F = (0..n).map(|j| g[at(j)]).sum();
                    for j in 0..n {
                        d[at(j)] = (g[at(j)] - saved[at(j)].exp() * gs) / temperature;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of shape `[n]`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let n = *self.shape().last().unwrap();
        if gamma.shape() != [n] {
            return Err(shape_err("layer_norm", self.shape(), gamma.shape()));
        }
        if beta.shape() != [n] {
            return Err(shape_err("layer_norm", self.shape(), beta.shape()));
        }
        let rows = self.numel() / n;
        let nf = F::from_f64(n as f64);
        let mut xhat = vec![F::zero(); self.numel()];
        let mut rstd = vec![F::zero(); rows];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mu = row.iter().copied().sum::<F>() / nf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / nf;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = (v - mu) * rs;
                }
            }
        }
        let y: Vec<F> = {
            let (gd, bd) = (gamma.data(), beta.data());
            xhat.chunks(n)
                .flat_map(|row| {
                    row.iter()
                        .zip(gd.iter().zip(bd.iter()))
                        .map(|(&h, (&g, &b))| h * g + b)
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let gamma_c = gamma.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            y,
            self.shape().to_vec(),
            &[self, gamma, beta],
            move |g, need| {
                let gd = gamma_c.data();
                let gx = need[0].then(|| {
                    let mut d = vec![F::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            d[r * n + j] = rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    d
                });
                let gg = need[1].then(|| {
                    let mut d = vec![F::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                    d
                });
                let gb = need[2].then(|| {
                    let mut d = vec![F::zero(); n];
                    for gr in g.chunks(n) {
                        d.iter_mut().zip(gr).for_each(|(a, &v)| *a = *a + v);
                    }
                    d
                });
                vec![gx, gg, gb]
            },
        ))
    }

    /// 2-D convolution of `[B, C, H, W]` by `[O, C, kh, kw]` with zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<F>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(TensorError::Parameter("conv2d: stride must be positive".into()));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", sx, sw));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(shape_err("conv2d bias", sw, bias.shape()));
            }
        }
        let g = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (ckk, hw) = (g.col_rows(), g.col_cols());
        let img = c * h * w;
        let mut out = vec![F::zero(); b * o * hw];
        {
            let (xd, wd) = (self.data(), weight.data());
            let (xd, wd) = (&xd[..], &wd[..]);
            let bd = bias.map(|t| t.data());
            let bd = bd.as_ref().map(|v| &v[..]);
            par::for_each_chunk_mut(&mut out, o * hw, |i, dst| {
                let mut cols = vec![F::zero(); ckk * hw];
                im2col(&xd[i * img..(i + 1) * img], &g, &mut cols);
                gemm(o, ckk, hw, wd, false, &cols, false, dst, false);
                if let Some(bd) = bd {
                    for (ch, plane) in dst.chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bd[ch]);
                    }
                }
            });
        }
        let (x, wt) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        if let Some(bias) = bias {
            inputs.push(bias);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("conv2d", out, vec![b, o, g.out_h, g.out_w], &inputs, move |grad, need| {
            let (xd, wd) = (x.data(), wt.data());
            let (xd, wd) = (&xd[..], &wd[..]);
            let per_image: Vec<(Option<Vec<F>>, Option<Vec<F>>)> = par::map_collect(b, |i| {
                let gi = &grad[i * o * hw..(i + 1) * o * hw];
                let dw = need[1].then(|| {
                    let mut cols = vec![F::zero(); ckk * hw];
                    im2col(&xd[i * img..(i + 1) * img], &g, &mut cols);
                    let mut dw = vec![F::zero(); o * ckk];
                    gemm(o, hw, ckk, gi, false, &cols, true, &mut dw, false);
                    dw
                });
                let dx = need[0].then(|| {
                    let mut dcols = vec![F::zero(); ckk * hw];
                    gemm(ckk, o, hw, wd, true, gi, false, &mut dcols, false);
                    let mut dx = vec![F::zero(); img];
                    col2im(&dcols, &g, &mut dx);
                    dx
                });
                (dw, dx)
            });
            let mut gx = need[0].then(|| Vec::with_capacity(b * img));
            let mut gw = need[1].then(|| vec![F::zero(); o * ckk]);
            for (dw, dx) in per_image {
                if let (Some(acc), Some(dw)) = (gw.as_mut(), dw) {
                    acc.iter_mut().zip(&dw).for_each(|(a, &v)| *a = *a + v);
                }
                if let (Some(acc), Some(dx)) = (gx.as_mut(), dx) {
                    acc.extend_from_slice(&dx);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut gb = vec![F::zero(); o];
                    for i in 0..b {
                        for (ch, plane) in grad[i * o * hw..(i + 1) * o * hw].chunks(hw).enumerate() {
                            gb[ch] = gb[ch] + plane.iter().copied().sum::<F>();
                        }
                    }
                    gb
                }));
            }
            grads
        }))
    }

    fn pool_geom(&self, op: &'static str, kernel: usize, stride: usize) -> Result<[usize; 6]> {
        let s = self.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(TensorError::Parameter(format!(
                "{op}: kernel {kernel} stride {stride} invalid for shape {s:?}"
            )));
        }
        let oh = (s[2] - kernel) / stride + 1;
        let ow = (s[3] - kernel) / stride + 1;
        Ok([s[0] * s[1], s[2], s[3], oh, ow, 0])
    }

    /// Max pooling over `[B, C, H, W]`, no padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor<F>> {
        let [planes, h, w, oh, ow, _] = self.pool_geom("max_pool2d", kernel, stride)?;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        {
            let x = self.data();
            for p in 0..planes {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * stride * w + ox * stride;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        arg.push(best);
                    }
                }
            }
        }
        let n_in = self.numel();
        let s = self.shape();
        let shape = vec![s[0], s[1], oh, ow];
        Ok(Tensor::from_op("max_pool2d", out, shape, &[self], move |g, _| {
            let mut d = vec![F::zero(); n_in];
            for (&i, &v) in arg.iter().zip(g) {
                d[i] = d[i] + v;
            }
            vec![Some(d)]
        }))
    }

    /// Average pooling over `[B, C, H, W]`, no padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor<F>> {
        let [planes, h, w, oh, ow, _] = self.pool_geom("avg_pool2d", kernel, stride)?;
        let inv = F::one() / F::from_f64((kernel * kernel) as f64);
        let mut out = Vec::with_capacity(planes * oh * ow);
        {
            let x = self.data();
            for p in 0..planes {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = F::zero();
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                s = s + x[base + (oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
        let n_in = self.numel();
        let s = self.shape();
        let shape = vec![s[0], s[1], oh, ow];
        Ok(Tensor::from_op("avg_pool2d", out, shape, &[self], move |g, _| {
            let mut d = vec![F::zero(); n_in];
            for p in 0..planes {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = g[(p * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                d[idx] = d[idx] + v;
                            }
                        }
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Inverted dropout: in training, zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`. Outside training it returns
    /// `self` unchanged and draws nothing from `rng`.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut dyn RngCore) -> Result<Tensor<F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Tensor::from_op("dropout", data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
        }))
    }
}

/// Flat source index for every element of `out_shape`, given source strides
/// with zeros on broadcast axes.
fn broadcast_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
