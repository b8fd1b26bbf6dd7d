use super::{numel, shape_err, Tensor};
use crate::error::{contract, Result};

/// C = A·B (+ beta·C) where A is m×k and B is k×n, either optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the m×k, k×n and m×n extents addressed
    // by the strides above.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(contract(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let (da, db) = back(a[i], b[i], g[i]);
                    ga.push(da);
                    gb.push(db);
                }
                vec![
                    p[0].requires_grad().then_some(ga),
                    p[1].requires_grad().then_some(gb),
                ]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Elementwise map with derivative expressed through input `x` and output `y`.
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, p, y| {
                let x = p[0].data();
                vec![Some((0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect())]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// ln(1 + eˣ), evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// Gradient passes only where the input lies strictly inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn l1_norm(&self) -> Tensor {
        self.abs().sum()
    }

    pub fn l2_norm(&self) -> Tensor {
        self.square().sum().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(contract(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Sum over `axis`, removing it (a rank-1 input collapses to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        let mean = self.mean_axis(axis)?;
        let centered = self.sub(&mean.expand_axis(axis, self.shape()[axis])?)?;
        centered.square().mean_axis(axis)
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the values.
    /// Inverse of [`Tensor::sum_axis`] in shape.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        let mut base = self.shape().to_vec();
        if base == [1] && axis == 0 {
            base.clear();
        }
        if axis > base.len() || n == 0 {
            return Err(contract(format!(
                "expand_axis: axis {axis} invalid for shape {:?}",
                self.shape()
            )));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, n);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let src = &g[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, s) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Numpy-style broadcast to `shape` (right-aligned; size-1 axes repeat).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let src = self.shape();
        if src.len() > shape.len() {
            return Err(crate::Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let offset = shape.len() - src.len();
        let src_strides = strides(src);
        let mut eff = vec![0usize; shape.len()];
        for (i, &e) in src.iter().enumerate() {
            let target = shape[offset + i];
            if e == target {
                eff[offset + i] = src_strides[i];
            } else if e != 1 {
                return Err(crate::Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src.to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let total = numel(shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..total {
            index.push(counter.iter().zip(&eff).map(|(c, s)| c * s).sum::<usize>());
            for d in (0..shape.len()).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let x = self.data();
        let out = index.iter().map(|&i| x[i]).collect();
        let n_src = self.numel();
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n_src];
                for (gi, &si) in g.iter().zip(&index) {
                    gx[si] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Multiplies a `[C, ...]` tensor by a per-channel `[C]` vector.
    pub fn mul_channels(&self, v: &Tensor) -> Result<Tensor> {
        self.mul(&v.channel_broadcast(self)?)
    }

    /// Adds a per-channel `[C]` vector to a `[C, ...]` tensor.
    pub fn add_channels(&self, v: &Tensor) -> Result<Tensor> {
        self.add(&v.channel_broadcast(self)?)
    }

    fn channel_broadcast(&self, like: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 1 || like.shape()[0] != self.shape()[0] {
            return Err(shape_err("channel broadcast", like, self));
        }
        let mut view = vec![self.shape()[0]];
        view.extend(std::iter::repeat(1).take(like.shape().len() - 1));
        self.reshape(&view)?.broadcast_to(like.shape())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = *self.shape() else {
            return Err(contract(format!("transpose expects rank 2, got {:?}", self.shape())));
        };
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(shape_err("matmul", self, other));
        };
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, 0.0, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, p[1].data(), true, 0.0, &mut ga);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, p[0].data(), true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Fully-connected map `x·Wᵀ + b` for `x` of shape `[in]` or `[B, in]`,
    /// `W` of shape `[out, in]` and `b` of shape `[out]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, vector) = match *self.shape() {
            [_] => (1, true),
            [b, _] => (b, false),
            _ => return Err(shape_err("linear", self, weight)),
        };
        let inp = *self.shape().last().unwrap();
        let &[out_f, in_w] = weight.shape() else {
            return Err(shape_err("linear", self, weight));
        };
        if in_w != inp {
            return Err(shape_err("linear", self, weight));
        }
        if bias.shape() != [out_f] {
            return Err(shape_err("linear bias", weight, bias));
        }
        let mut out = Vec::with_capacity(rows * out_f);
        for _ in 0..rows {
            out.extend_from_slice(bias.data());
        }
        gemm(rows, inp, out_f, self.data(), false, weight.data(), true, 1.0, &mut out);
        let shape = if vector { vec![out_f] } else { vec![rows, out_f] };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, p, _| {
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![0.0; rows * inp];
                    gemm(rows, out_f, inp, g, false, p[1].data(), false, 0.0, &mut gx);
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![0.0; out_f * inp];
                    gemm(out_f, rows, inp, g, true, p[0].data(), false, 0.0, &mut gw);
                    gw
                });
                let gb = p[2].requires_grad().then(|| {
                    let mut gb = vec![0.0; out_f];
                    for r in 0..rows {
                        for (b, v) in gb.iter_mut().zip(&g[r * out_f..(r + 1) * out_f]) {
                            *b += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of an empty list"))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.shape().len() == first.shape().len()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first, p));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(p.len());
                for (t, &w) in p.iter().zip(&widths) {
                    if t.requires_grad() {
                        let mut gt = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * row + offset;
                            gt.extend_from_slice(&g[start..start + w]);
                        }
                        grads.push(Some(gt));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let views = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&views, 0)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(contract(format!(
                "narrow: range {start}..{} outside axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax of `x / temperature` along `axis` with max-subtraction.
    pub fn softmax(&self, axis: usize, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(contract(format!("softmax temperature must be > 0, got {temperature}")));
        }
        check_axis("softmax", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..n {
                    let e = ((x[at(a)] - max) / temperature).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    out[at(a)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..n {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot) / temperature;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise L2 normalisation of a `[B, d]` (or `[d]`) tensor:
    /// `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let axis = self.shape().len() - 1;
        let n = self.shape()[axis];
        let norm = self.square().sum_axis(axis)?.add_scalar(eps).sqrt();
        let norm = if self.shape().len() == 1 {
            norm.broadcast_to(self.shape())?
        } else {
            norm.expand_axis(axis, n)?
        };
        self.div(&norm)
    }

    /// Mean over the spatial axes of a `[C, H, W]` tensor, giving `[C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(contract(format!("global_avg_pool expects [C,H,W], got {:?}", self.shape())));
        };
        self.reshape(&[c, h * w])?.mean_axis(1)
    }

    /// 2× nearest-neighbour upsampling of `[C, H, W]`.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(contract(format!("upsample expects [C,H,W], got {:?}", self.shape())));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c, h2, w2],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2× area downsampling (2×2 mean) of `[C, H, W]` with even H and W.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(contract(format!("avg_pool2 expects [C,H,W], got {:?}", self.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract(format!("avg_pool2 needs even extents, got {:?}", self.shape())));
        }
        let (h2, w2) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(ch * h2 + y) * w2 + xx] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c, h2, w2],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = 0.25 * g[(ch * h2 + y / 2) * w2 + xx / 2];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i3 = t(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        let m = t(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[3, 3]);
        assert_eq!(i3.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn mean_and_population_variance() {
        let x = t(&[1., 2., 3., 4.], &[1, 4]);
        assert_eq!(x.mean_axis(1).unwrap().data(), &[2.5]);
        assert_eq!(x.var_axis(1).unwrap().data(), &[1.25]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = t(&[1., 2.], &[2]);
        let b = t(&[1., 2., 3.], &[3]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        let m = t(&[1.; 6], &[2, 3]);
        let msg = m.matmul(&m).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_values() {
        let p = t(&[0., 0., 0.], &[3]).softmax(0, 1.0).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = t(&[10., 0., 0.], &[3]).softmax(0, 0.07).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-10);
        // Direct evaluation: e^k / (e + e² + e³).
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let p = t(&[1., 2., 3.], &[3]).softmax(0, 1.0).unwrap();
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expect[0] - 0.09003).abs() < 1e-5);
        assert!((expect[1] - 0.24473).abs() < 1e-5);
        assert!((expect[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(t(&[1., 2.], &[2]).softmax(0, 0.0).is_err());
        assert!(t(&[1., 2.], &[2]).softmax(0, -1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = t(&[1e4, -1e4, 3e3, 9999.5], &[2, 2]);
        for axis in 0..2 {
            let p = x.softmax(axis, 1.0).unwrap();
            let sums = p.sum_axis(axis).unwrap();
            for s in sums.data() {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_log_likelihood_gradient() {
        let x0 = [0.3, -1.2, 0.8, 0.1];
        let r = grad_check(
            |x| Ok(x.softmax(0, 1.0)?.narrow(0, 2, 1)?.log().sum()),
            &x0,
            &[4],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn broadcast_and_expand_gradients_sum_back() {
        let v = Tensor::param(vec![1., 2.], &[2]).unwrap();
        let b = v.reshape(&[2, 1, 1]).unwrap().broadcast_to(&[2, 3, 4]).unwrap();
        let g = backward(&b.sum()).unwrap();
        assert_eq!(g.get(&v).unwrap(), &[12., 12.]);
        let e = v.expand_axis(1, 5).unwrap();
        assert_eq!(e.shape(), &[2, 5]);
        assert_eq!(&e.data()[..5], &[1.; 5]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[5., 6.], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert!(Tensor::concat(&[a.clone(), t(&[1.; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = t(&[1., 2., 3., 4.], &[1, 2, 2]);
        assert_eq!(x.avg_pool2().unwrap().data(), &[2.5]);
        let u = x.upsample_nearest2().unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.avg_pool2().unwrap().data(), x.data());
    }

    #[test]
    fn linear_matches_manual() {
        let x = t(&[1., 2.], &[2]);
        let w = t(&[1., 0., 0., 1., 1., 1.], &[3, 2]);
        let b = t(&[0.5, 0., -1.], &[3]);
        assert_eq!(x.linear(&w, &b).unwrap().data(), &[1.5, 2., 2.]);
    }

    #[test]
    fn softplus_is_finite_for_large_magnitudes() {
        let y = t(&[-800., 0., 800.], &[3]).softplus();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }
}
