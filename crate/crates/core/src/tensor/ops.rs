//! Elementwise, reduction, normalization and shape ops.

use super::{numel, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Leading(usize),
    Scalar,
}

fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if !lhs.is_empty() && &lhs[1..] == rhs {
        Ok(Broadcast::Leading(numel(rhs)))
    } else if numel(rhs) == 1 {
        Ok(Broadcast::Scalar)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

impl Broadcast {
    /// `h(a[i], b[j(i)])` for every `i`, with a tight loop per pattern.
    #[inline]
    fn map(self, a: &[f64], b: &[f64], h: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| h(x, y)).collect(),
            Broadcast::Leading(n) => {
                let mut out = Vec::with_capacity(a.len());
                for row in a.chunks(n) {
                    out.extend(row.iter().zip(b).map(|(&x, &y)| h(x, y)));
                }
                out
            }
            Broadcast::Scalar => a.iter().map(|&x| h(x, b[0])).collect(),
        }
    }

    /// Like [`Broadcast::map`] with a third operand aligned with `a`.
    #[inline]
    fn map_with(self, g: &[f64], a: &[f64], b: &[f64], h: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        match self {
            Broadcast::Same => g.iter().zip(a).zip(b).map(|((&gi, &x), &y)| h(gi, x, y)).collect(),
            Broadcast::Leading(n) => {
                let mut out = Vec::with_capacity(a.len());
                for (grow, arow) in g.chunks(n).zip(a.chunks(n)) {
                    out.extend(grow.iter().zip(arow).zip(b).map(|((&gi, &x), &y)| h(gi, x, y)));
                }
                out
            }
            Broadcast::Scalar => g.iter().zip(a).map(|(&gi, &x)| h(gi, x, b[0])).collect(),
        }
    }

    /// Sums `h(g[i], a[i], b[j(i)])` into slot `j(i)`, visiting `i` in order.
    #[inline]
    fn reduce_into(self, g: &[f64], a: &[f64], b: &[f64], h: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        match self {
            Broadcast::Same => g.iter().zip(a).zip(b).map(|((&gi, &x), &y)| h(gi, x, y)).collect(),
            Broadcast::Leading(n) => {
                let mut acc = vec![0.0; n];
                for (grow, arow) in g.chunks(n).zip(a.chunks(n)) {
                    for (((s, &gi), &x), &y) in acc.iter_mut().zip(grow).zip(arow).zip(b) {
                        *s += h(gi, x, y);
                    }
                }
                acc
            }
            Broadcast::Scalar => {
                let mut s = 0.0;
                for (&gi, &x) in g.iter().zip(a) {
                    s += h(gi, x, b[0]);
                }
                vec![s]
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Binary op with local partials `da(a, b)` and `db(a, b)`.
fn binary<F, DA, DB>(op: &'static str, a: &Tensor, b: &Tensor, f: F, da: DA, db: DB) -> Result<Tensor>
where
    F: Fn(f64, f64) -> f64,
    DA: Fn(f64, f64) -> f64 + 'static,
    DB: Fn(f64, f64) -> f64 + 'static,
{
    let bc = broadcast(op, a.shape(), b.shape())?;
    let out = bc.map(a.data(), b.data(), f);
    let (ac, bcl) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), out, &[a, b], move |g, needs| {
        let (ad, bd) = (ac.data(), bcl.data());
        let ga = needs[0].then(|| bc.map_with(g, ad, bd, |gi, x, y| gi * da(x, y)));
        let gb = needs[1].then(|| bc.reduce_into(g, ad, bd, |gi, x, y| gi * db(x, y)));
        vec![ga, gb]
    }))
}

/// Unary op whose derivative is expressed through input and output values.
fn unary(a: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let saved_out = if a.requires_grad() { out.clone() } else { Vec::new() };
    let ac = a.clone();
    Tensor::from_op(a.shape().to_vec(), out, &[a], move |g, _| {
        let x = ac.data();
        vec![Some(
            g.iter()
                .zip(x.iter().zip(&saved_out))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect(),
        )]
    })
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("add", self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("sub", self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("mul", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary("div", self, rhs, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            vec![Some(g.iter().map(|&gi| gi * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    /// `max(x, floor)` elementwise; the gradient passes where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let out = self.data().iter().map(|&x| x.max(floor)).collect();
        let ac = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(ac.data())
                    .map(|(&gi, &x)| if x > floor { gi } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// Largest element as a scalar; the gradient goes to the first maximiser.
    pub fn max_all(&self) -> Tensor {
        let (arg, best) = self
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, av), (i, &v)| if v > av { (i, v) } else { (ai, av) });
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![best], &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            gx[arg] = g[0];
            vec![Some(gx)]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![s], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums out `axes` (removed from the shape).
    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(axes, false)
    }

    /// Averages out `axes` (removed from the shape).
    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(axes, true)
    }

    fn reduce(&self, axes: &[usize], average: bool) -> Result<Tensor> {
        let shape = self.shape();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            check_axis("reduce", shape, a)?;
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&s, _)| s).product();

        // Map each input index to its output slot by walking a mixed-radix counter.
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for ax in (0..shape.len()).rev() {
            if !reduced[ax] {
                out_strides[ax] = stride;
                stride *= shape[ax];
            }
        }
        let mut map = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..self.numel() {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum::<usize>());
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }

        let scale = if average { 1.0 / count.max(1) as f64 } else { 1.0 };
        let mut out = vec![0.0; numel(&out_shape)];
        for (&x, &m) in self.data().iter().zip(&map) {
            out[m] += x;
        }
        if average {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            vec![Some(map.iter().map(|&m| g[m] * scale).collect())]
        }))
    }

    /// Mean over the two trailing (spatial) axes.
    pub fn avg_pool_spatial(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid(format!("avg_pool_spatial needs rank >= 2, got {:?}", self.shape())));
        }
        let plane = self.shape()[r - 2] * self.shape()[r - 1];
        let out: Vec<f64> = self
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(Tensor::from_op(self.shape()[..r - 2].to_vec(), out, &[self], move |g, _| {
            let inv = 1.0 / plane as f64;
            vec![Some(g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, plane)).collect())]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("permute: {axes:?} is not a permutation of rank {}", shape.len())));
        }
        let mut in_strides = vec![1usize; shape.len()];
        for ax in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            src.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let out = src.iter().map(|&s| self.data()[s]).collect();
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (&gi, &s) in g.iter().zip(&src) {
                gx[s] = gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        check_axis("concat", first.shape(), axis)?;
        for x in xs {
            let same_rank = x.rank() == first.rank();
            let same_rest = same_rank
                && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &len) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(Tensor::from_op(out_shape, out, xs, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&sizes)
                .map(|(&need, &len)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gx, &len) in grads.iter_mut().zip(&sizes) {
                    let block = len * inner;
                    if let Some(gx) = gx {
                        gx.extend_from_slice(&g[pos..pos + block]);
                    }
                    pos += block;
                }
            }
            grads
        }))
    }

    /// Splits along `axis` into consecutive pieces of the given extents.
    pub fn split(&self, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
        check_axis("split", self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(invalid(format!(
                "split: sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut start = 0;
        let mut pieces = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut shape = self.shape().to_vec();
            shape[axis] = size;
            let mut out = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                out.extend_from_slice(&self.data()[base..base + size * inner]);
            }
            let n = self.numel();
            let offset = start;
            pieces.push(Tensor::from_op(shape, out, &[self], move |g, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * len + offset) * inner;
                    gx[base..base + size * inner].copy_from_slice(&g[o * size * inner..(o + 1) * size * inner]);
                }
                vec![Some(gx)]
            }));
            start += size;
        }
        Ok(pieces)
    }

    /// Moves values `offset` steps forward along `axis`:
    /// `out[.., i, ..] = x[.., i - offset, ..]`, zero where the source is out of range.
    pub fn shift(&self, axis: usize, offset: isize) -> Result<Tensor> {
        check_axis("shift", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let move_block = move |src: &[f64], dst: &mut [f64], off: isize| {
            for o in 0..outer {
                for i in 0..len {
                    let s = i as isize - off;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    let (d0, s0) = ((o * len + i) * inner, (o * len + s as usize) * inner);
                    dst[d0..d0 + inner].copy_from_slice(&src[s0..s0 + inner]);
                }
            }
        };
        let mut out = vec![0.0; self.numel()];
        move_block(self.data(), &mut out, offset);
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            move_block(g, &mut gx, -offset);
            vec![Some(gx)]
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| self.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (self.data()[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `x - logsumexp(x)` along `axis`, computed with the max shift.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| self.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|k| (self.data()[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = (self.data()[at(k)] - m) - lse;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let gsum: f64 = (0..len).map(|k| g[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Standardizes along `axis` (biased variance), then applies the optional
    /// per-position affine `gamma`, `beta` of length `shape[axis]`.
    pub fn layer_norm(&self, axis: usize, eps: f64, gamma: Option<&Tensor>, beta: Option<&Tensor>) -> Result<Tensor> {
        check_axis("layer_norm", self.shape(), axis)?;
        if eps <= 0.0 || !eps.is_finite() {
            return Err(invalid(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if p.shape() != [len] {
                    return Err(Error::ShapeMismatch {
                        op: if name == "gamma" { "layer_norm(gamma)" } else { "layer_norm(beta)" },
                        lhs: vec![len],
                        rhs: p.shape().to_vec(),
                    });
                }
            }
        }
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let lenf = len as f64;
        for o in 0..outer {
            let block = &x[o * len * inner..(o + 1) * len * inner];
            let mut mean = vec![0.0; inner];
            for row in block.chunks(inner) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= lenf);
            let mut var = vec![0.0; inner];
            for row in block.chunks(inner) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let r = &mut inv_std[o * inner..(o + 1) * inner];
            for (ri, &s) in r.iter_mut().zip(&var) {
                *ri = 1.0 / (s / lenf + eps).sqrt();
            }
            let xh = &mut xhat[o * len * inner..(o + 1) * len * inner];
            for (xrow, row) in xh.chunks_mut(inner).zip(block.chunks(inner)) {
                for (((xv, &v), &m), &ri) in xrow.iter_mut().zip(row).zip(&mean).zip(r.iter()) {
                    *xv = (v - m) * ri;
                }
            }
        }
        let gdata = gamma.map(|g| g.to_vec());
        let bdata = beta.map(|b| b.to_vec());
        let mut out = xhat.clone();
        for (idx, row) in out.chunks_mut(inner).enumerate() {
            let k = idx % len;
            if let Some(g) = &gdata {
                row.iter_mut().for_each(|v| *v *= g[k]);
            }
            if let Some(b) = &bdata {
                row.iter_mut().for_each(|v| *v += b[k]);
            }
        }

        let mut parents: Vec<&Tensor> = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_gamma, has_beta) = (gamma.is_some(), beta.is_some());
        Ok(Tensor::from_op(self.shape().to_vec(), out, &parents, move |g, needs| {
            let mut dgamma = vec![0.0; len];
            let mut dbeta = vec![0.0; len];
            let mut gx = vec![0.0; g.len()];
            let mut dxhat = vec![0.0; g.len()];
            for (idx, (drow, grow)) in dxhat.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                let k = idx % len;
                let gm = gdata.as_ref().map_or(1.0, |gm| gm[k]);
                for ((d, &gi), &xh) in drow.iter_mut().zip(grow).zip(&xhat[idx * inner..(idx + 1) * inner]) {
                    *d = gi * gm;
                    dgamma[k] += gi * xh;
                    dbeta[k] += gi;
                }
            }
            let lenf = len as f64;
            for o in 0..outer {
                let span = o * len * inner..(o + 1) * len * inner;
                let (dblock, xblock) = (&dxhat[span.clone()], &xhat[span.clone()]);
                let mut m1 = vec![0.0; inner];
                let mut m2 = vec![0.0; inner];
                for (drow, xrow) in dblock.chunks(inner).zip(xblock.chunks(inner)) {
                    for (((a, b), &d), &xh) in m1.iter_mut().zip(m2.iter_mut()).zip(drow).zip(xrow) {
                        *a += d;
                        *b += d * xh;
                    }
                }
                let r = &inv_std[o * inner..(o + 1) * inner];
                for ((grow, drow), xrow) in gx[span].chunks_mut(inner).zip(dblock.chunks(inner)).zip(xblock.chunks(inner)) {
                    for i in 0..inner {
                        grow[i] = r[i] * (drow[i] - m1[i] / lenf - xrow[i] * (m2[i] / lenf));
                    }
                }
            }
            let mut grads = vec![needs[0].then_some(gx)];
            let mut slot = 1;
            if has_gamma {
                grads.push(needs[slot].then_some(dgamma));
                slot += 1;
            }
            if has_beta {
                grads.push(needs[slot].then_some(dbeta));
            }
            grads
        }))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_two_points() {
        let y = t(&[2], &[2.0, 4.0]).layer_norm(0, 1e-5, None, None).unwrap();
        // (±1) / sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(matches!(x.layer_norm(0, 0.0, None, None), Err(Error::InvalidArgument(_))));
        assert!(matches!(x.layer_norm(0, -1.0, None, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = t(&[2, 3], &[0.0; 6]).add(&t(&[2], &[0.0; 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn leading_axis_broadcast() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 100.0, 100.0, -100.0]);
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn reductions_over_axes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.sum(&[0]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum(&[1]).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(x.mean(&[0, 1]).unwrap().data(), &[3.5]);
        assert_eq!(x.sum(&[1]).unwrap().shape(), &[2]);
    }

    #[test]
    fn shift_zero_fills() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.shift(0, 1).unwrap().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.shift(0, -1).unwrap().data(), &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_matches_transpose() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let parts = c.split(&[1, 2], 1).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }
}
