//! Matrix products, the channel-mixing linear map and same-padded 3D convolution.

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Column block width for the streaming kernels; keeps the touched rows of
/// `b` and `c` cache-resident without changing any summation order.
const NB: usize = 256;

/// `c[m,n] += a[m,k] · b[k,n]`, each output summed over `k` in order.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_rows(m, k, n, |i, p| a[i * k + p], b, c);
}

/// Shared kernel: `c[i, :] += Σ_p coef(i, p) · b[p, :]`, four rows of `c`
/// at a time, columns in cache-sized blocks.
#[inline(always)]
fn gemm_rows(m: usize, k: usize, n: usize, coef: impl Fn(usize, usize) -> f64, b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        let w = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let (r0, rest) = c[i * n..].split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, rest) = rest.split_at_mut(n);
            let r3 = &mut rest[..n];
            let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (coef(i, p), coef(i + 1, p), coef(i + 2, p), coef(i + 3, p));
                let brow = &b[p * n + j0..p * n + j1];
                for j in 0..w {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let aip = coef(i, p);
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
            i += 1;
        }
    }
}

/// `c[m,n] += aᵀ · b` with `a` stored as `[k,m]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_rows(m, k, n, |i, p| a[p * m + i], b, c);
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m,n] += a · bᵀ` with `b` stored as `[n,k]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

impl Tensor {
    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(), rhs.data(), &mut out);
        let (ac, bc) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(vec![m, n], out, &[self, rhs], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt(m, n, k, g, bc.data(), &mut ga);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn(k, m, n, ac.data(), g, &mut gb);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Channel-mixing affine map over the leading axis:
    /// `x: [in, ...] , weight: [out, in], bias: [out] → [out, ...]`.
    /// Trailing axes are carried through unchanged, so on a `[C, T, H, W]`
    /// feature map this is a pointwise (1×1×1) projection.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let ws = weight.shape();
        if self.rank() == 0 || ws.len() != 2 || ws[1] != self.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if b.shape() != [n_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear(bias)",
                    lhs: vec![n_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let positions = self.numel() / n_in;
        let mut out = vec![0.0; n_out * positions];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(positions).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm_nn(n_out, n_in, positions, weight.data(), self.data(), &mut out);
        let mut shape = self.shape().to_vec();
        shape[0] = n_out;

        let (xc, wc) = (self.clone(), weight.clone());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(Tensor::from_op(shape, out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n_in * positions];
                gemm_tn(n_in, n_out, positions, wc.data(), g, &mut gx);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; n_out * n_in];
                gemm_nt(n_out, positions, n_in, g, xc.data(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| g.chunks(positions).map(|r| r.iter().sum()).collect()));
            }
            grads
        }))
    }

    /// Stride-1 3D convolution with "same" zero padding.
    ///
    /// `x: [C_in, D, H, W]` or `[N, C_in, D, H, W]`,
    /// `kernel: [C_out, C_in, kd, kh, kw]` with odd kernel extents,
    /// `bias: [C_out]`. Output keeps the spatial extents of the input.
    pub fn conv3d(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let geom = ConvGeometry::new(self.shape(), kernel.shape())?;
        if let Some(b) = bias {
            if b.shape() != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d(bias)",
                    lhs: vec![geom.c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let ConvGeometry { batch, c_in, c_out, .. } = geom;
        let vol = geom.volume();
        let rows = c_in * geom.taps();
        let mut out = vec![0.0; batch * c_out * vol];
        let mut cols = vec![0.0; rows * vol];
        for n in 0..batch {
            let x = &self.data()[n * c_in * vol..(n + 1) * c_in * vol];
            geom.im2col(x, &mut cols);
            let y = &mut out[n * c_out * vol..(n + 1) * c_out * vol];
            if let Some(b) = bias {
                for (row, &bv) in y.chunks_mut(vol).zip(b.data()) {
                    row.fill(bv);
                }
            }
            gemm_nn(c_out, rows, vol, kernel.data(), &cols, y);
        }
        let mut shape = self.shape().to_vec();
        let ch_axis = shape.len() - 4;
        shape[ch_axis] = c_out;

        let (xc, kc) = (self.clone(), kernel.clone());
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(Tensor::from_op(shape, out, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; xc.numel()]);
            let mut gk = needs[1].then(|| vec![0.0; kc.numel()]);
            let mut cols = vec![0.0; rows * vol];
            let mut dcols = vec![0.0; rows * vol];
            for n in 0..batch {
                let gn = &g[n * c_out * vol..(n + 1) * c_out * vol];
                if let Some(gk) = gk.as_mut() {
                    geom.im2col(&xc.data()[n * c_in * vol..(n + 1) * c_in * vol], &mut cols);
                    gemm_nt(c_out, vol, rows, gn, &cols, gk);
                }
                if let Some(gx) = gx.as_mut() {
                    dcols.fill(0.0);
                    gemm_tn(rows, c_out, vol, kc.data(), gn, &mut dcols);
                    geom.col2im(&dcols, &mut gx[n * c_in * vol..(n + 1) * c_in * vol]);
                }
            }
            let mut grads = vec![gx, gk];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; c_out];
                    for n in 0..batch {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            let base = (n * c_out + o) * vol;
                            *gbo += g[base..base + vol].iter().sum::<f64>();
                        }
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        };
        let (batch, xs) = match x.len() {
            4 => (1, x),
            5 => (x[0], &x[1..]),
            _ => return Err(mismatch()),
        };
        if k.len() != 5 || k[1] != xs[0] {
            return Err(mismatch());
        }
        if k[2..].iter().any(|&e| e % 2 == 0) {
            return Err(invalid(format!("conv3d: kernel extents must be odd for same padding, got {k:?}")));
        }
        Ok(ConvGeometry {
            batch,
            c_in: xs[0],
            c_out: k[0],
            d: xs[1],
            h: xs[2],
            w: xs[3],
            kd: k[2],
            kh: k[3],
            kw: k[4],
        })
    }

    fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    /// Visits every (column row, destination run, source run) triple that
    /// lies inside the padded input.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (d, h, w) = (self.d as isize, self.h as isize, self.w as isize);
        let (pd, ph, pw) = ((self.kd / 2) as isize, (self.kh / 2) as isize, (self.kw / 2) as isize);
        let vol = self.volume();
        for ci in 0..self.c_in {
            for a in 0..self.kd {
                for b in 0..self.kh {
                    for c in 0..self.kw {
                        let row = ((ci * self.kd + a) * self.kh + b) * self.kw + c;
                        let (dz, dy, dx) = (a as isize - pd, b as isize - ph, c as isize - pw);
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let run = (x1 - x0) as usize;
                        for z in 0..d {
                            let sz = z + dz;
                            if sz < 0 || sz >= d {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 0 || sy >= h {
                                    continue;
                                }
                                let dst = row * vol + ((z * h + y) * w + x0) as usize;
                                let src = ci * vol + ((sz * h + sy) * w + x0 + dx) as usize;
                                f(row, dst, src, run);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_run(|_, dst, src, run| cols[dst..dst + run].copy_from_slice(&x[src..src + run]));
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        self.for_each_run(|_, dst, src, run| {
            for (xv, &cv) in x[src..src + run].iter_mut().zip(&cols[dst..dst + run]) {
                *xv += cv;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(b.matmul(&a).is_err());
    }

    #[test]
    fn linear_on_vector_and_feature_map() {
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_slice(&[0.5, -0.5]);
        let v = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(v.linear(&w, Some(&b)).unwrap().data(), &[1.5, 4.5]);

        // [3, 2] feature map: two positions
        let x = Tensor::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let y = x.linear(&w, None).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0, 10.0, 5.0, 50.0]);
    }

    #[test]
    fn conv3d_all_ones_center_and_corner() {
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = x.conv3d(&k, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv3d_rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3, 3]);
        assert!(x.conv3d(&Tensor::zeros(&[1, 2, 2, 3, 3]), None).is_err());
        assert!(x.conv3d(&Tensor::zeros(&[1, 3, 3, 3, 3]), None).is_err());
    }
}
