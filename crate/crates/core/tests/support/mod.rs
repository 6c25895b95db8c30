//! Straight-line scalar re-implementation of the gated video block, used as
//! an oracle for `gvb_forward`. It shares no code with the tensor engine.

#![allow(dead_code)]

use tyrppg::model::{GvbParams, LN_EPS};

pub struct Dims {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x` is channel-first `[C, T, H, W]`. `fold` channels are shifted from
/// `t-1` and the next `fold` from `t+1` before the norm; the residual adds
/// the unshifted input.
pub fn gvb_oracle(x: &[f64], d: &Dims, p: &GvbParams, fold: usize, literal_concat: bool) -> Vec<f64> {
    let (c, t_n, h, w) = (d.c, d.t, d.h, d.w);
    let s_n = t_n * h * w;
    let at = |ch: usize, t: usize, y: usize, xx: usize| x[ch * s_n + (t * h + y) * w + xx];

    let gamma = p.norm_gamma.data();
    let beta = p.norm_beta.data();
    let (wg, bg) = (p.proj_g.data(), p.proj_g_bias.data());
    let (wi, bi) = (p.proj_i.data(), p.proj_i_bias.data());
    let (wc, bc) = (p.proj_c.data(), p.proj_c_bias.data());
    let (k, kb) = (p.conv.data(), p.conv_bias.data());
    let (wo, bo) = (p.proj_out.data(), p.proj_out_bias.data());
    let dh = bg.len();
    let dc = bc.len();
    let di = dh - dc;

    // Per position: shift, normalize, project.
    let mut xg = vec![0.0; dh * s_n];
    let mut xi = vec![0.0; di * s_n];
    let mut xc = vec![0.0; dc * s_n];
    for t in 0..t_n {
        for y in 0..h {
            for xx in 0..w {
                let s = (t * h + y) * w + xx;
                let mut z = vec![0.0; c];
                for ch in 0..c {
                    z[ch] = if ch < fold {
                        if t == 0 {
                            0.0
                        } else {
                            at(ch, t - 1, y, xx)
                        }
                    } else if ch < 2 * fold {
                        if t + 1 == t_n {
                            0.0
                        } else {
                            at(ch, t + 1, y, xx)
                        }
                    } else {
                        at(ch, t, y, xx)
                    };
                }
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += z[ch];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    var += (z[ch] - mean) * (z[ch] - mean);
                }
                let inv = 1.0 / (var / c as f64 + LN_EPS).sqrt();
                let mut xn = vec![0.0; c];
                for ch in 0..c {
                    let mut v = (z[ch] - mean) * inv;
                    v *= gamma[ch];
                    v += beta[ch];
                    xn[ch] = v;
                }
                for o in 0..dh {
                    let mut acc = bg[o];
                    for q in 0..c {
                        acc += wg[o * c + q] * xn[q];
                    }
                    xg[o * s_n + s] = acc;
                }
                for o in 0..di {
                    let mut acc = bi[o];
                    for q in 0..c {
                        acc += wi[o * c + q] * xn[q];
                    }
                    xi[o * s_n + s] = acc;
                }
                for o in 0..dc {
                    let mut acc = bc[o];
                    for q in 0..c {
                        acc += wc[o * c + q] * xn[q];
                    }
                    xc[o * s_n + s] = acc;
                }
            }
        }
    }

    // 3x3x3 same-padded convolution of x_c.
    let mut xc2 = vec![0.0; dc * s_n];
    if literal_concat {
        xc2.copy_from_slice(&xc);
    } else {
        for o in 0..dc {
            for t in 0..t_n {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = kb[o];
                        for ci in 0..dc {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for e in 0..3 {
                                        let (tt, yy, xs) =
                                            (t as isize + a as isize - 1, y as isize + b as isize - 1, xx as isize + e as isize - 1);
                                        let inside = tt >= 0
                                            && tt < t_n as isize
                                            && yy >= 0
                                            && yy < h as isize
                                            && xs >= 0
                                            && xs < w as isize;
                                        let v = if inside {
                                            xc[ci * s_n + ((tt as usize) * h + yy as usize) * w + xs as usize]
                                        } else {
                                            0.0
                                        };
                                        acc += k[(((o * dc + ci) * 3 + a) * 3 + b) * 3 + e] * v;
                                    }
                                }
                            }
                        }
                        xc2[o * s_n + (t * h + y) * w + xx] = acc;
                    }
                }
            }
        }
    }

    // Gate, output projection, residual.
    let mut out = vec![0.0; c * s_n];
    for s in 0..s_n {
        let mut gated = vec![0.0; dh];
        for j in 0..dh {
            let xo = if j < di { xi[j * s_n + s] } else { xc2[(j - di) * s_n + s] };
            gated[j] = sigmoid(xg[j * s_n + s]) * xo;
        }
        for o in 0..c {
            let mut acc = bo[o];
            for j in 0..dh {
                acc += wo[o * dh + j] * gated[j];
            }
            out[o * s_n + s] = acc + x[o * s_n + s];
        }
    }
    out
}
