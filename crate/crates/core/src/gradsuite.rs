//! Finite-difference verification of every differentiable op, every loss
//! and the full network, over many random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::losses::{
    cross_entropy_loss, csl, kl_tensor, mmd2_tensor, pearson_loss, video_mmd_loss, wsl, Divergence, KernelConfig,
    LossMode, LossTerms, LossWeights, SpectralLossConfig, SpectralProjector, TargetMode,
};
use crate::model::{
    attention_mask, forward, gvb_forward, prepare_input, BlockOptions, GvbParams, ModelConfig, TsmConfig,
    TyrppgParams,
};
use crate::signal::HrBinGrid;
use crate::tensor::{grad_check, no_grad, Tensor};
use crate::train::{synth_clip, SynthConfig};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 100;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Parameters probed per full-network instance.
pub const NETWORK_PROBES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Op,
    Loss,
    Network,
}

impl CaseKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CaseKind::Op | CaseKind::Loss => OP_TOLERANCE,
            CaseKind::Network => NETWORK_TOLERANCE,
        }
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<f64>;

struct Case {
    name: &'static str,
    kind: CaseKind,
    run: CaseFn,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub seeds: usize,
    /// Largest error over all seeds.
    pub worst: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed_s: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed).collect()
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<8} {:>6} {:>11} {:>9}  result\n", "case", "kind", "seeds", "worst", "tol");
        for c in &self.cases {
            s += &format!(
                "{:<28} {:<8} {:>6} {:>11.3e} {:>9.0e}  {}\n",
                c.name,
                format!("{:?}", c.kind).to_lowercase(),
                c.seeds,
                c.worst,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs every case whose name contains `filter` (all when `None`) on seeds
/// `0..seeds`. A case fails when any seed errors or exceeds its tolerance.
pub fn run_suite(seeds: usize, filter: Option<&str>) -> Result<SuiteReport> {
    if seeds == 0 {
        return Err(invalid("gradient suite needs at least one seed"));
    }
    let start = Instant::now();
    let mut cases = Vec::new();
    for (index, case) in CASES.iter().enumerate() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let tolerance = case.kind.tolerance();
        let (mut worst, mut worst_seed, mut failed) = (0.0f64, 0, false);
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let err = match (case.run)(&mut rng) {
                Ok(e) if e.is_finite() => e,
                _ => {
                    failed = true;
                    f64::INFINITY
                }
            };
            if seed == 0 || err > worst {
                worst = err;
                worst_seed = seed;
            }
        }
        cases.push(CaseResult {
            name: case.name.to_string(),
            kind: case.kind,
            seeds,
            worst,
            worst_seed,
            tolerance,
            passed: !failed && worst < tolerance,
        });
    }
    if cases.is_empty() {
        return Err(invalid(format!("no gradient case matches {filter:?}")));
    }
    Ok(SuiteReport {
        cases,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values bounded away from zero, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("sized")
}

/// Scalar probe `Σ y ⊙ r` with a fixed random `r`, so every output
/// coordinate contributes with its own weight.
fn probe(y: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(y.mul(r)?.sum_all())
}

/// Checks `x ↦ Σ op(x) ⊙ r` for a random `r` shaped like the output.
fn check_op(x: &Tensor, rng: &mut ChaCha8Rng, op: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let shape = no_grad(|| op(x))?.shape().to_vec();
    let r = normal(rng, &shape);
    grad_check(|x| probe(&op(x)?, &r), x, FD_STEP)
}

fn small_gvb(rng: &mut ChaCha8Rng) -> Result<GvbParams> {
    let mut p = GvbParams::random(4, 6, 2, rng.random())?;
    // Non-trivial affine and biases so every path carries gradient.
    p.norm_gamma = uniform(rng, &[4], 0.5, 1.5);
    p.norm_beta = normal(rng, &[4]).scale(0.1);
    p.proj_g_bias = normal(rng, &[6]).scale(0.1);
    p.conv_bias = normal(rng, &[2]).scale(0.1);
    p.proj_out_bias = normal(rng, &[4]).scale(0.1);
    Ok(p)
}

fn spectral(rng: &mut ChaCha8Rng, cfg: SpectralLossConfig) -> Result<(SpectralProjector, Tensor, Tensor)> {
    let len = 24;
    let fs = 30.0;
    let proj = SpectralProjector::new(len, fs, HrBinGrid::default(), cfg)?;
    let bpm: f64 = rng.random_range(50.0..150.0);
    let phase: f64 = rng.random_range(0.0..6.0);
    let gt: Vec<f64> = (0..len)
        .map(|t| (2.0 * std::f64::consts::PI * bpm / 60.0 * t as f64 / fs + phase).sin() + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let pred = normal(rng, &[len]);
    Ok((proj, Tensor::from_slice(&gt), pred))
}

/// `x` holds `[bvp (T) | logits (K)]`; returns every term of the objective.
fn split_terms(x: &Tensor, gt: &Tensor, bin: usize, proj: &SpectralProjector) -> Result<LossTerms> {
    let t = gt.numel();
    let parts = x.split(&[t, x.numel() - t], 0)?;
    Ok(LossTerms {
        c: Some(cross_entropy_loss(&parts[1], bin)?),
        p: Some(pearson_loss(&parts[0], gt)?),
        w: Some(video_mmd_loss(&parts[0], gt, proj)?),
    })
}

fn objective_input(rng: &mut ChaCha8Rng) -> Result<(SpectralProjector, Tensor, Tensor, usize)> {
    let (proj, gt, pred) = spectral(rng, SpectralLossConfig::default())?;
    let k = proj.grid.len();
    let logits = normal(rng, &[k]);
    let bin = rng.random_range(0..k);
    Ok((proj, gt, Tensor::concat(&[&pred, &logits], 0)?, bin))
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        alpha: rng.random_range(0.1..2.0),
        beta: rng.random_range(0.1..2.0),
        gamma: rng.random_range(0.1..2.0),
    }
}

fn mode_case(rng: &mut ChaCha8Rng, mode: LossMode) -> Result<f64> {
    let (proj, gt, x, bin) = objective_input(rng)?;
    let w = random_weights(rng);
    grad_check(|x| mode.combine(&split_terms(x, &gt, bin, &proj)?, &w), &x, FD_STEP)
}

/// CSL through the whole network on a tiny clip, probing
/// [`NETWORK_PROBES`] random parameter coordinates.
fn network_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        channels: 4,
        hidden: 6,
        conv_channels: 2,
        depth: 2,
        stem_hw: (3, 3),
        tsm: TsmConfig {
            learnable_taps: rng.random_bool(0.5),
            ..TsmConfig::default()
        },
        head_init_scale: 1.0,
        ..ModelConfig::default()
    };
    let synth = SynthConfig {
        n_clips: 1,
        frames: 13,
        height: 6,
        width: 6,
        fs: 30.0,
        pulse_amplitude: 0.2,
        seed: rng.random(),
        ..SynthConfig::default()
    };
    let clip = synth_clip(&synth, 0)?;
    let input = prepare_input(&clip, &cfg, None)?;
    let gt = Tensor::from_slice(&clip.gt_bvp_diff().ok_or_else(|| invalid("synthetic clip without BVP"))?);
    let bin = cfg.grid.bin_of(clip.gt_hr_bpm.unwrap_or(90.0));
    let proj = SpectralProjector::new(gt.numel(), clip.fs, cfg.grid, SpectralLossConfig::default())?;
    let weights = LossWeights::default();
    let mut params = TyrppgParams::init(&cfg, rng.random())?;
    // Move taps and norms off their identity initialisation.
    let mut values: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.to_vec()).collect();
    for v in values.iter_mut() {
        for x in v.iter_mut() {
            *x += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    params.load_values(&values)?;

    let objective = |p: &TyrppgParams| -> Result<Tensor> {
        let out = forward(&input, p)?;
        csl(
            &cross_entropy_loss(&out.logits, bin)?,
            &pearson_loss(&out.bvp, &gt)?,
            &video_mmd_loss(&out.bvp, &gt, &proj)?,
            &weights,
        )
    };
    let loss = objective(&params)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let sizes: Vec<usize> = values.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut probe_params = params.deep_clone();
    let mut eval = |vals: &[Vec<f64>]| -> Result<f64> {
        probe_params.load_values(vals)?;
        no_grad(|| objective(&probe_params)).map(|t| t.item())
    };
    let mut worst = 0.0f64;
    for _ in 0..NETWORK_PROBES {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let mut vals = values.clone();
        vals[ti][flat] = values[ti][flat] + FD_STEP;
        let fp = eval(&vals)?;
        vals[ti][flat] = values[ti][flat] - FD_STEP;
        let fm = eval(&vals)?;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = grads[ti][flat];
        if !(numeric.is_finite() && a.is_finite()) {
            return Err(Error::NonFinite(format!("network gradient at tensor {ti}, index {flat}")));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

macro_rules! case {
    ($name:expr, $kind:ident, $f:expr) => {
        Case {
            name: $name,
            kind: CaseKind::$kind,
            run: $f,
        }
    };
}

static CASES: &[Case] = &[
    case!("add", Op, |r| {
        let b = normal(r, &[3, 4]);
        check_op(&normal(r, &[3, 4]), r, |x| x.add(&b))
    }),
    case!("add.broadcast_rhs", Op, |r| {
        let a = normal(r, &[3, 4]);
        check_op(&normal(r, &[4]), r, |x| a.add(x))
    }),
    case!("sub", Op, |r| {
        let b = normal(r, &[3, 4]);
        check_op(&normal(r, &[3, 4]), r, |x| x.sub(&b))
    }),
    case!("sub.scalar_rhs", Op, |r| {
        let a = normal(r, &[5]);
        check_op(&normal(r, &[]), r, |x| a.sub(x))
    }),
    case!("mul", Op, |r| {
        let b = normal(r, &[3, 4]);
        check_op(&normal(r, &[3, 4]), r, |x| x.mul(&b))
    }),
    case!("mul.broadcast_rhs", Op, |r| {
        let a = normal(r, &[2, 3, 4]);
        check_op(&normal(r, &[3, 4]), r, |x| a.mul(x))
    }),
    case!("div", Op, |r| {
        let b = away_from_zero(r, &[3, 4]);
        check_op(&normal(r, &[3, 4]), r, |x| x.div(&b))
    }),
    case!("div.rhs", Op, |r| {
        let a = normal(r, &[3, 4]);
        check_op(&away_from_zero(r, &[4]), r, |x| a.div(x))
    }),
    case!("scale", Op, |r| {
        let c = r.random_range(-3.0..3.0);
        check_op(&normal(r, &[6]), r, |x| Ok(x.scale(c)))
    }),
    case!("add_scalar", Op, |r| check_op(&normal(r, &[6]), r, |x| Ok(x.add_scalar(0.7)))),
    case!("neg", Op, |r| check_op(&normal(r, &[6]), r, |x| Ok(x.neg()))),
    case!("sigmoid", Op, |r| {
        let x = normal(r, &[8]).scale(4.0);
        check_op(&x, r, |x| Ok(x.sigmoid()))
    }),
    case!("tanh", Op, |r| {
        let x = normal(r, &[8]).scale(2.0);
        check_op(&x, r, |x| Ok(x.tanh()))
    }),
    case!("exp", Op, |r| check_op(&normal(r, &[8]), r, |x| Ok(x.exp()))),
    case!("ln", Op, |r| check_op(&uniform(r, &[8], 0.5, 3.0), r, |x| Ok(x.ln()))),
    case!("sqrt", Op, |r| check_op(&uniform(r, &[8], 0.5, 3.0), r, |x| Ok(x.sqrt()))),
    case!("clamp_min", Op, |r| check_op(&away_from_zero(r, &[8]), r, |x| Ok(x.clamp_min(0.0)))),
    case!("max_all", Op, |r| {
        // Distinct values, so a step of FD_STEP never changes the maximiser.
        let mut v: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 + r.random_range(0.0..0.01)).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, r.random_range(0..=i));
        }
        check_op(&Tensor::from_slice(&v), r, |x| Ok(x.max_all()))
    }),
    case!("sum_all", Op, |r| check_op(&normal(r, &[2, 3]), r, |x| Ok(x.sum_all()))),
    case!("mean_all", Op, |r| check_op(&normal(r, &[2, 3]), r, |x| Ok(x.mean_all()))),
    case!("sum", Op, |r| check_op(&normal(r, &[2, 3, 4]), r, |x| x.sum(&[0, 2]))),
    case!("mean", Op, |r| check_op(&normal(r, &[2, 3, 4]), r, |x| x.mean(&[1]))),
    case!("avg_pool_spatial", Op, |r| check_op(&normal(r, &[2, 3, 3, 2]), r, |x| x.avg_pool_spatial())),
    case!("reshape", Op, |r| check_op(&normal(r, &[2, 6]), r, |x| x.reshape(&[3, 4]))),
    case!("permute", Op, |r| check_op(&normal(r, &[2, 3, 4]), r, |x| x.permute(&[2, 0, 1]))),
    case!("concat", Op, |r| {
        let b = normal(r, &[2, 3]);
        check_op(&normal(r, &[2, 2]), r, |x| Tensor::concat(&[&b, x, &b], 1))
    }),
    case!("split", Op, |r| {
        let w = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        check_op(&normal(r, &[6, 2]), r, |x| {
            let p = x.split(&[1, 3, 2], 0)?;
            Ok(p[0].sum_all().scale(w[0]).add(&p[1].sum_all().scale(w[1]))?.add(&p[2].mul(&p[2])?.sum_all().scale(w[2]))?)
        })
    }),
    case!("shift", Op, |r| {
        let off = if r.random_bool(0.5) { 1 } else { -2 };
        check_op(&normal(r, &[2, 5, 3]), r, |x| x.shift(1, off))
    }),
    case!("softmax", Op, |r| check_op(&normal(r, &[3, 5]).scale(2.0), r, |x| x.softmax(1))),
    case!("log_softmax", Op, |r| check_op(&normal(r, &[5, 3]).scale(2.0), r, |x| x.log_softmax(0))),
    case!("layer_norm.x", Op, |r| {
        let (g, b) = (uniform(r, &[4], 0.5, 1.5), normal(r, &[4]));
        check_op(&normal(r, &[4, 2, 3]), r, |x| x.layer_norm(0, 1e-5, Some(&g), Some(&b)))
    }),
    case!("layer_norm.gamma", Op, |r| {
        let (x, b) = (normal(r, &[3, 4, 2]), normal(r, &[4]));
        check_op(&uniform(r, &[4], 0.5, 1.5), r, |g| x.layer_norm(1, 1e-5, Some(g), Some(&b)))
    }),
    case!("layer_norm.beta", Op, |r| {
        let (x, g) = (normal(r, &[4, 2, 3]), uniform(r, &[4], 0.5, 1.5));
        check_op(&normal(r, &[4]), r, |b| x.layer_norm(0, 1e-5, Some(&g), Some(b)))
    }),
    case!("matmul.lhs", Op, |r| {
        let b = normal(r, &[4, 5]);
        check_op(&normal(r, &[3, 4]), r, |x| x.matmul(&b))
    }),
    case!("matmul.rhs", Op, |r| {
        let a = normal(r, &[3, 4]);
        check_op(&normal(r, &[4, 5]), r, |x| a.matmul(x))
    }),
    case!("linear.x", Op, |r| {
        let (w, b) = (normal(r, &[3, 4]), normal(r, &[3]));
        check_op(&normal(r, &[4, 2, 3]), r, |x| x.linear(&w, Some(&b)))
    }),
    case!("linear.weight", Op, |r| {
        let (x, b) = (normal(r, &[4, 2, 3]), normal(r, &[3]));
        check_op(&normal(r, &[3, 4]), r, |w| x.linear(w, Some(&b)))
    }),
    case!("linear.bias", Op, |r| {
        let (x, w) = (normal(r, &[4, 2, 3]), normal(r, &[3, 4]));
        check_op(&normal(r, &[3]), r, |b| x.linear(&w, Some(b)))
    }),
    case!("conv3d.x", Op, |r| {
        let (k, b) = (normal(r, &[2, 2, 3, 3, 3]), normal(r, &[2]));
        check_op(&normal(r, &[2, 3, 3, 4]), r, |x| x.conv3d(&k, Some(&b)))
    }),
    case!("conv3d.kernel", Op, |r| {
        let (x, b) = (normal(r, &[2, 3, 3, 4]), normal(r, &[2]));
        check_op(&normal(r, &[2, 2, 3, 3, 3]), r, |k| x.conv3d(k, Some(&b)))
    }),
    case!("conv3d.bias", Op, |r| {
        let (x, k) = (normal(r, &[2, 3, 3, 4]), normal(r, &[2, 2, 3, 3, 3]));
        check_op(&normal(r, &[2]), r, |b| x.conv3d(&k, Some(b)))
    }),
    case!("attention_mask", Op, |r| check_op(&normal(r, &[3, 1, 2, 3]).scale(2.0), r, |x| {
        attention_mask(x, (16, 24))
    })),
    case!("tsm_shift.x", Op, |r| {
        let taps = normal(r, &[3]);
        let cfg = TsmConfig::default();
        check_op(&normal(r, &[8, 4, 2, 2]), r, |x| crate::model::tsm_shift(x, &cfg, Some(&taps)))
    }),
    case!("tsm_shift.taps", Op, |r| {
        let x = normal(r, &[8, 4, 2, 2]);
        let cfg = TsmConfig::default();
        check_op(&normal(r, &[3]), r, |t| crate::model::tsm_shift(&x, &cfg, Some(t)))
    }),
    case!("gvb_forward.x", Op, |r| {
        let p = small_gvb(r)?;
        let opts = BlockOptions {
            tsm: Some(TsmConfig {
                shift_fraction: 0.25,
                ..TsmConfig::default()
            }),
            literal_concat: false,
        };
        check_op(&normal(r, &[4, 3, 2, 3]), r, |x| gvb_forward(x, &p, &opts))
    }),
    case!("gvb_forward.conv", Op, |r| {
        let p = small_gvb(r)?;
        let x = normal(r, &[4, 3, 2, 3]);
        let k0 = p.conv.clone();
        check_op(&k0, r, |k| {
            let mut q = p.clone();
            q.conv = k.clone();
            gvb_forward(&x, &q, &BlockOptions::default())
        })
    }),
    case!("gvb_forward.proj_g", Op, |r| {
        let p = small_gvb(r)?;
        let x = normal(r, &[4, 3, 2, 3]);
        let w0 = p.proj_g.clone();
        check_op(&w0, r, |w| {
            let mut q = p.clone();
            q.proj_g = w.clone();
            gvb_forward(&x, &q, &BlockOptions::default())
        })
    }),
    case!("mmd2_tensor", Loss, |r| {
        let k = 12;
        let grid = HrBinGrid::new(40.0, 40.0 + k as f64, 1.0)?;
        let gram = Tensor::new(&[k, k], KernelConfig::default().gram(&grid))?;
        let p = uniform(r, &[k], 0.0, 1.0);
        let p = p.div(&p.sum_all())?;
        let q = uniform(r, &[k], 0.0, 1.0);
        grad_check(|q| mmd2_tensor(&p, q, &gram), &q, FD_STEP)
    }),
    case!("kl_tensor", Loss, |r| {
        let p = uniform(r, &[10], 0.0, 1.0);
        let p = p.div(&p.sum_all())?;
        grad_check(|q| kl_tensor(&p, &q.softmax(0)?), &normal(r, &[10]), FD_STEP)
    }),
    case!("band_power", Loss, |r| {
        let (proj, _, pred) = spectral(r, SpectralLossConfig::default())?;
        let scale = 1.0 / no_grad(|| proj.band_power(&pred))?.data().iter().cloned().fold(0.0, f64::max);
        check_op(&pred, r, |x| Ok(proj.band_power(x)?.scale(scale)))
    }),
    case!("soft_distribution", Loss, |r| {
        let (proj, _, pred) = spectral(r, SpectralLossConfig::default())?;
        check_op(&pred, r, |x| proj.soft_distribution(x))
    }),
    case!("loss_c", Loss, |r| {
        let bin = r.random_range(0..140);
        grad_check(|x| cross_entropy_loss(x, bin), &normal(r, &[140]).scale(3.0), FD_STEP)
    }),
    case!("loss_p", Loss, |r| {
        let gt = normal(r, &[20]);
        grad_check(|x| pearson_loss(x, &gt), &normal(r, &[20]), FD_STEP)
    }),
    case!("loss_w", Loss, |r| {
        let (proj, gt, pred) = spectral(r, SpectralLossConfig::default())?;
        grad_check(|x| video_mmd_loss(x, &gt, &proj), &pred, FD_STEP)
    }),
    case!("loss_w.hard_target", Loss, |r| {
        let cfg = SpectralLossConfig {
            target: TargetMode::Hard,
            ..SpectralLossConfig::default()
        };
        let (proj, gt, pred) = spectral(r, cfg)?;
        grad_check(|x| video_mmd_loss(x, &gt, &proj), &pred, FD_STEP)
    }),
    case!("loss_w.sqrt", Loss, |r| {
        let cfg = SpectralLossConfig {
            sqrt: true,
            ..SpectralLossConfig::default()
        };
        let (proj, gt, pred) = spectral(r, cfg)?;
        grad_check(|x| video_mmd_loss(x, &gt, &proj), &pred, FD_STEP)
    }),
    case!("loss_w.kl", Loss, |r| {
        let cfg = SpectralLossConfig {
            divergence: Divergence::Kl,
            ..SpectralLossConfig::default()
        };
        let (proj, gt, pred) = spectral(r, cfg)?;
        grad_check(|x| video_mmd_loss(x, &gt, &proj), &pred, FD_STEP)
    }),
    case!("csl", Loss, |r| {
        let (proj, gt, x, bin) = objective_input(r)?;
        let w = random_weights(r);
        grad_check(
            |x| {
                let t = split_terms(x, &gt, bin, &proj)?;
                csl(t.c.as_ref().expect("c"), t.p.as_ref().expect("p"), t.w.as_ref().expect("w"), &w)
            },
            &x,
            FD_STEP,
        )
    }),
    case!("wsl", Loss, |r| {
        let (proj, gt, x, bin) = objective_input(r)?;
        let w = random_weights(r);
        grad_check(
            |x| {
                let t = split_terms(x, &gt, bin, &proj)?;
                wsl(t.p.as_ref().expect("p"), t.w.as_ref().expect("w"), &w)
            },
            &x,
            FD_STEP,
        )
    }),
    case!("loss_mode.c+p", Loss, |r| mode_case(r, LossMode::CP)),
    case!("loss_mode.c+w", Loss, |r| mode_case(r, LossMode::CW)),
    case!("loss_mode.p+w", Loss, |r| mode_case(r, LossMode::PW)),
    case!("network.csl", Network, network_case),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names = case_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        let report = run_suite(3, None).unwrap();
        assert!(report.all_passed(), "\n{}", report.table());
    }

    #[test]
    fn filter_selects_and_rejects() {
        let r = run_suite(1, Some("layer_norm")).unwrap();
        assert_eq!(r.cases.len(), 3);
        assert!(run_suite(1, Some("no-such-case")).is_err());
        assert!(run_suite(0, None).is_err());
    }
}
