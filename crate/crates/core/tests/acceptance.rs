//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Positional arguments filter criteria by substring of their
//! label, e.g. `cargo test --test acceptance -- signal`.

mod support;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tyrppg::gradsuite::{self, CaseKind};
use tyrppg::losses::{
    cross_entropy_loss, csl, kl_divergence, mmd2, pearson_loss, video_mmd_loss, wsl, KernelConfig, LossMode, LossWeights,
    SpectralLossConfig, SpectralProjector,
};
use tyrppg::model::{attention_mask, gvb_forward, BlockOptions, GvbParams, ModelConfig, TsmConfig};
use tyrppg::signal::{estimate_hr, periodogram, HrBinGrid, HrDistribution};
use tyrppg::tensor::Tensor;
use tyrppg::train::{ablation_with, synth_dataset, SynthConfig, TrainConfig};

use support::{gvb_oracle, Dims};

type Check = tyrppg::Result<(bool, String)>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_block(rng: &mut ChaCha8Rng, c: usize, dh: usize, dc: usize) -> GvbParams {
    let mut p = GvbParams::random(c, dh, dc, rng.random()).unwrap();
    p.norm_gamma = random_tensor(rng, &[c], 1.0).add_scalar(1.0);
    p.norm_beta = random_tensor(rng, &[c], 0.5);
    p.proj_g_bias = random_tensor(rng, &[dh], 0.5);
    p.proj_i_bias = random_tensor(rng, &[dh - dc], 0.5);
    p.proj_c_bias = random_tensor(rng, &[dc], 0.5);
    p.conv_bias = random_tensor(rng, &[dc], 0.5);
    p.proj_out_bias = random_tensor(rng, &[c], 0.5);
    p
}

fn gradient_suite() -> Check {
    let r = gradsuite::run_suite(gradsuite::DEFAULT_SEEDS, None)?;
    let worst = |k: CaseKind| r.cases.iter().filter(|c| c.kind == k).map(|c| c.worst).fold(0.0, f64::max);
    let failures: Vec<String> = r.failures().iter().map(|c| format!("{} ({:.2e})", c.name, c.worst)).collect();
    let fast = r.elapsed_s < 120.0;
    Ok((
        r.all_passed() && fast,
        format!(
            "{} cases x {} seeds in {:.1}s; worst op {:.2e}, loss {:.2e}, network {:.2e}{}",
            r.cases.len(),
            gradsuite::DEFAULT_SEEDS,
            r.elapsed_s,
            worst(CaseKind::Op),
            worst(CaseKind::Loss),
            worst(CaseKind::Network),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    ))
}

fn gvb_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Dims { c: 8, t: 4, h: 6, w: 6 };
    let mut mismatched = 0;
    let mut elements = 0;
    for instance in 0..50 {
        let p = random_block(&mut rng, d.c, 16, 4);
        let x = random_tensor(&mut rng, &[d.c, d.t, d.h, d.w], 2.0);
        // Alternate the in-block shift on and off.
        let tsm = (instance % 2 == 1).then(TsmConfig::default);
        let opts = BlockOptions { tsm, literal_concat: false };
        let fold = tsm.map_or(0, |c| c.fold(d.c));
        let got = gvb_forward(&x, &p, &opts)?;
        let want = gvb_oracle(x.data(), &d, &p, fold, false);
        elements += want.len();
        mismatched += got.data().iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    Ok((mismatched == 0, format!("50 instances, {mismatched} of {elements} values differ in any bit")))
}

fn residual_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    let n = 300;
    for i in 0..n {
        let c = rng.random_range(1..12);
        let dc = rng.random_range(1..5);
        let dh = dc + rng.random_range(1..8);
        let dims = [c, rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5)];
        let mut p = random_block(&mut rng, c, dh, dc);
        p.proj_out = Tensor::zeros(&[c, dh]);
        p.proj_out_bias = Tensor::zeros(&[c]);
        // Magnitudes spread over 200 decades.
        let len: usize = dims.iter().product();
        let vals: Vec<f64> = (0..len)
            .map(|_| {
                let m = 10f64.powf(rng.random_range(-100.0..100.0));
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = Tensor::new(&dims, vals)?;
        let opts = BlockOptions {
            tsm: (i % 3 != 0).then_some(TsmConfig {
                shift_fraction: [0.125, 0.25, 0.5][i % 3],
                ..TsmConfig::default()
            }),
            literal_concat: i % 5 == 0,
        };
        let y = gvb_forward(&x, &p, &opts)?;
        if y.data() != x.data() {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{n} random blocks and inputs, {bad} not exactly the identity")))
}

fn mask_norm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (t, h, w) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let frame = (rng.random_range(8..200), rng.random_range(8..200));
        let scale = 10f64.powf(rng.random_range(-2.0..1.7));
        let logits = random_tensor(&mut rng, &[t, 1, h, w], scale);
        let m = attention_mask(&logits, frame)?;
        let want = (frame.0 as f64 / 8.0) * (frame.1 as f64 / 8.0) / 2.0;
        for f in m.data().chunks(h * w) {
            let l1: f64 = f.iter().map(|v| v.abs()).sum();
            worst = worst.max((l1 - want).abs());
        }
    }
    Ok((worst <= 1e-10, format!("500 masks, worst |L1 - (H/8)(W/8)/2| = {worst:.2e}")))
}

fn signal_chain() -> Check {
    let grid = HrBinGrid::default();
    let (fs, n) = (30.0, 300);
    let mut worst = 0.0f64;
    for bpm in (40..=180).step_by(5) {
        let f = bpm as f64 / 60.0;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect();
        let est = estimate_hr(&periodogram(&x, fs)?, &grid)?;
        worst = worst.max((est - bpm as f64).abs());
    }
    Ok((worst <= 1.0, format!("29 tones 40..180 bpm, worst error {worst:.3} bpm")))
}

fn mmd_kl_contrast() -> Check {
    let grid = HrBinGrid::default();
    let k = KernelConfig::default();
    let n = grid.len();
    let (mut finite_kl, mut non_finite_mmd, mut non_monotone) = (0, 0, 0);
    for i in 0..n {
        let p = HrDistribution::one_hot(grid, i)?;
        // Walk away from bin i in each direction; mmd2 must not decrease.
        for dir in [1isize, -1] {
            let mut prev = 0.0;
            let mut j = i as isize + dir;
            while (0..n as isize).contains(&j) {
                let q = HrDistribution::one_hot(grid, j as usize)?;
                if kl_divergence(&p, &q)? != f64::INFINITY {
                    finite_kl += 1;
                }
                let m = mmd2(&p, &q, &k)?;
                if !m.is_finite() {
                    non_finite_mmd += 1;
                }
                if m < prev {
                    non_monotone += 1;
                }
                prev = m;
                j += dir;
            }
        }
    }
    let pairs = n * (n - 1);
    Ok((
        finite_kl == 0 && non_finite_mmd == 0 && non_monotone == 0,
        format!(
            "{pairs} ordered bin pairs: KL finite in {finite_kl}, mmd2 non-finite in {non_finite_mmd}, monotonicity breaks {non_monotone}"
        ),
    ))
}

/// Benchmark runs shared by criteria 7, 8 and 9.
struct Benchmark {
    csl_json: String,
    csl_ckpt: Vec<u8>,
    csl_heldout: tyrppg::signal::MetricsReport,
    csl_wall_s: f64,
    ablation_csv: String,
    medians: Vec<(LossMode, f64)>,
    repeat_json: String,
    repeat_ckpt: Vec<u8>,
}

fn run_benchmark() -> tyrppg::Result<Benchmark> {
    let data = synth_dataset(&SynthConfig::benchmark(), &HrBinGrid::default())?;
    let model = ModelConfig::default();
    let base = TrainConfig::default();
    let modes = [LossMode::Csl, LossMode::Wsl, LossMode::W];
    let mut first = None;
    let report = ablation_with(&data, &model, &base, &modes, &[0, 1, 2], |t, out| {
        if t.loss_mode == LossMode::Csl && t.seed == 0 {
            first = Some((out.report.to_json()?, out.checkpoint.to_bytes()?, out.report.heldout.clone(), out.report.wall_time_s));
        }
        Ok(())
    })?;
    let (csl_json, csl_ckpt, csl_heldout, csl_wall_s) = first.expect("CSL seed 0 is part of the ablation");
    let repeat = tyrppg::train::train(&data, &model, &base)?;
    let csv = report.to_csv();
    std::fs::create_dir_all(concat!(env!("CARGO_TARGET_TMPDIR"), "/acceptance"))?;
    std::fs::write(concat!(env!("CARGO_TARGET_TMPDIR"), "/acceptance/ablation.csv"), &csv)?;
    Ok(Benchmark {
        csl_json,
        csl_ckpt,
        csl_heldout,
        csl_wall_s,
        ablation_csv: csv,
        medians: report.rows.iter().map(|r| (r.mode, r.median.mae_bpm)).collect(),
        repeat_json: repeat.report.to_json()?,
        repeat_ckpt: repeat.checkpoint.to_bytes()?,
    })
}

fn end_to_end(b: &Benchmark) -> Check {
    let m = &b.csl_heldout;
    Ok((
        m.mae_bpm <= 5.0 && m.pearson_rho >= 0.7 && b.csl_wall_s <= 600.0,
        format!(
            "held-out MAE {:.3} bpm, RMSE {:.3}, rho {:.4}, {:.0}s",
            m.mae_bpm, m.rmse_bpm, m.pearson_rho, b.csl_wall_s
        ),
    ))
}

fn ablation_ordering(b: &Benchmark) -> Check {
    let get = |mode| b.medians.iter().find(|(m, _)| *m == mode).map(|(_, v)| *v).unwrap_or(f64::NAN);
    let (c, w, single) = (get(LossMode::Csl), get(LossMode::Wsl), get(LossMode::W));
    let shaped = b.ablation_csv.starts_with("loss_terms,mode,mae,rmse,rho,seeds\n") && b.ablation_csv.lines().count() == 4;
    Ok((
        c <= w && w <= single && shaped,
        format!("median MAE CSL {c:.3} <= WSL {w:.3} <= W {single:.3}; csv {} rows", b.ablation_csv.lines().count() - 1),
    ))
}

fn determinism(b: &Benchmark) -> Check {
    let same_ckpt = b.csl_ckpt == b.repeat_ckpt;
    let same_json = b.csl_json == b.repeat_json;
    Ok((
        same_ckpt && same_json,
        format!(
            "checkpoint {} bytes identical: {same_ckpt}; report {} bytes identical: {same_json}",
            b.csl_ckpt.len(),
            b.csl_json.len()
        ),
    ))
}

fn loss_algebra() -> Check {
    let cases = 2000;
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let len = 32;
    let proj = SpectralProjector::new(len, 30.0, HrBinGrid::default(), SpectralLossConfig::default())?;
    let signal = || proptest::collection::vec(-5.0f64..5.0, len);
    let mut failed = Vec::new();

    let mut runner = TestRunner::new(cfg.clone());
    let logits = proptest::collection::vec(-5.0f64..5.0, 140);
    let r = runner.run(&(signal(), signal(), logits, 0usize..140, (0.0f64..3.0, 0.0f64..3.0)), |(x, y, l, bin, (beta, gamma))| {
        let (x, y) = (Tensor::from_slice(&x), Tensor::from_slice(&y));
        let c = cross_entropy_loss(&Tensor::from_slice(&l), bin).unwrap();
        let p = pearson_loss(&x, &y).unwrap();
        let w = video_mmd_loss(&x, &y, &proj).unwrap();
        let weights = LossWeights { alpha: 0.0, beta, gamma };
        let a = csl(&c, &p, &w, &weights).unwrap().item();
        let b = wsl(&p, &w, &weights).unwrap().item();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        Ok(())
    });
    if let Err(e) = r {
        failed.push(format!("csl(alpha=0)==wsl: {e}"));
    }

    let mut runner = TestRunner::new(cfg.clone());
    let r = runner.run(&(signal(), signal(), 0.1f64..10.0, -10.0f64..10.0, any::<bool>()), |(x, y, a, b, flip)| {
        let (xt, yt) = (Tensor::from_slice(&x), Tensor::from_slice(&y));
        let base = pearson_loss(&xt, &yt).unwrap().item();
        let a = if flip { -a } else { a };
        let moved = pearson_loss(&xt.scale(a).add_scalar(b), &yt).unwrap().item();
        let want = if flip { 2.0 - base } else { base };
        prop_assert!((moved - want).abs() <= 1e-9, "{} vs {}", moved, want);
        prop_assert!((0.0..=2.0).contains(&base));
        Ok(())
    });
    if let Err(e) = r {
        failed.push(format!("pearson affine invariance: {e}"));
    }

    let grid = HrBinGrid::default();
    let pmf = || proptest::collection::vec(0.0f64..1.0, grid.len()).prop_filter("non-zero mass", |v| v.iter().sum::<f64>() > 0.0);
    let mut runner = TestRunner::new(cfg);
    let r = runner.run(&(pmf(), pmf(), 0.5f64..20.0), |(p, q, bw)| {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            HrDistribution::new(grid, v.iter().map(|x| x / s).collect()).unwrap()
        };
        let (p, q) = (norm(p), norm(q));
        let k = KernelConfig {
            bandwidth_bpm: bw,
            ..KernelConfig::default()
        };
        let pq = mmd2(&p, &q, &k).unwrap();
        let qp = mmd2(&q, &p, &k).unwrap();
        prop_assert_eq!(pq.to_bits(), qp.to_bits());
        prop_assert!(pq >= 0.0 && pq.is_finite());
        prop_assert_eq!(mmd2(&p, &p, &k).unwrap(), 0.0);
        Ok(())
    });
    if let Err(e) = r {
        failed.push(format!("mmd2 symmetry/non-negativity: {e}"));
    }

    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            format!("3 properties x {cases} cases hold")
        } else {
            failed.join("; ")
        },
    ))
}

struct Criterion {
    id: usize,
    label: &'static str,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, label: "gradient suite" },
    Criterion { id: 2, label: "gvb oracle equivalence" },
    Criterion { id: 3, label: "residual identity" },
    Criterion { id: 4, label: "attention mask norm" },
    Criterion { id: 5, label: "signal chain" },
    Criterion { id: 6, label: "mmd/kl contrast" },
    Criterion { id: 7, label: "end-to-end learning" },
    Criterion { id: 8, label: "ablation ordering" },
    Criterion { id: 9, label: "determinism" },
    Criterion { id: 10, label: "loss algebra" },
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion {:>2} {}: test", c.id, c.label);
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| {
            let name = format!("criterion {} {}", c.id, c.label);
            filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))
        })
        .collect();

    let started = Instant::now();
    let mut bench: Option<tyrppg::Result<Benchmark>> = None;
    let mut failures = 0;
    for c in &selected {
        let t = Instant::now();
        let outcome = match c.id {
            1 => gradient_suite(),
            2 => gvb_oracle_equivalence(),
            3 => residual_identity(),
            4 => mask_norm(),
            5 => signal_chain(),
            6 => mmd_kl_contrast(),
            7..=9 => {
                let b = bench.get_or_insert_with(run_benchmark);
                match b {
                    Ok(b) => match c.id {
                        7 => end_to_end(b),
                        8 => ablation_ordering(b),
                        _ => determinism(b),
                    },
                    Err(e) => Ok((false, format!("benchmark failed: {e}"))),
                }
            }
            _ => loss_algebra(),
        };
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<4} {:<24} {} [{:.1}s]",
            c.id,
            if passed { "PASS" } else { "FAIL" },
            c.label,
            detail,
            t.elapsed().as_secs_f64()
        );
    }
    if let Some(Ok(b)) = &bench {
        print!("ablation table:\n{}", b.ablation_csv);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        selected.len() - failures,
        selected.len(),
        started.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
