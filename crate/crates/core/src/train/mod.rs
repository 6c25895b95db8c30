//! Optimization loop, evaluation, ablation runner and the synthetic benchmark.

mod adam;
mod checkpoint;
mod dataset;
pub mod synth;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use dataset::{clip_file_name, read_dataset, write_dataset, DatasetManifest, MANIFEST_FILE};
pub use synth::{synth_clip, synth_dataset, SynthConfig};

use crate::error::{invalid, Error, Result};
use crate::losses::{cross_entropy_loss, pearson_loss, video_mmd_loss, LossMode, LossTerms, LossWeights, SpectralLossConfig, SpectralProjector};
use crate::model::{forward, prepare_input, ModelConfig, ModelInput, TyrppgParams};
use crate::preprocess::VideoClip;
use crate::signal::{bandpass, estimate_hr, metrics, periodogram, HrBinGrid, MetricsReport};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Fraction of clips, by index, used for training; the rest is held out.
    pub train_fraction: f64,
    /// Random crop/flip in the frame stem during training.
    pub augment: bool,
    pub spectral: SpectralLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-4,
            batch_size: 4,
            loss_mode: LossMode::Csl,
            weights: LossWeights::default(),
            seed: 0,
            adam: AdamConfig::default(),
            train_fraction: 0.6,
            augment: true,
            spectral: SpectralLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        self.weights.validate()?;
        self.spectral.validate()
    }
}

/// Number of training clips for an `n`-clip dataset; the rest is held out.
pub fn split_point(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the batch-mean training loss.
    pub loss: f64,
    pub loss_c: Option<f64>,
    pub loss_p: Option<f64>,
    pub loss_w: Option<f64>,
    pub heldout_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_clips: usize,
    pub n_train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub initial_heldout: MetricsReport,
    pub heldout: MetricsReport,
    pub train: MetricsReport,
    /// Not serialized, so reports from identical seeds compare byte-for-byte.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.loss).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// Where predicted BVP comes from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    #[default]
    Model,
    /// Bypass the network and read out the clip's own differenced BVP.
    GroundTruthBvp,
}

/// What the readout is compared with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalReference {
    #[default]
    Label,
    /// Readout of the ground-truth BVP through the same chain.
    GroundTruthReadout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub source: EvalSource,
    pub reference: EvalReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEstimate {
    pub index: usize,
    pub pred_bpm: f64,
    pub ref_bpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub clips: Vec<ClipEstimate>,
}

/// Heart rate from a difference-domain BVP: integrate, band-pass, then take
/// the in-band periodogram peak.
pub fn readout_hr(bvp_diff: &[f64], fs: f64, grid: &HrBinGrid) -> Result<f64> {
    let mut acc = 0.0;
    let integrated: Vec<f64> = bvp_diff
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let (lo, hi) = grid.band_hz();
    let filtered = bandpass(&integrated, fs, lo, hi)?;
    estimate_hr(&periodogram(&filtered, fs)?, grid)
}

fn label_of(clip: &VideoClip, index: usize) -> Result<f64> {
    clip.gt_hr_bpm
        .filter(|v| v.is_finite())
        .ok_or_else(|| invalid(format!("clip {index} has no heart-rate label")))
}

fn gt_diff_of(clip: &VideoClip, index: usize) -> Result<Vec<f64>> {
    clip.gt_bvp_diff()
        .ok_or_else(|| invalid(format!("clip {index} has no ground-truth BVP")))
}

/// Per-clip heart-rate readout and metrics for `clips`.
pub fn evaluate(params: &TyrppgParams, clips: &[VideoClip], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_indexed(params, clips.iter().enumerate(), opts)
}

fn evaluate_indexed<'a>(
    params: &TyrppgParams,
    clips: impl Iterator<Item = (usize, &'a VideoClip)>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let grid = params.cfg.grid;
    let mut out = Vec::new();
    for (index, clip) in clips {
        clip.check_band(&grid)?;
        let pred_signal = match opts.source {
            EvalSource::Model => no_grad(|| -> Result<Vec<f64>> {
                let input = prepare_input(clip, &params.cfg, None)?;
                Ok(forward(&input, params)?.bvp.to_vec())
            })?,
            EvalSource::GroundTruthBvp => gt_diff_of(clip, index)?,
        };
        let pred_bpm = readout_hr(&pred_signal, clip.fs, &grid)?;
        let ref_bpm = match opts.reference {
            EvalReference::Label => label_of(clip, index)?,
            EvalReference::GroundTruthReadout => readout_hr(&gt_diff_of(clip, index)?, clip.fs, &grid)?,
        };
        out.push(ClipEstimate {
            index,
            pred_bpm,
            ref_bpm,
        });
    }
    if out.is_empty() {
        return Err(invalid("evaluate: no clips"));
    }
    let pred: Vec<f64> = out.iter().map(|c| c.pred_bpm).collect();
    let refs: Vec<f64> = out.iter().map(|c| c.ref_bpm).collect();
    Ok(EvalReport {
        metrics: metrics(&pred, &refs)?,
        clips: out,
    })
}

/// Cached spectral projectors, one per (length, sampling rate).
struct Projectors {
    grid: HrBinGrid,
    cfg: SpectralLossConfig,
    cache: Vec<(usize, u64, SpectralProjector)>,
}

impl Projectors {
    fn get(&mut self, len: usize, fs: f64) -> Result<&SpectralProjector> {
        let key = fs.to_bits();
        if let Some(i) = self.cache.iter().position(|(l, f, _)| *l == len && *f == key) {
            return Ok(&self.cache[i].2);
        }
        self.cache.push((len, key, SpectralProjector::new(len, fs, self.grid, self.cfg)?));
        Ok(&self.cache.last().expect("just pushed").2)
    }
}

/// Loss terms of one clip under `mode`; disabled terms are not computed.
fn clip_terms(
    input: &ModelInput,
    clip: &VideoClip,
    index: usize,
    params: &TyrppgParams,
    mode: LossMode,
    projectors: &mut Projectors,
) -> Result<LossTerms> {
    let out = forward(input, params)?;
    let (use_c, use_p, use_w) = mode.terms();
    let gt = Tensor::from_slice(&gt_diff_of(clip, index)?);
    let c = if use_c {
        let bin = params.cfg.grid.bin_of(label_of(clip, index)?);
        Some(cross_entropy_loss(&out.logits, bin)?)
    } else {
        None
    };
    let p = if use_p { Some(pearson_loss(&out.bvp, &gt)?) } else { None };
    let w = if use_w {
        let proj = projectors.get(gt.numel(), clip.fs)?;
        Some(video_mmd_loss(&out.bvp, &gt, proj)?)
    } else {
        None
    };
    Ok(LossTerms { c, p, w })
}

fn check_clips(data: &[VideoClip], grid: &HrBinGrid) -> Result<()> {
    for (i, clip) in data.iter().enumerate() {
        clip.check_band(grid)?;
        label_of(clip, i)?;
        gt_diff_of(clip, i)?;
    }
    Ok(())
}

/// Trains from a fresh seeded initialization.
pub fn train(data: &[VideoClip], model_cfg: &ModelConfig, t: &TrainConfig) -> Result<TrainOutcome> {
    let params = TyrppgParams::init(model_cfg, t.seed)?;
    train_from(data, params, t)
}

/// Trains starting from `params`. The first `train_fraction` of clips (by
/// index) is optimized; the rest is held out and drives best-epoch selection.
pub fn train_from(data: &[VideoClip], mut params: TyrppgParams, t: &TrainConfig) -> Result<TrainOutcome> {
    let started = Instant::now();
    t.validate()?;
    params.cfg.validate()?;
    if data.len() < 2 {
        return Err(invalid(format!("training needs at least 2 clips, got {}", data.len())));
    }
    check_clips(data, &params.cfg.grid)?;
    let n_train = split_point(data.len(), t.train_fraction);
    let (train_set, held) = data.split_at(n_train);
    let held_iter = || held.iter().enumerate().map(|(i, c)| (i + n_train, c));
    let eval_opts = EvalOptions::default();

    let mut projectors = Projectors {
        grid: params.cfg.grid,
        cfg: t.spectral,
        cache: Vec::new(),
    };
    let fixed_inputs: Vec<ModelInput> = if t.augment {
        Vec::new()
    } else {
        train_set
            .iter()
            .map(|c| prepare_input(c, &params.cfg, None))
            .collect::<Result<_>>()?
    };

    let sizes: Vec<usize> = params.named().iter().map(|(_, p)| p.numel()).collect();
    let mut adam = Adam::new(t.adam, t.lr, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut order: Vec<usize> = (0..n_train).collect();

    let initial_heldout = evaluate_indexed(&params, held_iter(), &eval_opts)?.metrics;
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut history = Vec::with_capacity(t.epochs);

    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut term_sums = [0.0f64; 3];
        let mut n_batches = 0usize;
        for (b, batch) in order.chunks(t.batch_size).enumerate() {
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let input = if t.augment {
                    prepare_input(&train_set[i], &params.cfg, Some(&mut rng))?
                } else {
                    fixed_inputs[i].clone()
                };
                let terms = clip_terms(&input, &train_set[i], i, &params, t.loss_mode, &mut projectors)?;
                for (slot, term) in term_sums.iter_mut().zip([&terms.c, &terms.p, &terms.w]) {
                    if let Some(v) = term {
                        *slot += v.item() / batch.len() as f64;
                    }
                }
                let l = t.loss_mode.combine(&terms, &t.weights)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => acc.add(&l)?,
                });
            }
            let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: training loss is {value}")));
            }
            loss.backward()?;
            let mut values: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
            for (name, p) in params.named() {
                let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, batch {b}: gradient of {name}[{k}] is {}",
                        g[k]
                    )));
                }
                values.push(p.to_vec());
                grads.push(g);
            }
            adam.update(&mut values, &grads);
            params.load_values(&values)?;
            epoch_loss += value;
            n_batches += 1;
        }
        let heldout_mae = evaluate_indexed(&params, held_iter(), &eval_opts)?.metrics.mae_bpm;
        if best.as_ref().is_none_or(|(mae, _, _)| heldout_mae < *mae) {
            best = Some((heldout_mae, epoch, params.tensors().iter().map(|p| p.to_vec()).collect()));
        }
        let (use_c, use_p, use_w) = t.loss_mode.terms();
        let nb = n_batches as f64;
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss / nb,
            loss_c: use_c.then(|| term_sums[0] / nb),
            loss_p: use_p.then(|| term_sums[1] / nb),
            loss_w: use_w.then(|| term_sums[2] / nb),
            heldout_mae,
        });
    }

    let (_, best_epoch, best_values) = best.expect("at least one epoch");
    params.load_values(&best_values)?;
    let heldout = evaluate_indexed(&params, held_iter(), &eval_opts)?.metrics;
    let train_metrics = evaluate_indexed(&params, train_set.iter().enumerate(), &eval_opts)?.metrics;
    let report = RunReport {
        config: ConfigEcho {
            model: params.cfg,
            train: *t,
            n_clips: data.len(),
            n_train,
        },
        history,
        best_epoch,
        initial_heldout,
        heldout,
        train: train_metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            seed: t.seed,
            epoch: best_epoch,
        },
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: LossMode,
    /// Explicit term set, e.g. `C+P+W`.
    pub terms: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    pub median: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one model per (mode, seed) on shared data; rows keep the requested
/// mode order and report per-column medians across seeds.
pub fn ablation(
    data: &[VideoClip],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    modes: &[LossMode],
    seeds: &[u64],
) -> Result<AblationReport> {
    ablation_with(data, model_cfg, base, modes, seeds, |_, _| Ok(()))
}

/// [`ablation`] that hands every finished run to `on_run` before keeping
/// its report, e.g. to save checkpoints.
pub fn ablation_with(
    data: &[VideoClip],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    modes: &[LossMode],
    seeds: &[u64],
    mut on_run: impl FnMut(&TrainConfig, &TrainOutcome) -> Result<()>,
) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(invalid("ablation needs at least one loss mode"));
    }
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let t = TrainConfig {
                loss_mode: mode,
                seed,
                ..*base
            };
            let outcome = train(data, model_cfg, &t)?;
            on_run(&t, &outcome)?;
            runs.push(outcome.report);
        }
        let col = |f: fn(&MetricsReport) -> f64| median(runs.iter().map(|r| f(&r.heldout)).collect());
        let med = MetricsReport {
            mae_bpm: col(|m| m.mae_bpm),
            rmse_bpm: col(|m| m.rmse_bpm),
            pearson_rho: col(|m| m.pearson_rho),
            degenerate: runs.iter().any(|r| r.heldout.degenerate),
        };
        rows.push(AblationRow {
            mode,
            terms: mode.term_label(),
            seeds: seeds.to_vec(),
            runs,
            median: med,
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    /// One row per term set with median MAE, RMSE and correlation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("loss_terms,mode,mae,rmse,rho,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{}\n",
                r.terms,
                r.mode,
                r.median.mae_bpm,
                r.median.rmse_bpm,
                r.median.pearson_rho,
                seeds.join(" ")
            ));
        }
        s
    }
}
