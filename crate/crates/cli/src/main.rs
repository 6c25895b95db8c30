//! `tyrppg` command-line driver.

mod config;
mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use tyrppg::gradsuite::{run_suite, DEFAULT_SEEDS};
use tyrppg::losses::{Divergence, LossMode};
use tyrppg::model::forward_clip;
use tyrppg::no_grad;
use tyrppg::preprocess::VideoClip;
use tyrppg::signal::{bandpass, metrics_csv, periodogram, spectrum_csv, HrBinGrid};
use tyrppg::train::{
    ablation, evaluate, read_dataset, split_point, synth_dataset, train, write_dataset, Checkpoint, RunReport,
    SynthConfig, TrainConfig,
};

use config::{CliConfig, Split};
use plot::{line_chart, Series, Trace};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] tyrppg::Error),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(tyrppg::Error::NonFinite(_)) | CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tyrppg", version, about = "Remote heart-rate estimation from face video clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pulsatile-video dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and run report.
    Train(TrainArgs),
    /// Estimate heart rates with a checkpoint and score them.
    Eval(EvalArgs),
    /// Train one model per loss term set and seed; tabulate held-out metrics.
    Ablate(AblateArgs),
    /// Render BVP traces and training curves as SVG, spectra as CSV.
    Plot(PlotArgs),
    /// Run the gradient verification suite and print a pass/fail table.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file with sections synth, model, train, eval, ablate.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. train.lr=0.001.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct HrRange(f64, f64);

impl fmt::Display for HrRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0, self.1)
    }
}

fn parse_hr_range(s: &str) -> std::result::Result<HrRange, String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI in bpm")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(HrRange(p(a)?, p(b)?))
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    s.parse().map_err(|e: tyrppg::Error| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of clips.
    #[arg(long, default_value_t = SynthConfig::default().n_clips)]
    clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = SynthConfig::default().frames)]
    frames: usize,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = SynthConfig::default().fs)]
    fs: f64,
    /// Heart-rate range LO,HI in bpm; must lie inside the model's band.
    #[arg(long, value_name = "LO,HI", value_parser = parse_hr_range,
          default_value_t = HrRange(SynthConfig::default().hr_range_bpm.0, SynthConfig::default().hr_range_bpm.1))]
    hr_range: HrRange,
    /// Standard deviation of additive pixel noise.
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
}

#[derive(Args)]
struct TrainFlags {
    /// Loss term set: CSL, WSL, C, P, W, C+P, C+W or P+W.
    #[arg(long, value_parser = parse_mode, default_value_t = TrainConfig::default().loss_mode)]
    loss: LossMode,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Divergence of the spectral term.
    #[arg(long, value_parser = ["mmd", "kl"], default_value = "mmd")]
    divergence: String,
    /// Fraction of clips, by index, used for training.
    #[arg(long, default_value_t = TrainConfig::default().train_fraction)]
    train_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Initialization and shuffling seed.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Clips to score; train and heldout use train.train_fraction.
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    /// Also write per-clip `t_s,gt,pred` traces for `plot`.
    #[arg(long, default_value_t = false)]
    traces: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Comma-separated loss term sets, one table row each.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_values_t = LossMode::ALL.to_vec())]
    modes: Vec<LossMode>,
    /// Comma-separated seeds; rows report medians across them.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    seeds: Vec<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PlotArgs {
    /// `t_s,gt,pred` trace CSV, as written by `eval --traces`. At least one
    /// of --trace and --report is required.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Run report JSON from `train`; repeatable.
    #[arg(long, value_name = "FILE")]
    report: Vec<PathBuf>,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    output: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random seeds per case.
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

/// Collects `(config key, value)` for flags given on the command line, so
/// defaults shown in `--help` never mask config-file values.
struct Flags<'a> {
    m: &'a ArgMatches,
    out: Vec<(&'static str, Value)>,
}

impl<'a> Flags<'a> {
    fn new(m: &'a ArgMatches) -> Self {
        Flags { m, out: Vec::new() }
    }

    fn add<T: Serialize>(&mut self, id: &str, key: &'static str, v: T) -> &mut Self {
        if self.m.value_source(id) == Some(ValueSource::CommandLine) {
            self.out.push((key, serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }

    fn train(&mut self, t: &TrainFlags) -> &mut Self {
        let div = if t.divergence == "kl" { Divergence::Kl } else { Divergence::Mmd };
        self.add("loss", "train.loss_mode", t.loss)
            .add("epochs", "train.epochs", t.epochs)
            .add("lr", "train.lr", t.lr)
            .add("batch_size", "train.batch_size", t.batch_size)
            .add("divergence", "train.spectral.divergence", div)
            .add("train_fraction", "train.train_fraction", t.train_fraction)
    }
}

fn load_config(a: &ConfigArgs, flags: &mut Flags) -> Result<CliConfig> {
    config::load(a.config.as_deref(), &a.overrides, std::mem::take(&mut flags.out))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn json_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

fn cmd_synth(a: &SynthArgs, m: &ArgMatches) -> Result<()> {
    let cfg = load_config(
        &a.cfg,
        Flags::new(m)
            .add("clips", "synth.n_clips", a.clips)
            .add("frames", "synth.frames", a.frames)
            .add("fs", "synth.fs", a.fs)
            .add("hr_range", "synth.hr_range_bpm", (a.hr_range.0, a.hr_range.1))
            .add("noise", "synth.noise_sigma", a.noise)
            .add("seed", "synth.seed", a.seed),
    )?;
    cfg.model.grid.validate()?;
    cfg.synth.validate(&cfg.model.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let clips = synth_dataset(&cfg.synth, &cfg.model.grid)?;
    let generator = json_value(&serde_json::json!({ "synth": cfg.synth, "grid": cfg.model.grid }))?;
    write_dataset(&a.cfg.output, &clips, Some(generator))?;
    println!("wrote {} clips to {}", clips.len(), a.cfg.output.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<VideoClip>> {
    read_dataset(dir).map_err(|e| CliError::Config(format!("dataset {}: {e}", dir.display())))
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let cfg = load_config(&a.cfg, Flags::new(m).train(&a.train).add("seed", "train.seed", a.seed))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = load_data(&a.data)?;
    let outcome = train(&data, &cfg.model, &cfg.train)?;
    let r = &outcome.report;
    for e in &r.history {
        println!("epoch {:>3} loss {:.5} heldout_mae {:.3}", e.epoch, e.loss, e.heldout_mae);
    }
    println!(
        "best epoch {} heldout mae {:.3} rmse {:.3} rho {:.4} ({:.1}s)",
        r.best_epoch, r.heldout.mae_bpm, r.heldout.rmse_bpm, r.heldout.pearson_rho, r.wall_time_s
    );
    let out = &a.cfg.output;
    write(out, "checkpoint.tyck", outcome.checkpoint.to_bytes()?)?;
    write(out, "report.json", r.to_json()?)?;
    write(out, "metrics.csv", metrics_csv(&r.heldout))?;
    Ok(())
}

fn zscore(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let s = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * s);
}

/// Difference-domain signal as plotted: integrated, band-passed, z-scored.
fn display_bvp(diff: &[f64], fs: f64, grid: &HrBinGrid) -> Result<Vec<f64>> {
    let mut acc = 0.0;
    let integrated: Vec<f64> = diff
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let (lo, hi) = grid.band_hz();
    let mut out = bandpass(&integrated, fs, lo, hi)?;
    zscore(&mut out);
    Ok(out)
}

fn cmd_eval(a: &EvalArgs, m: &ArgMatches) -> Result<()> {
    let cfg = load_config(&a.cfg, Flags::new(m).add("split", "eval.split", a.split))?;
    let ckpt = Checkpoint::load(&a.checkpoint)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", a.checkpoint.display())))?;
    let data = load_data(&a.data)?;
    let n_train = split_point(data.len(), cfg.train.train_fraction);
    let offset = match cfg.eval.split {
        Split::All | Split::Train => 0,
        Split::Heldout => n_train,
    };
    let clips = match cfg.eval.split {
        Split::All => &data[..],
        Split::Train => &data[..n_train],
        Split::Heldout => &data[n_train..],
    };
    let mut report = evaluate(&ckpt.params, clips, &cfg.eval.options())?;
    for c in &mut report.clips {
        c.index += offset;
    }
    let mut traces = Vec::new();
    if a.traces {
        let grid = ckpt.params.cfg.grid;
        for (i, clip) in clips.iter().enumerate() {
            let gt = clip.gt_bvp_diff().ok_or_else(|| CliError::Config(format!("clip {} has no BVP", i + offset)))?;
            let pred = no_grad(|| forward_clip(clip, &ckpt.params).map(|o| o.bvp.to_vec()))?;
            let tr = Trace::from_signals(clip.fs, &display_bvp(&gt, clip.fs, &grid)?, &display_bvp(&pred, clip.fs, &grid)?);
            traces.push((format!("trace_{:04}.csv", i + offset), tr.to_csv()));
        }
    }
    let echo = serde_json::json!({
        "checkpoint": ckpt.manifest(),
        "eval": cfg.eval,
        "train_fraction": cfg.train.train_fraction,
    });
    let body = config::echo(echo, json_value(&report)?);
    let out = &a.cfg.output;
    write(out, "eval.json", config::to_json(&body)?)?;
    write(out, "metrics.csv", metrics_csv(&report.metrics))?;
    for (name, csv) in &traces {
        write(&out.join("traces"), name, csv)?;
    }
    let mm = &report.metrics;
    println!(
        "{} clips: mae {:.3} rmse {:.3} rho {:.4}",
        report.clips.len(),
        mm.mae_bpm,
        mm.rmse_bpm,
        mm.pearson_rho
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, m: &ArgMatches) -> Result<()> {
    let modes: Vec<String> = a.modes.iter().map(|x| x.to_string()).collect();
    let cfg = load_config(
        &a.cfg,
        Flags::new(m)
            .train(&a.train)
            .add("modes", "ablate.modes", modes)
            .add("seeds", "ablate.seeds", &a.seeds),
    )?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = load_data(&a.data)?;
    let report = ablation(&data, &cfg.model, &cfg.train, &cfg.ablate.modes, &cfg.ablate.seeds)?;
    let csv = report.to_csv();
    print!("{csv}");
    let echo = serde_json::json!({ "model": cfg.model, "train": cfg.train, "ablate": cfg.ablate });
    let out = &a.cfg.output;
    write(out, "ablation.csv", &csv)?;
    write(out, "ablation.json", config::to_json(&config::echo(echo, json_value(&report)?))?)?;
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    if a.trace.is_none() && a.report.is_empty() {
        return Err(CliError::Config("plot needs --trace and/or --report".into()));
    }
    let mut files: Vec<(String, String)> = Vec::new();
    if let Some(path) = &a.trace {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("trace {}: {e}", path.display())))?;
        let tr = Trace::parse(&text)?;
        let fs = tr.fs().map_err(CliError::Config)?;
        let svg = line_chart(
            "BVP: ground truth vs predicted",
            "time (s)",
            "normalized amplitude",
            &[
                Series { label: "ground truth", xs: &tr.t_s, ys: &tr.gt, dotted: false, color: "black" },
                Series { label: "predicted", xs: &tr.t_s, ys: &tr.pred, dotted: true, color: "#d62728" },
            ],
        );
        files.push(("bvp.svg".into(), svg));
        files.push(("psd.csv".into(), spectrum_csv(&periodogram(&tr.pred, fs)?)));
        files.push(("psd_gt.csv".into(), spectrum_csv(&periodogram(&tr.gt, fs)?)));
    }
    let mut reports = Vec::new();
    for path in &a.report {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("report {}: {e}", path.display())))?;
        let r: RunReport =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("report {}: {e}", path.display())))?;
        if r.history.is_empty() {
            return Err(CliError::Config(format!("report {} has no epochs", path.display())));
        }
        reports.push(r);
    }
    if !reports.is_empty() {
        let labels: Vec<String> = reports
            .iter()
            .map(|r| format!("{} {:?} seed {}", r.config.train.loss_mode, r.config.train.spectral.divergence, r.config.train.seed))
            .collect();
        let epochs: Vec<Vec<f64>> = reports.iter().map(|r| r.history.iter().map(|e| e.epoch as f64).collect()).collect();
        let losses: Vec<Vec<f64>> = reports.iter().map(RunReport::loss_history).collect();
        let series: Vec<Series> = (0..reports.len())
            .map(|i| Series { label: &labels[i], xs: &epochs[i], ys: &losses[i], dotted: false, color: COLORS[i % COLORS.len()] })
            .collect();
        files.push(("loss.svg".into(), line_chart("training loss", "epoch", "loss", &series)));

        let find = |d: Divergence| reports.iter().position(|r| r.config.train.spectral.divergence == d);
        if let (Some(i), Some(j)) = (find(Divergence::Mmd), find(Divergence::Kl)) {
            let mae = |k: usize| reports[k].history.iter().map(|e| e.heldout_mae).collect::<Vec<f64>>();
            let (mi, mj) = (mae(i), mae(j));
            let svg = line_chart(
                "held-out MAE: MMD vs KL spectral term",
                "epoch",
                "MAE (bpm)",
                &[
                    Series { label: "MMD", xs: &epochs[i], ys: &mi, dotted: false, color: COLORS[0] },
                    Series { label: "KL", xs: &epochs[j], ys: &mj, dotted: true, color: COLORS[1] },
                ],
            );
            files.push(("kl_vs_mmd.svg".into(), svg));
        }
    }
    for (name, body) in &files {
        write(&a.output, name, body)?;
        println!("wrote {}", a.output.join(name).display());
    }
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    let report = run_suite(a.seeds, a.filter.as_deref())?;
    print!("{}", report.table());
    let failed = report.failures().len();
    println!("{} of {} cases passed in {:.1}s", report.cases.len() - failed, report.cases.len(), report.elapsed_s);
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient case(s) exceeded tolerance")));
    }
    Ok(())
}

fn run(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, sub),
        Command::Train(a) => cmd_train(a, sub),
        Command::Eval(a) => cmd_eval(a, sub),
        Command::Ablate(a) => cmd_ablate(a, sub),
        Command::Plot(a) => cmd_plot(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
