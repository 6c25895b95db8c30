use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY_MODEL: [&str; 8] = [
    "--set",
    "model.channels=4",
    "--set",
    "model.hidden=6",
    "--set",
    "model.conv_channels=2",
    "--set",
    "model.depth=1",
];

fn tyrppg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tyrppg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = tyrppg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let hash = Sha256::digest(fs::read(&path).unwrap());
            let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), hex);
        }
    }
    out
}

/// A small dataset in `data/`.
fn tiny_data() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--clips", "5", "--frames", "40", "--seed", "3", "-o", "data"], dir.path());
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_clips_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &'static str| ["synth", "--clips", "64", "--seed", "7", "-o", o];
    ok(&args("a"), dir.path());
    ok(&args("b"), dir.path());
    let a = digests(&dir.path().join("a"));
    assert_eq!(a.len(), 65);
    assert!(a.contains_key("manifest.json"));
    for name in a.keys().filter(|n| n.ends_with(".tyc")) {
        let bytes = fs::read(dir.path().join("a").join(name)).unwrap();
        assert_eq!(&bytes[..4], b"TYC1");
    }
    assert_eq!(a, digests(&dir.path().join("b")));
    let manifest = json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["generator"]["synth"]["seed"], 7);
    assert_eq!(manifest["generator"]["synth"]["n_clips"], 64);
}

#[test]
fn synth_rejects_range_outside_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = tyrppg(&["synth", "--hr-range", "30,300", "-o", "data"], dir.path());
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("band [40, 180]"), "{err}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn eval_with_missing_checkpoint_writes_nothing() {
    let dir = tiny_data();
    let out = tyrppg(&["eval", "--checkpoint", "missing.ckpt", "--data", "data", "-o", "ev"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(out.stdout.is_empty());
    assert!(!dir.path().join("ev").exists());
}

#[test]
fn train_echoes_settings_and_reruns_identically() {
    let dir = tiny_data();
    let mut args = vec!["train", "--data", "data", "--loss", "csl", "--epochs", "30", "--lr", "1e-4", "-o", "run"];
    args.extend(TINY_MODEL);
    ok(&args, dir.path());
    let report = json(&dir.path().join("run/report.json"));
    let t = &report["config"]["train"];
    assert_eq!(t["epochs"], 30);
    assert_eq!(t["lr"], 1e-4);
    assert_eq!(t["loss_mode"], "CSL");
    assert_eq!(report["config"]["model"]["channels"], 4);
    assert_eq!(report["history"].as_array().unwrap().len(), 30);

    let first = digests(&dir.path().join("run"));
    assert_eq!(first.len(), 3);
    ok(&args, dir.path());
    assert_eq!(first, digests(&dir.path().join("run")));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tiny_data();
    fs::write(dir.path().join("cfg.json"), r#"{"train": {"epochs": 5, "lr": 0.003, "batch_size": 2}}"#).unwrap();
    let mut args = vec!["train", "--data", "data", "-c", "cfg.json", "--set", "train.batch_size=3", "--epochs", "2", "-o", "run"];
    args.extend(TINY_MODEL);
    ok(&args, dir.path());
    let t = json(&dir.path().join("run/report.json"))["config"]["train"].clone();
    assert_eq!(t["epochs"], 2);
    assert_eq!(t["lr"], 0.003);
    assert_eq!(t["batch_size"], 3);
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tiny_data();
    fs::write(dir.path().join("cfg.json"), r#"{"train": {"epoch": 5}}"#).unwrap();
    let out = tyrppg(&["train", "--data", "data", "-c", "cfg.json", "-o", "run"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));
    let out = tyrppg(&["train", "--data", "data", "--set", "model.colour=1", "-o", "run"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn divergent_training_exits_3() {
    let dir = tiny_data();
    let mut args = vec!["train", "--data", "data", "--epochs", "2", "--lr", "1e300", "-o", "run"];
    args.extend(TINY_MODEL);
    let out = tyrppg(&args, dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn ablate_writes_one_row_per_mode() {
    let dir = tiny_data();
    let mut args = vec!["ablate", "--data", "data", "--modes", "csl,wsl,c,p,w", "--epochs", "1", "-o", "abl"];
    args.extend(TINY_MODEL);
    ok(&args, dir.path());
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "{csv}");
    assert_eq!(lines[0], "loss_terms,mode,mae,rmse,rho,seeds");
    let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(modes, ["CSL", "WSL", "C", "P", "W"]);
    let report = json(&dir.path().join("abl/ablation.json"));
    assert_eq!(report["config"]["train"]["epochs"], 1);
    assert_eq!(report["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn eval_scores_clips_and_writes_traces() {
    let dir = tiny_data();
    let mut args = vec!["train", "--data", "data", "--epochs", "1", "-o", "run"];
    args.extend(TINY_MODEL);
    ok(&args, dir.path());
    ok(
        &["eval", "--checkpoint", "run/checkpoint.tyck", "--data", "data", "--split", "heldout", "--traces", "-o", "ev"],
        dir.path(),
    );
    let report = json(&dir.path().join("ev/eval.json"));
    let idx: Vec<u64> = report["clips"].as_array().unwrap().iter().map(|c| c["index"].as_u64().unwrap()).collect();
    assert_eq!(idx, [3, 4]);
    assert_eq!(report["config"]["eval"]["split"], "heldout");
    assert_eq!(report["config"]["checkpoint"]["model"]["channels"], 4);
    let trace = dir.path().join("ev/traces/trace_0003.csv");
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("t_s,gt,pred\n"));
    assert_eq!(text.lines().count(), 40);
    ok(&["plot", "--trace", "ev/traces/trace_0003.csv", "-o", "pl"], dir.path());
    assert!(dir.path().join("pl/bvp.svg").exists());
}

fn write_trace(path: &Path, fs_hz: f64, n: usize, gt: impl Fn(f64) -> f64, pred: impl Fn(f64) -> f64) {
    let mut s = String::from("t_s,gt,pred\n");
    for i in 0..n {
        let t = i as f64 / fs_hz;
        s.push_str(&format!("{t},{},{}\n", gt(t), pred(t)));
    }
    fs::write(path, s).unwrap();
}

fn polylines(svg: &str) -> Vec<&str> {
    svg.split("points=\"").skip(1).map(|s| s.split('"').next().unwrap()).collect()
}

#[test]
fn identical_traces_plot_as_coincident_curves() {
    let dir = tempfile::tempdir().unwrap();
    let f = |t: f64| (2.0 * PI * 1.2 * t).sin();
    write_trace(&dir.path().join("tr.csv"), 30.0, 120, f, f);
    ok(&["plot", "--trace", "tr.csv", "-o", "pl"], dir.path());
    let svg = fs::read_to_string(dir.path().join("pl/bvp.svg")).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    assert_eq!(svg.matches("stroke-dasharray").count(), 2, "predicted curve and its legend are dotted");
}

#[test]
fn psd_of_90_bpm_trace_peaks_at_1_5_hz() {
    let dir = tempfile::tempdir().unwrap();
    let (fs_hz, n) = (30.0, 300);
    let tone = |t: f64| (2.0 * PI * 1.5 * t).sin();
    write_trace(&dir.path().join("tr.csv"), fs_hz, n, tone, tone);
    ok(&["plot", "--trace", "tr.csv", "-o", "pl"], dir.path());
    let csv = fs::read_to_string(dir.path().join("pl/psd.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("freq_hz,power"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (f, p) = l.split_once(',').unwrap();
            (f.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    let peak = rows.iter().cloned().fold((0.0, f64::NEG_INFINITY), |a, r| if r.1 > a.1 { r } else { a });
    let df = rows[1].0 - rows[0].0;
    assert!((peak.0 - 1.5).abs() <= df / 2.0, "argmax at {} Hz", peak.0);
}

#[test]
fn plot_output_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(&dir.path().join("tr.csv"), 20.0, 64, |t| t.sin(), |t| (t + 0.2).sin());
    ok(&["plot", "--trace", "tr.csv", "-o", "a"], dir.path());
    ok(&["plot", "--trace", "tr.csv", "-o", "b"], dir.path());
    let a = digests(&dir.path().join("a"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, digests(&dir.path().join("b")));
}

#[test]
fn malformed_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tr.csv"), "t_s,gt,pred\n0,1\n").unwrap();
    let out = tyrppg(&["plot", "--trace", "tr.csv", "-o", "pl"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("pl").exists());
    let out = tyrppg(&["plot", "-o", "pl"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn kl_vs_mmd_plot_needs_both_runs() {
    let dir = tiny_data();
    for (div, out) in [("mmd", "mmd"), ("kl", "kl")] {
        let mut args = vec!["train", "--data", "data", "--epochs", "3", "--divergence", div, "-o", out];
        args.extend(TINY_MODEL);
        ok(&args, dir.path());
    }
    ok(&["plot", "--report", "mmd/report.json", "-o", "one"], dir.path());
    assert!(dir.path().join("one/loss.svg").exists());
    assert!(!dir.path().join("one/kl_vs_mmd.svg").exists());
    ok(&["plot", "--report", "mmd/report.json", "--report", "kl/report.json", "-o", "both"], dir.path());
    let svg = fs::read_to_string(dir.path().join("both/kl_vs_mmd.svg")).unwrap();
    assert_eq!(polylines(&svg).len(), 2);
    assert!(svg.contains("data-label=\"MMD\"") && svg.contains("data-label=\"KL\""));
}

#[test]
fn grad_check_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--seeds", "3", "--filter", "layer_norm"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("layer_norm.gamma") && text.contains("PASS"), "{text}");
    assert!(text.contains("3 of 3 cases passed"), "{text}");
    assert_eq!(code(&tyrppg(&["grad-check", "--filter", "no_such_case"], dir.path())), 2);
}

#[test]
fn help_lists_defaults_for_every_valued_flag() {
    let dir = tempfile::tempdir().unwrap();
    // Flags that name inputs or outputs, or collect overrides, have no default.
    let no_default = ["--config", "--set", "--output", "--data", "--checkpoint", "--trace", "--report", "--filter", "--help"];
    for sub in ["synth", "train", "eval", "ablate", "plot", "grad-check"] {
        let out = ok(&[sub, "--help"], dir.path());
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let options = text.split("Options:").nth(1).unwrap();
        let mut entries: Vec<String> = Vec::new();
        for line in options.lines() {
            let t = line.trim_start();
            if t.starts_with("-") && line.len() - t.len() <= 6 {
                entries.push(t.to_string());
            } else if let Some(last) = entries.last_mut() {
                last.push(' ');
                last.push_str(t);
            }
        }
        assert!(!entries.is_empty(), "{sub}");
        for e in entries {
            let long = e.split_whitespace().find(|w| w.starts_with("--")).unwrap().trim_end_matches(',');
            let takes_value = e.split_whitespace().take(3).any(|w| w.starts_with('<'));
            if takes_value && !no_default.contains(&long) {
                assert!(e.contains("[default:"), "{sub} {long} lacks a default: {e}");
            }
        }
    }
}
