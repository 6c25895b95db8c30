//! Supervision terms: cross-entropy over heart-rate bins, negative Pearson
//! correlation, the spectral MMD loss, their weighted sums and a KL baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::{hann_window, max_gaussian, readout_nfft, HrBinGrid, HrDistribution};
use crate::tensor::Tensor;

/// Guard on the centered sums of squares inside the Pearson denominator.
pub const PEARSON_VARIANCE_GUARD: f64 = 1e-8;

/// Additive floor of the smoothed KL variant.
pub const KL_SMOOTHING: f64 = 1e-12;

/// Weights of the cross-entropy, Pearson and spectral-MMD terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth_bpm: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kind: KernelKind::Rbf,
            bandwidth_bpm: 3.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bpm.is_finite() && self.bandwidth_bpm > 0.0) {
            return Err(invalid(format!("kernel bandwidth must be > 0, got {}", self.bandwidth_bpm)));
        }
        Ok(())
    }

    pub fn eval(&self, a_bpm: f64, b_bpm: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => (-(a_bpm - b_bpm).powi(2) / (2.0 * self.bandwidth_bpm.powi(2))).exp(),
        }
    }

    /// Gram matrix over the bin centers, row-major `[K, K]`.
    pub fn gram(&self, grid: &HrBinGrid) -> Vec<f64> {
        let c = grid.centers();
        c.iter().flat_map(|&a| c.iter().map(move |&b| self.eval(a, b))).collect()
    }
}

/// `1 - P` with `P` the sample correlation in its `T`-scaled form.
pub fn pearson_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.rank() != 1 || pred.shape() != gt.shape() {
        return Err(invalid(format!(
            "pearson_loss expects two equal-length 1-D signals, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let t = pred.numel();
    if t < 2 {
        return Err(invalid(format!("pearson_loss needs T >= 2, got {t}")));
    }
    if pred.data().iter().chain(gt.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson_loss inputs".into()));
    }
    let tf = t as f64;
    let xc = pred.sub(&pred.mean_all())?;
    let yc = gt.sub(&gt.mean_all())?;
    let num = xc.mul(&yc)?.sum_all().scale(tf);
    let sxx = xc.mul(&xc)?.sum_all().scale(tf).clamp_min(PEARSON_VARIANCE_GUARD);
    let syy = yc.mul(&yc)?.sum_all().scale(tf).clamp_min(PEARSON_VARIANCE_GUARD);
    let p = num.div(&sxx.mul(&syy)?.sqrt())?;
    Ok(p.neg().add_scalar(1.0))
}

/// `-log softmax(logits)[gt_bin]`.
pub fn cross_entropy_loss(logits: &Tensor, gt_bin: usize) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(invalid(format!("cross_entropy_loss expects 1-D logits, got {:?}", logits.shape())));
    }
    let k = logits.numel();
    if gt_bin >= k {
        return Err(invalid(format!("gt_bin {gt_bin} out of range for {k} logits")));
    }
    let mut onehot = vec![0.0; k];
    onehot[gt_bin] = 1.0;
    Ok(logits.log_softmax(0)?.mul(&Tensor::new(&[k], onehot)?)?.sum_all().neg())
}

fn check_same_grid(p: &HrDistribution, q: &HrDistribution) -> Result<()> {
    if p.grid != q.grid {
        return Err(invalid(format!("distributions live on different grids: {:?} vs {:?}", p.grid, q.grid)));
    }
    Ok(())
}

/// Squared MMD between two pmfs on one grid, clamped at 0.
pub fn mmd2(p: &HrDistribution, q: &HrDistribution, k: &KernelConfig) -> Result<f64> {
    check_same_grid(p, q)?;
    k.validate()?;
    let n = p.pmf.len();
    let gram = k.gram(&p.grid);
    let d: Vec<f64> = p.pmf.iter().zip(&q.pmf).map(|(a, b)| a - b).collect();
    let mut s = 0.0;
    for i in 0..n {
        let row = &gram[i * n..(i + 1) * n];
        s += d[i] * row.iter().zip(&d).map(|(g, dj)| g * dj).sum::<f64>();
    }
    Ok(s.max(0.0))
}

/// Differentiable squared MMD between pmf tensors of length `K`, with a
/// precomputed `[K, K]` Gram tensor.
pub fn mmd2_tensor(p: &Tensor, q: &Tensor, gram: &Tensor) -> Result<Tensor> {
    let d = p.sub(q)?;
    let kd = d.linear(gram, None)?;
    Ok(d.mul(&kd)?.sum_all().clamp_min(0.0))
}

/// `Σ p ln(p/q)`, `+∞` when `p` has mass where `q` has none.
pub fn kl_divergence(p: &HrDistribution, q: &HrDistribution) -> Result<f64> {
    check_same_grid(p, q)?;
    let mut s = 0.0;
    for (&pi, &qi) in p.pmf.iter().zip(&q.pmf) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        s += pi * (pi / qi).ln();
    }
    Ok(s)
}

/// KL with [`KL_SMOOTHING`] added to both pmfs; always finite.
pub fn kl_divergence_smoothed(p: &HrDistribution, q: &HrDistribution) -> Result<f64> {
    check_same_grid(p, q)?;
    Ok(p.pmf
        .iter()
        .zip(&q.pmf)
        .map(|(&pi, &qi)| pi * ((pi + KL_SMOOTHING) / (qi + KL_SMOOTHING)).ln())
        .sum())
}

/// Differentiable smoothed KL between pmf tensors.
pub fn kl_tensor(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let ratio = p.add_scalar(KL_SMOOTHING).div(&q.add_scalar(KL_SMOOTHING))?;
    Ok(p.mul(&ratio.ln())?.sum_all())
}

/// Divergence used for the distribution term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Mmd,
    Kl,
}

/// Which side of the spectral loss is built how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Same soft construction as the prediction side.
    #[default]
    Soft,
    /// Discrete Gaussian around the hard PSD peak.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralLossConfig {
    pub sigma_bpm: f64,
    pub kernel: KernelConfig,
    /// Softmax temperature as a fraction of the peak band power.
    pub temperature_frac: f64,
    pub target: TargetMode,
    pub divergence: Divergence,
    /// Report `sqrt(MMD²)` instead of `MMD²`.
    pub sqrt: bool,
}

impl Default for SpectralLossConfig {
    fn default() -> Self {
        SpectralLossConfig {
            sigma_bpm: crate::signal::LABEL_SIGMA_BPM,
            kernel: KernelConfig::default(),
            temperature_frac: 0.1,
            target: TargetMode::Soft,
            divergence: Divergence::Mmd,
            sqrt: false,
        }
    }
}

impl SpectralLossConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.sigma_bpm.is_finite() && self.sigma_bpm > 0.0) {
            return Err(invalid(format!("sigma_bpm must be > 0, got {}", self.sigma_bpm)));
        }
        if !(self.temperature_frac.is_finite() && self.temperature_frac > 0.0) {
            return Err(invalid(format!("temperature_frac must be > 0, got {}", self.temperature_frac)));
        }
        Ok(())
    }
}

/// Precomputed pieces of the differentiable spectral loss for one signal
/// length and sampling rate.
pub struct SpectralProjector {
    pub grid: HrBinGrid,
    pub cfg: SpectralLossConfig,
    pub fs: f64,
    pub len: usize,
    /// Frequencies (Hz) of the FFT bins inside the heart-rate band.
    pub band_hz: Vec<f64>,
    cos: Tensor,
    sin: Tensor,
    spread: Tensor,
    gram: Tensor,
}

impl fmt::Debug for SpectralProjector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralProjector")
            .field("len", &self.len)
            .field("fs", &self.fs)
            .field("band_bins", &self.band_hz.len())
            .finish()
    }
}

impl SpectralProjector {
    pub fn new(len: usize, fs: f64, grid: HrBinGrid, cfg: SpectralLossConfig) -> Result<Self> {
        grid.validate()?;
        cfg.validate()?;
        if len < 8 {
            return Err(invalid(format!("spectral loss needs at least 8 samples, got {len}")));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(invalid(format!("sampling rate must be positive, got {fs}")));
        }
        let nfft = readout_nfft(len);
        let (lo, hi) = grid.band_hz();
        let bins: Vec<usize> = (0..=nfft / 2)
            .filter(|&k| {
                let f = k as f64 * fs / nfft as f64;
                f >= lo && f <= hi
            })
            .collect();
        if bins.is_empty() {
            return Err(invalid("no FFT bins fall inside the heart-rate band"));
        }
        let w = hann_window(len);
        let wss: f64 = w.iter().map(|v| v * v).sum();
        // Band bins are never DC or Nyquist, so the one-sided factor is 2.
        let amp = (2.0 / (fs * wss)).sqrt();
        let mut cos = Vec::with_capacity(bins.len() * len);
        let mut sin = Vec::with_capacity(bins.len() * len);
        for &k in &bins {
            let phase = |t: usize| 2.0 * std::f64::consts::PI * ((k * t) % nfft) as f64 / nfft as f64;
            for (dst, trig) in [(&mut cos, f64::cos as fn(f64) -> f64), (&mut sin, f64::sin)] {
                let row: Vec<f64> = (0..len).map(|t| amp * w[t] * trig(phase(t))).collect();
                // Fold the mean removal into the projection.
                let m = row.iter().sum::<f64>() / len as f64;
                dst.extend(row.iter().map(|v| v - m));
            }
        }
        let band_hz: Vec<f64> = bins.iter().map(|&k| k as f64 * fs / nfft as f64).collect();
        let j = band_hz.len();
        let kk = grid.len();
        let mut spread = vec![0.0; kk * j];
        for (col, &f) in band_hz.iter().enumerate() {
            let g = max_gaussian(60.0 * f, &grid, cfg.sigma_bpm)?;
            for (row, &p) in g.dist.pmf.iter().enumerate() {
                spread[row * j + col] = p;
            }
        }
        Ok(SpectralProjector {
            grid,
            cfg,
            fs,
            len,
            cos: Tensor::new(&[j, len], cos)?,
            sin: Tensor::new(&[j, len], sin)?,
            spread: Tensor::new(&[kk, j], spread)?,
            gram: Tensor::new(&[kk, kk], cfg.kernel.gram(&grid))?,
            band_hz,
        })
    }

    fn check_len(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.len] {
            return Err(invalid(format!(
                "spectral loss built for length {}, got shape {:?}",
                self.len,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Periodogram values at the in-band FFT bins, differentiable in `x`.
    pub fn band_power(&self, x: &Tensor) -> Result<Tensor> {
        self.check_len(x)?;
        let re = x.linear(&self.cos, None)?;
        let im = x.linear(&self.sin, None)?;
        re.mul(&re)?.add(&im.mul(&im)?)
    }

    /// Temperature softmax over band power spread onto the heart-rate grid.
    pub fn soft_distribution(&self, x: &Tensor) -> Result<Tensor> {
        let power = self.band_power(x)?;
        let tau = power.max_all().scale(self.cfg.temperature_frac).clamp_min(f64::MIN_POSITIVE);
        let weights = power.div(&tau)?.softmax(0)?;
        weights.linear(&self.spread, None)
    }

    /// Discrete Gaussian centred on the hard in-band PSD peak of `x`.
    pub fn hard_distribution(&self, x: &Tensor) -> Result<Tensor> {
        let power = self.band_power(x)?;
        let p = power.data();
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        let g = max_gaussian(60.0 * self.band_hz[best], &self.grid, self.cfg.sigma_bpm)?;
        Tensor::new(&[self.grid.len()], g.dist.pmf)
    }

    pub fn target_distribution(&self, gt: &Tensor) -> Result<Tensor> {
        let gt = gt.detach();
        match self.cfg.target {
            TargetMode::Soft => self.soft_distribution(&gt),
            TargetMode::Hard => self.hard_distribution(&gt),
        }
    }

    /// Divergence between target and predicted distributions.
    pub fn divergence(&self, target: &Tensor, pred: &Tensor) -> Result<Tensor> {
        match self.cfg.divergence {
            Divergence::Mmd => {
                let m = mmd2_tensor(target, pred, &self.gram)?;
                Ok(if self.cfg.sqrt { m.clamp_min(1e-12).sqrt() } else { m })
            }
            Divergence::Kl => kl_tensor(target, pred),
        }
    }
}

/// Spectral distribution loss between a predicted and a ground-truth BVP.
pub fn video_mmd_loss(pred_bvp: &Tensor, gt_bvp: &Tensor, proj: &SpectralProjector) -> Result<Tensor> {
    let target = proj.target_distribution(gt_bvp)?;
    let pred = proj.soft_distribution(pred_bvp)?;
    proj.divergence(&target, &pred)
}

/// The individual terms of one example, before weighting.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub c: Option<Tensor>,
    pub p: Option<Tensor>,
    pub w: Option<Tensor>,
}

/// `α·c + β·p + γ·w`.
pub fn csl(c: &Tensor, p: &Tensor, w: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    c.scale(weights.alpha).add(&p.scale(weights.beta))?.add(&w.scale(weights.gamma))
}

/// `β·p + γ·w`.
pub fn wsl(p: &Tensor, w: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    p.scale(weights.beta).add(&w.scale(weights.gamma))
}

/// Term sets compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    Csl,
    Wsl,
    C,
    P,
    W,
    CP,
    CW,
    PW,
}

impl LossMode {
    pub const ALL: [LossMode; 8] = [
        LossMode::C,
        LossMode::P,
        LossMode::W,
        LossMode::CW,
        LossMode::CP,
        LossMode::PW,
        LossMode::Wsl,
        LossMode::Csl,
    ];

    /// `(cross-entropy, pearson, spectral)` switches.
    pub fn terms(self) -> (bool, bool, bool) {
        match self {
            LossMode::Csl => (true, true, true),
            LossMode::Wsl | LossMode::PW => (false, true, true),
            LossMode::C => (true, false, false),
            LossMode::P => (false, true, false),
            LossMode::W => (false, false, true),
            LossMode::CP => (true, true, false),
            LossMode::CW => (true, false, true),
        }
    }

    /// Explicit term-set label, e.g. `C+P+W`.
    pub fn term_label(self) -> String {
        let (c, p, w) = self.terms();
        [(c, "C"), (p, "P"), (w, "W")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Weighted sum of the enabled terms. CSL and WSL go through [`csl`] and
    /// [`wsl`]; other sets add their weighted terms left to right.
    pub fn combine(self, terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
        let need = |t: &Option<Tensor>, name: &str| -> Result<Tensor> {
            t.clone().ok_or_else(|| invalid(format!("loss mode {self} needs the {name} term")))
        };
        match self {
            LossMode::Csl => csl(&need(&terms.c, "C")?, &need(&terms.p, "P")?, &need(&terms.w, "W")?, w),
            LossMode::Wsl => wsl(&need(&terms.p, "P")?, &need(&terms.w, "W")?, w),
            _ => {
                let (c, p, ww) = self.terms();
                let mut parts = Vec::new();
                if c {
                    parts.push(need(&terms.c, "C")?.scale(w.alpha));
                }
                if p {
                    parts.push(need(&terms.p, "P")?.scale(w.beta));
                }
                if ww {
                    parts.push(need(&terms.w, "W")?.scale(w.gamma));
                }
                let mut acc = parts[0].clone();
                for t in &parts[1..] {
                    acc = acc.add(t)?;
                }
                Ok(acc)
            }
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossMode::Csl => "CSL",
            LossMode::Wsl => "WSL",
            LossMode::C => "C",
            LossMode::P => "P",
            LossMode::W => "W",
            LossMode::CP => "C+P",
            LossMode::CW => "C+W",
            LossMode::PW => "P+W",
        };
        f.write_str(s)
    }
}

impl FromStr for LossMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        Ok(match norm.as_str() {
            "CSL" => LossMode::Csl,
            "WSL" => LossMode::Wsl,
            "C" => LossMode::C,
            "P" => LossMode::P,
            "W" => LossMode::W,
            "C+P" | "P+C" => LossMode::CP,
            "C+W" | "W+C" => LossMode::CW,
            "P+W" | "W+P" => LossMode::PW,
            _ => return Err(invalid(format!("unknown loss mode {s:?}"))),
        })
    }
}

impl Serialize for LossMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
