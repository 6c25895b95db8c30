//! BVP to heart-rate analysis: periodogram, band-limited peak readout,
//! Gaussian label distributions over heart-rate bins, band-pass cleanup and
//! the MAE/RMSE/Pearson report.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Minimum FFT length used for heart-rate readout.
pub const READOUT_NFFT: usize = 2048;

/// Default width of the Gaussian label distribution, in bpm.
pub const LABEL_SIGMA_BPM: f64 = 2.0;

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdSpectrum {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdSpectrum {
    pub fn argmax_hz(&self) -> f64 {
        self.freqs_hz[first_argmax(&self.power)]
    }
}

/// Discretization of the plausible heart-rate band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrBinGrid {
    pub lo_bpm: f64,
    pub hi_bpm: f64,
    pub step_bpm: f64,
}

impl Default for HrBinGrid {
    fn default() -> Self {
        HrBinGrid {
            lo_bpm: 40.0,
            hi_bpm: 180.0,
            step_bpm: 1.0,
        }
    }
}

impl HrBinGrid {
    pub fn new(lo_bpm: f64, hi_bpm: f64, step_bpm: f64) -> Result<Self> {
        let g = HrBinGrid { lo_bpm, hi_bpm, step_bpm };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo_bpm.is_finite() && self.hi_bpm.is_finite() && self.lo_bpm > 0.0 && self.lo_bpm < self.hi_bpm) {
            return Err(invalid(format!("heart-rate band [{}, {}] is not valid", self.lo_bpm, self.hi_bpm)));
        }
        if !(self.step_bpm > 0.0) || self.len() == 0 {
            return Err(invalid(format!("heart-rate bin step {} is not valid", self.step_bpm)));
        }
        Ok(())
    }

    /// Number of bins, `floor((hi - lo) / step)`.
    pub fn len(&self) -> usize {
        ((self.hi_bpm - self.lo_bpm) / self.step_bpm + 1e-9).floor() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo_bpm + (i as f64 + 0.5) * self.step_bpm
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// Bin whose half-open interval contains `hr`, clamped to the grid.
    pub fn bin_of(&self, hr_bpm: f64) -> usize {
        let k = ((hr_bpm - self.lo_bpm) / self.step_bpm).floor();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    pub fn band_hz(&self) -> (f64, f64) {
        (self.lo_bpm / 60.0, self.hi_bpm / 60.0)
    }
}

/// Probability mass over the bins of an [`HrBinGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct HrDistribution {
    pub grid: HrBinGrid,
    pub pmf: Vec<f64>,
}

impl HrDistribution {
    pub fn new(grid: HrBinGrid, pmf: Vec<f64>) -> Result<Self> {
        if pmf.len() != grid.len() {
            return Err(invalid(format!("pmf has {} entries for a {}-bin grid", pmf.len(), grid.len())));
        }
        if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("pmf entries must be finite and non-negative"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("pmf sums to {total}, expected 1")));
        }
        Ok(HrDistribution { grid, pmf })
    }

    pub fn one_hot(grid: HrBinGrid, bin: usize) -> Result<Self> {
        if bin >= grid.len() {
            return Err(invalid(format!("bin {bin} outside a {}-bin grid", grid.len())));
        }
        let mut pmf = vec![0.0; grid.len()];
        pmf[bin] = 1.0;
        Ok(HrDistribution { grid, pmf })
    }

    pub fn argmax_bin(&self) -> usize {
        first_argmax(&self.pmf)
    }
}

/// Result of [`max_gaussian`]; `out_of_band` warns that the mean lay more
/// than 3 sigma outside the grid, so the mass piles up on the nearest edge.
#[derive(Clone, Debug)]
pub struct MaxGaussian {
    pub dist: HrDistribution,
    pub out_of_band: bool,
}

/// Heart-rate error summary across clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub pearson_rho: f64,
    /// One side had zero variance, so `pearson_rho` was reported as 0.
    pub degenerate: bool,
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// FFT length used for readout of an `n`-sample signal.
pub fn readout_nfft(n: usize) -> usize {
    n.next_power_of_two().max(READOUT_NFFT)
}

/// Mean-removed, Hann-windowed, one-sided periodogram scaled by
/// `1 / (fs · Σw²)`, zero-padded to [`readout_nfft`] points.
pub fn periodogram(x: &[f64], fs: f64) -> Result<PsdSpectrum> {
    periodogram_nfft(x, fs, readout_nfft(x.len()))
}

pub fn periodogram_nfft(x: &[f64], fs: f64, nfft: usize) -> Result<PsdSpectrum> {
    if x.len() < 8 {
        return Err(invalid(format!("periodogram needs at least 8 samples, got {}", x.len())));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(invalid(format!("sampling rate must be positive, got {fs}")));
    }
    if nfft < x.len() {
        return Err(invalid(format!("nfft {nfft} shorter than signal length {}", x.len())));
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let w = hann_window(n);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .zip(&w)
        .map(|(&v, &wv)| Complex::new((v - mean) * wv, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let half = nfft / 2;
    let scale = 1.0 / (fs * wss);
    let power = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() * scale;
            if k == 0 || (nfft % 2 == 0 && k == half) {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    let freqs_hz = (0..=half).map(|k| k as f64 * fs / nfft as f64).collect();
    Ok(PsdSpectrum { freqs_hz, power })
}

/// `60 ×` the in-band frequency of maximum power; ties go to the lower frequency.
pub fn estimate_hr(psd: &PsdSpectrum, grid: &HrBinGrid) -> Result<f64> {
    let (lo, hi) = grid.band_hz();
    let mut best: Option<usize> = None;
    for (i, &f) in psd.freqs_hz.iter().enumerate() {
        if f < lo || f > hi {
            continue;
        }
        if best.is_none_or(|b| psd.power[i] > psd.power[b]) {
            best = Some(i);
        }
    }
    best.map(|i| 60.0 * psd.freqs_hz[i])
        .ok_or_else(|| invalid(format!("spectrum has no bins inside [{lo:.3}, {hi:.3}] Hz")))
}

/// Discrete Gaussian over the grid centers with mean `hr_bpm`, renormalized.
pub fn max_gaussian(hr_bpm: f64, grid: &HrBinGrid, sigma_bpm: f64) -> Result<MaxGaussian> {
    if !(sigma_bpm > 0.0 && sigma_bpm.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma_bpm}")));
    }
    if !hr_bpm.is_finite() {
        return Err(invalid(format!("heart rate must be finite, got {hr_bpm}")));
    }
    let logits: Vec<f64> = grid
        .centers()
        .iter()
        .map(|c| -(c - hr_bpm).powi(2) / (2.0 * sigma_bpm * sigma_bpm))
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pmf: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= z);
    let out_of_band = hr_bpm < grid.lo_bpm - 3.0 * sigma_bpm || hr_bpm > grid.hi_bpm + 3.0 * sigma_bpm;
    Ok(MaxGaussian {
        dist: HrDistribution { grid: *grid, pmf },
        out_of_band,
    })
}

/// MAE, RMSE and sample Pearson correlation between predicted and true rates.
pub fn metrics(pred_bpm: &[f64], gt_bpm: &[f64]) -> Result<MetricsReport> {
    if pred_bpm.len() != gt_bpm.len() {
        return Err(invalid(format!(
            "metrics: {} predictions for {} references",
            pred_bpm.len(),
            gt_bpm.len()
        )));
    }
    if pred_bpm.is_empty() {
        return Err(invalid("metrics: no samples"));
    }
    let n = pred_bpm.len() as f64;
    let mae = pred_bpm.iter().zip(gt_bpm).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (pred_bpm.iter().zip(gt_bpm).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let mp = pred_bpm.iter().sum::<f64>() / n;
    let mg = gt_bpm.iter().sum::<f64>() / n;
    let sxy: f64 = pred_bpm.iter().zip(gt_bpm).map(|(p, g)| (p - mp) * (g - mg)).sum();
    let sxx: f64 = pred_bpm.iter().map(|p| (p - mp).powi(2)).sum();
    let syy: f64 = gt_bpm.iter().map(|g| (g - mg).powi(2)).sum();
    let degenerate = sxx <= 0.0 || syy <= 0.0;
    let rho = if degenerate {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(MetricsReport {
        mae_bpm: mae,
        // RMSE ≥ MAE holds mathematically; keep it exact under rounding.
        rmse_bpm: rmse.max(mae),
        pearson_rho: rho,
        degenerate,
    })
}

/// Windowed-sinc low-pass with unit DC gain.
fn lowpass_taps(cutoff_hz: f64, fs: f64, ntaps: usize) -> Vec<f64> {
    let m = (ntaps - 1) as f64 / 2.0;
    let fc = cutoff_hz / fs;
    let mut h: Vec<f64> = (0..ntaps)
        .map(|i| {
            let x = i as f64 - m;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            let hamming = 0.54 - 0.46 * (2.0 * PI * i as f64 / (ntaps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Zero-phase FIR band-pass: mean removal, odd extension at both ends, then
/// the same symmetric FIR applied forward and backward.
pub fn bandpass(x: &[f64], fs: f64, lo_hz: f64, hi_hz: f64) -> Result<Vec<f64>> {
    if !(fs > 0.0) || !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0) {
        return Err(invalid(format!(
            "band-pass needs 0 < lo < hi < fs/2, got lo={lo_hz} hi={hi_hz} fs={fs}"
        )));
    }
    let n = x.len();
    if n < 8 {
        return Err(invalid(format!("band-pass needs at least 8 samples, got {n}")));
    }
    // Odd tap count, at most 61, short enough that the odd extension fits.
    let mut ntaps = 61.min(n / 2);
    if ntaps % 2 == 0 {
        ntaps -= 1;
    }
    let lp_hi = lowpass_taps(hi_hz, fs, ntaps);
    let lp_lo = lowpass_taps(lo_hz, fs, ntaps);
    let taps: Vec<f64> = lp_hi.iter().zip(&lp_lo).map(|(a, b)| a - b).collect();

    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let pad = ntaps - 1;
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * centered[0] - centered[i]));
    ext.extend_from_slice(&centered);
    ext.extend((1..=pad).map(|i| 2.0 * centered[n - 1] - centered[n - 1 - i]));

    let half = ntaps / 2;
    let filter = |sig: &[f64]| -> Vec<f64> {
        (0..sig.len())
            .map(|i| {
                taps.iter()
                    .enumerate()
                    .map(|(k, &h)| {
                        let j = i as isize + k as isize - half as isize;
                        if j < 0 || j >= sig.len() as isize {
                            0.0
                        } else {
                            h * sig[j as usize]
                        }
                    })
                    .sum()
            })
            .collect()
    };
    let forward = filter(&ext);
    let mut rev: Vec<f64> = forward.into_iter().rev().collect();
    rev = filter(&rev);
    rev.reverse();
    Ok(rev[pad..pad + n].to_vec())
}

pub fn spectrum_csv(psd: &PsdSpectrum) -> String {
    let mut s = String::from("freq_hz,power\n");
    for (f, p) in psd.freqs_hz.iter().zip(&psd.power) {
        let _ = writeln!(s, "{f},{p}");
    }
    s
}

pub fn metrics_csv(m: &MetricsReport) -> String {
    format!("mae,rmse,rho\n{},{},{}\n", m.mae_bpm, m.rmse_bpm, m.pearson_rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, fs: f64, n: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs + phase).sin()).collect()
    }

    #[test]
    fn grid_defaults() {
        let g = HrBinGrid::default();
        assert_eq!(g.len(), 140);
        assert_eq!(g.center(0), 40.5);
        assert_eq!(g.bin_of(90.2), 50);
        assert!(HrBinGrid::new(100.0, 50.0, 1.0).is_err());
        assert!(HrBinGrid::new(40.0, 180.0, 0.0).is_err());
    }

    #[test]
    fn constant_has_no_power() {
        let psd = periodogram(&[3.0; 64], 30.0).unwrap();
        assert!(psd.power.iter().all(|&p| p.abs() < 1e-20));
        assert!(periodogram(&[1.0; 7], 30.0).is_err());
    }

    #[test]
    fn hr_readout_of_tone() {
        let psd = periodogram(&tone(1.5, 30.0, 300, 1.0, 0.3), 30.0).unwrap();
        let hr = estimate_hr(&psd, &HrBinGrid::default()).unwrap();
        assert!((hr - 90.0).abs() < 0.5, "{hr}");
    }

    #[test]
    fn readout_edge_and_ties() {
        let grid = HrBinGrid::default();
        let freqs: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
        let rising = PsdSpectrum {
            power: freqs.iter().map(|&f| f).collect(),
            freqs_hz: freqs.clone(),
        };
        assert!((estimate_hr(&rising, &grid).unwrap() - 180.0).abs() < 1e-9);

        let mut flat = vec![0.0; freqs.len()];
        flat[12] = 5.0;
        flat[20] = 5.0;
        let tie = PsdSpectrum { freqs_hz: freqs.clone(), power: flat };
        assert!((estimate_hr(&tie, &grid).unwrap() - 72.0).abs() < 1e-9);

        let outside = PsdSpectrum { freqs_hz: vec![5.0, 6.0], power: vec![1.0, 2.0] };
        assert!(estimate_hr(&outside, &grid).is_err());
    }

    #[test]
    fn gaussian_label_shapes() {
        let grid = HrBinGrid::default();
        let narrow = max_gaussian(grid.center(30), &grid, 0.05).unwrap();
        assert!(narrow.dist.pmf[30] > 1.0 - 1e-12);

        let g = HrBinGrid::new(40.0, 51.0, 1.0).unwrap();
        let sym = max_gaussian(45.5, &g, 2.0).unwrap().dist;
        for i in 0..g.len() {
            assert!((sym.pmf[i] - sym.pmf[g.len() - 1 - i]).abs() < 1e-15);
        }

        let far = max_gaussian(400.0, &grid, 2.0).unwrap();
        assert!(far.out_of_band);
        assert_eq!(far.dist.argmax_bin(), grid.len() - 1);
        assert!((far.dist.pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(max_gaussian(90.0, &grid, 0.0).is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[70.0, 80.0, 95.0], &[70.0, 80.0, 95.0]).unwrap();
        assert_eq!((m.mae_bpm, m.rmse_bpm, m.pearson_rho), (0.0, 0.0, 1.0));

        let m = metrics(&[72.0, 82.0, 97.0], &[70.0, 80.0, 95.0]).unwrap();
        assert!((m.mae_bpm - 2.0).abs() < 1e-12 && (m.rmse_bpm - 2.0).abs() < 1e-12);
        assert!((m.pearson_rho - 1.0).abs() < 1e-12);

        let m = metrics(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert_eq!((m.mae_bpm, m.rmse_bpm, m.pearson_rho), (1.0, 1.0, 0.0));
        assert!(m.degenerate);

        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn bandpass_rejects_bad_band_and_kills_dc() {
        assert!(bandpass(&[0.0; 100], 30.0, 2.0, 1.0).is_err());
        assert!(bandpass(&[0.0; 100], 30.0, 1.0, 15.0).is_err());
        let y = bandpass(&[4.0; 200], 30.0, 0.7, 3.0).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6 * 4.0));
    }

    #[test]
    fn csv_headers() {
        let psd = PsdSpectrum { freqs_hz: vec![0.0, 1.0], power: vec![0.5, 2.0] };
        assert_eq!(spectrum_csv(&psd), "freq_hz,power\n0,0.5\n1,2\n");
        let m = MetricsReport { mae_bpm: 1.0, rmse_bpm: 2.0, pearson_rho: 0.5, degenerate: false };
        assert_eq!(metrics_csv(&m), "mae,rmse,rho\n1,2,0.5\n");
    }
}
