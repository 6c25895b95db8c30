//! Synthetic pulsatile video: a skin-coloured Gaussian blob whose intensity
//! follows a skewed pulse, under a multiplicative illumination ramp, sensor
//! noise and per-frame translation jitter.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::preprocess::VideoClip;
use crate::signal::HrBinGrid;
use crate::tensor::Tensor;

/// Relative pulse strength in the three colour channels.
const CHANNEL_PULSE: [f64; 3] = [0.3, 1.0, 0.5];
const SKIN: [f64; 3] = [0.62, 0.48, 0.40];
const BACKGROUND: [f64; 3] = [0.30, 0.32, 0.35];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fs: f64,
    pub hr_range_bpm: (f64, f64),
    /// Relative modulation of skin intensity by the pulse.
    pub pulse_amplitude: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    /// Peak relative change of the illumination ramp over the clip.
    pub illumination_drift_amplitude: f64,
    /// Maximum blob displacement per frame, in pixels.
    pub motion_jitter_px: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 80,
            frames: 160,
            height: 8,
            width: 8,
            fs: 20.0,
            hr_range_bpm: (50.0, 150.0),
            pulse_amplitude: 0.05,
            noise_sigma: 0.01,
            illumination_drift_amplitude: 0.1,
            motion_jitter_px: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The standard benchmark: 80 clips with moderate sensor noise, a pulse
    /// well below the per-pixel noise floor.
    pub fn benchmark() -> Self {
        SynthConfig {
            noise_sigma: 0.05,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self, grid: &HrBinGrid) -> Result<()> {
        if self.n_clips == 0 || self.frames < 8 || self.height == 0 || self.width == 0 {
            return Err(invalid("synth needs n_clips >= 1, frames >= 8 and a non-empty frame"));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(invalid(format!("synth fs must be positive, got {}", self.fs)));
        }
        let (lo, hi) = self.hr_range_bpm;
        if !(lo <= hi && lo >= grid.lo_bpm && hi <= grid.hi_bpm) {
            return Err(invalid(format!(
                "hr_range_bpm ({lo}, {hi}) must lie inside the band [{}, {}]",
                grid.lo_bpm, grid.hi_bpm
            )));
        }
        if hi / 60.0 >= self.fs / 2.0 {
            return Err(invalid("hr_range_bpm exceeds the Nyquist rate"));
        }
        for (name, v) in [
            ("pulse_amplitude", self.pulse_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("illumination_drift_amplitude", self.illumination_drift_amplitude),
            ("motion_jitter_px", self.motion_jitter_px),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Skewed pulse: fundamental plus a phase-shifted second harmonic.
pub fn pulse_waveform(theta: f64, harmonic_phase: f64) -> f64 {
    theta.sin() + 0.2 * (2.0 * theta + harmonic_phase).sin()
}

pub fn synth_clip(cfg: &SynthConfig, index: usize) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let (lo, hi) = cfg.hr_range_bpm;
    let hr = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let harmonic_phase = rng.random_range(0.0..2.0 * PI);
    let drift_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let sigma_blob = 0.3 * h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));

    let mut bvp = Vec::with_capacity(t_n);
    let mut frames = Vec::with_capacity(t_n * 3 * h * w);
    for t in 0..t_n {
        let theta = 2.0 * PI * hr / 60.0 * t as f64 / cfg.fs + phase0;
        let p = pulse_waveform(theta, harmonic_phase);
        bvp.push(p);
        let illum = 1.0 + drift_sign * cfg.illumination_drift_amplitude * (t as f64 / (t_n - 1) as f64 - 0.5);
        let (jy, jx) = if cfg.motion_jitter_px > 0.0 {
            (
                rng.random_range(-cfg.motion_jitter_px..=cfg.motion_jitter_px),
                rng.random_range(-cfg.motion_jitter_px..=cfg.motion_jitter_px),
            )
        } else {
            (0.0, 0.0)
        };
        for ch in 0..3 {
            let skin = SKIN[ch] * (1.0 + cfg.pulse_amplitude * CHANNEL_PULSE[ch] * p);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                    let g = (-d2 / (2.0 * sigma_blob * sigma_blob)).exp();
                    let mut v = illum * (BACKGROUND[ch] * (1.0 - g) + skin * g);
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    frames.push(v.clamp(0.0, 1.0) as f32 as f64);
                }
            }
        }
    }
    VideoClip::new(Tensor::new(&[t_n, 3, h, w], frames)?, cfg.fs, Some(bvp), Some(hr))
}

pub fn synth_dataset(cfg: &SynthConfig, grid: &HrBinGrid) -> Result<Vec<VideoClip>> {
    cfg.validate(grid)?;
    (0..cfg.n_clips).map(|i| synth_clip(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{estimate_hr, periodogram};

    #[test]
    fn clean_blob_mean_recovers_label() {
        let cfg = SynthConfig {
            n_clips: 6,
            frames: 300,
            fs: 30.0,
            noise_sigma: 0.0,
            illumination_drift_amplitude: 0.0,
            motion_jitter_px: 0.0,
            ..Default::default()
        };
        let grid = HrBinGrid::default();
        for clip in synth_dataset(&cfg, &grid).unwrap() {
            let (t, c, h, w) = clip.dims();
            let plane = h * w;
            let green: Vec<f64> = (0..t)
                .map(|ti| clip.frames.data()[(ti * c + 1) * plane..(ti * c + 2) * plane].iter().sum::<f64>())
                .collect();
            let hr = estimate_hr(&periodogram(&green, clip.fs).unwrap(), &grid).unwrap();
            assert!((hr - clip.gt_hr_bpm.unwrap()).abs() <= 1.0, "{hr} vs {:?}", clip.gt_hr_bpm);
        }
    }

    #[test]
    fn zero_amplitude_keeps_label_but_no_pulse() {
        let cfg = SynthConfig {
            n_clips: 1,
            frames: 32,
            pulse_amplitude: 0.0,
            noise_sigma: 0.0,
            illumination_drift_amplitude: 0.0,
            motion_jitter_px: 0.0,
            ..Default::default()
        };
        let clip = synth_clip(&cfg, 0).unwrap();
        assert!(clip.gt_bvp.as_ref().unwrap().iter().any(|v| v.abs() > 0.1));
        let frame = 3 * 64;
        let d = clip.frames.data();
        assert!((frame..d.len()).all(|i| d[i] == d[i - frame]));
    }

    #[test]
    fn range_outside_band_rejected() {
        let cfg = SynthConfig {
            hr_range_bpm: (30.0, 90.0),
            ..Default::default()
        };
        assert!(cfg.validate(&HrBinGrid::default()).is_err());
    }
}
