//! The network: an appearance branch producing a soft spatial mask, the
//! masked motion stream, temporal channel shifting, a stack of gated video
//! blocks and two heads (per-step BVP and heart-rate bin logits).
//!
//! Feature maps are channel-first, `[C, T, H, W]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::preprocess::{frame_stem, frame_stem_augmented, normalized_frame_diff, standardize_frames, VideoClip, DIFF_EPS};
use crate::signal::HrBinGrid;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Where the temporal shift is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TsmPlacement {
    /// At the start of every block, before the norm.
    #[default]
    InBlock,
    /// Once, right after the stem projection.
    Stem,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsmConfig {
    /// Fraction of channels shifted in each direction.
    pub shift_fraction: f64,
    /// Adds learnable `(w1, w2, w3)` temporal mixing after the shift.
    pub learnable_taps: bool,
    pub placement: TsmPlacement,
}

impl Default for TsmConfig {
    fn default() -> Self {
        TsmConfig {
            shift_fraction: 0.125,
            learnable_taps: false,
            placement: TsmPlacement::InBlock,
        }
    }
}

impl TsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift_fraction > 0.0 && 2.0 * self.shift_fraction <= 1.0) {
            return Err(invalid(format!(
                "shift_fraction must satisfy 0 < 2f <= 1, got {}",
                self.shift_fraction
            )));
        }
        Ok(())
    }

    /// Channels moved in each direction for a `c`-channel map.
    pub fn fold(&self, c: usize) -> usize {
        (self.shift_fraction * c as f64).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub appearance_channels: usize,
    pub channels: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub depth: usize,
    pub grid: HrBinGrid,
    pub stem_hw: (usize, usize),
    pub tsm: TsmConfig,
    /// Concatenate the unconvolved `x_c` instead of the conv output.
    pub literal_concat: bool,
    /// Standard deviation multiplier for head weights; 0 gives zero heads.
    pub head_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            appearance_channels: 4,
            channels: 16,
            hidden: 32,
            conv_channels: 8,
            depth: 3,
            grid: HrBinGrid::default(),
            stem_hw: (4, 4),
            tsm: TsmConfig::default(),
            literal_concat: false,
            head_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.tsm.validate()?;
        if self.in_channels == 0 || self.appearance_channels == 0 || self.channels == 0 {
            return Err(invalid("model channel counts must be positive"));
        }
        if !(self.hidden > self.conv_channels && self.conv_channels >= 1) {
            return Err(invalid(format!(
                "need hidden > conv_channels >= 1, got hidden={} conv_channels={}",
                self.hidden, self.conv_channels
            )));
        }
        if self.depth == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        if self.stem_hw.0 == 0 || self.stem_hw.1 == 0 {
            return Err(invalid("stem_hw must be positive"));
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return Err(invalid("head_init_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Parameters of one gated video block.
#[derive(Clone, Debug)]
pub struct GvbParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub proj_g: Tensor,
    pub proj_g_bias: Tensor,
    pub proj_i: Tensor,
    pub proj_i_bias: Tensor,
    pub proj_c: Tensor,
    pub proj_c_bias: Tensor,
    pub conv: Tensor,
    pub conv_bias: Tensor,
    pub proj_out: Tensor,
    pub proj_out_bias: Tensor,
    /// `(w1, w2, w3)` when learnable taps are enabled.
    pub taps: Option<Tensor>,
}

/// Options that shape a block's forward pass but carry no weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockOptions {
    /// Temporal shift applied to the block input before the norm.
    pub tsm: Option<TsmConfig>,
    pub literal_concat: bool,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        };
        Tensor::param(shape, data).expect("shape matches data")
    }

    fn fan_in(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let fan: usize = shape[1..].iter().product();
        self.normal(shape, scale / (fan as f64).sqrt())
    }

    fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).requires_grad_(true)
    }

    fn ones(&self, n: usize) -> Tensor {
        Tensor::full(&[n], 1.0).requires_grad_(true)
    }
}

impl GvbParams {
    fn init(c: usize, dh: usize, dc: usize, taps: bool, init: &mut Init) -> Self {
        GvbParams {
            norm_gamma: init.ones(c),
            norm_beta: init.zeros(&[c]),
            proj_g: init.fan_in(&[dh, c], 1.0),
            proj_g_bias: init.zeros(&[dh]),
            proj_i: init.fan_in(&[dh - dc, c], 1.0),
            proj_i_bias: init.zeros(&[dh - dc]),
            proj_c: init.fan_in(&[dc, c], 1.0),
            proj_c_bias: init.zeros(&[dc]),
            conv: init.fan_in(&[dc, dc, 3, 3, 3], 1.0),
            conv_bias: init.zeros(&[dc]),
            proj_out: init.fan_in(&[c, dh], 1.0),
            proj_out_bias: init.zeros(&[c]),
            taps: taps.then(|| Tensor::param(&[3], vec![0.0, 1.0, 0.0]).expect("3 taps")),
        }
    }

    /// Random block with the given widths, seeded.
    pub fn random(c: usize, dh: usize, dc: usize, seed: u64) -> Result<Self> {
        if !(dh > dc && dc >= 1 && c >= 1) {
            return Err(invalid(format!("invalid block widths C={c} D_H={dh} D_C={dc}")));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        Ok(GvbParams::init(c, dh, dc, false, &mut init))
    }

    pub fn channels(&self) -> usize {
        self.norm_gamma.numel()
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            (format!("{prefix}.norm.gamma"), &self.norm_gamma),
            (format!("{prefix}.norm.beta"), &self.norm_beta),
            (format!("{prefix}.proj_g.weight"), &self.proj_g),
            (format!("{prefix}.proj_g.bias"), &self.proj_g_bias),
            (format!("{prefix}.proj_i.weight"), &self.proj_i),
            (format!("{prefix}.proj_i.bias"), &self.proj_i_bias),
            (format!("{prefix}.proj_c.weight"), &self.proj_c),
            (format!("{prefix}.proj_c.bias"), &self.proj_c_bias),
            (format!("{prefix}.conv.weight"), &self.conv),
            (format!("{prefix}.conv.bias"), &self.conv_bias),
            (format!("{prefix}.proj_out.weight"), &self.proj_out),
            (format!("{prefix}.proj_out.bias"), &self.proj_out_bias),
        ];
        if let Some(t) = &self.taps {
            v.push((format!("{prefix}.tsm.taps"), t));
        }
        v
    }

    fn slots(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.proj_g,
            &mut self.proj_g_bias,
            &mut self.proj_i,
            &mut self.proj_i_bias,
            &mut self.proj_c,
            &mut self.proj_c_bias,
            &mut self.conv,
            &mut self.conv_bias,
            &mut self.proj_out,
            &mut self.proj_out_bias,
        ];
        if let Some(t) = self.taps.as_mut() {
            v.push(t);
        }
        v
    }
}

/// All trainable tensors of the network.
#[derive(Clone, Debug)]
pub struct TyrppgParams {
    pub cfg: ModelConfig,
    pub app_conv1: Tensor,
    pub app_conv1_bias: Tensor,
    pub app_conv2: Tensor,
    pub app_conv2_bias: Tensor,
    pub attention: Tensor,
    pub attention_bias: Tensor,
    pub stem: Tensor,
    pub stem_bias: Tensor,
    /// Taps for the once-at-stem shift, when that placement is used.
    pub stem_taps: Option<Tensor>,
    pub blocks: Vec<GvbParams>,
    pub bvp_head: Tensor,
    pub bvp_head_bias: Tensor,
    pub hr_head: Tensor,
    pub hr_head_bias: Tensor,
}

impl TyrppgParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (ci, ca, c) = (cfg.in_channels, cfg.appearance_channels, cfg.channels);
        let in_block_taps = cfg.tsm.learnable_taps && cfg.tsm.placement == TsmPlacement::InBlock;
        let app_conv1 = init.fan_in(&[ca, ci, 3, 3, 3], 1.0);
        let app_conv2 = init.fan_in(&[ca, ca, 3, 3, 3], 1.0);
        let attention = init.fan_in(&[1, ca], 1.0);
        let stem = init.fan_in(&[c, ci], 1.0);
        let blocks = (0..cfg.depth)
            .map(|_| GvbParams::init(c, cfg.hidden, cfg.conv_channels, in_block_taps, &mut init))
            .collect();
        let bvp_head = init.fan_in(&[1, c], cfg.head_init_scale);
        let hr_head = init.fan_in(&[cfg.grid.len(), c], cfg.head_init_scale);
        Ok(TyrppgParams {
            cfg: *cfg,
            app_conv1,
            app_conv1_bias: init.zeros(&[ca]),
            app_conv2,
            app_conv2_bias: init.zeros(&[ca]),
            attention,
            attention_bias: init.zeros(&[1]),
            stem,
            stem_bias: init.zeros(&[c]),
            stem_taps: (cfg.tsm.learnable_taps && cfg.tsm.placement == TsmPlacement::Stem)
                .then(|| Tensor::param(&[3], vec![0.0, 1.0, 0.0]).expect("3 taps")),
            blocks,
            bvp_head,
            bvp_head_bias: init.zeros(&[1]),
            hr_head,
            hr_head_bias: init.zeros(&[cfg.grid.len()]),
        })
    }

    /// Parameters with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("appearance.conv1.weight".into(), &self.app_conv1),
            ("appearance.conv1.bias".into(), &self.app_conv1_bias),
            ("appearance.conv2.weight".into(), &self.app_conv2),
            ("appearance.conv2.bias".into(), &self.app_conv2_bias),
            ("appearance.attention.weight".into(), &self.attention),
            ("appearance.attention.bias".into(), &self.attention_bias),
            ("stem.weight".into(), &self.stem),
            ("stem.bias".into(), &self.stem_bias),
        ];
        if let Some(t) = &self.stem_taps {
            v.push(("stem.tsm.taps".into(), t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named(&format!("blocks.{i}")));
        }
        v.extend([
            ("bvp_head.weight".into(), &self.bvp_head),
            ("bvp_head.bias".into(), &self.bvp_head_bias),
            ("hr_head.weight".into(), &self.hr_head),
            ("hr_head.bias".into(), &self.hr_head_bias),
        ]);
        v
    }

    /// Mutable slots in the same order as [`TyrppgParams::named`].
    pub fn slots(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![
            &mut self.app_conv1,
            &mut self.app_conv1_bias,
            &mut self.app_conv2,
            &mut self.app_conv2_bias,
            &mut self.attention,
            &mut self.attention_bias,
            &mut self.stem,
            &mut self.stem_bias,
        ];
        if let Some(t) = self.stem_taps.as_mut() {
            v.push(t);
        }
        for b in &mut self.blocks {
            v.extend(b.slots());
        }
        v.extend([
            &mut self.bvp_head,
            &mut self.bvp_head_bias,
            &mut self.hr_head,
            &mut self.hr_head_bias,
        ]);
        v
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrites every parameter, in [`TyrppgParams::named`] order, with a
    /// fresh leaf holding `values[i]`.
    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let slots = self.slots();
        if slots.len() != values.len() {
            return Err(invalid(format!("expected {} tensors, got {}", slots.len(), values.len())));
        }
        let mut fresh = Vec::with_capacity(slots.len());
        for (slot, v) in slots.iter().zip(values) {
            if v.len() != slot.numel() {
                return Err(invalid(format!(
                    "tensor of shape {:?} cannot take {} values",
                    slot.shape(),
                    v.len()
                )));
            }
            fresh.push(Tensor::param(slot.shape(), v.clone())?);
        }
        for (slot, t) in self.slots().into_iter().zip(fresh) {
            *slot = t;
        }
        Ok(())
    }

    /// Independent copy whose parameters are fresh leaves.
    pub fn deep_clone(&self) -> Self {
        let mut out = self.clone();
        let values: Vec<Vec<f64>> = self.tensors().iter().map(|t| t.to_vec()).collect();
        out.load_values(&values).expect("same layout");
        out
    }

    /// Zeroes both head weights and biases.
    pub fn zero_heads(&mut self) {
        for t in [
            &mut self.bvp_head,
            &mut self.bvp_head_bias,
            &mut self.hr_head,
            &mut self.hr_head_bias,
        ] {
            *t = Tensor::zeros(t.shape()).requires_grad_(true);
        }
    }
}

/// Mask of the form `(H/8)(W/8)·σ(X) / (2‖σ(X)‖₁)` per frame, where `(H, W)`
/// is the frame size in pixels and `X` is `(T, 1, H', W')` attention logits.
pub fn attention_mask(logits: &Tensor, frame_hw: (usize, usize)) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 1 || s[2] == 0 || s[3] == 0 {
        return Err(invalid(format!("attention_mask expects (T, 1, H, W) logits, got {s:?}")));
    }
    let (t, hw) = (s[0], s[2] * s[3]);
    let factor = (frame_hw.0 as f64 / 8.0) * (frame_hw.1 as f64 / 8.0) / 2.0;
    let sig = logits.sigmoid().reshape(&[t, hw])?;
    let l1 = sig.sum(&[1])?;
    let mask = sig.permute(&[1, 0])?.div(&l1)?.scale(factor);
    mask.permute(&[1, 0])?.reshape(s)
}

/// Temporal shift of a `[C, T, H, W]` map: the first `fold` channels take
/// their value from `t-1`, the next `fold` from `t+1`, zero-filled at the ends.
/// With `taps = (w1, w2, w3)` the shifted map `z` is further mixed as
/// `w1·z[t-1] + w2·z[t] + w3·z[t+1]`.
pub fn tsm_shift(x: &Tensor, cfg: &TsmConfig, taps: Option<&Tensor>) -> Result<Tensor> {
    cfg.validate()?;
    if x.rank() != 4 {
        return Err(invalid(format!("tsm_shift expects [C, T, H, W], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    let fold = cfg.fold(c);
    let z = if fold == 0 {
        x.clone()
    } else {
        let parts = x.split(&[fold, fold, c - 2 * fold], 0)?;
        let fwd = parts[0].shift(1, 1)?;
        let bwd = parts[1].shift(1, -1)?;
        Tensor::concat(&[&fwd, &bwd, &parts[2]], 0)?
    };
    match taps {
        None => Ok(z),
        Some(w) => {
            if w.shape() != [3] {
                return Err(invalid(format!("tsm taps must have shape [3], got {:?}", w.shape())));
            }
            let w = w.split(&[1, 1, 1], 0)?;
            z.shift(1, 1)?
                .mul(&w[0])?
                .add(&z.mul(&w[1])?)?
                .add(&z.shift(1, -1)?.mul(&w[2])?)
        }
    }
}

/// One gated video block on a `[C, T, H, W]` map:
/// norm, three projections, 3D conv on the `x_c` slice, sigmoid gate,
/// output projection and residual.
pub fn gvb_forward(x: &Tensor, p: &GvbParams, opts: &BlockOptions) -> Result<Tensor> {
    let c = p.channels();
    if x.rank() != 4 || x.shape()[0] != c {
        return Err(invalid(format!(
            "gvb: input shape {:?} does not match norm/proj_g width {c}",
            x.shape()
        )));
    }
    let check = |name: &str, w: &Tensor, n_in: usize| -> Result<()> {
        if w.rank() != 2 || w.shape()[1] != n_in {
            return Err(invalid(format!("gvb: {name} expects {n_in} inputs, weight has shape {:?}", w.shape())));
        }
        Ok(())
    };
    check("proj_g", &p.proj_g, c)?;
    check("proj_i", &p.proj_i, c)?;
    check("proj_c", &p.proj_c, c)?;
    let dh = p.proj_g.shape()[0];
    let dc = p.proj_c.shape()[0];
    if p.proj_i.shape()[0] + dc != dh {
        return Err(invalid(format!(
            "gvb: proj_i ({}) + proj_c ({dc}) must equal proj_g width {dh}",
            p.proj_i.shape()[0]
        )));
    }
    check("proj_out", &p.proj_out, dh)?;

    let shifted = match &opts.tsm {
        Some(cfg) => tsm_shift(x, cfg, p.taps.as_ref())?,
        None => x.clone(),
    };
    let xn = shifted.layer_norm(0, LN_EPS, Some(&p.norm_gamma), Some(&p.norm_beta))?;
    let xg = xn.linear(&p.proj_g, Some(&p.proj_g_bias))?;
    let xi = xn.linear(&p.proj_i, Some(&p.proj_i_bias))?;
    let xc = xn.linear(&p.proj_c, Some(&p.proj_c_bias))?;
    let xo = if opts.literal_concat {
        Tensor::concat(&[&xi, &xc], 0)?
    } else {
        Tensor::concat(&[&xi, &xc.conv3d(&p.conv, Some(&p.conv_bias))?], 0)?
    };
    let xo1 = xg.sigmoid().mul(&xo)?.linear(&p.proj_out, Some(&p.proj_out_bias))?;
    xo1.add(x)
}

/// Stemmed network inputs, both `[C_in, T-1, h, w]`.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub motion: Tensor,
    pub appearance: Tensor,
}

/// Builds the motion and appearance streams of `clip`. With `rng` the stem
/// applies the same random crop/flip to both.
pub fn prepare_input(clip: &VideoClip, cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<ModelInput> {
    let (t, c, h, w) = clip.dims();
    if c != cfg.in_channels {
        return Err(invalid(format!("clip has {c} channels, model expects {}", cfg.in_channels)));
    }
    let diff = normalized_frame_diff(clip, DIFF_EPS)?;
    // Appearance for step t is the mean of standardized frames t and t+1.
    let app = standardize_frames(&clip.frames)?;
    let frame = c * h * w;
    let a = app.data();
    let app_pairs: Vec<f64> = (0..(t - 1) * frame).map(|i| 0.5 * (a[i] + a[i + frame])).collect();
    let app = Tensor::new(&[t - 1, c, h, w], app_pairs)?;
    let both = Tensor::concat(&[&diff, &app], 1)?;
    let stemmed = match rng {
        Some(r) => frame_stem_augmented(&both, cfg.stem_hw, r)?,
        None => frame_stem(&both, cfg.stem_hw)?,
    };
    let parts = stemmed.split(&[c, c], 1)?;
    Ok(ModelInput {
        motion: parts[0].permute(&[1, 0, 2, 3])?.detach(),
        appearance: parts[1].permute(&[1, 0, 2, 3])?.detach(),
    })
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Per-step BVP in the difference domain, length `T-1`.
    pub bvp: Tensor,
    /// Heart-rate bin logits, length `K`.
    pub logits: Tensor,
    /// Spatial mask, `(T-1, 1, h, w)`.
    pub mask: Tensor,
}

pub fn forward(input: &ModelInput, p: &TyrppgParams) -> Result<ModelOutput> {
    let cfg = &p.cfg;
    let s = input.motion.shape().to_vec();
    if s.len() != 4 || input.appearance.shape() != s.as_slice() {
        return Err(invalid(format!(
            "motion {:?} and appearance {:?} must share a [C, T, H, W] shape",
            s,
            input.appearance.shape()
        )));
    }
    let (tm, h, w) = (s[1], s[2], s[3]);

    let a = input.appearance.conv3d(&p.app_conv1, Some(&p.app_conv1_bias))?.tanh();
    let a = a.conv3d(&p.app_conv2, Some(&p.app_conv2_bias))?.tanh();
    let logits = a.linear(&p.attention, Some(&p.attention_bias))?.reshape(&[tm, 1, h, w])?;
    let mask = attention_mask(&logits, (8 * h, 8 * w))?;

    let masked = input.motion.mul(&mask.reshape(&[tm, h, w])?)?;
    let mut x = masked.linear(&p.stem, Some(&p.stem_bias))?;
    if cfg.tsm.placement == TsmPlacement::Stem {
        x = tsm_shift(&x, &cfg.tsm, p.stem_taps.as_ref())?;
    }
    let opts = BlockOptions {
        tsm: (cfg.tsm.placement == TsmPlacement::InBlock).then_some(cfg.tsm),
        literal_concat: cfg.literal_concat,
    };
    for b in &p.blocks {
        x = gvb_forward(&x, b, &opts)?;
    }

    let bvp = x
        .avg_pool_spatial()?
        .linear(&p.bvp_head, Some(&p.bvp_head_bias))?
        .reshape(&[tm])?;
    let pooled = x.mean(&[1, 2, 3])?;
    let hr_logits = pooled.linear(&p.hr_head, Some(&p.hr_head_bias))?;
    Ok(ModelOutput {
        bvp,
        logits: hr_logits,
        mask,
    })
}

/// Deterministic (no augmentation) forward pass on a clip.
pub fn forward_clip(clip: &VideoClip, p: &TyrppgParams) -> Result<ModelOutput> {
    forward(&prepare_input(clip, &p.cfg, None)?, p)
}
