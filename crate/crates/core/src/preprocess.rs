//! Clip container and the input transforms: normalized frame difference
//! (motion stream), per-clip standardization (appearance stream) and the
//! crop/pool frame stem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::signal::HrBinGrid;
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"TYC1";

/// Default stabilizer for the normalized difference denominator.
pub const DIFF_EPS: f64 = 1e-8;

const VARIANCE_GUARD: f64 = 1e-8;

/// A `(T, C, H, W)` frame block with its sampling rate and optional labels.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fs: f64,
    pub gt_bvp: Option<Vec<f64>>,
    pub gt_hr_bpm: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Tensor, fs: f64, gt_bvp: Option<Vec<f64>>, gt_hr_bpm: Option<f64>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(invalid(format!("clip frames must be (T, C, H, W), got {:?}", frames.shape())));
        }
        let t = frames.shape()[0];
        if t < 2 {
            return Err(invalid(format!("clip needs at least 2 frames, got {t}")));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(invalid(format!("sampling rate must be positive, got {fs}")));
        }
        if let Some(bvp) = &gt_bvp {
            if bvp.len() != t {
                return Err(invalid(format!("gt_bvp has {} samples for {t} frames", bvp.len())));
            }
        }
        Ok(VideoClip {
            frames,
            fs,
            gt_bvp,
            gt_hr_bpm,
        })
    }

    /// `(T, C, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Checks the labelled heart rate against the band of `grid`.
    pub fn check_band(&self, grid: &HrBinGrid) -> Result<()> {
        match self.gt_hr_bpm {
            Some(hr) if hr < grid.lo_bpm || hr > grid.hi_bpm => Err(invalid(format!(
                "gt heart rate {hr} bpm outside band [{}, {}]",
                grid.lo_bpm, grid.hi_bpm
            ))),
            _ => Ok(()),
        }
    }

    /// Ground-truth BVP differenced once, aligned with the motion stream.
    pub fn gt_bvp_diff(&self) -> Option<Vec<f64>> {
        self.gt_bvp
            .as_ref()
            .map(|b| b.windows(2).map(|w| w[1] - w[0]).collect())
    }
}

/// `(x[t+1] - x[t]) / (x[t+1] + x[t] + eps)` per pixel, giving `(T-1, C, H, W)`.
/// A zero denominator (only possible with `eps = 0`) yields 0.
pub fn normalized_frame_diff(clip: &VideoClip, eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(invalid(format!("eps must be non-negative, got {eps}")));
    }
    let (t, c, h, w) = clip.dims();
    if t < 2 {
        return Err(invalid("normalized_frame_diff needs T >= 2"));
    }
    let frame = c * h * w;
    let x = clip.frames.data();
    let out = (0..(t - 1) * frame)
        .map(|i| {
            let (a, b) = (x[i], x[i + frame]);
            let den = a + b + eps;
            if den == 0.0 {
                0.0
            } else {
                (b - a) / den
            }
        })
        .collect();
    Tensor::new(&[t - 1, c, h, w], out)
}

/// Per-channel zero mean / unit variance over the whole clip.
pub fn standardize_appearance(clip: &VideoClip) -> Result<Tensor> {
    standardize_frames(&clip.frames)
}

pub(crate) fn standardize_frames(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    let (t, c, plane) = (s[0], s[1], s[2] * s[3]);
    let x = frames.data();
    let mut out = vec![0.0; x.len()];
    let n = (t * plane) as f64;
    for ch in 0..c {
        let idx = |ti: usize| (ti * c + ch) * plane;
        let mean = (0..t).map(|ti| x[idx(ti)..idx(ti) + plane].iter().sum::<f64>()).sum::<f64>() / n;
        let var = (0..t)
            .map(|ti| x[idx(ti)..idx(ti) + plane].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let std = var.max(VARIANCE_GUARD).sqrt();
        for ti in 0..t {
            for k in idx(ti)..idx(ti) + plane {
                out[k] = (x[k] - mean) / std;
            }
        }
    }
    Tensor::new(s, out)
}

/// Crop window and pooling factor the stem uses for a given input and target.
fn stem_plan(h: usize, w: usize, target: (usize, usize)) -> Result<(usize, usize, usize)> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(invalid(format!("frame stem target {th}x{tw} does not fit input {h}x{w}")));
    }
    let pool = if 2 * th <= h && 2 * tw <= w { 2 } else { 1 };
    Ok((th * pool, tw * pool, pool))
}

/// Deterministic stem: center crop to `2H' x 2W'` and 2x2 average pool when
/// the input is large enough, otherwise a plain center crop to `H' x W'`.
pub fn frame_stem(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = check_video(x)?;
    let (ch, cw, _) = stem_plan(s[2], s[3], target)?;
    stem_apply(x, target, ((s[2] - ch) / 2, (s[3] - cw) / 2), false)
}

/// Training-time stem: seeded random crop offset and random horizontal flip.
pub fn frame_stem_augmented<R: Rng + ?Sized>(x: &Tensor, target: (usize, usize), rng: &mut R) -> Result<Tensor> {
    let s = check_video(x)?;
    let (ch, cw, _) = stem_plan(s[2], s[3], target)?;
    let oy = rng.random_range(0..=s[2] - ch);
    let ox = rng.random_range(0..=s[3] - cw);
    let flip = rng.random_bool(0.5);
    stem_apply(x, target, (oy, ox), flip)
}

fn check_video(x: &Tensor) -> Result<&[usize]> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "frame_stem",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    Ok(x.shape())
}

fn stem_apply(x: &Tensor, target: (usize, usize), offset: (usize, usize), flip: bool) -> Result<Tensor> {
    let s = x.shape();
    let (frames, h, w) = (s[0] * s[1], s[2], s[3]);
    let (th, tw) = target;
    let (_, _, pool) = stem_plan(h, w, target)?;
    let inv = 1.0 / (pool * pool) as f64;
    let data = x.data();
    let mut out = Vec::with_capacity(frames * th * tw);
    for f in 0..frames {
        let plane = &data[f * h * w..(f + 1) * h * w];
        for y in 0..th {
            for xo in 0..tw {
                let xs = if flip { tw - 1 - xo } else { xo };
                let mut acc = 0.0;
                for dy in 0..pool {
                    for dx in 0..pool {
                        let py = offset.0 + y * pool + dy;
                        let px = offset.1 + xs * pool + if flip { pool - 1 - dx } else { dx };
                        acc += plane[py * w + px];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(&[s[0], s[1], th, tw], out)
}

/// `TYC1`: magic, `u32` T/C/H/W, `f64` fs, `f64` gt heart rate (NaN when
/// absent), frames as `f32`, BVP as `f64` (NaN-filled when absent).
pub fn write_clip_to<W: Write>(w: &mut W, clip: &VideoClip) -> Result<()> {
    let (t, c, h, wd) = clip.dims();
    w.write_all(CLIP_MAGIC)?;
    for e in [t, c, h, wd] {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    w.write_all(&clip.fs.to_le_bytes())?;
    w.write_all(&clip.gt_hr_bpm.unwrap_or(f64::NAN).to_le_bytes())?;
    for &v in clip.frames.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    match &clip.gt_bvp {
        Some(b) => b.iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        None => (0..t).try_for_each(|_| w.write_all(&f64::NAN.to_le_bytes()))?,
    }
    Ok(())
}

pub fn read_clip_from<R: Read>(r: &mut R) -> Result<VideoClip> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Format(format!("bad clip magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    let mut b4 = [0u8; 4];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let fs = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let hr = f64::from_le_bytes(b8);
    let n = dims.iter().product::<usize>();
    let mut fbytes = vec![0u8; n * 4];
    r.read_exact(&mut fbytes)?;
    let frames = fbytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut bbytes = vec![0u8; dims[0] * 8];
    r.read_exact(&mut bbytes)?;
    let bvp: Vec<f64> = bbytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let gt_bvp = (!bvp.iter().all(|v| v.is_nan())).then_some(bvp);
    let gt_hr = (!hr.is_nan()).then_some(hr);
    VideoClip::new(Tensor::new(&dims, frames)?, fs, gt_bvp, gt_hr)
}

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip_to(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    read_clip_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip_from(t: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> VideoClip {
        VideoClip::new(Tensor::new(&[t, c, h, w], data).unwrap(), 30.0, None, None).unwrap()
    }

    #[test]
    fn diff_basic_values() {
        let clip = clip_from(2, 1, 1, 1, vec![1.0, 3.0]);
        assert_eq!(normalized_frame_diff(&clip, 0.0).unwrap().data(), &[0.5]);

        let still = clip_from(3, 1, 1, 2, vec![0.4, 0.7, 0.4, 0.7, 0.4, 0.7]);
        assert!(normalized_frame_diff(&still, DIFF_EPS).unwrap().data().iter().all(|&v| v == 0.0));

        let dark = clip_from(2, 1, 1, 1, vec![0.0, 0.0]);
        let d = normalized_frame_diff(&dark, 1e-8).unwrap();
        assert_eq!(d.data(), &[0.0]);
        let d0 = normalized_frame_diff(&dark, 0.0).unwrap();
        assert_eq!(d0.data(), &[0.0]);
    }

    #[test]
    fn clip_validation() {
        assert!(VideoClip::new(Tensor::zeros(&[1, 1, 2, 2]), 30.0, None, None).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[3, 1, 2, 2]), 0.0, None, None).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[3, 1, 2, 2]), 30.0, Some(vec![0.0; 2]), None).is_err());
        let clip = VideoClip::new(Tensor::zeros(&[3, 1, 2, 2]), 30.0, None, Some(200.0)).unwrap();
        assert!(clip.check_band(&HrBinGrid::default()).is_err());
    }

    #[test]
    fn standardize_constant_and_binary() {
        let constant = clip_from(2, 1, 2, 2, vec![0.3; 8]);
        assert!(standardize_appearance(&constant).unwrap().data().iter().all(|&v| v == 0.0));

        let binary = clip_from(2, 1, 1, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let s = standardize_appearance(&binary).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn stem_identity_and_constant() {
        let x = Tensor::new(&[2, 1, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        assert_eq!(frame_stem(&x, (3, 3)).unwrap().data(), x.data());

        let ones = Tensor::full(&[3, 2, 8, 6], 1.0);
        for target in [(4, 3), (2, 2), (5, 5), (8, 6)] {
            let y = frame_stem(&ones, target).unwrap();
            assert_eq!(y.shape(), &[3, 2, target.0, target.1]);
            assert!(y.data().iter().all(|&v| v == 1.0));
        }
        assert!(frame_stem(&ones, (9, 2)).is_err());
    }

    #[test]
    fn stem_pools_center() {
        // 4x4 frame, target 2x2: full crop, each output is a 2x2 block mean
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = frame_stem(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn augmented_stem_is_seed_deterministic() {
        let x = Tensor::new(&[2, 1, 10, 10], (0..200).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = frame_stem_augmented(&x, (3, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = frame_stem_augmented(&x, (3, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn clip_container_layout() {
        let clip = VideoClip::new(
            Tensor::new(&[2, 1, 1, 2], vec![0.25, 0.5, 0.75, 1.0]).unwrap(),
            30.0,
            Some(vec![0.1, -0.1]),
            Some(72.0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_clip_to(&mut buf, &clip).unwrap();
        assert_eq!(&buf[..4], b"TYC1");
        assert_eq!(buf.len(), 4 + 16 + 16 + 4 * 4 + 2 * 8);
        let back = read_clip_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.frames.data(), clip.frames.data());
        assert_eq!(back.gt_bvp, clip.gt_bvp);
        assert_eq!(back.gt_hr_bpm, Some(72.0));
    }
}
