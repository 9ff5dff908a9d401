//! Synthetic exposure-degraded pairs for desk-scale runs.
//!
//! A degraded view is `clip(base * 2^ev, 0, 1)^gamma` with a per-image
//! gamma drawn log-uniformly from `[0.8, 1.25]`. The ground truth is the
//! base scene itself.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::save_image;
use super::manifest::VariantLabel;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng;

pub const EV_RANGE: (f64, f64) = (-3.0, 3.0);
pub const GAMMA_RANGE: (f64, f64) = (0.8, 1.25);
pub const DEFAULT_LADDER: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// One uniformly exposed variant per ladder EV.
    Ladder,
    /// One variant whose EV ramps monotonically across the columns.
    Grad,
    /// One variant with an independent EV per rectangular region.
    Mix,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(SynthMode::Ladder),
            "grad" => Ok(SynthMode::Grad),
            "mix" => Ok(SynthMode::Mix),
            _ => Err(Error::invalid(format!("unknown synth mode `{s}` (expected ladder, grad or mix)"))),
        }
    }
}

fn check_ev(ev: f64) -> Result<()> {
    if !(EV_RANGE.0..=EV_RANGE.1).contains(&ev) {
        return Err(Error::invalid(format!("exposure value {ev} outside [{}, {}]", EV_RANGE.0, EV_RANGE.1)));
    }
    Ok(())
}

fn sample_gamma<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(GAMMA_RANGE.0.ln()..=GAMMA_RANGE.1.ln()).exp()
}

fn expose(v: f32, ev: f64, gamma: f64) -> f32 {
    ((v as f64 * ev.exp2()).clamp(0.0, 1.0)).powf(gamma) as f32
}

/// `clip(base * 2^ev, 0, 1)^gamma`, no randomness.
pub fn apply_exposure(base: &ImageGrid, ev: f64, gamma: f64) -> Result<ImageGrid> {
    check_ev(ev)?;
    Ok(base.map(|v| expose(v, ev, gamma)))
}

/// `(degraded, ground_truth)` with gamma jitter seeded by `seed`.
pub fn synth_exposure_pair(base: &ImageGrid, ev: f64, seed: u64) -> Result<(ImageGrid, ImageGrid)> {
    let gamma = sample_gamma(&mut rng::stream(seed, &[0x9a]));
    Ok((apply_exposure(base, ev, gamma)?, base.clone()))
}

/// Per-column EV from `ev_left` to `ev_right`, linear in the column index.
pub fn apply_column_ramp(base: &ImageGrid, ev_left: f64, ev_right: f64, gamma: f64) -> Result<ImageGrid> {
    check_ev(ev_left)?;
    check_ev(ev_right)?;
    let w = base.width();
    let denom = (w.max(2) - 1) as f64;
    Ok(ImageGrid::from_fn(base.height(), w, |c, y, x| {
        let ev = ev_left + (ev_right - ev_left) * x as f64 / denom;
        expose(base.get(c, y, x), ev, gamma)
    }))
}

/// Ramp spanning most of the EV range, increasing or decreasing at random.
pub fn synth_grad_pair(base: &ImageGrid, seed: u64) -> Result<(ImageGrid, ImageGrid)> {
    let mut r = rng::stream(seed, &[0x64ad]);
    let gamma = sample_gamma(&mut r);
    let span = r.gen_range(2.0..=2.5);
    let (lo, hi) = (-span, span);
    let (left, right) = if r.gen_bool(0.5) { (lo, hi) } else { (hi, lo) };
    Ok((apply_column_ramp(base, left, right, gamma)?, base.clone()))
}

/// Splits the frame into a random 2-4 x 2-4 grid of regions, each with its
/// own EV in `[-2, 2]`.
pub fn synth_mix_pair(base: &ImageGrid, seed: u64) -> Result<(ImageGrid, ImageGrid)> {
    let mut r = rng::stream(seed, &[0x313]);
    let gamma = sample_gamma(&mut r);
    let (rows, cols) = (r.gen_range(2..=4usize), r.gen_range(2..=4usize));
    let evs: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-2.0..=2.0)).collect();
    let (h, w) = (base.height(), base.width());
    Ok((
        ImageGrid::from_fn(h, w, |c, y, x| {
            let cell = (y * rows / h) * cols + x * cols / w;
            expose(base.get(c, y, x), evs[cell], gamma)
        }),
        base.clone(),
    ))
}

/// A smooth random scene: a colour gradient, soft blobs, a few hard-edged
/// rectangles and a faint grating. Values lie in `[0.02, 0.98]`.
pub fn random_scene(height: usize, width: usize, seed: u64) -> ImageGrid {
    let mut r = rng::stream(seed, &[0x5ce7e]);
    let (h, w) = (height as f64, width as f64);
    let c0: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.2..0.7));
    let c1: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.2..0.7));
    let angle: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    struct Blob {
        y: f64,
        x: f64,
        inv2s2: f64,
        tint: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..r.gen_range(3..=6))
        .map(|_| {
            let s = r.gen_range(0.08..0.3) * h.min(w);
            Blob {
                y: r.gen_range(0.0..h),
                x: r.gen_range(0.0..w),
                inv2s2: 1.0 / (2.0 * s * s),
                tint: std::array::from_fn(|_| r.gen_range(-0.3..0.3)),
            }
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..r.gen_range(1..=3))
        .map(|_| {
            let (y0, x0) = (r.gen_range(0.0..h), r.gen_range(0.0..w));
            let (rh, rw) = (r.gen_range(0.1..0.4) * h, r.gen_range(0.1..0.4) * w);
            (y0, x0, y0 + rh, x0 + rw, std::array::from_fn(|_| r.gen_range(-0.2..0.2)))
        })
        .collect();
    let freq = r.gen_range(0.15..0.6);
    let (fa, fb) = {
        let t: f64 = r.gen_range(0.0..std::f64::consts::PI);
        (t.cos() * freq, t.sin() * freq)
    };
    let amp = r.gen_range(0.02..0.06);

    ImageGrid::from_fn(height, width, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let t = ((xf / w - 0.5) * ga + (yf / h - 0.5) * gb + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for b in &blobs {
            let d2 = (yf - b.y).powi(2) + (xf - b.x).powi(2);
            v += b.tint[c] * (-d2 * b.inv2s2).exp();
        }
        for &(y0, x0, y1, x1, tint) in &rects {
            if yf >= y0 && yf < y1 && xf >= x0 && xf < x1 {
                v += tint[c];
            }
        }
        v += amp * (fa * xf + fb * yf).sin();
        v.clamp(0.02, 0.98) as f32
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Exposure values of the ladder mode.
    pub ladder: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: SynthMode::Ladder,
            count: 10,
            seed: 0,
            height: 64,
            width: 96,
            ladder: DEFAULT_LADDER.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub scene_id: String,
    pub ground_truth: ImageGrid,
    pub variants: Vec<(VariantLabel, ImageGrid)>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Builds scene `index` of a synthetic dataset; a pure function of the
/// config and the index.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    let scene_seed = rng::derive_seed(cfg.seed, index as u64);
    let base = random_scene(cfg.height, cfg.width, scene_seed);
    let variants = match cfg.mode {
        SynthMode::Ladder => cfg
            .ladder
            .iter()
            .enumerate()
            .map(|(k, &ev)| {
                let (d, _) = synth_exposure_pair(&base, ev, rng::derive_seed(scene_seed, 0x1000 + k as u64))?;
                Ok((VariantLabel::Ev(ev), d))
            })
            .collect::<Result<Vec<_>>>()?,
        SynthMode::Grad => vec![(VariantLabel::Grad, synth_grad_pair(&base, scene_seed)?.0)],
        SynthMode::Mix => vec![(VariantLabel::Mix, synth_mix_pair(&base, scene_seed)?.0)],
    };
    Ok(SynthScene {
        scene_id: scene_id(index),
        ground_truth: base,
        variants,
    })
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("synthetic images need a positive size".into()));
    }
    (0..cfg.count).map(|i| synth_scene(cfg, i)).collect()
}

/// Writes a dataset in the layout read by [`super::scan_dataset`].
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<()> {
    for scene in synthesize(cfg)? {
        save_image(&scene.ground_truth, &root.join("gt").join(format!("{}.png", scene.scene_id)))?;
        for (label, img) in &scene.variants {
            save_image(img, &root.join("input").join(&scene.scene_id).join(format!("{}.png", label.stem())))?;
        }
    }
    Ok(())
}
