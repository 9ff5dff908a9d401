//! Paired geometric augmentation: flips, then shift/scale/rotate with
//! reflected borders. Input and target always share one sampled transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::pyramid::reflect;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Probability of applying the shift/scale/rotate step at all.
    pub shift_scale_rotate_prob: f64,
    /// Maximum shift as a fraction of the image size, per axis.
    pub shift_limit: f64,
    /// Scale is drawn from `1 ± scale_limit`.
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.0,
            shift_scale_rotate_prob: 0.5,
            shift_limit: 0.1,
            scale_limit: 0.1,
            rotate_limit: 15.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No flips, no warps.
    pub fn disabled() -> Self {
        AugmentationConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            shift_scale_rotate_prob: 0.0,
            shift_limit: 0.0,
            scale_limit: 0.0,
            rotate_limit: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("shift_scale_rotate_prob", self.shift_scale_rotate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.scale_limit) {
            return Err(Error::Config(format!("scale_limit must lie in [0, 1), got {}", self.scale_limit)));
        }
        if !(self.shift_limit >= 0.0 && self.shift_limit <= 1.0) || !(self.rotate_limit >= 0.0 && self.rotate_limit <= 180.0) {
            return Err(Error::Config("shift_limit must lie in [0, 1] and rotate_limit in [0, 180]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    /// Fractions of width and height.
    pub shift: (f64, f64),
    pub scale: f64,
    pub degrees: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PairTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub warp: Option<Warp>,
}

impl PairTransform {
    /// Draws the same number of values whatever the outcome, so streams stay
    /// aligned across configurations.
    pub fn sample<R: Rng>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        let u: [f64; 7] = std::array::from_fn(|_| rng.gen::<f64>());
        let sym = |u: f64, limit: f64| (2.0 * u - 1.0) * limit;
        PairTransform {
            hflip: u[0] < cfg.hflip_prob,
            vflip: u[1] < cfg.vflip_prob,
            warp: (u[2] < cfg.shift_scale_rotate_prob).then(|| Warp {
                shift: (sym(u[3], cfg.shift_limit), sym(u[4], cfg.shift_limit)),
                scale: 1.0 + sym(u[5], cfg.scale_limit),
                degrees: sym(u[6], cfg.rotate_limit),
            }),
        }
    }

    pub fn apply(&self, img: &ImageGrid) -> ImageGrid {
        let (h, w) = (img.height(), img.width());
        let mut out = if self.hflip || self.vflip {
            ImageGrid::from_fn(h, w, |c, y, x| {
                let sy = if self.vflip { h - 1 - y } else { y };
                let sx = if self.hflip { w - 1 - x } else { x };
                img.get(c, sy, sx)
            })
        } else {
            img.clone()
        };
        if let Some(warp) = self.warp {
            out = apply_warp(&out, warp);
        }
        out
    }
}

fn fold(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.abs() % period;
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn apply_warp(img: &ImageGrid, warp: Warp) -> ImageGrid {
    let (h, w) = (img.height(), img.width());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (warp.shift.0 * w as f64, warp.shift.1 * h as f64);
    let (sin, cos) = warp.degrees.to_radians().sin_cos();
    let mut out = ImageGrid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate back by the angle, undo scale and shift
            let (dx, dy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let sx = fold(cx + (cos * dx + sin * dy) / warp.scale, w);
            let sy = fold(cy + (-sin * dx + cos * dy) / warp.scale, h);
            let (x0, y0) = (sx.floor() as isize, sy.floor() as isize);
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let (x0u, x1u) = (reflect(x0, w), reflect(x0 + 1, w));
            let (y0u, y1u) = (reflect(y0, h), reflect(y0 + 1, h));
            for c in 0..3 {
                let top = img.get(c, y0u, x0u) * (1.0 - fx) + img.get(c, y0u, x1u) * fx;
                let bottom = img.get(c, y1u, x0u) * (1.0 - fx) + img.get(c, y1u, x1u) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Applies one transform drawn from `rng` to both images.
pub fn augment_with<R: Rng>(
    input: &ImageGrid,
    target: &ImageGrid,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(ImageGrid, ImageGrid)> {
    if (input.height(), input.width()) != (target.height(), target.width()) {
        return Err(Error::shape(format!(
            "augmentation pair: input {}x{} vs target {}x{}",
            input.height(),
            input.width(),
            target.height(),
            target.width()
        )));
    }
    let t = PairTransform::sample(cfg, rng);
    Ok((t.apply(input), t.apply(target)))
}

/// [`augment_with`] on a stream seeded from `cfg.seed`.
pub fn augment(input: &ImageGrid, target: &ImageGrid, cfg: &AugmentationConfig) -> Result<(ImageGrid, ImageGrid)> {
    augment_with(input, target, cfg, &mut rng::stream(cfg.seed, &[0xa06]))
}
