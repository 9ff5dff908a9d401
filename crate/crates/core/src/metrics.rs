//! PSNR and single-scale SSIM on `[0, 1]` images, plus dataset reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::image::{ImageGrid, CHANNELS};
use crate::models::Generator;
use crate::tensor::Element;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "metric inputs differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio from a mean squared error; infinite when the
/// error is zero.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, data_range: f64) -> Result<f64> {
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::invalid(format!("data_range must be > 0, got {data_range}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of one channel plane over all fully covered window positions.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let taps = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let sxx = filter_valid(&prod(x, x), h, w, &taps);
    let syy = filter_valid(&prod(y, y), h, w, &taps);
    let sxy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// 11x11 Gaussian-window SSIM (sigma 1.5, K1 0.01, K2 0.03), averaged over
/// the valid SSIM map of each channel and then over the channels.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, data_range: f64) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::invalid(format!("data_range must be > 0, got {data_range}")));
    }
    let plane = |img: &ImageGrid, c: usize| -> Vec<f64> {
        img.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect()
    };
    let sum: f64 = (0..CHANNELS).map(|c| ssim_plane(&plane(a, c), &plane(b, c), h, w, data_range)).sum();
    Ok(sum / CHANNELS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub id: String,
    /// `None` when the prediction equals the reference exactly.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
}

impl ImageMetric {
    pub fn new(id: impl Into<String>, psnr: f64, ssim: f64) -> Self {
        ImageMetric {
            id: id.into(),
            psnr: psnr.is_finite().then_some(psnr),
            psnr_infinite: psnr == f64::INFINITY,
            ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_name: String,
    pub per_image: Vec<ImageMetric>,
    /// Mean over images with finite PSNR; `None` if there are none.
    pub mean_psnr: Option<f64>,
    /// Images left out of `mean_psnr` because their PSNR is infinite.
    pub infinite_psnr_count: usize,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_images(dataset_name: impl Into<String>, per_image: Vec<ImageMetric>) -> Self {
        let finite: Vec<f64> = per_image.iter().filter_map(|m| m.psnr).collect();
        let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        let mean_ssim = if per_image.is_empty() {
            f64::NAN
        } else {
            per_image.iter().map(|m| m.ssim).sum::<f64>() / per_image.len() as f64
        };
        MetricReport {
            dataset_name: dataset_name.into(),
            infinite_psnr_count: per_image.iter().filter(|m| m.psnr_infinite).count(),
            per_image,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `id,psnr,ssim` rows; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for m in &self.per_image {
            let p = match m.psnr {
                Some(v) => format!("{v:.6}"),
                None => "inf".into(),
            };
            let _ = writeln!(out, "{},{},{:.6}", csv_field(&m.id), p, m.ssim);
        }
        out
    }

    pub fn mean_psnr_display(&self) -> String {
        match self.mean_psnr {
            Some(v) => format!("{v:.2}"),
            None if self.infinite_psnr_count > 0 => "inf".into(),
            None => "-".into(),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report: `name | PSNR | SSIM`, then a mean row when more than
/// one report is given.
pub fn format_table(reports: &[MetricReport]) -> String {
    let name_w = reports.iter().map(|r| r.dataset_name.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<name_w$}  {:>8}  {:>7}\n", "subset", "PSNR", "SSIM");
    for r in reports {
        let _ = writeln!(out, "{:<name_w$}  {:>8}  {:>7.4}", r.dataset_name, r.mean_psnr_display(), r.mean_ssim);
    }
    if reports.len() > 1 {
        let psnrs: Vec<f64> = reports.iter().filter_map(|r| r.mean_psnr).collect();
        let mean_p = psnrs.iter().sum::<f64>() / psnrs.len().max(1) as f64;
        let mean_s = reports.iter().map(|r| r.mean_ssim).sum::<f64>() / reports.len() as f64;
        let _ = writeln!(out, "{:<name_w$}  {:>8.2}  {:>7.4}", "mean", mean_p, mean_s);
    }
    out
}

/// PSNR/SSIM of each pair's input against its target, with no model.
pub fn evaluate_identity(name: &str, dataset: &PairDataset) -> Result<MetricReport> {
    evaluate_with(name, dataset, |input| Ok(input.clone()))
}

/// Enhances every input with `generator` and scores it against the target.
pub fn evaluate_dataset<T: Element>(generator: &Generator<T>, name: &str, dataset: &PairDataset) -> Result<MetricReport> {
    evaluate_with(name, dataset, |input| generator.enhance(input))
}

/// Runs `enhance` on every input, in dataset order.
pub fn evaluate_with(
    name: &str,
    dataset: &PairDataset,
    mut enhance: impl FnMut(&ImageGrid) -> Result<ImageGrid>,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("{name}: no samples to evaluate")));
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.items().iter().enumerate() {
        let scored = (|| {
            let (input, target) = dataset.load(i)?;
            let out = enhance(&input)?;
            Ok::<_, Error>(ImageMetric::new(item.id.clone(), psnr(&out, &target, 1.0)?, ssim(&out, &target, 1.0)?))
        })();
        per_image.push(scored.map_err(|e| match e {
            e @ Error::Item { .. } => e,
            e => Error::Item {
                id: item.id.clone(),
                source: Box::new(e),
            },
        })?);
    }
    Ok(MetricReport::from_images(name, per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut r = stream(seed, &[]);
        ImageGrid::from_fn(h, w, |_, _, _| r.gen())
    }

    fn noisy(img: &ImageGrid, seed: u64) -> ImageGrid {
        let mut r = stream(seed, &[]);
        ImageGrid::from_fn(img.height(), img.width(), |c, y, x| {
            (img.get(c, y, x) + r.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
    }

    /// Direct windowed statistics, one window position at a time.
    fn ssim_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let g = gaussian_window();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (h, w) = (a.height(), a.width());
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i] * g[j];
                            ux += k * a.get(c, y + i, x + j) as f64;
                            uy += k * b.get(c, y + i, x + j) as f64;
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i] * g[j];
                            let dx = a.get(c, y + i, x + j) as f64 - ux;
                            let dy = b.get(c, y + i, x + j) as f64 - uy;
                            vx += k * dx * dx;
                            vy += k * dy * dy;
                            cxy += k * dx * dy;
                        }
                    }
                    total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        let b = ImageGrid::filled(4, 4, 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ImageGrid::filled(4, 5, 0.0), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let p = psnr_from_mse(k as f64 * 0.01, 1.0);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random(16, 20, 1);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let c1 = 1e-4;
        let s = ssim(&ImageGrid::filled(12, 12, 0.0), &ImageGrid::filled(12, 12, 1.0), 1.0).unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        for seed in 0..4 {
            let a = random(16, 16, seed);
            let b = noisy(&a.map(|v| 0.7 * v + 0.1), seed + 100);
            let got = ssim(&a, &b, 1.0).unwrap();
            assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn ssim_symmetric_and_not_affine_invariant() {
        let a = random(14, 18, 3);
        let b = random(14, 18, 4);
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-9);
        assert!(ssim(&a, &a.map(|v| 0.5 * v), 1.0).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageGrid::filled(10, 30, 0.5);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn report_means_and_serialization() {
        let r = MetricReport::from_images(
            "toy",
            vec![ImageMetric::new("a", 20.0, 0.5), ImageMetric::new("b", f64::INFINITY, 1.0), ImageMetric::new("c", 30.0, 0.9)],
        );
        assert_eq!(r.mean_psnr, Some(25.0));
        assert_eq!(r.infinite_psnr_count, 1);
        assert!((r.mean_ssim - 0.8).abs() < 1e-12);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"psnr\": null"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv().lines().nth(2).unwrap(), "b,inf,1.000000");
        let single = MetricReport::from_images("one", vec![ImageMetric::new("x", 17.5, 0.6)]);
        assert_eq!((single.mean_psnr, single.mean_ssim), (Some(17.5), 0.6));
        assert_eq!(format_table(&[r, single]).lines().count(), 4);
    }
}
