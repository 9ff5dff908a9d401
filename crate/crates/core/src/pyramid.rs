//! Laplacian pyramid decomposition and exact reconstruction.
//!
//! Every routine works on NCHW tensors plane by plane, so the same code
//! serves single images and training batches.
//!
//! Conventions:
//! - smoothing kernel is the 5-tap binomial `(1, 4, 6, 4, 1) / 16`, applied
//!   separably with reflect (mirror without edge repeat) borders;
//! - upsampling zero-inserts and smooths with the kernel scaled by 4, which
//!   keeps constants constant;
//! - level 0 is the coarsest low-frequency residual and the last level is
//!   the finest band.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binomial taps before normalization; they sum to 16.
pub const BINOMIAL_TAPS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

pub const DEFAULT_LEVELS: usize = 3;

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn check_nchw<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::shape(format!("{what}: expected NCHW tensor, got {:?}", t.shape())));
    }
    Ok(t.dims4())
}

/// Separable blur with per-tap gain `gain / 16` along each axis.
fn blur_with_gain<T: Element>(image: &Tensor<T>, gain: f64) -> Tensor<T> {
    let (n, c, h, w) = image.dims4();
    let taps: Vec<T> = BINOMIAL_TAPS.iter().map(|&t| T::of(t * gain / 16.0)).collect();
    let plane = h * w;
    let mut tmp = vec![T::zero(); plane];
    let mut out = Tensor::zeros(image.shape());
    for p in 0..n * c {
        let src = &image.data()[p * plane..(p + 1) * plane];
        // horizontal
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * row[reflect(x as isize + k as isize - 2, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * tmp[reflect(y as isize + k as isize - 2, h) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// 5x5 binomial smoothing with reflect borders; output has the input shape.
pub fn gaussian_blur<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    check_nchw(image, "gaussian_blur")?;
    Ok(blur_with_gain(image, 1.0))
}

/// Blur, then keep every second row and column starting at index 0.
pub fn downsample<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(image, "downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("downsample needs even dimensions, got {h}x{w}")));
    }
    let blurred = blur_with_gain(image, 1.0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = blurred.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                dst[(p * oh + y) * ow + x] = src[(p * h + 2 * y) * w + 2 * x];
            }
        }
    }
    Ok(out)
}

/// Zero-insert to twice the size, then blur with gain 4.
pub fn upsample<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_nchw(image, "upsample")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut spread = Tensor::zeros(&[n, c, oh, ow]);
    {
        let src = image.data();
        let dst = spread.data_mut();
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    dst[(p * oh + 2 * y) * ow + 2 * x] = src[(p * h + y) * w + x];
                }
            }
        }
    }
    // gain 4 in 2-D is gain 2 per axis
    Ok(blur_with_gain(&spread, 2.0))
}

/// Band images ordered coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Element> LaplacianPyramid<T> {
    /// Wraps precomputed levels after checking the factor-2 shape chain.
    pub fn from_levels(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("pyramid needs at least one level"));
        }
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[1] != b[1] || b[2] != 2 * a[2] || b[3] != 2 * a[3]
            {
                return Err(Error::shape(format!(
                    "adjacent pyramid levels must differ by exactly 2x: {a:?} then {b:?}"
                )));
            }
        }
        Ok(LaplacianPyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor<T>> {
        self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.levels[i]
    }

    /// `(height, width)` of every level, coarse to fine.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.shape()[2], l.shape()[3])).collect()
    }
}

/// Checks that `h x w` can be halved `level_count - 1` times.
pub fn check_divisible(h: usize, w: usize, level_count: usize) -> Result<()> {
    if level_count < 2 {
        return Err(Error::invalid(format!("level count must be at least 2, got {level_count}")));
    }
    let factor = 1usize << (level_count - 1);
    if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible by {factor} as required for {level_count} levels"
        )));
    }
    Ok(())
}

/// Splits `image` into `level_count` levels: the residual
/// `G_{n-1}` followed by bands `G_j - upsample(G_{j+1})`, coarse to fine.
pub fn decompose<T: Element>(image: &Tensor<T>, level_count: usize) -> Result<LaplacianPyramid<T>> {
    let (_, _, h, w) = check_nchw(image, "decompose")?;
    check_divisible(h, w, level_count)?;
    let mut gaussian = vec![image.clone()];
    for j in 0..level_count - 1 {
        let next = downsample(&gaussian[j])?;
        gaussian.push(next);
    }
    let mut levels = Vec::with_capacity(level_count);
    levels.push(gaussian[level_count - 1].clone());
    for j in (0..level_count - 1).rev() {
        let up = upsample(&gaussian[j + 1])?;
        levels.push(gaussian[j].zip_map(&up, |a, b| a - b));
    }
    LaplacianPyramid::from_levels(levels)
}

/// Inverse of [`decompose`]: folds coarse to fine, `G_j = B_j + upsample(G_{j+1})`.
pub fn reconstruct<T: Element>(pyramid: &LaplacianPyramid<T>) -> Result<Tensor<T>> {
    let levels = pyramid.levels();
    let mut acc = levels[0].clone();
    for band in &levels[1..] {
        let up = upsample(&acc)?;
        if up.shape() != band.shape() {
            return Err(Error::shape(format!(
                "band shape {:?} does not match upsampled {:?}",
                band.shape(),
                up.shape()
            )));
        }
        acc = band.zip_map(&up, |b, u| b + u);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    // --- independent oracles: full 5x5 kernel, direct indexing ---

    fn kernel2d(gain: f64) -> [[f64; 5]; 5] {
        let mut k = [[0.0; 5]; 5];
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = BINOMIAL_TAPS[i] * BINOMIAL_TAPS[j] / 256.0 * gain;
            }
        }
        k
    }

    fn mirror(i: isize, n: usize) -> usize {
        // reflect by repeated folding, written independently of `reflect`
        if n == 1 {
            return 0;
        }
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n as isize {
                i = 2 * (n as isize - 1) - i;
            } else {
                return i as usize;
            }
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn conv_oracle(img: &[Vec<f64>], gain: f64) -> Vec<Vec<f64>> {
        let h = img.len();
        let w = img[0].len();
        let k = kernel2d(gain);
        let mut out = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, kv) in row.iter().enumerate() {
                        let sy = mirror(y as isize + dy as isize - 2, h);
                        let sx = mirror(x as isize + dx as isize - 2, w);
                        acc += kv * img[sy][sx];
                    }
                }
                out[y][x] = acc;
            }
        }
        out
    }

    fn plane(t: &Tensor<f64>, p: usize) -> Vec<Vec<f64>> {
        let (_, _, h, w) = t.dims4();
        (0..h)
            .map(|y| (0..w).map(|x| t.data()[(p * h + y) * w + x]).collect())
            .collect()
    }

    fn down_oracle(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let b = conv_oracle(img, 1.0);
        b.iter().step_by(2).map(|r| r.iter().step_by(2).copied().collect()).collect()
    }

    fn up_oracle(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = img.len();
        let w = img[0].len();
        let mut z = vec![vec![0.0; 2 * w]; 2 * h];
        for y in 0..h {
            for x in 0..w {
                z[2 * y][2 * x] = img[y][x];
            }
        }
        conv_oracle(&z, 4.0)
    }

    fn sub(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u - v).collect()).collect()
    }

    fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .fold(0.0, |m, (u, v)| m.max((u - v).abs()))
    }

    #[test]
    fn blur_preserves_constants_and_zeros() {
        let c = Tensor::<f64>::full(&[1, 3, 6, 5], 0.37);
        assert!(gaussian_blur(&c).unwrap().max_abs_diff(&c) < 1e-15);
        let z = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert_eq!(gaussian_blur(&z).unwrap(), z);
    }

    #[test]
    fn blur_of_center_impulse() {
        let mut t = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        t.data_mut()[12] = 1.0;
        let b = gaussian_blur(&t).unwrap();
        assert!((b.data()[12] - 36.0 / 256.0).abs() < 1e-15);
        // interior taps away from the mirrored border
        let k = kernel2d(1.0);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 3), (3, 2)] {
            assert!((b.data()[y * 5 + x] - k[y][x]).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_stays_within_input_range() {
        let t = random(&[1, 3, 7, 9], 3);
        let b = gaussian_blur(&t).unwrap();
        let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(b.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn downsample_shapes_and_constants() {
        let c = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        let d = downsample(&c).unwrap();
        assert_eq!(d.shape(), &[1, 3, 2, 2]);
        assert!(d.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let big = Tensor::<f32>::zeros(&[1, 3, 608, 896]);
        assert_eq!(downsample(&big).unwrap().shape(), &[1, 3, 304, 448]);
        assert!(downsample(&Tensor::<f64>::zeros(&[1, 3, 5, 4])).is_err());
    }

    #[test]
    fn downsample_matches_convolution_oracle() {
        let t = random(&[1, 3, 8, 8], 5);
        let d = downsample(&t).unwrap();
        for p in 0..3 {
            assert!(max_diff(&plane(&d, p), &down_oracle(&plane(&t, p))) < 1e-14);
        }
    }

    #[test]
    fn upsample_constants_zeros_and_oracle() {
        let c = Tensor::<f64>::full(&[1, 3, 2, 2], 0.8);
        let u = upsample(&c).unwrap();
        assert_eq!(u.shape(), &[1, 3, 4, 4]);
        assert!(u.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        let z = Tensor::<f64>::zeros(&[1, 3, 3, 2]);
        assert!(upsample(&z).unwrap().data().iter().all(|&v| v == 0.0));
        let t = random(&[1, 3, 4, 4], 6);
        let u = upsample(&t).unwrap();
        for p in 0..3 {
            assert!(max_diff(&plane(&u, p), &up_oracle(&plane(&t, p))) < 1e-14);
        }
    }

    #[test]
    fn decompose_constant_image_kills_bands() {
        let c = Tensor::<f32>::full(&[1, 3, 16, 24], 0.3);
        let pyr = decompose(&c, 3).unwrap();
        for band in &pyr.levels()[1..] {
            assert!(band.max_abs() <= 1e-6);
        }
        assert!(pyr.level(0).data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn decompose_608x896_shapes() {
        let img = Tensor::<f32>::zeros(&[1, 3, 608, 896]);
        let pyr = decompose(&img, 3).unwrap();
        assert_eq!(pyr.shapes(), vec![(152, 224), (304, 448), (608, 896)]);
    }

    #[test]
    fn decompose_matches_stepwise_oracle() {
        let t = random(&[1, 3, 16, 16], 8);
        let pyr = decompose(&t, 3).unwrap();
        for p in 0..3 {
            let g0 = plane(&t, p);
            let g1 = down_oracle(&g0);
            let g2 = down_oracle(&g1);
            let b0 = sub(&g0, &up_oracle(&g1));
            let b1 = sub(&g1, &up_oracle(&g2));
            assert!(max_diff(&plane(pyr.level(0), p), &g2) < 1e-13);
            assert!(max_diff(&plane(pyr.level(1), p), &b1) < 1e-13);
            assert!(max_diff(&plane(pyr.level(2), p), &b0) < 1e-13);
        }
    }

    #[test]
    fn decompose_rejects_bad_input() {
        let t = Tensor::<f64>::zeros(&[1, 3, 12, 10]);
        assert!(decompose(&t, 3).is_err());
        assert!(decompose(&t, 1).is_err());
        assert!(decompose(&t, 2).is_ok());
    }

    #[test]
    fn reconstruct_zero_bands_constant_residual() {
        let levels = vec![
            Tensor::<f64>::full(&[1, 3, 2, 3], 0.6),
            Tensor::zeros(&[1, 3, 4, 6]),
            Tensor::zeros(&[1, 3, 8, 12]),
        ];
        let img = reconstruct(&LaplacianPyramid::from_levels(levels).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn reconstruct_matches_fold_oracle() {
        let levels = vec![random(&[1, 3, 2, 2], 1), random(&[1, 3, 4, 4], 2), random(&[1, 3, 8, 8], 3)];
        let pyr = LaplacianPyramid::from_levels(levels.clone()).unwrap();
        let img = reconstruct(&pyr).unwrap();
        for p in 0..3 {
            let mut acc = plane(&levels[0], p);
            for band in &levels[1..] {
                let up = up_oracle(&acc);
                acc = plane(band, p)
                    .iter()
                    .zip(&up)
                    .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b).collect())
                    .collect();
            }
            assert!(max_diff(&plane(&img, p), &acc) < 1e-13);
        }
    }

    #[test]
    fn from_levels_rejects_broken_chain() {
        let levels = vec![Tensor::<f64>::zeros(&[1, 3, 2, 2]), Tensor::zeros(&[1, 3, 5, 4])];
        assert!(LaplacianPyramid::from_levels(levels).is_err());
    }

    #[test]
    fn reflect_index() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-2, 2), 0);
        assert_eq!(reflect(3, 2), 1);
        assert_eq!(reflect(7, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_is_exact(levels in 2usize..=4, hm in 1usize..=4, wm in 1usize..=4, seed in any::<u64>()) {
            let f = 1 << (levels - 1);
            let (h, w) = (hm * f * 2, wm * f * 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f32>::from_fn(&[1, 3, h, w], |_| rng.gen_range(0.0..1.0));
            let pyr = decompose(&img, levels).unwrap();
            let shapes = pyr.shapes();
            for (k, &(lh, lw)) in shapes.iter().enumerate() {
                prop_assert_eq!((lh, lw), (h >> (levels - 1 - k), w >> (levels - 1 - k)));
            }
            prop_assert!(reconstruct(&pyr).unwrap().max_abs_diff(&img) <= 1e-5);
        }

        #[test]
        fn decomposition_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
            let i = random(&[1, 3, 8, 16], seed);
            let j = random(&[1, 3, 8, 16], seed.wrapping_add(1));
            let mix = i.zip_map(&j, |x, y| a * x + b * y);
            let pm = decompose(&mix, 3).unwrap();
            let pi = decompose(&i, 3).unwrap();
            let pj = decompose(&j, 3).unwrap();
            for k in 0..3 {
                let expect = pi.level(k).zip_map(pj.level(k), |x, y| a * x + b * y);
                prop_assert!(pm.level(k).max_abs_diff(&expect) <= 1e-5);
            }
        }
    }
}
