use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHANNELS: usize = 3;

/// Planar RGB image (`C x H x W`, 3 channels) with `f32` samples.
///
/// Loaded images hold values in `[0, 1]`; network-side code maps them to
/// `[-1, 1]` with [`ImageGrid::to_network`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "{}x{} RGB image needs {} samples, got {}",
                height,
                width,
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(ImageGrid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageGrid {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageGrid { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[0,1] -> [-1,1]` as a `[1, 3, H, W]` tensor.
    pub fn to_network<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, CHANNELS, self.height, self.width], |i| {
            T::of(self.data[i] as f64 * 2.0 - 1.0)
        })
    }

    /// `[-1,1] -> [0,1]`, clamped, from a `[1, 3, H, W]` tensor.
    pub fn from_network<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let img = Self::from_tensor(t)?;
        Ok(img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, CHANNELS, self.height, self.width], |i| T::of(self.data[i] as f64))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != CHANNELS {
            return Err(Error::shape(format!("expected [1, 3, H, W], got {s:?}")));
        }
        Ok(ImageGrid {
            height: s[2],
            width: s[3],
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
