//! Per-level patch discriminators.
//!
//! Each residual block halves the resolution: a stride-2 3x3 convolution on
//! the main path and a stride-2 1x1 convolution on the skip path, with
//! instance normalization and leaky-ReLU. A final 3x3 convolution produces
//! one unbounded score per patch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::nn::{Conv2d, ParamStore, LEAKY_SLOPE, NORM_EPS};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// Channels of the first block; doubled per block up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
    /// Residual blocks per level, coarse to fine. Empty selects the default.
    pub blocks: Vec<usize>,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            base_width: 32,
            max_width: 128,
            blocks: Vec::new(),
        }
    }
}

impl DiscriminatorSpec {
    /// Blocks per level: 4, 4, 3 for three levels; in general 4 everywhere
    /// except 3 on the finest level.
    pub fn blocks_for(&self, level_count: usize) -> Vec<usize> {
        if !self.blocks.is_empty() {
            return self.blocks.clone();
        }
        (0..level_count)
            .map(|k| if k + 1 == level_count { 3 } else { 4 })
            .collect()
    }

    pub fn validate(&self, level_count: usize) -> Result<()> {
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::Config(format!(
                "discriminator widths must satisfy 0 < base_width <= max_width, got {} / {}",
                self.base_width, self.max_width
            )));
        }
        let blocks = self.blocks_for(level_count);
        if blocks.len() != level_count {
            return Err(Error::Config(format!(
                "discriminator block list has {} entries for {} levels",
                blocks.len(),
                level_count
            )));
        }
        if blocks.contains(&0) {
            return Err(Error::Config("every discriminator needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    store: ParamStore<T>,
    blocks: Vec<DownBlock>,
    score: Conv2d,
    resolution: (usize, usize),
}

impl<T: Element> Discriminator<T> {
    pub fn build(spec: &DiscriminatorSpec, block_count: usize, resolution: (usize, usize), seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0xd15c]);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(block_count);
        let mut cin = CHANNELS;
        for b in 0..block_count {
            let cout = (spec.base_width << b).min(spec.max_width);
            let name = format!("block{b}");
            blocks.push(DownBlock {
                conv1: Conv2d::unbiased(&mut store, &format!("{name}.conv1"), cin, cout, 3, 2, 1, &mut rng),
                conv2: Conv2d::unbiased(&mut store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, &mut rng),
                skip: Conv2d::new(&mut store, &format!("{name}.skip"), cin, cout, 1, 2, 0, &mut rng),
            });
            cin = cout;
        }
        let score = Conv2d::same3(&mut store, "score", cin, 1, &mut rng);
        Discriminator {
            store,
            blocks,
            score,
            resolution,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Score-map size for an input of the configured resolution.
    pub fn score_shape(&self) -> (usize, usize) {
        let (mut h, mut w) = self.resolution;
        for _ in 0..self.blocks.len() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn zero_score_layer(&mut self) {
        self.score.zero(&mut self.store);
    }

    /// Clamps every weight into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        let c = T::of(c);
        for t in self.store.tensors_mut() {
            for v in t.data_mut() {
                *v = v.max(-c).min(c);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != CHANNELS || (s[2], s[3]) != self.resolution {
            return Err(Error::shape(format!(
                "discriminator expects [N, 3, {}, {}], got {:?}",
                self.resolution.0, self.resolution.1, s
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            let m = b.conv1.forward(g, p, h);
            let m = g.instance_norm(m, NORM_EPS);
            let m = g.leaky_relu(m, LEAKY_SLOPE);
            let m = b.conv2.forward(g, p, m);
            let m = g.instance_norm(m, NORM_EPS);
            let s = b.skip.forward(g, p, h);
            let sum = g.add(m, s);
            h = g.leaky_relu(sum, LEAKY_SLOPE);
        }
        Ok(self.score.forward(g, p, h))
    }

    /// Inference-only score map.
    pub fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let v = g.constant(x.clone());
        let out = self.forward(&mut g, &p, v)?;
        Ok(g.value(out).clone())
    }
}

/// One discriminator per pyramid level, each with its own parameters.
#[derive(Clone, Debug)]
pub struct LevelDiscriminators<T> {
    nets: Vec<Discriminator<T>>,
}

impl<T: Element> LevelDiscriminators<T> {
    /// `level_shapes` are the pyramid level resolutions, coarse to fine.
    pub fn build(spec: &DiscriminatorSpec, level_shapes: &[(usize, usize)], seed: u64) -> Result<Self> {
        spec.validate(level_shapes.len())?;
        let blocks = spec.blocks_for(level_shapes.len());
        let nets = level_shapes
            .iter()
            .zip(&blocks)
            .enumerate()
            .map(|(k, (&res, &nb))| Discriminator::build(spec, nb, res, rng::derive_seed(seed, 0x100 + k as u64)))
            .collect();
        Ok(LevelDiscriminators { nets })
    }

    /// Level shapes for an `h x w` image split into `level_count` levels.
    pub fn level_shapes(h: usize, w: usize, level_count: usize) -> Vec<(usize, usize)> {
        (0..level_count)
            .map(|k| (h >> (level_count - 1 - k), w >> (level_count - 1 - k)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn level(&self, level: usize) -> Result<&Discriminator<T>> {
        self.nets
            .get(level)
            .ok_or_else(|| Error::invalid(format!("no discriminator for level {level} (have {})", self.nets.len())))
    }

    pub fn level_mut(&mut self, level: usize) -> Result<&mut Discriminator<T>> {
        let n = self.nets.len();
        self.nets
            .get_mut(level)
            .ok_or_else(|| Error::invalid(format!("no discriminator for level {level} (have {n})")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Discriminator<T>> {
        self.nets.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Discriminator<T>> {
        self.nets.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.nets.iter().map(Discriminator::parameter_count).sum()
    }

    /// Scores `image` with the discriminator of `level`.
    pub fn forward(&self, level: usize, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        self.level(level)?.forward(g, p, image)
    }

    pub fn score(&self, level: usize, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.level(level)?.score(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn default_block_counts() {
        assert_eq!(DiscriminatorSpec::default().blocks_for(3), vec![4, 4, 3]);
    }

    #[test]
    fn finest_level_at_608x896_scores_76_by_112() {
        let spec = DiscriminatorSpec {
            base_width: 4,
            max_width: 8,
            blocks: Vec::new(),
        };
        let shapes = LevelDiscriminators::<f32>::level_shapes(608, 896, 3);
        let ds = LevelDiscriminators::<f32>::build(&spec, &shapes, 0).unwrap();
        assert_eq!(ds.level(2).unwrap().score_shape(), (76, 112));
        let out = ds.score(2, &random(&[1, 3, 608, 896], 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 76, 112]);
    }

    #[test]
    fn zero_score_layer_gives_zero_map() {
        let spec = DiscriminatorSpec {
            base_width: 4,
            max_width: 8,
            blocks: Vec::new(),
        };
        let mut ds = LevelDiscriminators::<f32>::build(&spec, &[(4, 6), (8, 12), (16, 24)], 0).unwrap();
        ds.level_mut(1).unwrap().zero_score_layer();
        let out = ds.score(1, &random(&[2, 3, 8, 12], 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_scores_and_resolution_check() {
        let spec = DiscriminatorSpec::default();
        let ds = LevelDiscriminators::<f64>::build(&spec, &[(4, 4), (8, 8), (16, 16)], 9).unwrap();
        let x = random(&[1, 3, 16, 16], 5).cast::<f64>();
        assert_eq!(ds.score(2, &x).unwrap(), ds.score(2, &x).unwrap());
        assert!(ds.score(1, &x).is_err());
        assert!(ds.score(3, &x).is_err());
    }

    #[test]
    fn weight_clipping_bounds_all_parameters() {
        let mut d = Discriminator::<f32>::build(&DiscriminatorSpec::default(), 2, (8, 8), 1);
        d.clip_weights(0.01);
        assert!(d.params().tensors().iter().all(|t| t.max_abs() <= 0.01));
    }
}
