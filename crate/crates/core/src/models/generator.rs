//! Three-branch pyramid translation network.
//!
//! One branch per pyramid level. The low branch reads the coarse residual;
//! every later branch reads its own band concatenated with the 2x-upsampled
//! translated band and features of the branch below. Each branch emits
//! `L_k + tanh(head(F_k))`, so zeroed heads make the network an identity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, CHANNELS};
use crate::nn::{Conv2d, ParamStore, ResBlock, LEAKY_SLOPE, NORM_EPS};
use crate::pyramid::{self, LaplacianPyramid};
use crate::rng;
use crate::tensor::{Element, Tensor};

/// Scale applied to the fan-in initialization of the projection heads, so a
/// fresh network starts close to the identity mapping.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub level_count: usize,
    pub blocks_low: usize,
    pub blocks_mid: usize,
    pub blocks_top: usize,
    pub width: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            level_count: pyramid::DEFAULT_LEVELS,
            blocks_low: 3,
            blocks_mid: 3,
            blocks_top: 3,
            width: 64,
        }
    }
}

impl GeneratorSpec {
    pub fn new(blocks_low: usize, blocks_mid: usize, blocks_top: usize, width: usize) -> Self {
        GeneratorSpec {
            blocks_low,
            blocks_mid,
            blocks_top,
            width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("blocks_low", self.blocks_low),
            ("blocks_mid", self.blocks_mid),
            ("blocks_top", self.blocks_top),
        ] {
            if !(1..=8).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [1, 8], got {b}")));
            }
        }
        if self.width < 4 {
            return Err(Error::Config(format!("width must be at least 4, got {}", self.width)));
        }
        if self.level_count < 2 {
            return Err(Error::Config(format!(
                "level_count must be at least 2, got {}",
                self.level_count
            )));
        }
        Ok(())
    }

    fn blocks_at(&self, level: usize) -> usize {
        if level == 0 {
            self.blocks_low
        } else if level + 1 == self.level_count {
            self.blocks_top
        } else {
            self.blocks_mid
        }
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let w = self.width;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let block = 2 * conv(w, w, 3);
        let head = conv(w, CHANNELS, 3);
        // the first stem conv feeds instance norm and has no bias
        let low_stem = conv(CHANNELS, w, 3) - w + conv(w, w, 3);
        let fused_stem = conv(2 * CHANNELS + w, w, 1);
        (0..self.level_count)
            .map(|k| {
                let stem = if k == 0 { low_stem } else { fused_stem };
                stem + self.blocks_at(k) * block + head
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
enum Stem {
    /// conv3x3 -> instance norm -> leaky-ReLU -> conv3x3 -> leaky-ReLU
    Low { conv1: Conv2d, conv2: Conv2d },
    /// pointwise fusion of the concatenated inputs -> leaky-ReLU
    Fused { conv: Conv2d },
}

#[derive(Clone, Debug)]
struct Branch {
    stem: Stem,
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    store: ParamStore<T>,
    branches: Vec<Branch>,
}

impl<T: Element> Generator<T> {
    /// Deterministic construction: equal `(spec, seed)` give bit-identical weights.
    pub fn build(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, &[0x6e6e]);
        let mut store = ParamStore::new();
        let w = spec.width;
        let mut branches = Vec::with_capacity(spec.level_count);
        for k in 0..spec.level_count {
            let name = format!("branch{k}");
            let stem = if k == 0 {
                Stem::Low {
                    conv1: Conv2d::unbiased(&mut store, &format!("{name}.stem1"), CHANNELS, w, 3, 1, 1, &mut rng),
                    conv2: Conv2d::same3(&mut store, &format!("{name}.stem2"), w, w, &mut rng),
                }
            } else {
                Stem::Fused {
                    conv: Conv2d::new(&mut store, &format!("{name}.stem"), 2 * CHANNELS + w, w, 1, 1, 0, &mut rng),
                }
            };
            let blocks = (0..spec.blocks_at(k))
                .map(|b| ResBlock::new(&mut store, &format!("{name}.block{b}"), w, &mut rng))
                .collect();
            let head = Conv2d::same3(&mut store, &format!("{name}.head"), w, CHANNELS, &mut rng);
            head.scale_weights(&mut store, HEAD_INIT_SCALE);
            branches.push(Branch { stem, blocks, head });
        }
        Ok(Generator {
            spec: spec.clone(),
            store,
            branches,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
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

    /// Zeroes every projection head, turning the network into an exact identity.
    pub fn zero_heads(&mut self) {
        for b in &self.branches {
            b.head.zero(&mut self.store);
        }
    }

    /// Parameter names grouped per branch (index = pyramid level).
    pub fn branch_of_param(&self) -> Vec<usize> {
        self.store
            .names()
            .iter()
            .map(|n| {
                n.strip_prefix("branch")
                    .and_then(|r| r.split('.').next())
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(0)
            })
            .collect()
    }

    fn check_levels(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.spec.level_count {
            return Err(Error::shape(format!(
                "generator expects {} pyramid levels, got {}",
                self.spec.level_count,
                shapes.len()
            )));
        }
        for (k, s) in shapes.iter().enumerate() {
            if s.len() != 4 || s[1] != CHANNELS {
                return Err(Error::shape(format!("level {k}: expected [N, 3, H, W], got {s:?}")));
            }
            if k > 0 {
                let p = shapes[k - 1];
                if s[0] != p[0] || s[2] != 2 * p[2] || s[3] != 2 * p[3] {
                    return Err(Error::shape(format!(
                        "level {k} shape {s:?} is not twice level {} shape {p:?}",
                        k - 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the translation graph. `levels` are coarse to fine.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, levels: &[Var]) -> Result<Vec<Var>> {
        let shapes: Vec<&[usize]> = levels.iter().map(|&v| g.value(v).shape()).collect();
        self.check_levels(&shapes)?;

        let mut outputs = Vec::with_capacity(levels.len());
        let mut below: Option<(Var, Var)> = None;
        for (branch, &band) in self.branches.iter().zip(levels) {
            let mut feat = match (&branch.stem, below) {
                (Stem::Low { conv1, conv2 }, _) => {
                    let h = conv1.forward(g, p, band);
                    let h = g.instance_norm(h, NORM_EPS);
                    let h = g.leaky_relu(h, LEAKY_SLOPE);
                    let h = conv2.forward(g, p, h);
                    g.leaky_relu(h, LEAKY_SLOPE)
                }
                (Stem::Fused { conv }, Some((prev_out, prev_feat))) => {
                    let up_out = g.upsample_nearest2x(prev_out);
                    let up_feat = g.upsample_nearest2x(prev_feat);
                    let x = g.concat_channels(&[band, up_out, up_feat]);
                    let h = conv.forward(g, p, x);
                    g.leaky_relu(h, LEAKY_SLOPE)
                }
                (Stem::Fused { .. }, None) => unreachable!("fused stem on the coarsest level"),
            };
            for block in &branch.blocks {
                feat = block.forward(g, p, feat);
            }
            let corr = branch.head.forward(g, p, feat);
            let corr = g.tanh(corr);
            let out = g.add(band, corr);
            outputs.push(out);
            below = Some((out, feat));
        }
        Ok(outputs)
    }

    /// Inference-only translation of a pyramid.
    pub fn translate(&self, pyramid: &LaplacianPyramid<T>) -> Result<LaplacianPyramid<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let levels: Vec<Var> = pyramid.levels().iter().map(|l| g.constant(l.clone())).collect();
        let out = self.forward(&mut g, &p, &levels)?;
        LaplacianPyramid::from_levels(out.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Full enhancement of a `[0,1]` image: normalize, decompose, translate,
    /// reconstruct, denormalize.
    pub fn enhance(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let x: Tensor<T> = image.to_network();
        let pyr = pyramid::decompose(&x, self.spec.level_count)?;
        let out = self.translate(&pyr)?;
        ImageGrid::from_network(&pyramid::reconstruct(&out)?)
    }

    /// [`Generator::enhance`] for any image size: reflect-pads to a multiple
    /// of `2^(levels-1)` and crops the result back.
    pub fn enhance_any_size(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let m = 1usize << (self.spec.level_count - 1);
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 {
            return Err(Error::invalid("cannot enhance an empty image"));
        }
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return self.enhance(image);
        }
        let padded = ImageGrid::from_fn(ph, pw, |c, y, x| image.get(c, pyramid::reflect(y as isize, h), pyramid::reflect(x as isize, w)));
        let out = self.enhance(&padded)?;
        Ok(ImageGrid::from_fn(h, w, |c, y, x| out.get(c, y, x)))
    }
}
