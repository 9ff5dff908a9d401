//! Pixel and adversarial losses, and their per-level composition.
//!
//! Every loss exists once, as a graph builder, so training and the plain
//! array helpers below evaluate the same arithmetic. Expectations over real
//! and fake samples are means over batch and score-map elements.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default weight of the pixel term relative to the adversarial term.
pub const DEFAULT_RECONSTRUCTION_WEIGHT: f64 = 4.5e3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialVariant {
    #[default]
    Lsgan,
    Wgan,
    WganSoftplus,
    Hinge,
}

impl AdversarialVariant {
    pub const ALL: [AdversarialVariant; 4] = [
        AdversarialVariant::Lsgan,
        AdversarialVariant::Wgan,
        AdversarialVariant::WganSoftplus,
        AdversarialVariant::Hinge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdversarialVariant::Lsgan => "LSGAN",
            AdversarialVariant::Wgan => "WGAN",
            AdversarialVariant::WganSoftplus => "WGAN_SOFT+",
            AdversarialVariant::Hinge => "HINGE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// One weight per pyramid level, coarse to fine.
    pub lambdas: Vec<f64>,
    /// Weight of the pixel term inside each level.
    pub w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambdas: vec![1.0 / 3.0; 3],
            w: DEFAULT_RECONSTRUCTION_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn new(lambdas: Vec<f64>, w: f64) -> Self {
        LossWeights { lambdas, w }
    }

    /// Exactly one active level.
    pub fn one_hot(level: usize, level_count: usize) -> Self {
        let mut lambdas = vec![0.0; level_count];
        lambdas[level] = 1.0;
        LossWeights {
            lambdas,
            ..Default::default()
        }
    }

    pub fn validate(&self, level_count: usize) -> Result<()> {
        if self.lambdas.len() != level_count {
            return Err(Error::Config(format!(
                "{} level weights given for {} pyramid levels",
                self.lambdas.len(),
                level_count
            )));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("level weights must be finite and >= 0, got {:?}", self.lambdas)));
        }
        if !self.lambdas.iter().any(|&l| l > 0.0) {
            return Err(Error::Config("at least one level weight must be positive".into()));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("reconstruction weight must be finite and >= 0, got {}", self.w)));
        }
        Ok(())
    }

    pub fn is_active(&self, level: usize) -> bool {
        self.lambdas.get(level).is_some_and(|&l| l > 0.0)
    }
}

// ---------------------------------------------------------------------------
// graph builders

fn mean_of<T: Element>(g: &mut Graph<T>, x: Var, scale: f64, shift: f64, f: Option<Unary>) -> Var {
    let a = g.affine(x, T::of(scale), T::of(shift));
    let a = match f {
        Some(u) => g.unary(a, u),
        None => a,
    };
    g.mean(a)
}

/// Discriminator loss of `variant` on raw score maps.
pub fn d_loss_graph<T: Element>(g: &mut Graph<T>, variant: AdversarialVariant, real: Var, fake: Var) -> Var {
    match variant {
        AdversarialVariant::Lsgan => {
            let r = mean_of(g, real, 1.0, -1.0, Some(Unary::Square));
            let f = mean_of(g, fake, 1.0, 0.0, Some(Unary::Square));
            let s = g.add(r, f);
            g.scale(s, T::of(0.5))
        }
        AdversarialVariant::Wgan => {
            let r = g.mean(real);
            let f = g.mean(fake);
            g.sub(f, r)
        }
        AdversarialVariant::Hinge => {
            let r = mean_of(g, real, -1.0, 1.0, Some(Unary::Relu));
            let f = mean_of(g, fake, 1.0, 1.0, Some(Unary::Relu));
            g.add(r, f)
        }
        AdversarialVariant::WganSoftplus => {
            let r = mean_of(g, real, -1.0, 0.0, Some(Unary::Softplus));
            let f = mean_of(g, fake, 1.0, 0.0, Some(Unary::Softplus));
            g.add(r, f)
        }
    }
}

/// Generator-side adversarial loss of `variant` on fake score maps.
pub fn g_loss_graph<T: Element>(g: &mut Graph<T>, variant: AdversarialVariant, fake: Var) -> Var {
    match variant {
        AdversarialVariant::Lsgan => {
            let f = mean_of(g, fake, 1.0, -1.0, Some(Unary::Square));
            g.scale(f, T::of(0.5))
        }
        AdversarialVariant::Wgan | AdversarialVariant::Hinge => mean_of(g, fake, -1.0, 0.0, None),
        AdversarialVariant::WganSoftplus => mean_of(g, fake, -1.0, 0.0, Some(Unary::Softplus)),
    }
}

/// Scalar nodes of one level's generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LevelTerms {
    pub adv: Var,
    pub mse: Var,
}

/// `sum_i lambda_i * (adv_i + w * mse_i)` with per-level pixel loss between
/// corresponding pyramid levels.
pub fn laploss_graph<T: Element>(
    g: &mut Graph<T>,
    fake_scores: &[Var],
    predicted: &[Var],
    target: &[Var],
    weights: &LossWeights,
    variant: AdversarialVariant,
) -> Result<(Var, Vec<LevelTerms>)> {
    let n = weights.lambdas.len();
    if fake_scores.len() != n || predicted.len() != n || target.len() != n {
        return Err(Error::shape(format!(
            "level count mismatch: {} weights, {} score maps, {} predicted, {} target levels",
            n,
            fake_scores.len(),
            predicted.len(),
            target.len()
        )));
    }
    let mut terms = Vec::with_capacity(n);
    let mut total: Option<Var> = None;
    for i in 0..n {
        let (ps, ts) = (g.value(predicted[i]).shape(), g.value(target[i]).shape());
        if ps != ts {
            return Err(Error::shape(format!("level {i}: predicted {ps:?} vs target {ts:?}")));
        }
        let adv = g_loss_graph(g, variant, fake_scores[i]);
        let mse = g.mse(predicted[i], target[i]);
        let weighted_mse = g.scale(mse, T::of(weights.w));
        let level = g.add(adv, weighted_mse);
        let level = g.scale(level, T::of(weights.lambdas[i]));
        total = Some(match total {
            Some(t) => g.add(t, level),
            None => level,
        });
        terms.push(LevelTerms { adv, mse });
    }
    Ok((total.expect("at least one level"), terms))
}

// ---------------------------------------------------------------------------
// array helpers

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub level: usize,
    pub lambda: f64,
    pub adv: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub levels: Vec<LevelLoss>,
}

impl LossBreakdown {
    /// `sum lambda_i (adv_i + w mse_i)` from the stored per-level values.
    pub fn recompute_total(&self, w: f64) -> f64 {
        self.levels.iter().map(|l| l.lambda * (l.adv + w * l.mse)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.levels.iter().all(|l| l.adv.is_finite() && l.mse.is_finite())
    }
}

fn check_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse_loss<T: Element>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_same_shape(predicted, target)?;
    let mut g = Graph::new();
    let a = g.constant(predicted.clone());
    let b = g.constant(target.clone());
    let m = g.mse(a, b);
    Ok(g.value(m).item())
}

pub fn discriminator_loss<T: Element>(variant: AdversarialVariant, real: &Tensor<T>, fake: &Tensor<T>) -> T {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let l = d_loss_graph(&mut g, variant, r, f);
    g.value(l).item()
}

pub fn generator_adv_loss<T: Element>(variant: AdversarialVariant, fake: &Tensor<T>) -> T {
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let l = g_loss_graph(&mut g, variant, f);
    g.value(l).item()
}

pub fn lsgan_d_loss<T: Element>(real: &Tensor<T>, fake: &Tensor<T>) -> T {
    discriminator_loss(AdversarialVariant::Lsgan, real, fake)
}

pub fn lsgan_g_loss<T: Element>(fake: &Tensor<T>) -> T {
    generator_adv_loss(AdversarialVariant::Lsgan, fake)
}

/// `(d_loss, g_loss)`
pub fn wgan_losses<T: Element>(real: &Tensor<T>, fake: &Tensor<T>) -> (T, T) {
    (
        discriminator_loss(AdversarialVariant::Wgan, real, fake),
        generator_adv_loss(AdversarialVariant::Wgan, fake),
    )
}

/// `(d_loss, g_loss)`
pub fn hinge_losses<T: Element>(real: &Tensor<T>, fake: &Tensor<T>) -> (T, T) {
    (
        discriminator_loss(AdversarialVariant::Hinge, real, fake),
        generator_adv_loss(AdversarialVariant::Hinge, fake),
    )
}

/// `(d_loss, g_loss)`
pub fn wgan_softplus_losses<T: Element>(real: &Tensor<T>, fake: &Tensor<T>) -> (T, T) {
    (
        discriminator_loss(AdversarialVariant::WganSoftplus, real, fake),
        generator_adv_loss(AdversarialVariant::WganSoftplus, fake),
    )
}

/// Loss of the discriminator at `level`; each level's discriminator sees
/// only its own level's scores.
pub fn laploss_discriminator_total<T: Element>(
    _level: usize,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    variant: AdversarialVariant,
) -> T {
    discriminator_loss(variant, real, fake)
}

/// Evaluates the generator objective and its per-level breakdown.
pub fn laploss_generator_total<T: Element>(
    fake_scores: &[Tensor<T>],
    predicted: &[Tensor<T>],
    target: &[Tensor<T>],
    weights: &LossWeights,
    variant: AdversarialVariant,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let s: Vec<Var> = fake_scores.iter().map(|t| g.constant(t.clone())).collect();
    let p: Vec<Var> = predicted.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var> = target.iter().map(|t| g.constant(t.clone())).collect();
    let (total, terms) = laploss_graph(&mut g, &s, &p, &t, weights, variant)?;
    Ok(breakdown_from_graph(&g, total, &terms, weights))
}

pub fn breakdown_from_graph<T: Element>(
    g: &Graph<T>,
    total: Var,
    terms: &[LevelTerms],
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        total: g.value(total).item().as_f64(),
        levels: terms
            .iter()
            .enumerate()
            .map(|(i, t)| LevelLoss {
                level: i,
                lambda: weights.lambdas[i],
                adv: g.value(t.adv).item().as_f64(),
                mse: g.value(t.mse).item().as_f64(),
            })
            .collect(),
    }
}
