//! First-order optimizers over a [`ParamStore`].
//!
//! Moments are kept in `f64` regardless of the parameter element type, so
//! optimizer state round-trips losslessly through checkpoints.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    #[serde(rename = "adamw")]
    AdamW,
    /// Adam run in the eigenbasis of Kronecker-factored gradient
    /// covariances, refreshed every `precondition_frequency` steps.
    Soap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; ignored by plain Adam.
    pub weight_decay: f64,
    pub precondition_frequency: usize,
    /// Matrix sides above this size are left unrotated.
    pub max_precond_dim: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            precondition_frequency: 10,
            max_precond_dim: 256,
        }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self::default()
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn soap() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Soap,
            beta2: 0.95,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        if self.kind == OptimizerKind::Soap && self.precondition_frequency == 0 {
            return Err(Error::Config("precondition_frequency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Side {
    dim: usize,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl Side {
    fn new(dim: usize) -> Self {
        Side {
            dim,
            cov: DMatrix::zeros(dim, dim),
            basis: DMatrix::identity(dim, dim),
        }
    }

    fn refresh_basis(&mut self) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        self.basis = DMatrix::from_fn(self.dim, self.dim, |r, c| eig.eigenvectors[(r, order[c])]);
    }
}

#[derive(Clone, Debug)]
struct Rotation {
    rows: usize,
    cols: usize,
    left: Option<Side>,
    right: Option<Side>,
}

impl Rotation {
    fn for_shape(shape: &[usize], max_dim: usize) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let side = |d: usize| (d > 1 && d <= max_dim).then(|| Side::new(d));
        let (left, right) = (side(rows), side(cols));
        if left.is_none() && right.is_none() {
            return None;
        }
        Some(Rotation { rows, cols, left, right })
    }

    fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = match &self.left {
            Some(s) => s.basis.tr_mul(m),
            None => m.clone(),
        };
        if let Some(s) = &self.right {
            out *= &s.basis;
        }
        out
    }

    fn project_back(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = match &self.left {
            Some(s) => &s.basis * m,
            None => m.clone(),
        };
        if let Some(s) = &self.right {
            out *= s.basis.transpose();
        }
        out
    }

    fn accumulate(&mut self, g: &DMatrix<f64>, beta: f64) {
        if let Some(s) = &mut self.left {
            s.cov = &s.cov * beta + (g * g.transpose()) * (1.0 - beta);
        }
        if let Some(s) = &mut self.right {
            s.cov = &s.cov * beta + (g.transpose() * g) * (1.0 - beta);
        }
    }

    fn refresh(&mut self) {
        for s in [&mut self.left, &mut self.right].into_iter().flatten() {
            s.refresh_basis();
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    rotation: Option<Rotation>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new<T: Element>(cfg: OptimizerConfig, lr: f64, params: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let slots = params
            .tensors()
            .iter()
            .map(|t| Slot {
                shape: t.shape().to_vec(),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                rotation: match cfg.kind {
                    OptimizerKind::Soap => Rotation::for_shape(t.shape(), cfg.max_precond_dim),
                    _ => None,
                },
            })
            .collect();
        Ok(Optimizer { cfg, lr, step: 0, slots })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` follow the store's parameter order.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.slots.len() || params.len() != self.slots.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {} tensors and {} gradients",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.cfg.clone();
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = match cfg.kind {
            OptimizerKind::Adam => 0.0,
            _ => cfg.weight_decay,
        };
        for ((slot, p), g) in self.slots.iter_mut().zip(params.tensors_mut()).zip(grads) {
            if g.shape() != slot.shape.as_slice() || p.shape() != slot.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter shape {:?}, gradient {:?}, optimizer slot {:?}",
                    p.shape(),
                    g.shape(),
                    slot.shape
                )));
            }
            let g64: Vec<f64> = g.data().iter().map(|x| x.as_f64()).collect();
            let update = match &mut slot.rotation {
                None => adam_direction(&mut slot.m, &mut slot.v, &g64, &cfg, bc1, bc2),
                Some(rot) => soap_direction(rot, &mut slot.m, &mut slot.v, &g64, &cfg, bc1, bc2, self.step),
            };
            for (w, u) in p.data_mut().iter_mut().zip(&update) {
                let mut x = w.as_f64();
                if decay > 0.0 {
                    x *= 1.0 - self.lr * decay;
                }
                *w = T::of(x - self.lr * u);
            }
        }
        Ok(())
    }

    /// Step counter plus every moment buffer, named by parameter index.
    pub fn state(&self) -> (u64, Vec<(String, Tensor<f64>)>) {
        let mut out = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            let vec_t = |v: &Vec<f64>| Tensor::from_vec(&s.shape, v.clone()).expect("slot shape");
            out.push((format!("{i}.m"), vec_t(&s.m)));
            out.push((format!("{i}.v"), vec_t(&s.v)));
            if let Some(r) = &s.rotation {
                for (tag, side) in [("left", &r.left), ("right", &r.right)] {
                    if let Some(side) = side {
                        let d = side.dim;
                        out.push((format!("{i}.{tag}.cov"), mat_tensor(&side.cov, d)));
                        out.push((format!("{i}.{tag}.basis"), mat_tensor(&side.basis, d)));
                    }
                }
            }
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, tensors: &[(String, Tensor<f64>)]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<&Tensor<f64>> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state is missing `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "optimizer state `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let mut slots = self.slots.clone();
        for (i, s) in slots.iter_mut().enumerate() {
            s.m = find(&format!("{i}.m"), &s.shape)?.data().to_vec();
            s.v = find(&format!("{i}.v"), &s.shape)?.data().to_vec();
            if let Some(r) = &mut s.rotation {
                for (tag, side) in [("left", &mut r.left), ("right", &mut r.right)] {
                    if let Some(side) = side {
                        let d = side.dim;
                        side.cov = tensor_mat(find(&format!("{i}.{tag}.cov"), &[d, d])?, d);
                        side.basis = tensor_mat(find(&format!("{i}.{tag}.basis"), &[d, d])?, d);
                    }
                }
            }
        }
        self.slots = slots;
        self.step = step;
        Ok(())
    }
}

fn mat_tensor(m: &DMatrix<f64>, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[d, d], |i| m[(i / d, i % d)])
}

fn tensor_mat(t: &Tensor<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, t.data())
}

fn adam_direction(m: &mut [f64], v: &mut [f64], g: &[f64], cfg: &OptimizerConfig, bc1: f64, bc2: f64) -> Vec<f64> {
    m.iter_mut()
        .zip(v.iter_mut())
        .zip(g)
        .map(|((m, v), &g)| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps)
        })
        .collect()
}

/// First moment lives in parameter space; the second moment lives in the
/// rotated basis.
#[allow(clippy::too_many_arguments)]
fn soap_direction(
    rot: &mut Rotation,
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    cfg: &OptimizerConfig,
    bc1: f64,
    bc2: f64,
    step: u64,
) -> Vec<f64> {
    let (rows, cols) = (rot.rows, rot.cols);
    let gm = DMatrix::from_row_slice(rows, cols, g);
    if step == 1 {
        rot.accumulate(&gm, cfg.beta2);
        rot.refresh();
    }
    for (m, &g) in m.iter_mut().zip(g) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    }
    let g_rot = rot.project(&gm);
    let m_rot = rot.project(&DMatrix::from_row_slice(rows, cols, m));
    let mut n = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = &mut v[r * cols + c];
            let gr = g_rot[(r, c)];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            n[(r, c)] = (m_rot[(r, c)] / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
    let u = rot.project_back(&n);
    if step > 1 {
        rot.accumulate(&gm, cfg.beta2);
    }
    if step.is_multiple_of(cfg.precondition_frequency as u64) {
        rot.refresh();
    }
    (0..rows * cols).map(|i| u[(i / cols, i % cols)]).collect()
}
