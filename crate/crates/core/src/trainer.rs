//! Adversarial training: one update of every active level discriminator,
//! then one generator update against the refreshed discriminators.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, CheckpointMeta, Precision, GENERATOR_PREFIX, OPTIMIZER_FILE, WEIGHTS_FILE};
use crate::data::{AugmentationConfig, Loader, PairDataset};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialVariant, LossBreakdown, LossWeights};
use crate::metrics::{self, MetricReport};
use crate::models::{DiscriminatorSpec, Generator, GeneratorSpec, LevelDiscriminators};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::pyramid::{self, LaplacianPyramid};
use crate::rng;
use crate::tensor::{Element, Tensor};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FINAL_CHECKPOINT_DIR: &str = "checkpoint";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub loss_weights: LossWeights,
    pub variant: AdversarialVariant,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub optimizer_generator: OptimizerConfig,
    pub optimizer_discriminator: OptimizerConfig,
    /// Weight clipping bound applied to the discriminators after each
    /// update when the variant is WGAN.
    pub wgan_clip: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            loss_weights: LossWeights::default(),
            variant: AdversarialVariant::Lsgan,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            optimizer_generator: OptimizerConfig::adam(),
            optimizer_discriminator: OptimizerConfig::adamw(1e-2),
            wgan_clip: 0.01,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Structural checks shared by every entry point; learning rates may be 0.
    pub fn validate_structure(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate(self.generator.level_count)?;
        self.loss_weights.validate(self.generator.level_count)?;
        self.optimizer_generator.validate()?;
        self.optimizer_discriminator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.wgan_clip.is_nan() || self.wgan_clip <= 0.0 {
            return Err(Error::Config(format!("wgan_clip must be > 0, got {}", self.wgan_clip)));
        }
        Ok(())
    }

    /// Full validation for training runs: learning rates must be positive.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub level: usize,
    pub lambda: f64,
    pub adv: f64,
    pub mse: f64,
    /// `None` for levels whose discriminator is inactive.
    pub d_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Step number after the update (1 for the first step).
    pub step: u64,
    pub g_total: f64,
    pub levels: Vec<LevelStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub step: u64,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainingMeta {
    config: TrainConfig,
    generator_optimizer_step: u64,
    discriminator_optimizer_steps: Vec<u64>,
    best: Option<BestMetric>,
}

/// Everything needed to continue training. The data order and augmentation
/// are pure functions of `(seed, step)`, so no generator state is stored.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    config: TrainConfig,
    image_size: (usize, usize),
    generator: Generator<T>,
    discriminators: LevelDiscriminators<T>,
    opt_g: Optimizer,
    opt_d: Vec<Optimizer>,
    step: u64,
    best: Option<BestMetric>,
}

/// Pyramids of an input batch and its targets.
pub fn batch_pyramids<T: Element>(
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    level_count: usize,
) -> Result<(LaplacianPyramid<T>, LaplacianPyramid<T>)> {
    if inputs.shape() != targets.shape() {
        return Err(Error::shape(format!("inputs {:?} vs targets {:?}", inputs.shape(), targets.shape())));
    }
    Ok((pyramid::decompose(inputs, level_count)?, pyramid::decompose(targets, level_count)?))
}

/// Generator objective against fixed discriminators, with optional
/// gradients for every generator parameter (store order).
pub fn generator_objective<T: Element>(
    generator: &Generator<T>,
    discriminators: &LevelDiscriminators<T>,
    input: &LaplacianPyramid<T>,
    target: &LaplacianPyramid<T>,
    weights: &LossWeights,
    variant: AdversarialVariant,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<T>>>)> {
    let mut g = Graph::new();
    let gp = g.bind(generator.params(), with_grads);
    let levels: Vec<Var> = input.levels().iter().map(|l| g.constant(l.clone())).collect();
    let predicted = generator.forward(&mut g, &gp, &levels)?;
    let targets: Vec<Var> = target.levels().iter().map(|l| g.constant(l.clone())).collect();
    let mut scores = Vec::with_capacity(predicted.len());
    for (k, &p) in predicted.iter().enumerate() {
        let d = discriminators.level(k)?;
        let dp = g.bind(d.params(), false);
        scores.push(d.forward(&mut g, &dp, p)?);
    }
    let (total, terms) = losses::laploss_graph(&mut g, &scores, &predicted, &targets, weights, variant)?;
    let breakdown = losses::breakdown_from_graph(&g, total, &terms, weights);
    let grads = with_grads.then(|| g.backward(total).of_bound(&gp, &g));
    Ok((breakdown, grads))
}

impl<T: Element> TrainState<T> {
    /// Fresh state for images of `image_size = (height, width)`.
    pub fn new(config: TrainConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate_structure()?;
        let (h, w) = image_size;
        pyramid::check_divisible(h, w, config.generator.level_count)?;
        let generator = Generator::build(&config.generator, rng::derive_seed(config.seed, 0x6))?;
        let shapes = LevelDiscriminators::<T>::level_shapes(h, w, config.generator.level_count);
        let discriminators = LevelDiscriminators::build(&config.discriminator, &shapes, rng::derive_seed(config.seed, 0xd))?;
        let opt_g = Optimizer::new(config.optimizer_generator.clone(), config.lr_generator, generator.params())?;
        let opt_d = discriminators
            .iter()
            .map(|d| Optimizer::new(config.optimizer_discriminator.clone(), config.lr_discriminator, d.params()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainState {
            config,
            image_size,
            generator,
            discriminators,
            opt_g,
            opt_d,
            step: 0,
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator<T> {
        &mut self.generator
    }

    pub fn discriminators(&self) -> &LevelDiscriminators<T> {
        &self.discriminators
    }

    pub fn discriminators_mut(&mut self) -> &mut LevelDiscriminators<T> {
        &mut self.discriminators
    }

    pub fn best(&self) -> Option<&BestMetric> {
        self.best.as_ref()
    }

    /// Records `mean_psnr` if it beats the best so far; returns whether it did.
    pub fn observe_metric(&mut self, mean_psnr: f64) -> bool {
        let better = self.best.as_ref().is_none_or(|b| mean_psnr > b.mean_psnr);
        if better && mean_psnr.is_finite() {
            self.best = Some(BestMetric {
                step: self.step,
                mean_psnr,
            });
            return true;
        }
        false
    }

    /// Overrides both learning rates (the config is updated too).
    pub fn set_learning_rates(&mut self, lr_generator: f64, lr_discriminator: f64) {
        self.config.lr_generator = lr_generator;
        self.config.lr_discriminator = lr_discriminator;
        self.opt_g.set_lr(lr_generator);
        for o in &mut self.opt_d {
            o.set_lr(lr_discriminator);
        }
    }

    /// Continues under `config`. Architecture, optimizer kinds, loss
    /// weights and variant must match the state; the horizon, learning
    /// rates, intervals and batch size may change.
    pub fn reconfigure(&mut self, config: TrainConfig) -> Result<()> {
        config.validate_structure()?;
        let c = &self.config;
        let mismatch = [
            (c.generator != config.generator, "generator"),
            (c.discriminator != config.discriminator, "discriminator"),
            (c.loss_weights != config.loss_weights, "loss weights"),
            (c.variant != config.variant, "variant"),
            (c.precision != config.precision, "precision"),
            (c.optimizer_generator.kind != config.optimizer_generator.kind, "generator optimizer"),
            (c.optimizer_discriminator.kind != config.optimizer_discriminator.kind, "discriminator optimizer"),
        ];
        if let Some((_, what)) = mismatch.iter().find(|(m, _)| *m) {
            return Err(Error::Config(format!("{what} differs from the checkpoint")));
        }
        self.set_learning_rates(config.lr_generator, config.lr_discriminator);
        self.config = config;
        Ok(())
    }

    /// Current generator objective on a batch, without updating anything.
    pub fn generator_loss(&self, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<LossBreakdown> {
        let (xp, yp) = batch_pyramids(inputs, targets, self.config.generator.level_count)?;
        let cfg = &self.config;
        Ok(generator_objective(&self.generator, &self.discriminators, &xp, &yp, &cfg.loss_weights, cfg.variant, false)?.0)
    }

    fn non_finite(&self, what: &str, levels: &[LevelStat], extra: &str) -> Error {
        let per_level: Vec<String> = levels
            .iter()
            .map(|l| format!("level {}: adv={} mse={} d_loss={:?}", l.level, l.adv, l.mse, l.d_loss))
            .collect();
        Error::NonFinite {
            step: self.step + 1,
            detail: format!("{what} {extra}[{}]", per_level.join("; ")),
        }
    }

    /// One training step on `[N, 3, H, W]` batches in network range.
    pub fn train_step(&mut self, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<StepReport> {
        let level_count = self.config.generator.level_count;
        let s = inputs.shape();
        if s.len() != 4 || (s[2], s[3]) != self.image_size {
            return Err(Error::shape(format!(
                "batch {:?} does not match training size {:?}",
                s, self.image_size
            )));
        }
        let (xp, yp) = batch_pyramids(inputs, targets, level_count)?;
        let weights = self.config.loss_weights.clone();
        let variant = self.config.variant;

        // Generator forward, kept for the generator update below.
        let mut g = Graph::new();
        let gp = g.bind(self.generator.params(), true);
        let in_levels: Vec<Var> = xp.levels().iter().map(|l| g.constant(l.clone())).collect();
        let predicted = self.generator.forward(&mut g, &gp, &in_levels)?;

        // Discriminator updates on detached predictions.
        let mut d_losses = vec![None; level_count];
        for (k, d_loss) in d_losses.iter_mut().enumerate() {
            if !weights.is_active(k) {
                continue;
            }
            let d = self.discriminators.level(k)?;
            let mut dg = Graph::new();
            let dp = dg.bind(d.params(), true);
            let real = dg.constant(yp.level(k).clone());
            let fake = dg.constant(g.value(predicted[k]).clone());
            let rs = d.forward(&mut dg, &dp, real)?;
            let fs = d.forward(&mut dg, &dp, fake)?;
            let loss = losses::d_loss_graph(&mut dg, variant, rs, fs);
            let value = dg.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step + 1,
                    detail: format!("discriminator loss at level {k} is {value}"),
                });
            }
            let grads = dg.backward(loss).of_bound(&dp, &dg);
            let d = self.discriminators.level_mut(k)?;
            self.opt_d[k].step(d.params_mut(), &grads)?;
            if variant == AdversarialVariant::Wgan {
                d.clip_weights(self.config.wgan_clip);
            }
            *d_loss = Some(value);
        }

        // Generator update against the refreshed discriminators.
        let targets_v: Vec<Var> = yp.levels().iter().map(|l| g.constant(l.clone())).collect();
        let mut scores = Vec::with_capacity(level_count);
        for (k, &p) in predicted.iter().enumerate() {
            let d = self.discriminators.level(k)?;
            let dp = g.bind(d.params(), false);
            scores.push(d.forward(&mut g, &dp, p)?);
        }
        let (total, terms) = losses::laploss_graph(&mut g, &scores, &predicted, &targets_v, &weights, variant)?;
        let breakdown = losses::breakdown_from_graph(&g, total, &terms, &weights);
        let levels: Vec<LevelStat> = breakdown
            .levels
            .iter()
            .zip(&d_losses)
            .map(|(l, &d_loss)| LevelStat {
                level: l.level,
                lambda: l.lambda,
                adv: l.adv,
                mse: l.mse,
                d_loss,
            })
            .collect();
        if !breakdown.is_finite() {
            return Err(self.non_finite("generator loss", &levels, &format!("total={} ", breakdown.total)));
        }
        let grads = g.backward(total).of_bound(&gp, &g);
        drop(g);
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            g_total: breakdown.total,
            levels,
        })
    }

    /// Writes weights, optimizer moments and metadata to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut weights = checkpoint::named(self.generator.params(), GENERATOR_PREFIX);
        for (k, d) in self.discriminators.iter().enumerate() {
            weights.extend(checkpoint::named(d.params(), &format!("disc{k}.")));
        }
        checkpoint::write_tensors(&dir.join(WEIGHTS_FILE), &weights)?;

        let (g_step, g_state) = self.opt_g.state();
        let mut opt: Vec<(String, Tensor<f64>)> = g_state.into_iter().map(|(n, t)| (format!("g.{n}"), t)).collect();
        let mut d_steps = Vec::new();
        for (k, o) in self.opt_d.iter().enumerate() {
            let (s, st) = o.state();
            d_steps.push(s);
            opt.extend(st.into_iter().map(|(n, t)| (format!("d{k}.{n}"), t)));
        }
        let opt_refs: Vec<(String, &Tensor<f64>)> = opt.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write_tensors(&dir.join(OPTIMIZER_FILE), &opt_refs)?;

        let meta = CheckpointMeta {
            generator: self.config.generator.clone(),
            discriminator: Some(self.config.discriminator.clone()),
            image_size: Some(self.image_size),
            seed: self.config.seed,
            step: self.step,
            precision: Precision::of::<T>(),
            training: serde_json::to_value(TrainingMeta {
                config: self.config.clone(),
                generator_optimizer_step: g_step,
                discriminator_optimizer_steps: d_steps,
                best: self.best.clone(),
            })?,
        };
        checkpoint::write_meta(dir, &meta)
    }

    /// Restores a state written by [`TrainState::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = checkpoint::read_meta(dir)?;
        if meta.training.is_null() {
            return Err(Error::Checkpoint(format!("{} holds no training state", dir.display())));
        }
        let tm: TrainingMeta = serde_json::from_value(meta.training.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: training state: {e}", dir.display())))?;
        if tm.config.generator != meta.generator {
            return Err(Error::Checkpoint("generator spec disagrees with training config".into()));
        }
        let image_size = meta
            .image_size
            .ok_or_else(|| Error::Checkpoint("training checkpoint lacks image_size".into()))?;
        let mut state = TrainState::<T>::new(tm.config, image_size)?;
        let mut weights = checkpoint::read_tensors::<T>(&dir.join(WEIGHTS_FILE))?;
        checkpoint::load_store(state.generator.params_mut(), &mut weights, GENERATOR_PREFIX)?;
        for (k, d) in state.discriminators.iter_mut().enumerate() {
            checkpoint::load_store(d.params_mut(), &mut weights, &format!("disc{k}."))?;
        }
        let opt = checkpoint::read_tensors::<f64>(&dir.join(OPTIMIZER_FILE))?;
        let with_prefix = |p: &str| -> Vec<(String, Tensor<f64>)> {
            opt.iter()
                .filter_map(|(n, t)| n.strip_prefix(p).map(|rest| (rest.to_string(), t.clone())))
                .collect()
        };
        state.opt_g.load_state(tm.generator_optimizer_step, &with_prefix("g."))?;
        if tm.discriminator_optimizer_steps.len() != state.opt_d.len() {
            return Err(Error::Checkpoint("discriminator optimizer count mismatch".into()));
        }
        for (k, o) in state.opt_d.iter_mut().enumerate() {
            o.load_state(tm.discriminator_optimizer_steps[k], &with_prefix(&format!("d{k}.")))?;
        }
        state.step = meta.step;
        state.best = tm.best;
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub name: String,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
}

impl SubsetScore {
    pub fn from_report(r: &MetricReport) -> Self {
        SubsetScore {
            name: r.dataset_name.clone(),
            mean_psnr: r.mean_psnr,
            mean_ssim: r.mean_ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub subsets: Vec<SubsetScore>,
}

impl EvalRecord {
    /// Mean of the subsets' finite mean PSNRs.
    pub fn mean_psnr(&self) -> Option<f64> {
        let v: Vec<f64> = self.subsets.iter().filter_map(|s| s.mean_psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub config: TrainConfig,
    pub start_step: u64,
    pub final_step: u64,
    pub eval_history: Vec<EvalRecord>,
    pub last_losses: Option<StepReport>,
    pub best: Option<BestMetric>,
    pub wall_seconds: f64,
}

/// Inputs and sinks of a training run beyond the config.
#[derive(Default)]
pub struct FitOptions {
    /// Named held-out sets evaluated at `eval_interval` and at the end.
    pub eval_sets: Vec<(String, PairDataset)>,
    pub augment: Option<AugmentationConfig>,
    /// Where checkpoints, `events.jsonl` and `report.json` go.
    pub out_dir: Option<PathBuf>,
    /// Loader threads; `None` reads `LAPLOSS_NUM_WORKERS`.
    pub workers: Option<usize>,
}

struct EventLog {
    out: Option<BufWriter<File>>,
    start: Instant,
}

impl EventLog {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let out = match dir {
            Some(d) => {
                let path = d.join(EVENTS_FILE);
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(EventLog { out, start: Instant::now() })
    }

    fn write(&mut self, mut event: serde_json::Value) -> Result<()> {
        let Some(out) = &mut self.out else { return Ok(()) };
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        event["elapsed_s"] = json!(self.start.elapsed().as_secs_f64());
        event["unix_time"] = json!(unix);
        writeln!(out, "{event}").and_then(|_| out.flush()).map_err(|e| Error::io(EVENTS_FILE, e))
    }
}

fn evaluate_all<T: Element>(generator: &Generator<T>, sets: &[(String, PairDataset)], step: u64) -> Result<EvalRecord> {
    let subsets = sets
        .iter()
        .map(|(name, ds)| metrics::evaluate_dataset(generator, name, ds).map(|r| SubsetScore::from_report(&r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRecord { step, subsets })
}

/// Trains `state` on `train` until `state.config().steps`.
pub fn fit_state<T: Element>(mut state: TrainState<T>, train: Arc<PairDataset>, opts: &FitOptions) -> Result<(TrainState<T>, FitReport)> {
    state.config.validate_structure()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if train.size() != state.image_size {
        return Err(Error::Config(format!(
            "training images are {:?}, the model was built for {:?}",
            train.size(),
            state.image_size
        )));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let clock = Instant::now();
    let start_step = state.step;
    let mut log = EventLog::open(opts.out_dir.as_deref(), start_step > 0)?;
    let loader = match opts.workers {
        Some(w) => Loader::with_workers(train, state.config.batch_size, state.config.seed, opts.augment.clone(), w)?,
        None => Loader::new(train, state.config.batch_size, state.config.seed, opts.augment.clone())?,
    };
    let mut report = FitReport {
        config: state.config.clone(),
        start_step,
        final_step: start_step,
        eval_history: Vec::new(),
        last_losses: None,
        best: state.best.clone(),
        wall_seconds: 0.0,
    };
    let total = state.config.steps;
    let (ckpt_every, eval_every) = (state.config.checkpoint_interval, state.config.eval_interval);
    let evaluate = |state: &mut TrainState<T>, log: &mut EventLog, report: &mut FitReport| -> Result<()> {
        if opts.eval_sets.is_empty() {
            return Ok(());
        }
        let rec = evaluate_all(&state.generator, &opts.eval_sets, state.step)?;
        if let Some(m) = rec.mean_psnr() {
            state.observe_metric(m);
        }
        log.write(json!({"event": "eval", "step": rec.step, "subsets": rec.subsets, "mean_psnr": rec.mean_psnr()}))?;
        report.eval_history.push(rec);
        Ok(())
    };

    while state.step < total {
        let batch = loader.batch(state.step)?;
        let (x, y) = batch.to_network::<T>()?;
        let r = state.train_step(&x, &y);
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                log.write(json!({"event": "abort", "step": state.step + 1, "error": e.to_string()}))?;
                return Err(e);
            }
        };
        log.write(json!({
            "event": "step",
            "step": r.step,
            "g_total": r.g_total,
            "levels": r.levels,
            "lr_generator": state.opt_g.lr(),
            "lr_discriminator": state.config.lr_discriminator,
        }))?;
        if r.step % 25 == 0 || r.step == total {
            log::info!("step {}/{}: generator loss {:.5}", r.step, total, r.g_total);
        }
        report.last_losses = Some(r);
        if eval_every > 0 && state.step.is_multiple_of(eval_every) && state.step < total {
            evaluate(&mut state, &mut log, &mut report)?;
        }
        if let Some(dir) = &opts.out_dir {
            if ckpt_every > 0 && state.step.is_multiple_of(ckpt_every) && state.step < total {
                let path = dir.join(CHECKPOINTS_DIR).join(format!("step_{:06}", state.step));
                state.save(&path)?;
                log.write(json!({"event": "checkpoint", "step": state.step, "path": path}))?;
            }
        }
    }
    evaluate(&mut state, &mut log, &mut report)?;
    report.final_step = state.step;
    report.best = state.best.clone();
    report.wall_seconds = clock.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(FINAL_CHECKPOINT_DIR);
        state.save(&path)?;
        log.write(json!({"event": "checkpoint", "step": state.step, "path": path}))?;
        let rp = dir.join(REPORT_FILE);
        std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&rp, e))?;
    }
    Ok((state, report))
}

/// Builds a fresh state sized to `train` and trains it.
pub fn fit<T: Element>(config: &TrainConfig, train: Arc<PairDataset>, opts: &FitOptions) -> Result<(TrainState<T>, FitReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let state = TrainState::new(config.clone(), train.size())?;
    fit_state(state, train, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, Split, SynthConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            generator: GeneratorSpec::new(1, 1, 1, 4),
            discriminator: DiscriminatorSpec {
                base_width: 4,
                max_width: 8,
                blocks: vec![1, 1, 2],
            },
            batch_size: 2,
            steps: 3,
            precision: Precision::F64,
            ..Default::default()
        }
    }

    fn tiny_batch(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let scenes = synthesize(&SynthConfig { count: 1, height: 16, width: 16, seed, ..Default::default() }).unwrap();
        let ds = PairDataset::from_scenes(&scenes, Split::Train, 16, 16);
        let loader = Loader::with_workers(Arc::new(ds), 2, seed, None, 1).unwrap();
        loader.batch(0).unwrap().to_network().unwrap()
    }

    #[test]
    fn zero_learning_rates_leave_weights_bit_identical() {
        let mut cfg = tiny_config();
        cfg.lr_generator = 0.0;
        cfg.lr_discriminator = 0.0;
        let mut s = TrainState::<f64>::new(cfg, (16, 16)).unwrap();
        let before = s.clone();
        let (x, y) = tiny_batch(0);
        s.train_step(&x, &y).unwrap();
        assert_eq!(s.generator().params().tensors(), before.generator().params().tensors());
        for (a, b) in s.discriminators().iter().zip(before.discriminators().iter()) {
            assert_eq!(a.params().tensors(), b.params().tensors());
        }
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn one_hot_updates_only_the_selected_discriminator() {
        for level in 0..3 {
            let mut cfg = tiny_config();
            cfg.loss_weights = LossWeights::one_hot(level, 3);
            let mut s = TrainState::<f64>::new(cfg, (16, 16)).unwrap();
            let before = s.clone();
            let (x, y) = tiny_batch(1);
            let r = s.train_step(&x, &y).unwrap();
            for (k, (a, b)) in s.discriminators().iter().zip(before.discriminators().iter()).enumerate() {
                assert_eq!(a.params().tensors() == b.params().tensors(), k != level, "level {level}, disc {k}");
                assert_eq!(r.levels[k].d_loss.is_some(), k == level);
            }
        }
    }

    #[test]
    fn discriminator_step_does_not_touch_generator() {
        let mut cfg = tiny_config();
        cfg.lr_generator = 0.0;
        let mut s = TrainState::<f64>::new(cfg, (16, 16)).unwrap();
        let g0 = s.generator().params().tensors().to_vec();
        let (x, y) = tiny_batch(2);
        s.train_step(&x, &y).unwrap();
        assert_eq!(s.generator().params().tensors(), g0.as_slice());
        assert!(s.discriminators().iter().all(|d| d.params().tensors().iter().all(|t| t.is_finite())));
    }

    #[test]
    fn generator_step_lowers_its_loss_in_most_trials() {
        let mut wins = 0;
        for seed in 0..10 {
            let mut cfg = tiny_config();
            cfg.seed = seed;
            cfg.lr_discriminator = 0.0;
            let mut s = TrainState::<f64>::new(cfg, (16, 16)).unwrap();
            let (x, y) = tiny_batch(seed);
            let before = s.generator_loss(&x, &y).unwrap().total;
            s.train_step(&x, &y).unwrap();
            let after = s.generator_loss(&x, &y).unwrap().total;
            wins += usize::from(after < before);
        }
        assert!(wins >= 7, "{wins}/10");
    }

    #[test]
    fn batch_size_mismatch_and_config_errors() {
        let mut s = TrainState::<f64>::new(tiny_config(), (16, 16)).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(s.train_step(&x, &x).is_err());
        assert!(TrainState::<f64>::new(tiny_config(), (18, 16)).is_err());
        let mut bad = tiny_config();
        bad.loss_weights = LossWeights::default();
        bad.loss_weights.lambdas.pop();
        assert!(TrainState::<f64>::new(bad, (16, 16)).is_err());
        let mut zero = tiny_config();
        zero.lr_generator = 0.0;
        assert!(zero.validate().is_err());
        assert!(zero.validate_structure().is_ok());
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut s = TrainState::<f64>::new(tiny_config(), (16, 16)).unwrap();
        let (mut x, y) = tiny_batch(0);
        x.data_mut()[0] = f64::NAN;
        let err = s.train_step(&x, &y).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    }

    #[test]
    fn save_load_round_trip_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TrainState::<f64>::new(tiny_config(), (16, 16)).unwrap();
        let (x, y) = tiny_batch(3);
        a.train_step(&x, &y).unwrap();
        a.observe_metric(12.5);
        a.save(dir.path()).unwrap();
        let mut b = TrainState::<f64>::load(dir.path()).unwrap();
        assert_eq!(b.step(), 1);
        assert_eq!(b.best(), a.best());
        let ra = a.train_step(&x, &y).unwrap();
        let rb = b.train_step(&x, &y).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.generator().params().tensors(), b.generator().params().tensors());
    }

    #[test]
    fn reconfigure_accepts_new_horizon_and_rejects_new_architecture() {
        let mut s = TrainState::<f64>::new(tiny_config(), (16, 16)).unwrap();
        let mut cfg = tiny_config();
        cfg.steps = 10;
        cfg.lr_generator = 5e-4;
        s.reconfigure(cfg).unwrap();
        assert_eq!(s.config().steps, 10);
        assert_eq!(s.config().lr_generator, 5e-4);
        let mut cfg = tiny_config();
        cfg.generator.width = 8;
        assert!(matches!(s.reconfigure(cfg), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.variant = AdversarialVariant::Hinge;
        assert!(s.reconfigure(cfg).is_err());
    }

    #[test]
    fn zero_steps_returns_initial_state_and_empty_history() {
        let mut cfg = tiny_config();
        cfg.steps = 0;
        let scenes = synthesize(&SynthConfig { count: 1, height: 16, width: 16, ..Default::default() }).unwrap();
        let ds = Arc::new(PairDataset::from_scenes(&scenes, Split::Train, 16, 16));
        let fresh = TrainState::<f64>::new(cfg.clone(), (16, 16)).unwrap();
        let (s, report) = fit::<f64>(&cfg, ds, &FitOptions::default()).unwrap();
        assert_eq!(s.step(), 0);
        assert!(report.eval_history.is_empty() && report.last_losses.is_none());
        assert_eq!(s.generator().params().tensors(), fresh.generator().params().tensors());
    }

    #[test]
    fn fit_writes_logs_checkpoints_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.steps = 4;
        cfg.checkpoint_interval = 2;
        cfg.eval_interval = 2;
        cfg.precision = Precision::F32;
        let scenes = synthesize(&SynthConfig { count: 3, height: 16, width: 16, ..Default::default() }).unwrap();
        let train = Arc::new(PairDataset::from_scenes(&scenes[..2], Split::Train, 16, 16));
        let held = PairDataset::from_scenes(&scenes[2..], Split::TestUnder, 16, 16);
        let opts = FitOptions {
            eval_sets: vec![("test_under".into(), held)],
            augment: Some(AugmentationConfig::default()),
            out_dir: Some(dir.path().to_path_buf()),
            workers: Some(1),
        };
        let (state, report) = fit::<f32>(&cfg, train, &opts).unwrap();
        assert_eq!(state.step(), 4);
        assert_eq!(report.eval_history.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
        let events = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
        let steps = events.lines().filter(|l| l.contains("\"event\":\"step\"")).count();
        assert_eq!(steps, 4);
        assert!(dir.path().join(CHECKPOINTS_DIR).join("step_000002").join(WEIGHTS_FILE).exists());
        assert!(dir.path().join(FINAL_CHECKPOINT_DIR).join(checkpoint::SPEC_FILE).exists());
        assert!(dir.path().join(REPORT_FILE).exists());
        let (g, _) = checkpoint::load_generator::<f32>(&dir.path().join(FINAL_CHECKPOINT_DIR), Some(&cfg.generator)).unwrap();
        assert_eq!(g.params().tensors(), state.generator().params().tensors());
    }
}
