use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use laploss_core::ablation::{ablation_run, level_weight_grid};
use laploss_core::checkpoint::{self, Precision};
use laploss_core::data::{self, scan_dataset, PairDataset, Split, SynthConfig};
use laploss_core::metrics::{self, format_table, MetricReport};
use laploss_core::pyramid::{self, LaplacianPyramid};
use laploss_core::trainer::{fit_state, FitOptions, FitReport, TrainState, FINAL_CHECKPOINT_DIR};
use laploss_core::{Element, ImageGrid, Tensor};
use serde_json::json;

use crate::config::RunConfigFile;
use crate::{AblateArgs, DecomposeArgs, EnhanceArgs, EvalArgs, SynthArgs, TrainArgs};

pub const LEVEL_DUMP_FILE: &str = "levels.safetensors";
pub const DECOMPOSE_MANIFEST: &str = "manifest.json";
const DEFAULT_SIZE: (usize, usize) = (64, 96);

/// Error tagged with the exit code it maps to.
pub enum Failure {
    /// Bad configuration, arguments or inputs (exit 2).
    Usage(anyhow::Error),
    /// The command started and then failed (exit 3).
    Run(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Run(e) => e,
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Phase<T> {
    fn usage(self) -> CmdResult<T>;
    fn run(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Phase<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn run(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Run(e.into()))
    }
}

fn load_split(root: &Path, split: Split, size: (usize, usize)) -> anyhow::Result<PairDataset> {
    let manifests = scan_dataset(root, split)?;
    Ok(PairDataset::from_manifests(&manifests, size.0, size.1))
}

/// Non-empty held-out sets for the configured splits.
fn eval_sets(cfg: &RunConfigFile) -> anyhow::Result<Vec<(String, PairDataset)>> {
    let Some(root) = &cfg.eval.root else { return Ok(Vec::new()) };
    let size = (cfg.data.height, cfg.data.width);
    let mut sets = Vec::new();
    for &split in &cfg.eval.splits {
        let ds = load_split(root, split, size)?;
        if ds.is_empty() {
            log::warn!("{}: no samples in {}", split.name(), root.display());
        } else {
            sets.push((split.name().to_string(), ds));
        }
    }
    if sets.is_empty() {
        return Err(anyhow!("no samples in any evaluation split under {}", root.display()));
    }
    Ok(sets)
}

fn training_set(cfg: &RunConfigFile) -> anyhow::Result<Arc<PairDataset>> {
    let root = cfg.data.root.as_ref().ok_or_else(|| anyhow!("data.root is required"))?;
    let ds = load_split(root, Split::Train, (cfg.data.height, cfg.data.width))?;
    if ds.is_empty() {
        return Err(anyhow!("no samples in training set {}", root.display()));
    }
    log::info!("{} training pairs from {}", ds.len(), root.display());
    Ok(Arc::new(ds))
}

fn run_training<T: Element>(
    cfg: &RunConfigFile,
    resume: Option<&Path>,
    train: Arc<PairDataset>,
    opts: &FitOptions,
) -> CmdResult<FitReport> {
    let tc = cfg.train_config();
    let state = match resume {
        Some(dir) => {
            let mut s = TrainState::<T>::load(dir).with_context(|| format!("cannot resume from {}", dir.display())).usage()?;
            s.reconfigure(tc).usage()?;
            if s.image_size() != train.size() {
                return Err(Failure::Usage(anyhow!(
                    "checkpoint was trained at {:?}, data is {:?}",
                    s.image_size(),
                    train.size()
                )));
            }
            log::info!("resuming at step {}", s.step());
            s
        }
        None => TrainState::<T>::new(tc, train.size()).usage()?,
    };
    Ok(fit_state(state, train, opts).run()?.1)
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfigFile::load(&args.config).usage()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let train = training_set(&cfg).usage()?;
    let opts = FitOptions {
        eval_sets: eval_sets(&cfg).usage()?,
        augment: cfg.data.augment.clone(),
        out_dir: Some(args.out.clone()),
        workers: cfg.data.workers,
    };
    cfg.echo(&args.out).usage()?;
    let resume = args.resume.as_deref();
    let report = match cfg.model.precision {
        Precision::F32 => run_training::<f32>(&cfg, resume, train, &opts)?,
        Precision::F64 => run_training::<f64>(&cfg, resume, train, &opts)?,
    };
    println!("trained steps {}..{} in {:.1}s", report.start_step, report.final_step, report.wall_seconds);
    if let Some(last) = report.eval_history.last() {
        for s in &last.subsets {
            let p = s.mean_psnr.map_or("-".to_string(), |p| format!("{p:.2}"));
            println!("{:<12} PSNR {p:>6}  SSIM {:.4}", s.name, s.mean_ssim);
        }
    }
    println!("checkpoint: {}", args.out.join(FINAL_CHECKPOINT_DIR).display());
    Ok(())
}

fn write_report(dir: &Path, report: &MetricReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let stem = format!("eval_{}", report.dataset_name);
    std::fs::write(dir.join(format!("{stem}.json")), report.to_json()?)?;
    std::fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let cfg = args.config.as_deref().map(RunConfigFile::load).transpose().usage()?;
    let expected = cfg.as_ref().map(|c| &c.model.generator);
    let (generator, meta) = checkpoint::load_generator::<f32>(&args.checkpoint, expected).usage()?;
    let size = match (args.height, args.width) {
        (Some(h), Some(w)) => (h, w),
        _ => cfg
            .as_ref()
            .map(|c| (c.data.height, c.data.width))
            .or(meta.image_size)
            .unwrap_or(DEFAULT_SIZE),
    };
    let explicit = !args.split.is_empty();
    let splits = if explicit { args.split.clone() } else { Split::TEST.to_vec() };
    let mut sets = Vec::new();
    for split in splits {
        let ds = load_split(&args.data, split, size).usage()?;
        if ds.is_empty() {
            if explicit {
                return Err(Failure::Usage(anyhow!("split {}: no samples in {}", split.name(), args.data.display())));
            }
            continue;
        }
        sets.push((split, ds));
    }
    if sets.is_empty() {
        return Err(Failure::Usage(anyhow!("no samples in any test split under {}", args.data.display())));
    }
    let mut reports = Vec::new();
    for (split, ds) in &sets {
        reports.push(metrics::evaluate_dataset(&generator, split.name(), ds).run()?);
    }
    print!("{}", format_table(&reports));
    if let Some(out) = &args.out {
        for r in &reports {
            write_report(out, r).run()?;
        }
    }
    Ok(())
}

pub fn enhance(args: EnhanceArgs) -> CmdResult {
    let (generator, _) = checkpoint::load_generator::<f32>(&args.checkpoint, None).usage()?;
    let image = data::load_image(&args.input).usage()?;
    let out = generator.enhance_any_size(&image).run()?;
    data::save_image(&out, &args.output).run()?;
    println!("wrote {} ({}x{})", args.output.display(), out.width(), out.height());
    Ok(())
}

/// PNG view of one level: the residual as is, bands shifted by 0.5.
fn level_view(level: &Tensor<f64>, is_band: bool) -> anyhow::Result<ImageGrid> {
    let img = ImageGrid::from_tensor(level)?;
    Ok(if is_band { img.map(|v| (v + 0.5).clamp(0.0, 1.0)) } else { img.clamp01() })
}

pub fn decompose(args: DecomposeArgs) -> CmdResult {
    let image = data::load_image(&args.input).usage()?;
    pyramid::check_divisible(image.height(), image.width(), args.levels).usage()?;
    let pyr = pyramid::decompose(&image.to_tensor::<f64>(), args.levels).run()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display())).run()?;
    let mut files = Vec::new();
    for (k, level) in pyr.levels().iter().enumerate() {
        let name = format!("level_{k}.png");
        data::save_image(&level_view(level, k > 0).run()?, &args.out.join(&name)).run()?;
        files.push(name);
    }
    let names: Vec<String> = (0..pyr.level_count()).map(|k| format!("level_{k}")).collect();
    let named: Vec<(String, &Tensor<f64>)> = names.iter().cloned().zip(pyr.levels()).collect();
    checkpoint::write_tensors(&args.out.join(LEVEL_DUMP_FILE), &named).run()?;
    let manifest = json!({
        "source": args.input,
        "levels": pyr.level_count(),
        "order": "coarse_to_fine",
        "shapes": pyr.shapes(),
        "images": files,
        "band_offset": 0.5,
        "dump": LEVEL_DUMP_FILE,
    });
    let manifest_path = args.out.join(DECOMPOSE_MANIFEST);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).run()? + "\n").run()?;
    println!("wrote {} levels to {}", pyr.level_count(), args.out.display());

    if args.reconstruct {
        let mut dump = checkpoint::read_tensors::<f64>(&args.out.join(LEVEL_DUMP_FILE)).run()?;
        let levels = names
            .iter()
            .map(|n| dump.remove(n).ok_or_else(|| anyhow!("{n} missing from dump")))
            .collect::<anyhow::Result<Vec<_>>>()
            .run()?;
        let back = pyramid::reconstruct(&LaplacianPyramid::from_levels(levels).run()?).run()?;
        let original = image.to_tensor::<f64>();
        let err = original.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("max reconstruction error: {err:.3e}");
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        mode: args.mode,
        count: args.count,
        seed: args.seed,
        height: args.height,
        width: args.width,
        ..Default::default()
    };
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Failure::Usage(anyhow!("height and width must be positive")));
    }
    data::write_synthetic_dataset(&args.out, &cfg).run()?;
    println!("wrote {} scenes to {}", cfg.count, args.out.display());
    Ok(())
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let mut cfg = RunConfigFile::load(&args.config).usage()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if cfg.model.generator.level_count != 3 {
        return Err(Failure::Usage(anyhow!("the level-weight grid needs a 3-level model")));
    }
    let train = training_set(&cfg).usage()?;
    if cfg.eval.root.is_none() {
        return Err(Failure::Usage(anyhow!("eval.root is required for an ablation")));
    }
    let subsets = eval_sets(&cfg).usage()?;
    cfg.echo(&args.out).usage()?;
    let table = ablation_run(&cfg.train_config(), &level_weight_grid(), train, &subsets).run()?;
    let text = table.format();
    std::fs::write(args.out.join("ablation.txt"), &text).run()?;
    std::fs::write(args.out.join("ablation.json"), serde_json::to_string_pretty(&table).run()?).run()?;
    print!("{text}");
    Ok(())
}
