//! Paired datasets, seeded batch plans and a parallel batch loader.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::{augment_with, AugmentationConfig};
use super::io::{load_image, resize_bilinear};
use super::manifest::{SampleManifest, Split};
use super::synth::SynthScene;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng;
use crate::tensor::{Element, Tensor};

/// Environment variable bounding the number of loader threads.
pub const WORKERS_ENV: &str = "LAPLOSS_NUM_WORKERS";

#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<ImageGrid>),
}

impl ImageSource {
    fn load(&self) -> Result<ImageGrid> {
        match self {
            ImageSource::File(p) => load_image(p),
            ImageSource::Memory(img) => Ok(img.as_ref().clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairItem {
    pub id: String,
    pub input: ImageSource,
    pub target: ImageSource,
}

/// Degraded/ground-truth pairs resized to one working resolution.
#[derive(Clone, Debug)]
pub struct PairDataset {
    items: Vec<PairItem>,
    height: usize,
    width: usize,
}

impl PairDataset {
    pub fn new(items: Vec<PairItem>, height: usize, width: usize) -> Self {
        PairDataset { items, height, width }
    }

    /// One pair per listed exposure variant, id `scene_id/label`.
    pub fn from_manifests(manifests: &[SampleManifest], height: usize, width: usize) -> Self {
        let items = manifests
            .iter()
            .flat_map(|m| {
                m.exposure_variants.iter().map(move |v| PairItem {
                    id: format!("{}/{}", m.scene_id, v.label),
                    input: ImageSource::File(v.path.clone()),
                    target: ImageSource::File(m.ground_truth.clone()),
                })
            })
            .collect();
        Self::new(items, height, width)
    }

    /// In-memory pairs of the variants `split` selects.
    pub fn from_scenes(scenes: &[SynthScene], split: Split, height: usize, width: usize) -> Self {
        let items = scenes
            .iter()
            .flat_map(|s| {
                let gt = Arc::new(s.ground_truth.clone());
                s.variants
                    .iter()
                    .filter(|(l, _)| split.selects(*l))
                    .map(move |(l, img)| PairItem {
                        id: format!("{}/{}", s.scene_id, l),
                        input: ImageSource::Memory(Arc::new(img.clone())),
                        target: ImageSource::Memory(gt.clone()),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::new(items, height, width)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn items(&self) -> &[PairItem] {
        &self.items
    }

    /// `(input, target)` resized to the working size and clamped to `[0, 1]`.
    pub fn load(&self, index: usize) -> Result<(ImageGrid, ImageGrid)> {
        let item = self
            .items
            .get(index)
            .ok_or_else(|| Error::invalid(format!("pair {index} out of range ({} pairs)", self.items.len())))?;
        let wrap = |e: Error| Error::Item {
            id: item.id.clone(),
            source: Box::new(e),
        };
        let fit = |img: ImageGrid| resize_bilinear(&img, self.height, self.width).clamp01();
        let input = item.input.load().map_err(wrap)?;
        let target = item.target.load().map_err(wrap)?;
        Ok((fit(input), fit(target)))
    }
}

/// Which samples make up each batch. Each epoch is a fresh permutation
/// seeded by `(seed, epoch)`; the final batch of an epoch may be short.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Dataset("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(BatchPlan { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng::stream(self.seed, &[0xba7c, epoch]));
        order
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Epoch and sample indices of global step `step`.
    pub fn batch_for_step(&self, step: u64) -> (u64, Vec<usize>) {
        let per = self.batches_per_epoch() as u64;
        let (epoch, k) = (step / per, (step % per) as usize);
        let order = self.epoch_order(epoch);
        let end = ((k + 1) * self.batch_size).min(self.len);
        (epoch, order[k * self.batch_size..end].to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<ImageGrid>,
    pub targets: Vec<ImageGrid>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[N, 3, H, W]` tensors in network range `[-1, 1]`.
    pub fn to_network<T: Element>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let stack = |imgs: &[ImageGrid]| Tensor::stack_batch(&imgs.iter().map(|i| i.to_network()).collect::<Vec<_>>());
        Ok((stack(&self.inputs)?, stack(&self.targets)?))
    }
}

/// Thread count from `LAPLOSS_NUM_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Loads batches by step. Samples of a batch are decoded in parallel; the
/// batch order and content never depend on the thread count.
pub struct Loader {
    dataset: Arc<PairDataset>,
    plan: BatchPlan,
    augment: Option<AugmentationConfig>,
    pool: Option<rayon::ThreadPool>,
}

impl Loader {
    pub fn new(dataset: Arc<PairDataset>, batch_size: usize, seed: u64, augment: Option<AugmentationConfig>) -> Result<Self> {
        Self::with_workers(dataset, batch_size, seed, augment, worker_count())
    }

    pub fn with_workers(
        dataset: Arc<PairDataset>,
        batch_size: usize,
        seed: u64,
        augment: Option<AugmentationConfig>,
        workers: usize,
    ) -> Result<Self> {
        let plan = BatchPlan::new(dataset.len(), batch_size, seed)?;
        if let Some(a) = &augment {
            a.validate()?;
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot start loader threads: {e}")))?,
            )
        } else {
            None
        };
        Ok(Loader {
            dataset,
            plan,
            augment,
            pool,
        })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn dataset(&self) -> &PairDataset {
        &self.dataset
    }

    fn load_one(&self, step: u64, slot: usize, index: usize) -> Result<(ImageGrid, ImageGrid)> {
        let (input, target) = self.dataset.load(index)?;
        match &self.augment {
            Some(cfg) => {
                let mut r = rng::stream(cfg.seed, &[0xa06, step, slot as u64]);
                augment_with(&input, &target, cfg, &mut r)
            }
            None => Ok((input, target)),
        }
    }

    fn load_indices(&self, step: u64, indices: &[usize]) -> Result<Batch> {
        let work = || -> Result<Vec<(ImageGrid, ImageGrid)>> {
            match &self.pool {
                Some(_) => indices
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| self.load_one(step, slot, i))
                    .collect(),
                None => indices.iter().enumerate().map(|(slot, &i)| self.load_one(step, slot, i)).collect(),
            }
        };
        let pairs = match &self.pool {
            Some(pool) => pool.install(work)?,
            None => work()?,
        };
        let ids = indices.iter().map(|&i| self.dataset.items()[i].id.clone()).collect();
        let (inputs, targets) = pairs.into_iter().unzip();
        Ok(Batch { ids, inputs, targets })
    }

    /// The batch consumed at global step `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let (_, indices) = self.plan.batch_for_step(step);
        self.load_indices(step, &indices)
    }

    /// All batches of one epoch, in order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let per = self.plan.batches_per_epoch() as u64;
        (0..per).map(move |k| self.batch(epoch * per + k))
    }
}

/// Seeded batches of one epoch over `dataset`, without augmentation.
pub fn batch_iterator(
    dataset: Arc<PairDataset>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Batch>>> {
    let loader = Loader::new(dataset, batch_size, seed, None)?;
    let per = loader.plan().batches_per_epoch() as u64;
    Ok((0..per).map(move |k| loader.batch(epoch * per + k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthesize, SynthConfig};

    fn dataset(n: usize) -> Arc<PairDataset> {
        let items = (0..n)
            .map(|i| {
                let img = Arc::new(ImageGrid::filled(4, 4, i as f32 / n as f32));
                PairItem {
                    id: format!("p{i}"),
                    input: ImageSource::Memory(img.clone()),
                    target: ImageSource::Memory(img),
                }
            })
            .collect();
        Arc::new(PairDataset::new(items, 4, 4))
    }

    #[test]
    fn ten_samples_batch_four() {
        let sizes: Vec<usize> = batch_iterator(dataset(10), 4, 0, 0).unwrap().map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn epochs_are_permutations_reproducible_and_distinct() {
        let plan = BatchPlan::new(20, 3, 9).unwrap();
        let a = plan.epoch_order(0);
        assert_eq!(a, plan.epoch_order(0));
        assert_ne!(a, plan.epoch_order(1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn steps_walk_through_epochs() {
        let plan = BatchPlan::new(10, 4, 1).unwrap();
        let flat: Vec<usize> = (0..3).flat_map(|s| plan.batch_for_step(s).1).collect();
        assert_eq!(flat, plan.epoch_order(0));
        assert_eq!(plan.batch_for_step(3), (1, plan.epoch_batches(1)[0].clone()));
    }

    #[test]
    fn empty_and_zero_batch_are_errors() {
        assert!(BatchPlan::new(0, 4, 0).is_err());
        assert!(BatchPlan::new(4, 0, 0).is_err());
        assert!(batch_iterator(dataset(0), 2, 0, 0).is_err());
    }

    #[test]
    fn thread_count_does_not_change_batches() {
        let scenes = synthesize(&SynthConfig { count: 6, height: 16, width: 16, ..Default::default() }).unwrap();
        let ds = Arc::new(PairDataset::from_scenes(&scenes, Split::Train, 16, 16));
        assert_eq!(ds.len(), 24);
        let aug = Some(AugmentationConfig { shift_scale_rotate_prob: 1.0, ..Default::default() });
        let one = Loader::with_workers(ds.clone(), 5, 3, aug.clone(), 1).unwrap();
        let four = Loader::with_workers(ds, 5, 3, aug, 4).unwrap();
        for step in [0, 4, 7] {
            let (a, b) = (one.batch(step).unwrap(), four.batch(step).unwrap());
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.inputs, b.inputs);
            assert_eq!(a.targets, b.targets);
        }
    }

    #[test]
    fn split_filters_variants_and_tensors_are_normalized() {
        let scenes = synthesize(&SynthConfig { count: 2, height: 8, width: 8, ..Default::default() }).unwrap();
        let ds = PairDataset::from_scenes(&scenes, Split::TestUnder, 8, 8);
        assert_eq!(ds.len(), 2);
        assert!(ds.items()[0].id.ends_with("-1EV"));
        let loader = Loader::with_workers(Arc::new(ds), 2, 0, None, 1).unwrap();
        let (x, y) = loader.batch(0).unwrap().to_network::<f32>().unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert!(x.data().iter().chain(y.data()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn file_errors_carry_the_pair_id() {
        let ds = PairDataset::new(
            vec![PairItem {
                id: "scene_x/-1EV".into(),
                input: ImageSource::File("/nonexistent/a.png".into()),
                target: ImageSource::File("/nonexistent/b.png".into()),
            }],
            4,
            4,
        );
        let err = ds.load(0).unwrap_err().to_string();
        assert!(err.starts_with("scene_x/-1EV"), "{err}");
    }
}
