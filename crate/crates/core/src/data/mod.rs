//! Dataset scanning, image I/O, paired augmentation, synthetic exposure
//! pairs and batching.

pub mod augment;
pub mod io;
pub mod loader;
pub mod manifest;
pub mod synth;

pub use augment::{augment, augment_with, AugmentationConfig, PairTransform};
pub use io::{load_and_resize, load_image, resize_bilinear, save_image};
pub use loader::{batch_iterator, Batch, BatchPlan, ImageSource, Loader, PairDataset, PairItem};
pub use manifest::{scan_dataset, ExposureVariant, SampleManifest, Split, VariantLabel};
pub use synth::{
    apply_exposure, random_scene, synth_exposure_pair, synth_grad_pair, synth_mix_pair, synthesize,
    write_synthetic_dataset, SynthConfig, SynthMode, SynthScene,
};
