//! Checkpoint directories.
//!
//! ```text
//! <dir>/weights.safetensors    generator.* and disc<k>.* parameters
//! <dir>/optimizer.safetensors  optimizer moments (f64), when training state is saved
//! <dir>/spec.json              CheckpointMeta
//! ```
//!
//! Loading checks the stored spec against the requested one before any
//! weight is assigned.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, Generator, GeneratorSpec};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const SPEC_FILE: &str = "spec.json";
pub const GENERATOR_PREFIX: &str = "generator.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn of<T: Element>() -> Self {
        if T::DTYPE == "f64" {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorSpec>,
    /// Training resolution `(height, width)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(usize, usize)>,
    pub seed: u64,
    pub step: u64,
    pub precision: Precision,
    /// Trainer-owned state (config, optimizer counters, best metric).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub training: serde_json::Value,
}

impl CheckpointMeta {
    pub fn for_generator<T: Element>(generator: &Generator<T>, seed: u64, step: u64) -> Self {
        CheckpointMeta {
            generator: generator.spec().clone(),
            discriminator: None,
            image_size: None,
            seed,
            step,
            precision: Precision::of::<T>(),
            training: serde_json::Value::Null,
        }
    }
}

fn st_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn to_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    match Precision::of::<T>() {
        Precision::F32 => t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect(),
        Precision::F64 => t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect(),
    }
}

/// Writes named tensors in their own element type.
pub fn write_tensors<T: Element>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let dtype = match Precision::of::<T>() {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| to_bytes(*t)).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| Ok((name.clone(), TensorView::new(dtype, t.shape().to_vec(), b).map_err(|e| st_error(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, &None, path).map_err(|e| st_error(path, e))
}

/// Reads every tensor, converting f32/f64 storage to `T`.
pub fn read_tensors<T: Element>(path: &Path) -> Result<HashMap<String, Tensor<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| st_error(path, e))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                other => return Err(st_error(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_vec(view.shape(), values)?;
            Ok((name, t))
        })
        .collect()
}

/// Assigns `prefix`-named tensors to `store`, requiring every parameter.
pub fn load_store<T: Element>(store: &mut ParamStore<T>, tensors: &mut HashMap<String, Tensor<T>>, prefix: &str) -> Result<()> {
    let names = store.names().to_vec();
    let values = names
        .iter()
        .map(|n| {
            tensors
                .remove(&format!("{prefix}{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{prefix}{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    store.load(&names, values)
}

pub fn named<'a, T: Element>(store: &'a ParamStore<T>, prefix: &str) -> Vec<(String, &'a Tensor<T>)> {
    store.names().iter().zip(store.tensors()).map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

pub fn write_meta(dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    let path = dir.join(SPEC_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(SPEC_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Writes a generator-only checkpoint.
pub fn save_generator<T: Element>(dir: &Path, generator: &Generator<T>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensors(&dir.join(WEIGHTS_FILE), &named(generator.params(), GENERATOR_PREFIX))?;
    write_meta(dir, meta)
}

/// Rebuilds the generator stored in `dir`. When `expected` is given, the
/// stored spec must equal it.
pub fn load_generator<T: Element>(dir: &Path, expected: Option<&GeneratorSpec>) -> Result<(Generator<T>, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if let Some(spec) = expected {
        if spec != &meta.generator {
            return Err(Error::Config(format!(
                "checkpoint {} holds generator {:?}, configuration asks for {:?}",
                dir.display(),
                meta.generator,
                spec
            )));
        }
    }
    let mut generator = Generator::build(&meta.generator, meta.seed)?;
    let mut tensors = read_tensors::<T>(&dir.join(WEIGHTS_FILE))?;
    load_store(generator.params_mut(), &mut tensors, GENERATOR_PREFIX)?;
    Ok((generator, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_files_round_trip_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25);
        let b = Tensor::<f64>::from_fn(&[4], |i| 1.0 / (i as f64 + 3.0));
        let p = dir.path().join("t.safetensors");
        write_tensors(&p, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read_tensors::<f64>(&p).unwrap();
        assert_eq!(back["a"], a);
        assert_eq!(back["b"], b);
        let narrowed = read_tensors::<f32>(&p).unwrap();
        assert_eq!(narrowed["a"], a.cast::<f32>());
    }

    #[test]
    fn generator_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GeneratorSpec::new(1, 2, 1, 4);
        let g = Generator::<f32>::build(&spec, 5).unwrap();
        let mut other = Generator::<f32>::build(&spec, 6).unwrap();
        assert_ne!(g.params().tensors(), other.params().tensors());
        save_generator(dir.path(), &g, &CheckpointMeta::for_generator(&g, 6, 42)).unwrap();
        let (back, meta) = load_generator::<f32>(dir.path(), Some(&spec)).unwrap();
        assert_eq!(back.params().tensors(), g.params().tensors());
        assert_eq!((meta.step, meta.seed, meta.precision), (42, 6, Precision::F32));
        let mut t = read_tensors::<f32>(&dir.path().join(WEIGHTS_FILE)).unwrap();
        load_store(other.params_mut(), &mut t, GENERATOR_PREFIX).unwrap();
        assert_eq!(other.params().tensors(), g.params().tensors());
    }

    #[test]
    fn spec_mismatch_is_rejected_before_loading() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::<f64>::build(&GeneratorSpec::new(1, 1, 1, 4), 0).unwrap();
        save_generator(dir.path(), &g, &CheckpointMeta::for_generator(&g, 0, 0)).unwrap();
        let err = load_generator::<f64>(dir.path(), Some(&GeneratorSpec::new(1, 1, 1, 8))).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn missing_or_reshaped_weights_fail() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GeneratorSpec::new(1, 1, 1, 4);
        let g = Generator::<f64>::build(&spec, 0).unwrap();
        let mut meta = CheckpointMeta::for_generator(&g, 0, 0);
        save_generator(dir.path(), &g, &meta).unwrap();
        meta.generator = GeneratorSpec::new(1, 1, 1, 8);
        write_meta(dir.path(), &meta).unwrap();
        assert!(load_generator::<f64>(dir.path(), None).is_err());
        assert!(load_generator::<f64>(&dir.path().join("absent"), None).is_err());
    }
}
