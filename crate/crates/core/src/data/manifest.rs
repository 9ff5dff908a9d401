//! Dataset layout scanning.
//!
//! ```text
//! root/
//!   input/<scene_id>/<variant>.png   exposure variants of one scene
//!   gt/<scene_id>.png                ground truth for that scene
//!   ev_labels.json                   optional label overrides
//! ```
//!
//! Variant labels come from the file stem: `ev_-1`, `ev+2`, `ev0.5`, `-1ev`
//! parse as exposure values, stems starting with `grad` or `mix` mark the
//! mixed-exposure variants. `ev_labels.json` maps a file name (or
//! `scene_id/file name`) to a number, `"grad"` or `"mix"` and takes
//! precedence over the stem.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "ev_labels.json";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantLabel {
    Ev(f64),
    /// Exposure ramps across the frame in strips.
    Grad,
    /// Exposure varies between unordered regions.
    Mix,
}

impl VariantLabel {
    /// `ev_-1`, `ev+2`, `ev_0.5`, `-1ev`, `grad*`, `mix*`.
    pub fn parse_stem(stem: &str) -> Option<Self> {
        let s = stem.to_ascii_lowercase();
        if s.starts_with("grad") {
            return Some(VariantLabel::Grad);
        }
        if s.starts_with("mix") {
            return Some(VariantLabel::Mix);
        }
        let num = if let Some(rest) = s.strip_prefix("ev") {
            rest.trim_start_matches('_')
        } else {
            let rest = s.strip_suffix("ev")?;
            rest.trim_end_matches('_')
        };
        num.parse::<f64>().ok().filter(|v| v.is_finite()).map(VariantLabel::Ev)
    }

    pub fn ev(self) -> Option<f64> {
        match self {
            VariantLabel::Ev(v) => Some(v),
            _ => None,
        }
    }

    /// File stem used when writing this variant.
    pub fn stem(self) -> String {
        match self {
            VariantLabel::Ev(v) => format!("ev_{v:+}"),
            VariantLabel::Grad => "grad".into(),
            VariantLabel::Mix => "mix".into(),
        }
    }
}

impl fmt::Display for VariantLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantLabel::Ev(v) => write!(f, "{v:+}EV"),
            VariantLabel::Grad => f.write_str("grad"),
            VariantLabel::Mix => f.write_str("mix"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureVariant {
    pub label: VariantLabel,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub scene_id: String,
    pub exposure_variants: Vec<ExposureVariant>,
    pub ground_truth: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Every variant of every scene.
    Train,
    /// The -1 EV variant.
    TestUnder,
    /// The +1 EV variant.
    TestOver,
    Grad,
    Mix,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::TestUnder, Split::TestOver, Split::Grad, Split::Mix];
    pub const TEST: [Split; 4] = [Split::TestUnder, Split::TestOver, Split::Grad, Split::Mix];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestUnder => "test_under",
            Split::TestOver => "test_over",
            Split::Grad => "grad",
            Split::Mix => "mix",
        }
    }

    pub fn selects(self, label: VariantLabel) -> bool {
        match self {
            Split::Train => true,
            Split::TestUnder => label.ev() == Some(-1.0),
            Split::TestOver => label.ev() == Some(1.0),
            Split::Grad => label == VariantLabel::Grad,
            Split::Mix => label == VariantLabel::Mix,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}` (expected one of train, test_under, test_over, grad, mix)")))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Ev(f64),
    Name(String),
}

fn read_label_overrides(root: &Path) -> Result<HashMap<String, VariantLabel>> {
    let path = root.join(LABELS_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: BTreeMap<String, RawLabel> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(k, v)| {
            let label = match v {
                RawLabel::Ev(ev) => VariantLabel::Ev(ev),
                RawLabel::Name(n) => match n.as_str() {
                    "grad" => VariantLabel::Grad,
                    "mix" => VariantLabel::Mix,
                    other => VariantLabel::parse_stem(other).ok_or_else(|| {
                        Error::Dataset(format!("{}: unrecognised label `{other}` for `{k}`", path.display()))
                    })?,
                },
            };
            Ok((k, label))
        })
        .collect()
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn find_ground_truth(gt_dir: &Path, scene: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| gt_dir.join(format!("{scene}.{ext}")))
        .find(|p| p.is_file())
}

/// Scans `root` and keeps, per scene, the variants selected by `split`.
/// Scenes with no selected variant are dropped. Every kept file must have a
/// readable image header.
pub fn scan_dataset(root: &Path, split: Split) -> Result<Vec<SampleManifest>> {
    let input_dir = root.join("input");
    let gt_dir = root.join("gt");
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    if !input_dir.is_dir() {
        log::info!("{}: no input directory, 0 scenes", root.display());
        return Ok(Vec::new());
    }
    let overrides = read_label_overrides(root)?;
    let mut manifests = Vec::new();
    let mut missing_gt = Vec::new();
    for scene_dir in sorted_entries(&input_dir)? {
        if !scene_dir.is_dir() {
            continue;
        }
        let scene_id = scene_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut variants: Vec<ExposureVariant> = Vec::new();
        for file in sorted_entries(&scene_dir)? {
            if !is_image(&file) {
                continue;
            }
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let stem = file.file_stem().and_then(|n| n.to_str()).unwrap_or_default();
            let label = overrides
                .get(&format!("{scene_id}/{name}"))
                .or_else(|| overrides.get(name))
                .copied()
                .or_else(|| VariantLabel::parse_stem(stem))
                .ok_or_else(|| {
                    Error::Dataset(format!(
                        "cannot infer an exposure label for {}; name it like `ev_-1.png` or list it in {LABELS_FILE}",
                        file.display()
                    ))
                })?;
            if variants.iter().any(|v| v.label == label) {
                return Err(Error::Dataset(format!("scene `{scene_id}` has two variants labelled {label}")));
            }
            variants.push(ExposureVariant { label, path: file });
        }
        if variants.is_empty() {
            continue;
        }
        let Some(ground_truth) = find_ground_truth(&gt_dir, &scene_id) else {
            missing_gt.push(scene_id);
            continue;
        };
        variants.retain(|v| split.selects(v.label));
        if !variants.is_empty() {
            for p in variants.iter().map(|v| &v.path).chain([&ground_truth]) {
                super::io::probe_image(p)?;
            }
            manifests.push(SampleManifest {
                scene_id,
                exposure_variants: variants,
                ground_truth,
            });
        }
    }
    if !missing_gt.is_empty() {
        return Err(Error::Dataset(format!(
            "missing ground truth in {} for scene(s): {}",
            gt_dir.display(),
            missing_gt.join(", ")
        )));
    }
    log::info!("{}: {} scenes for split {split}", root.display(), manifests.len());
    Ok(manifests)
}
