//! Level-weight ablation grid: one training run per weight setting, scored
//! on every test subset.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::error::Result;
use crate::losses::LossWeights;
use crate::trainer::{self, FitOptions, SubsetScore, TrainConfig};

/// The six settings of the level-weight study for three levels: one-hot at
/// each level, then coarse-heavy, fine-heavy and equal weights.
pub fn level_weight_grid() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0],
        vec![1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambdas: Vec<f64>,
    /// Per-subset scores, or the error that stopped this cell.
    pub outcome: std::result::Result<Vec<SubsetScore>, String>,
}

impl AblationRow {
    /// Indices of the levels with positive weight.
    pub fn active_levels(&self) -> Vec<usize> {
        self.lambdas.iter().enumerate().filter(|(_, &l)| l > 0.0).map(|(i, _)| i).collect()
    }

    /// Mean PSNR over subsets, if the run succeeded and every subset has one.
    pub fn mean_psnr(&self) -> Option<f64> {
        let scores = self.outcome.as_ref().ok()?;
        let v: Option<Vec<f64>> = scores.iter().map(|s| s.mean_psnr).collect();
        let v = v?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub subsets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Row with the highest mean PSNR across subsets.
    pub fn best_row(&self) -> Option<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.mean_psnr().map(|m| (i, m)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Plain-text table: levels, weights, `PSNR/SSIM` per subset; the best
    /// row is marked with `*`.
    pub fn format(&self) -> String {
        let best = self.best_row();
        let mut out = format!("{:<10} {:<24}", "levels", "weights");
        for s in &self.subsets {
            let _ = write!(out, " {s:>15}");
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let weights = r.lambdas.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>().join(", ");
            let _ = write!(out, "{:<10} {:<24}", format!("{:?}", r.active_levels()), format!("[{weights}]"));
            match &r.outcome {
                Ok(scores) => {
                    for s in scores {
                        let p = s.mean_psnr.map_or("-".to_string(), |p| format!("{p:.2}"));
                        let _ = write!(out, " {:>15}", format!("{p}/{:.3}", s.mean_ssim));
                    }
                }
                Err(e) => {
                    let _ = write!(out, " failed: {e}");
                }
            }
            if Some(i) == best {
                out.push_str("  *");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per weight setting and scores each on `subsets`. A
/// failing cell is recorded and the grid continues.
pub fn ablation_run(
    base: &TrainConfig,
    grid: &[Vec<f64>],
    train: Arc<PairDataset>,
    subsets: &[(String, PairDataset)],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for lambdas in grid {
        let mut cfg = base.clone();
        cfg.loss_weights = LossWeights::new(lambdas.clone(), base.loss_weights.w);
        let opts = FitOptions {
            eval_sets: subsets.to_vec(),
            ..Default::default()
        };
        let outcome = trainer::fit::<f32>(&cfg, train.clone(), &opts)
            .map(|(_, report)| report.eval_history.last().map(|e| e.subsets.clone()).unwrap_or_default())
            .map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("ablation cell {lambdas:?} failed: {e}");
        }
        rows.push(AblationRow {
            lambdas: lambdas.clone(),
            outcome,
        });
    }
    Ok(AblationTable {
        subsets: subsets.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}
