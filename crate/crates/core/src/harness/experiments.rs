//! The fusion grid (six fused cells plus the unfused baseline) and the
//! leave-one-feature-out ablation.

use serde::{Deserialize, Serialize};

use crate::attention::{FusionFn, FusionLocation};
use crate::edge::{EdgeFeature, FeatureMask};

use super::{train, Dataset, ExperimentConfig, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RowOutcome {
    Ok {
        best_val_accuracy: f64,
        final_val_accuracy: f64,
        best_step: usize,
        final_train_loss: f64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub rank: usize,
    pub label: String,
    pub fusion_location: FusionLocation,
    pub fusion_fn: FusionFn,
    pub feature_mask: String,
    /// `feature[start..end]` per enabled edge feature.
    pub slot_map: String,
    pub config_hash: String,
    pub outcome: RowOutcome,
}

impl ExperimentRow {
    pub fn accuracy(&self) -> Option<f64> {
        match self.outcome {
            RowOutcome::Ok { best_val_accuracy, .. } => Some(best_val_accuracy),
            RowOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FusionGrid,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub base_config_hash: String,
    pub max_updates: usize,
    /// Ranked by best validation accuracy; failed rows last.
    pub rows: Vec<ExperimentRow>,
}

pub fn slot_map_text(mask: &FeatureMask) -> String {
    let slots = mask.slot_map();
    if slots.is_empty() {
        return "none".into();
    }
    slots.iter().map(|s| format!("{}[{}..{}]", s.feature.name(), s.start, s.start + s.width)).collect::<Vec<_>>().join(" ")
}

fn run_rows(kind: ExperimentKind, base: &ExperimentConfig, data: &Dataset, cells: Vec<(String, ExperimentConfig)>) -> Result<ExperimentReport, HarnessError> {
    base.validate()?;
    let mut rows: Vec<ExperimentRow> = cells
        .into_iter()
        .enumerate()
        .map(|(i, (label, mut cfg))| {
            if let Some(dir) = &base.output_dir {
                cfg.output_dir = Some(dir.join(format!("{i}-{}", label.replace(|c: char| !c.is_ascii_alphanumeric(), "_"))));
            }
            let outcome = match train(&cfg, data) {
                Ok(out) => RowOutcome::Ok {
                    best_val_accuracy: out.report.best_val_accuracy,
                    final_val_accuracy: out.report.final_val_accuracy,
                    best_step: out.report.best_step,
                    final_train_loss: out.report.final_train_loss,
                },
                Err(e) => {
                    log::warn!("{label}: {e}");
                    RowOutcome::Failed { error: e.to_string() }
                }
            };
            ExperimentRow {
                rank: 0,
                label,
                fusion_location: cfg.fusion_location,
                fusion_fn: cfg.fusion_fn,
                feature_mask: cfg.feature_mask.describe(),
                slot_map: slot_map_text(&cfg.feature_mask),
                config_hash: cfg.hash(),
                outcome,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.accuracy(), b.accuracy()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let report = ExperimentReport {
        kind,
        base_config_hash: base.hash(),
        max_updates: base.max_updates,
        rows,
    };
    if let Some(dir) = &base.output_dir {
        super::report::write_experiment(dir, &report)?;
    }
    Ok(report)
}

/// Trains the unfused baseline and every (location, function) cell from
/// `base`. A failing cell is reported and the others still run.
pub fn fusion_grid(base: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport, HarnessError> {
    let mut cells = vec![(
        "baseline".to_string(),
        ExperimentConfig {
            fusion_location: FusionLocation::None,
            ..base.clone()
        },
    )];
    for loc in FusionLocation::FUSED {
        for f in FusionFn::ALL {
            let cfg = ExperimentConfig {
                fusion_location: loc,
                fusion_fn: f,
                ..base.clone()
            };
            cells.push((format!("{}+{}", loc.name(), f.name()), cfg));
        }
    }
    run_rows(ExperimentKind::FusionGrid, base, data, cells)
}

/// All features, then each feature left out in turn. `base` must fuse at
/// the values with addition.
pub fn ablation_run(base: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport, HarnessError> {
    if base.fusion_location != FusionLocation::Values || base.fusion_fn != FusionFn::Add {
        return Err(HarnessError::Config("ablation expects fusion_location = values and fusion_fn = add".into()));
    }
    let mut cells = vec![(
        "all features".to_string(),
        ExperimentConfig {
            feature_mask: FeatureMask::ALL,
            ..base.clone()
        },
    )];
    for f in EdgeFeature::ALL {
        cells.push((
            format!("- {}", f.name()),
            ExperimentConfig {
                feature_mask: FeatureMask::ALL.without(f),
                ..base.clone()
            },
        ));
    }
    run_rows(ExperimentKind::Ablation, base, data, cells)
}
