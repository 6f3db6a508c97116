//! Attention-bias diagnostics over traces and step records.
//!
//! Curves report how much attention mass lands on each span, per layer or
//! per generated step. The patch grid reports how often each image patch was
//! dropped by the amateur masks.

use serde::{Deserialize, Serialize};

use crate::attention::visual_candidates;
use crate::error::{CmgError, Result};
use crate::guidance::{RoleMass, StepRecord};
use crate::layout::{ModalityLayout, SpanRole};
use crate::model::{ForwardTrace, ModelConfig};

/// Which query rows a per-layer curve averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSelection {
    /// The last prompt row, which predicts the first generated token.
    #[default]
    LastPromptRow,
    AllRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAxis {
    Layer,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionCurve {
    pub axis: CurveAxis,
    /// Averaging convention, e.g. `"mean over heads, last prompt row"`.
    pub scheme: String,
    pub points: Vec<RoleMass>,
}

impl ProportionCurve {
    pub fn image_series(&self) -> Vec<f32> {
        self.points.iter().map(|p| p.image).collect()
    }

    /// Columns `index,system,image,question,generated`.
    pub fn to_csv(&self) -> String {
        let axis = match self.axis {
            CurveAxis::Layer => "layer",
            CurveAxis::Step => "step",
        };
        let mut out = format!("{axis},system,image,question,generated\n");
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                p.system, p.image, p.question, p.generated
            ));
        }
        out
    }

    /// Axis labels and one series per span, for any plotting tool.
    pub fn plot_spec(&self, title: &str) -> PlotSpec {
        let x: Vec<f64> = (0..self.points.len()).map(|i| i as f64).collect();
        PlotSpec {
            title: title.to_string(),
            x_label: match self.axis {
                CurveAxis::Layer => "layer".into(),
                CurveAxis::Step => "generation step".into(),
            },
            y_label: "attention proportion".into(),
            series: SpanRole::ALL
                .iter()
                .map(|&role| Series {
                    name: role.name().into(),
                    x: x.clone(),
                    y: self.points.iter().map(|p| p.get(role) as f64).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Per layer: mean over heads and selected rows of the mass on each span.
pub fn attention_proportions_by_layer(trace: &ForwardTrace, rows: RowSelection) -> Result<ProportionCurve> {
    if trace.attention.is_empty() {
        return Err(CmgError::ShapeMismatch("trace has no attention weights".into()));
    }
    let layout = &trace.layout;
    let queries: Vec<usize> = match rows {
        RowSelection::LastPromptRow => {
            let p = layout.prompt_len();
            if p == 0 {
                return Err(CmgError::InvalidLayout("trace has no prompt rows".into()));
            }
            vec![p - 1]
        }
        RowSelection::AllRows => (0..layout.len()).collect(),
    };
    let points = trace
        .attention
        .iter()
        .map(|heads| {
            let rows = heads.iter().flat_map(|m| queries.iter().map(move |&q| m.row(q)));
            RoleMass::from_rows(rows, layout)
        })
        .collect();
    let scheme = match rows {
        RowSelection::LastPromptRow => "mean over heads, last prompt row",
        RowSelection::AllRows => "mean over heads and all rows",
    };
    Ok(ProportionCurve {
        axis: CurveAxis::Layer,
        scheme: scheme.into(),
        points,
    })
}

/// Per step: mean over layers of the expert row's span masses.
pub fn attention_proportions_by_step(records: &[StepRecord]) -> ProportionCurve {
    let points = records
        .iter()
        .map(|r| {
            let n = r.attention_mass.len().max(1) as f64;
            let mut sums = [0.0f64; 4];
            for m in &r.attention_mass {
                for role in SpanRole::ALL {
                    sums[role.index()] += m.get(role) as f64;
                }
            }
            RoleMass {
                system: (sums[0] / n) as f32,
                image: (sums[1] / n) as f32,
                question: (sums[2] / n) as f32,
                generated: (sums[3] / n) as f32,
            }
        })
        .collect();
    ProportionCurve {
        axis: CurveAxis::Step,
        scheme: "mean over layers of the head-averaged query row".into(),
        points,
    }
}

/// How often each image patch was dropped, over every masked row in which
/// it was a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMaskGrid {
    pub rows: usize,
    pub cols: usize,
    /// Times each patch was dropped, row-major.
    pub dropped: Vec<u64>,
    /// Times each patch was a drop candidate, row-major.
    pub occurrences: Vec<u64>,
}

impl PatchMaskGrid {
    /// `dropped / occurrences`, 0 for patches never considered.
    pub fn frequency(&self) -> Vec<f32> {
        self.dropped
            .iter()
            .zip(&self.occurrences)
            .map(|(&d, &o)| if o == 0 { 0.0 } else { (d as f64 / o as f64) as f32 })
            .collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.frequency()[row * self.cols + col]
    }

    /// Columns `row,col,frequency,dropped,occurrences`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,frequency,dropped,occurrences\n");
        for (i, f) in self.frequency().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i / self.cols,
                i % self.cols,
                f,
                self.dropped[i],
                self.occurrences[i]
            ));
        }
        out
    }
}

/// Accumulates drop frequencies from the masks of a decode.
pub fn mask_patch_grid(records: &[StepRecord], config: &ModelConfig) -> Result<PatchMaskGrid> {
    let (rows, cols) = config.image_grid;
    let mut grid = PatchMaskGrid {
        rows,
        cols,
        dropped: vec![0; rows * cols],
        occurrences: vec![0; rows * cols],
    };
    for r in records {
        accumulate(&mut grid, &r.mask, &r.layout)?;
    }
    Ok(grid)
}

/// Adds the drops of one mask applied over `layout` to `grid`.
pub fn accumulate(
    grid: &mut PatchMaskGrid,
    mask: &crate::attention::GuidanceMask,
    layout: &ModalityLayout,
) -> Result<()> {
    let image = layout.image();
    if image.len != grid.rows * grid.cols {
        return Err(CmgError::ShapeMismatch(format!(
            "image span of {} tokens does not fill a {}x{} grid",
            image.len, grid.rows, grid.cols
        )));
    }
    for row in &mask.rows {
        for k in visual_candidates(row.query, layout) {
            if image.contains(k) {
                grid.occurrences[k - image.start] += 1;
            }
        }
        for &k in &row.dropped {
            if image.contains(k) {
                grid.dropped[k - image.start] += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// `KL(amateur ‖ expert)` of the next-token distributions per step.
    pub per_step: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    /// Mean over steps of the per-layer read-out divergence.
    pub per_layer_mean: Vec<f64>,
    pub per_layer_max: Vec<f64>,
}

pub fn kl_report(records: &[StepRecord]) -> KlReport {
    let per_step: Vec<f64> = records.iter().map(|r| r.kl).collect();
    let n = per_step.len();
    let mean = if n == 0 {
        0.0
    } else {
        per_step.iter().sum::<f64>() / n as f64
    };
    let max = per_step.iter().copied().fold(0.0, f64::max);
    let layers = records.iter().map(|r| r.kl_per_layer.len()).max().unwrap_or(0);
    let mut per_layer_mean = vec![0.0; layers];
    let mut per_layer_max = vec![0.0f64; layers];
    for r in records {
        for (i, &v) in r.kl_per_layer.iter().enumerate() {
            per_layer_mean[i] += v / n as f64;
            per_layer_max[i] = per_layer_max[i].max(v);
        }
    }
    KlReport {
        per_step,
        mean,
        max,
        per_layer_mean,
        per_layer_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GuidanceMask;
    use crate::guidance::{decode, DecodeParams};
    use crate::model::init_weights;
    use crate::numerics::Matrix;

    fn uniform_trace() -> ForwardTrace {
        // system 1 | image 2 | question 1; uniform causal attention
        let layout = ModalityLayout::new(1, 2, 1);
        let n = layout.len();
        let m = Matrix::from_fn(n, n, |q, k| if k <= q { 1.0 / (q + 1) as f32 } else { 0.0 });
        ForwardTrace {
            layout,
            tokens: vec![0; n],
            hidden_in: Vec::new(),
            hidden_out: Vec::new(),
            attention: vec![vec![m.clone(), m]],
            raw_scores: None,
            logits: None,
            mask: GuidanceMask::default(),
        }
    }

    #[test]
    fn uniform_attention_splits_evenly() {
        let c = attention_proportions_by_layer(&uniform_trace(), RowSelection::LastPromptRow).unwrap();
        assert!((c.points[0].image - 0.5).abs() < 1e-6);
        assert!((c.points[0].system - 0.25).abs() < 1e-6);
        assert!((c.points[0].total() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_rows_mode_averages_every_row() {
        let c = attention_proportions_by_layer(&uniform_trace(), RowSelection::AllRows).unwrap();
        // rows: [1], [1/2, 1/2], [1/3 x3], [1/4 x4]
        let image = (0.0 + 0.5 + 2.0 / 3.0 + 0.5) / 4.0;
        assert!((c.points[0].image - image).abs() < 1e-6);
        assert!(c.to_csv().starts_with("layer,system,image,question,generated\n0,"));
    }

    #[test]
    fn plot_spec_has_one_series_per_span() {
        let c = attention_proportions_by_layer(&uniform_trace(), RowSelection::LastPromptRow).unwrap();
        let spec = c.plot_spec("image attention");
        assert_eq!(spec.series.len(), 4);
        assert_eq!(spec.series[1].name, "image");
        assert_eq!(spec.series[1].y, vec![0.5]);
    }

    #[test]
    fn grid_shape_must_match_image_span() {
        let mut config = ModelConfig::tiny();
        config.image_grid = (3, 3);
        let w = init_weights(&ModelConfig::tiny(), 1).unwrap();
        let out = decode(
            &w,
            &[1, 2, 8, 9, 10, 11, 3],
            &ModalityLayout::new(2, 4, 1),
            &DecodeParams {
                max_new_tokens: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(mask_patch_grid(&out.records, &config).is_err());
        let grid = mask_patch_grid(&out.records, &ModelConfig::tiny()).unwrap();
        assert!(grid.dropped.iter().zip(&grid.occurrences).all(|(d, o)| d <= o));
    }

    #[test]
    fn kl_report_means() {
        let w = init_weights(&ModelConfig::tiny(), 1).unwrap();
        let out = decode(
            &w,
            &[1, 2, 8, 9, 10, 11, 3],
            &ModalityLayout::new(2, 4, 1),
            &DecodeParams {
                max_new_tokens: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let report = kl_report(&out.records);
        let hand: f64 = out.records.iter().map(|r| r.kl).sum::<f64>() / out.records.len() as f64;
        assert!((report.mean - hand).abs() < 1e-12);
        assert_eq!(report.per_layer_mean.len(), 2);
    }
}
