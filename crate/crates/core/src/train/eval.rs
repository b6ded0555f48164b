//! Full-pipeline evaluation and the binarization-threshold sweep.

use std::fmt::Write as _;

use crate::data::SceneSample;
use crate::error::{arg_err, Result};
use crate::instance::{localize, Connectivity};
use crate::metrics::{match_points, LocalizationReport, MatchResult};
use crate::model::Dcst;
use crate::tensor::{BatchNormMode, NoGradGuard};

/// Eval-mode score map of every sample, row-major `height x width`.
pub fn predict_scores(model: &Dcst, samples: &[SceneSample]) -> Result<Vec<Vec<f32>>> {
    let _g = NoGradGuard::new();
    samples
        .iter()
        .map(|s| Ok(model.forward(&s.image_tensor()?, BatchNormMode::Eval)?.to_vec()))
        .collect()
}

/// Instance centroids of one score map matched against the sample's heads.
pub fn match_sample(score: &[f32], sample: &SceneSample, threshold: f32) -> Result<MatchResult> {
    let inst = localize(score, sample.height, sample.width, threshold, Connectivity::Eight)?;
    let points: Vec<(f64, f64)> = inst.iter().map(|i| i.centroid).collect();
    Ok(match_points(&points, &sample.heads))
}

pub fn evaluate_scores(scores: &[Vec<f32>], samples: &[SceneSample], threshold: f32) -> Result<LocalizationReport> {
    if scores.len() != samples.len() || samples.is_empty() {
        return Err(arg_err(
            "evaluate",
            format!("{} score maps for {} samples", scores.len(), samples.len()),
        ));
    }
    let matches = scores
        .iter()
        .zip(samples)
        .map(|(s, sample)| match_sample(s, sample, threshold))
        .collect::<Result<Vec<_>>>()?;
    LocalizationReport::from_matches(&matches)
}

pub fn evaluate(model: &Dcst, samples: &[SceneSample], threshold: f32) -> Result<LocalizationReport> {
    evaluate_scores(&predict_scores(model, samples)?, samples, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f32,
    pub report: LocalizationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// First threshold reaching the highest F1.
    pub best_f1: f32,
    /// First threshold reaching the lowest MAE.
    pub best_mae: f32,
}

impl SweepResult {
    pub fn best_f1_row(&self) -> &SweepRow {
        self.rows.iter().find(|r| r.threshold == self.best_f1).expect("best row present")
    }

    pub fn best_mae_row(&self) -> &SweepRow {
        self.rows.iter().find(|r| r.threshold == self.best_mae).expect("best row present")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,f1,precision,recall,mae,mse,nae\n");
        for r in &self.rows {
            let (l, c) = (&r.report.localization, &r.report.counting);
            let _ = writeln!(
                s,
                "{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.threshold, l.f1, l.precision, l.recall, c.mae, c.mse, c.nae
            );
        }
        s
    }
}

pub fn threshold_sweep_scores(scores: &[Vec<f32>], samples: &[SceneSample], grid: &[f32]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(arg_err("threshold_sweep", "empty threshold grid"));
    }
    let rows = grid
        .iter()
        .map(|&t| {
            Ok(SweepRow {
                threshold: t,
                report: evaluate_scores(scores, samples, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_f1 = &rows[0];
    let mut best_mae = &rows[0];
    for r in &rows[1..] {
        if r.report.localization.f1 > best_f1.report.localization.f1 {
            best_f1 = r;
        }
        if r.report.counting.mae < best_mae.report.counting.mae {
            best_mae = r;
        }
    }
    let (best_f1, best_mae) = (best_f1.threshold, best_mae.threshold);
    Ok(SweepResult { rows, best_f1, best_mae })
}

pub fn threshold_sweep(model: &Dcst, samples: &[SceneSample], grid: &[f32]) -> Result<SweepResult> {
    threshold_sweep_scores(&predict_scores(model, samples)?, samples, grid)
}
