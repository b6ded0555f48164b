//! Radius-based one-to-one matching, localization metrics (precision,
//! recall, F1) and counting metrics (MAE, MSE, NAE).

use std::fmt::Write as _;

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Circumradius of a `w x h` box.
pub fn sigma_from_box(w: f64, h: f64) -> Result<f64> {
    if !(w > 0.0 && h > 0.0) {
        return Err(arg_err("sigma_from_box", format!("box {w}x{h} must have positive sides")));
    }
    Ok((w * w + h * h).sqrt() / 2.0)
}

impl HeadAnnotation {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        HeadAnnotation { x, y, w, h }
    }

    /// Matching radius; degenerate boxes get radius 0 (exact hits only).
    pub fn sigma(&self) -> f64 {
        sigma_from_box(self.w, self.h).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(pred index, gt index)` pairs.
    pub matched: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.matched.len()
    }
    pub fn fp(&self) -> usize {
        self.false_positives.len()
    }
    pub fn fn_count(&self) -> usize {
        self.false_negatives.len()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// O(rows^2 cols) shortest augmenting paths with potentials. Returns the
/// column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    let inf = f64::INFINITY;
    // 1-based: p[j] is the row assigned to column j, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn dist(p: (f64, f64), g: &HeadAnnotation) -> f64 {
    ((p.0 - g.x).powi(2) + (p.1 - g.y).powi(2)).sqrt()
}

/// One-to-one matching of predicted points to annotated heads. A pair is
/// feasible when the distance is at most the head's radius. The number of
/// matches is maximized first, then the total matched distance minimized.
pub fn match_points(preds: &[(f64, f64)], gts: &[HeadAnnotation]) -> MatchResult {
    let feasible = |i: usize, j: usize| {
        let d = dist(preds[i], &gts[j]);
        (d <= gts[j].sigma()).then_some(d)
    };
    // every matched distance is bounded by its head's radius, so a bonus
    // above the radius sum makes one more match worth any distance increase
    let bonus = 1.0 + gts.iter().map(|g| g.sigma()).sum::<f64>();
    let transpose = preds.len() > gts.len();
    let (rows, cols) = if transpose { (gts.len(), preds.len()) } else { (preds.len(), gts.len()) };
    let pair = |r: usize, c: usize| if transpose { (c, r) } else { (r, c) };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let (i, j) = pair(r, c);
                    feasible(i, j).map_or(0.0, |d| d - bonus)
                })
                .collect()
        })
        .collect();
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut matched = Vec::new();
    for (r, c) in hungarian(&cost).into_iter().enumerate() {
        let (i, j) = pair(r, c);
        if feasible(i, j).is_some() {
            pred_used[i] = true;
            gt_used[j] = true;
            matched.push((i, j));
        }
    }
    matched.sort_unstable();
    MatchResult {
        matched,
        false_positives: (0..preds.len()).filter(|&i| !pred_used[i]).collect(),
        false_negatives: (0..gts.len()).filter(|&j| !gt_used[j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalizationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl LocalizationMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_count: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_count);
        LocalizationMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }

    pub fn from_match(m: &MatchResult) -> Self {
        Self::from_counts(m.tp(), m.fp(), m.fn_count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CountingMetrics {
    pub mae: f64,
    /// Root of the mean squared error.
    pub mse: f64,
    /// Mean of `|y - y_hat| / y` over images with `y > 0`; 0 if there are none.
    pub nae: f64,
}

impl CountingMetrics {
    pub fn compute(gt: &[f64], pred: &[f64]) -> Result<Self> {
        if gt.is_empty() || gt.len() != pred.len() {
            return Err(arg_err(
                "counting_metrics",
                format!("{} ground-truth vs {} predicted counts", gt.len(), pred.len()),
            ));
        }
        let n = gt.len() as f64;
        let mae = gt.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
        let mse = (gt.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / n).sqrt();
        let pos: Vec<f64> = gt.iter().zip(pred).filter(|(y, _)| **y > 0.0).map(|(y, p)| (y - p).abs() / y).collect();
        let nae = if pos.is_empty() { 0.0 } else { pos.iter().sum::<f64>() / pos.len() as f64 };
        Ok(CountingMetrics { mae, mse, nae })
    }
}

/// Aggregated matching counts and metrics over a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalizationReport {
    pub images: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub localization: LocalizationMetrics,
    pub counting: CountingMetrics,
}

impl LocalizationReport {
    /// `per_image` holds each image's match result; predicted count is the
    /// number of predicted points, ground-truth count the number of heads.
    pub fn from_matches(per_image: &[MatchResult]) -> Result<Self> {
        let (mut tp, mut fp, mut fn_count) = (0, 0, 0);
        let mut gt = Vec::with_capacity(per_image.len());
        let mut pred = Vec::with_capacity(per_image.len());
        for m in per_image {
            tp += m.tp();
            fp += m.fp();
            fn_count += m.fn_count();
            gt.push((m.tp() + m.fn_count()) as f64);
            pred.push((m.tp() + m.fp()) as f64);
        }
        Ok(LocalizationReport {
            images: per_image.len(),
            tp,
            fp,
            fn_count,
            localization: LocalizationMetrics::from_counts(tp, fp, fn_count),
            counting: CountingMetrics::compute(&gt, &pred)?,
        })
    }

    pub fn table(&self) -> String {
        let l = &self.localization;
        let c = &self.counting;
        let rows = [
            ("images", self.images.to_string()),
            ("tp", self.tp.to_string()),
            ("fp", self.fp.to_string()),
            ("fn", self.fn_count.to_string()),
            ("precision", format!("{:.4}", l.precision)),
            ("recall", format!("{:.4}", l.recall)),
            ("f1", format!("{:.4}", l.f1)),
            ("mae", format!("{:.4}", c.mae)),
            ("mse", format!("{:.4}", c.mse)),
            ("nae", format!("{:.4}", c.nae)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<10} {v:>10}");
        }
        s
    }

    pub fn key_values(&self) -> String {
        let l = &self.localization;
        let c = &self.counting;
        format!(
            "images={}\ntp={}\nfp={}\nfn={}\nprecision={}\nrecall={}\nf1={}\nmae={}\nmse={}\nnae={}\n",
            self.images, self.tp, self.fp, self.fn_count, l.precision, l.recall, l.f1, c.mae, c.mse, c.nae
        )
    }
}
