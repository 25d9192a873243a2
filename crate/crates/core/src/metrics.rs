//! Scorecard performance measures.
//!
//! Scores are probabilities of default: a higher score means riskier, and
//! bads (`y = 1`) are the positive class of the ROC curve.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// A metric together with its meta-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum MetricSpec {
    Auc,
    Brier,
    /// Partial AUC over a false-negative-rate window.
    Pauc {
        window: [f64; 2],
    },
    /// Bad rate among accepts averaged over an acceptance-rate grid.
    Abr {
        window: [f64; 2],
        step: f64,
    },
}

impl MetricSpec {
    pub fn pauc_default() -> Self {
        MetricSpec::Pauc { window: [0.0, 0.2] }
    }

    /// Bad rate among the lowest-risk `rate` fraction.
    pub fn bad_rate_at(rate: f64) -> Self {
        MetricSpec::Abr {
            window: [rate, rate],
            step: 0.01,
        }
    }

    pub fn abr_default() -> Self {
        MetricSpec::Abr {
            window: [0.2, 0.4],
            step: 0.01,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricSpec::Auc => "auc",
            MetricSpec::Brier => "brier",
            MetricSpec::Pauc { .. } => "pauc",
            MetricSpec::Abr { .. } => "abr",
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            MetricSpec::Auc | MetricSpec::Pauc { .. } => Orientation::HigherBetter,
            MetricSpec::Brier | MetricSpec::Abr { .. } => Orientation::LowerBetter,
        }
    }

    /// True when `a` is strictly better than `b` under this metric.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self.orientation() {
            Orientation::HigherBetter => a > b,
            Orientation::LowerBetter => a < b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |w: &[f64; 2]| (0.0..=1.0).contains(&w[0]) && (0.0..=1.0).contains(&w[1]);
        match self {
            MetricSpec::Auc | MetricSpec::Brier => Ok(()),
            MetricSpec::Pauc { window } if in_unit(window) && window[0] < window[1] => Ok(()),
            // a single-point window is the bad rate at one acceptance rate
            MetricSpec::Abr { window, step }
                if in_unit(window) && window[0] <= window[1] && *step > 0.0 && step.is_finite() =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!(
                "invalid metric parameters: {self:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub n_eval: usize,
    pub orientation: Orientation,
}

fn check_aligned(scores: &[f64], labels: &[u8], weights: Option<&[f64]>) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} labels",
                w.len(),
                labels.len()
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be finite and > 0".into(),
            ));
        }
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::ScoreOutOfRange(*s));
    }
    Ok(())
}

/// Score-descending groups of tied rows as (bad mass, good mass).
fn tie_groups(scores: &[f64], labels: &[u8], w: Option<&[f64]>) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut prev = f64::NAN;
    for i in idx {
        let wi = w.map_or(1.0, |w| w[i]);
        if groups.is_empty() || scores[i] != prev {
            groups.push((0.0, 0.0));
            prev = scores[i];
        }
        let g = groups.last_mut().unwrap();
        if labels[i] == 1 {
            g.0 += wi;
        } else {
            g.1 += wi;
        }
    }
    groups
}

fn class_mass(groups: &[(f64, f64)]) -> Result<(f64, f64)> {
    let pos: f64 = groups.iter().map(|g| g.0).sum();
    let neg: f64 = groups.iter().map(|g| g.1).sum();
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::MetricUndefined("AUC"));
    }
    Ok((pos, neg))
}

fn auc_impl(scores: &[f64], labels: &[u8], w: Option<&[f64]>) -> Result<f64> {
    check_aligned(scores, labels, w)?;
    let groups = tie_groups(scores, labels, w);
    let (pos, neg) = class_mass(&groups)?;
    // pairs (bad, good) with the bad scored higher, ties counted 1/2
    let mut good_below = neg;
    let mut num = 0.0;
    for &(b, g) in &groups {
        good_below -= g;
        num += b * good_below + 0.5 * b * g;
    }
    Ok(num / (pos * neg))
}

/// Probability that a random bad scores above a random good.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<MetricValue> {
    Ok(MetricValue {
        value: auc_impl(scores, labels, None)?,
        n_eval: scores.len(),
        orientation: Orientation::HigherBetter,
    })
}

/// ROC vertices `(fpr, tpr)` from `(0,0)` to `(1,1)`, one per distinct score.
pub fn roc_curve(
    scores: &[f64],
    labels: &[u8],
    weights: Option<&[f64]>,
) -> Result<Vec<(f64, f64)>> {
    check_aligned(scores, labels, weights)?;
    let groups = tie_groups(scores, labels, weights);
    let (pos, neg) = class_mass(&groups)?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (b, g) in groups {
        tp += b;
        fp += g;
        pts.push((fp / neg, tp / pos));
    }
    let last = pts.last_mut().unwrap();
    *last = (1.0, 1.0);
    Ok(pts)
}

fn pauc_impl(scores: &[f64], labels: &[u8], window: [f64; 2], w: Option<&[f64]>) -> Result<f64> {
    MetricSpec::Pauc { window }.validate()?;
    let pts = roc_curve(scores, labels, w)?;
    // FNR in [lo, hi]  <=>  TPR in [1 - hi, 1 - lo]
    let (a, b) = (1.0 - window[1], 1.0 - window[0]);
    let mut area = 0.0;
    for seg in pts.windows(2) {
        let ((f0, t0), (f1, t1)) = (seg[0], seg[1]);
        if t1 <= t0 {
            continue;
        }
        let lo = t0.max(a);
        let hi = t1.min(b);
        if hi <= lo {
            continue;
        }
        let fpr_at = |t: f64| f0 + (f1 - f0) * (t - t0) / (t1 - t0);
        area += (hi - lo) * (1.0 - 0.5 * (fpr_at(lo) + fpr_at(hi)));
    }
    Ok(area / (b - a))
}

/// Area under the ROC curve over the FNR window, divided by the window
/// width so a perfect ranking scores 1.
pub fn pauc(scores: &[f64], labels: &[u8], window: [f64; 2]) -> Result<MetricValue> {
    Ok(MetricValue {
        value: pauc_impl(scores, labels, window, None)?,
        n_eval: scores.len(),
        orientation: Orientation::HigherBetter,
    })
}

fn brier_impl(scores: &[f64], labels: &[u8], w: Option<&[f64]>) -> Result<f64> {
    check_aligned(scores, labels, w)?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "Brier score of an empty sample".into(),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::ScoreOutOfRange(*s));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        let e = scores[i] - labels[i] as f64;
        num += wi * e * e;
        den += wi;
    }
    Ok(num / den)
}

pub fn brier(scores: &[f64], labels: &[u8]) -> Result<MetricValue> {
    Ok(MetricValue {
        value: brier_impl(scores, labels, None)?,
        n_eval: scores.len(),
        orientation: Orientation::LowerBetter,
    })
}

/// Acceptance rates `lo, lo + step, .., hi`.
pub fn abr_grid(window: [f64; 2], step: f64) -> Vec<f64> {
    let m = ((window[1] - window[0]) / step + 1e-9).floor() as usize;
    (0..=m).map(|i| window[0] + i as f64 * step).collect()
}

fn abr_impl(
    scores: &[f64],
    labels: &[u8],
    window: [f64; 2],
    step: f64,
    w: Option<&[f64]>,
) -> Result<f64> {
    MetricSpec::Abr { window, step }.validate()?;
    check_aligned(scores, labels, w)?;
    let n = scores.len();
    if !labels.contains(&1) || !labels.contains(&0) {
        return Err(Error::MetricUndefined("ABR"));
    }
    // weights rescaled to mean one so that accepted mass is compared on the
    // row-count scale
    let wn: Vec<f64> = match w {
        None => vec![1.0; n],
        Some(w) => {
            let mean = w.iter().sum::<f64>() / n as f64;
            w.iter().map(|v| v / mean).collect()
        }
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let grid = abr_grid(window, step);
    let mut total = 0.0;
    for (gi, &alpha) in grid.iter().enumerate() {
        let budget = alpha * n as f64 + 1e-9;
        let (mut mass, mut bad) = (0.0, 0.0);
        for &i in &idx {
            if mass + wn[i] > budget {
                break;
            }
            mass += wn[i];
            bad += wn[i] * labels[i] as f64;
        }
        if mass == 0.0 {
            if gi == 0 {
                return Err(Error::InvalidArgument(
                    "ABR window accepts no rows at its lower edge".into(),
                ));
            }
            continue;
        }
        total += bad / mass;
    }
    Ok(total / grid.len() as f64)
}

/// For each acceptance rate α on the grid, the bad rate among the
/// `floor(α n)` lowest-score rows (ties in input order), averaged.
pub fn abr(scores: &[f64], labels: &[u8], window: [f64; 2], step: f64) -> Result<MetricValue> {
    Ok(MetricValue {
        value: abr_impl(scores, labels, window, step, None)?,
        n_eval: scores.len(),
        orientation: Orientation::LowerBetter,
    })
}

/// Evaluates `spec` on row-aligned scores and labels.
pub fn evaluate(spec: &MetricSpec, scores: &[f64], labels: &[u8]) -> Result<MetricValue> {
    evaluate_impl(spec, scores, labels, None)
}

/// Weighted evaluation: weighted pair counts for AUC and PAUC, weighted
/// squared error for Brier, weighted acceptance mass for ABR.
pub fn evaluate_weighted(
    spec: &MetricSpec,
    scores: &[f64],
    labels: &[u8],
    weights: &[f64],
) -> Result<MetricValue> {
    evaluate_impl(spec, scores, labels, Some(weights))
}

fn evaluate_impl(
    spec: &MetricSpec,
    scores: &[f64],
    labels: &[u8],
    w: Option<&[f64]>,
) -> Result<MetricValue> {
    let value = match *spec {
        MetricSpec::Auc => auc_impl(scores, labels, w)?,
        MetricSpec::Brier => brier_impl(scores, labels, w)?,
        MetricSpec::Pauc { window } => pauc_impl(scores, labels, window, w)?,
        MetricSpec::Abr { window, step } => abr_impl(scores, labels, window, step, w)?,
    };
    Ok(MetricValue {
        value,
        n_eval: scores.len(),
        orientation: spec.orientation(),
    })
}

pub fn rmse_of_estimates(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Shape(format!(
            "{} estimates vs {} truth values",
            estimates.len(),
            truth.len()
        )));
    }
    let ss: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|c| (a[(i, c)] - b[(j, c)]).powi(2))
        .sum()
}

/// Median pairwise Euclidean distance of the pooled rows.
pub fn median_heuristic(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pooled: Vec<(&DMatrix<f64>, usize)> = (0..a.nrows())
        .map(|i| (a, i))
        .chain((0..b.nrows()).map(|i| (b, i)))
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i].0, pooled[i].1, pooled[j].0, pooled[j].1).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Unbiased squared maximum mean discrepancy with a Gaussian kernel
/// `exp(-|x-y|² / (2σ²))`. `bandwidth = None` uses the median heuristic.
///
/// With equal sample sizes the paired U-statistic is used, which also
/// drops the `i = j` cross terms, so identical samples give exactly zero.
pub fn mmd(a: &Dataset, b: &Dataset, bandwidth: Option<f64>) -> Result<f64> {
    if a.n_features() != b.n_features() {
        return Err(Error::Shape(format!(
            "MMD arity mismatch: {} vs {}",
            a.n_features(),
            b.n_features()
        )));
    }
    let (m, n) = (a.n_rows(), b.n_rows());
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument(
            "MMD needs at least two rows per sample".into(),
        ));
    }
    let (xa, xb) = (a.features(), b.features());
    let sigma = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::InvalidArgument(format!("bandwidth {s} must be > 0"))),
        None => median_heuristic(xa, xb),
    };
    let g = 1.0 / (2.0 * sigma * sigma);
    let k =
        |p: &DMatrix<f64>, i: usize, q: &DMatrix<f64>, j: usize| (-g * sq_dist(p, i, q, j)).exp();
    let within = |x: &DMatrix<f64>| {
        let s = x.nrows();
        let mut t = 0.0;
        for i in 0..s {
            for j in i + 1..s {
                t += k(x, i, x, j);
            }
        }
        2.0 * t / (s * (s - 1)) as f64
    };
    let mut cross = 0.0;
    if m == n {
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    cross += k(xa, i, xb, j);
                }
            }
        }
        cross /= (m * (m - 1)) as f64;
    } else {
        for i in 0..m {
            for j in 0..n {
                cross += k(xa, i, xb, j);
            }
        }
        cross /= (m * n) as f64;
    }
    Ok(within(xa) + within(xb) - 2.0 * cross)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap().value,
            1.0
        );
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap().value, 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn pauc_examples() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let y = [1, 1, 0, 0];
        assert_eq!(pauc(&s, &y, [0.0, 0.2]).unwrap().value, 1.0);
        let s = [0.2, 0.7, 0.4, 0.4, 0.9, 0.1];
        let y = [0, 1, 1, 0, 0, 1];
        let full = pauc(&s, &y, [0.0, 1.0]).unwrap().value;
        assert!((full - auc(&s, &y).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[0.0, 1.0], &[0, 1]).unwrap().value, 0.0);
        assert_eq!(brier(&[0.5; 4], &[0, 1, 1, 0]).unwrap().value, 0.25);
        assert!((brier(&[0.2, 0.7], &[0, 1]).unwrap().value - 0.065).abs() < 1e-15);
        assert!(matches!(
            brier(&[1.2], &[1]),
            Err(Error::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn abr_extremes() {
        let y: Vec<u8> = (0..100).map(|i| u8::from(i % 2 == 0)).collect();
        let perfect: Vec<f64> = y.iter().map(|&v| v as f64 + 0.001).collect();
        let anti: Vec<f64> = y.iter().map(|&v| 1.0 - v as f64).collect();
        assert_eq!(abr(&perfect, &y, [0.2, 0.4], 0.01).unwrap().value, 0.0);
        assert_eq!(abr(&anti, &y, [0.2, 0.4], 0.01).unwrap().value, 1.0);
        assert_eq!(abr_grid([0.2, 0.4], 0.01).len(), 21);
        assert!(abr(&[0.1, 0.9], &[0, 1], [0.2, 0.4], 0.1).is_err());
    }

    #[test]
    fn single_rate_window() {
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let y = [0, 1, 0, 0, 1, 1, 0, 1, 1, 1];
        let v = evaluate(&MetricSpec::bad_rate_at(0.5), &s, &y)
            .unwrap()
            .value;
        assert_eq!(v, 0.4);
        assert!(MetricSpec::Pauc { window: [0.1, 0.1] }.validate().is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_of_estimates(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse_of_estimates(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((rmse_of_estimates(&[0.1, 0.3], &[0.2, 0.2]).unwrap() - 0.1).abs() < 1e-15);
        assert!(rmse_of_estimates(&[0.1], &[0.2, 0.2]).is_err());
    }

    #[test]
    fn weighted_duplication_equivalence() {
        let s = [0.3, 0.7, 0.5, 0.2, 0.9];
        let y = [0, 1, 0, 1, 0];
        let w = [1.0, 2.0, 1.0, 1.0, 1.0];
        let dup_s = [0.3, 0.7, 0.7, 0.5, 0.2, 0.9];
        let dup_y = [0, 1, 1, 0, 1, 0];
        let a = evaluate_weighted(&MetricSpec::Auc, &s, &y, &w)
            .unwrap()
            .value;
        let b = auc(&dup_s, &dup_y).unwrap().value;
        assert!((a - b).abs() < 1e-15);
    }
}
