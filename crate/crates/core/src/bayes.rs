//! Monte-Carlo evaluation of a scorecard on accepts plus pseudo-labeled
//! rejects.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngSeed, RowId};
use crate::error::{Error, Result};
use crate::learners::{predict_proba, Scorecard};
use crate::metrics::{evaluate, MetricSpec, MetricValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    PreviousScorecard,
    OriginalScores,
    Constant,
    Oracle,
    Corrupted,
}

/// Default probabilities for reject rows, aligned by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    ids: Vec<RowId>,
    probs: Vec<f64>,
    source: PriorSource,
}

const CLIP: f64 = 1e-6;

impl Prior {
    /// Prior from explicit probabilities; values must lie in [0, 1].
    pub fn from_parts(ids: Vec<RowId>, probs: Vec<f64>, source: PriorSource) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} prior values",
                ids.len(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::ScoreOutOfRange(*p));
        }
        Ok(Prior { ids, probs, source })
    }

    pub fn constant(rejects: &Dataset, rate: f64) -> Result<Self> {
        Prior::from_parts(
            rejects.ids().to_vec(),
            vec![rate; rejects.n_rows()],
            PriorSource::Constant,
        )
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn ids(&self) -> &[RowId] {
        &self.ids
    }

    pub fn source(&self) -> PriorSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Errors unless the prior covers exactly `rejects`' rows in order.
    pub fn check_aligned(&self, rejects: &Dataset) -> Result<()> {
        if self.ids.as_slice() != rejects.ids() {
            return Err(Error::Shape(
                "prior is not aligned to the reject rows".into(),
            ));
        }
        Ok(())
    }

    /// Restriction to the rows of `subset` (matched by id).
    pub fn restrict(&self, subset: &Dataset) -> Result<Prior> {
        let pos: std::collections::HashMap<RowId, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let probs = subset
            .ids()
            .iter()
            .map(|id| pos.get(id).map(|&i| self.probs[i]))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Shape("subset row missing from prior".into()))?;
        Ok(Prior {
            ids: subset.ids().to_vec(),
            probs,
            source: self.source,
        })
    }
}

/// Prior from a scorecard's predictions on `rejects`, clipped to
/// `[1e-6, 1 - 1e-6]`.
pub fn build_prior(rejects: &Dataset, source: &Scorecard) -> Result<Prior> {
    let p = predict_proba(source, rejects)?;
    build_prior_from_scores(rejects, &p, PriorSource::PreviousScorecard)
}

/// Prior from stored scores (for instance the original decision scores).
pub fn build_prior_from_scores(
    rejects: &Dataset,
    scores: &[f64],
    source: PriorSource,
) -> Result<Prior> {
    if scores.len() != rejects.n_rows() {
        return Err(Error::Shape(format!(
            "{} scores for {} rejects",
            scores.len(),
            rejects.n_rows()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::ScoreOutOfRange(*s));
    }
    let probs = scores.iter().map(|s| s.clamp(CLIP, 1.0 - CLIP)).collect();
    Ok(Prior {
        ids: rejects.ids().to_vec(),
        probs,
        source,
    })
}

/// Flips each entry to `1 - q` with probability `flip_rate`, then adds
/// `shift` and clips to [0, 1].
pub fn corrupt_prior(p: &Prior, flip_rate: f64, shift: f64, seed: RngSeed) -> Result<Prior> {
    if !(0.0..=1.0).contains(&flip_rate) || !shift.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "flip_rate {flip_rate} must be in [0,1] and shift finite"
        )));
    }
    let mut rng = seed.rng();
    let probs = p
        .probs
        .iter()
        .map(|&q| {
            let u: f64 = rng.random();
            let q = if u < flip_rate { 1.0 - q } else { q };
            (q + shift).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Prior {
        ids: p.ids.clone(),
        probs,
        source: PriorSource::Corrupted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BayesConfig {
    pub j_max: usize,
    pub epsilon: f64,
    pub min_iterations: usize,
    pub seed: RngSeed,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            j_max: 1000,
            epsilon: 1e-4,
            min_iterations: 10,
            seed: RngSeed::new(0),
        }
    }
}

impl BayesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_iterations < 2 || self.j_max < self.min_iterations {
            return Err(Error::InvalidArgument(format!(
                "need j_max >= min_iterations >= 2, got {} and {}",
                self.j_max, self.min_iterations
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BayesDiagnostics {
    /// Draws attempted, including skipped ones.
    pub iterations: usize,
    pub skipped: usize,
    pub converged: bool,
    /// Metric value of each accepted draw.
    pub draws: Vec<f64>,
    /// Running mean after each accepted draw.
    pub trace: Vec<f64>,
}

impl BayesDiagnostics {
    /// `iteration,draw,running_mean` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,draw,running_mean\n");
        for (i, (d, m)) in self.draws.iter().zip(&self.trace).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, d, m);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesResult {
    pub value: MetricValue,
    pub diagnostics: BayesDiagnostics,
}

/// Bayesian extension of `metric`: averages the metric of `f` over
/// accepts united with rejects whose labels are drawn from `prior`,
/// stopping once the running mean moves by less than `epsilon`.
pub fn bayesian_metric(
    f: &Scorecard,
    accepts: &Dataset,
    rejects: &Dataset,
    prior: &Prior,
    metric: &MetricSpec,
    cfg: &BayesConfig,
) -> Result<BayesResult> {
    prior.check_aligned(rejects)?;
    let ya = accepts.require_labels()?;
    let sa = predict_proba(f, accepts)?;
    let sr = if rejects.is_empty() {
        Vec::new()
    } else {
        predict_proba(f, rejects)?
    };
    bayesian_metric_scores(&sa, ya, &sr, prior.probs(), metric, cfg)
}

/// Score-level form of [`bayesian_metric`].
pub fn bayesian_metric_scores(
    accept_scores: &[f64],
    accept_labels: &[u8],
    reject_scores: &[f64],
    prior: &[f64],
    metric: &MetricSpec,
    cfg: &BayesConfig,
) -> Result<BayesResult> {
    cfg.validate()?;
    metric.validate()?;
    if accept_scores.len() != accept_labels.len() || reject_scores.len() != prior.len() {
        return Err(Error::Shape(
            "scores, labels and prior must be aligned".into(),
        ));
    }
    if reject_scores.is_empty() {
        let value = evaluate(metric, accept_scores, accept_labels)?;
        return Ok(BayesResult {
            value,
            diagnostics: BayesDiagnostics {
                iterations: 1,
                skipped: 0,
                converged: true,
                draws: vec![value.value],
                trace: vec![value.value],
            },
        });
    }

    let mut scores = accept_scores.to_vec();
    scores.extend_from_slice(reject_scores);
    let na = accept_labels.len();
    let mut labels = accept_labels.to_vec();
    labels.resize(scores.len(), 0);

    let mut diag = BayesDiagnostics::default();
    let mut mean = 0.0;
    for j in 0..cfg.j_max {
        diag.iterations = j + 1;
        let mut rng = cfg.seed.substream(j as u64).rng();
        for (i, &q) in prior.iter().enumerate() {
            let u: f64 = rng.random();
            labels[na + i] = u8::from(u < q);
        }
        let v = match evaluate(metric, &scores, &labels) {
            Ok(v) => v.value,
            Err(Error::MetricUndefined(_)) => {
                diag.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let prev = mean;
        let count = diag.draws.len() + 1;
        mean += (v - mean) / count as f64;
        diag.draws.push(v);
        diag.trace.push(mean);
        if count >= 2 && diag.iterations >= cfg.min_iterations && (mean - prev).abs() < cfg.epsilon
        {
            diag.converged = true;
            break;
        }
    }
    if diag.draws.is_empty() || 2 * diag.skipped > diag.iterations {
        return Err(Error::TooManySkipped {
            skipped: diag.skipped,
            attempted: diag.iterations,
        });
    }
    Ok(BayesResult {
        value: MetricValue {
            value: mean,
            n_eval: scores.len(),
            orientation: metric.orientation(),
        },
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn empty_rejects_reduce_to_plain_metric() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        let bm =
            bayesian_metric_scores(&s, &y, &[], &[], &MetricSpec::Auc, &BayesConfig::default())
                .unwrap();
        assert_eq!(
            bm.value.value.to_bits(),
            evaluate(&MetricSpec::Auc, &s, &y).unwrap().value.to_bits()
        );
    }

    #[test]
    fn degenerate_prior_converges_at_min_iterations() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        let rs = [0.2, 0.9, 0.5];
        let prior = [0.0, 1.0, 1.0];
        let cfg = BayesConfig::default();
        let bm = bayesian_metric_scores(&s, &y, &rs, &prior, &MetricSpec::Brier, &cfg).unwrap();
        assert_eq!(bm.diagnostics.iterations, cfg.min_iterations);
        let all_s = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9, 0.5];
        let all_y = [0, 0, 1, 1, 0, 1, 1];
        let m = evaluate(&MetricSpec::Brier, &all_s, &all_y).unwrap().value;
        assert!((bm.value.value - m).abs() < 1e-15);
    }

    #[test]
    fn single_class_draws_are_skipped_then_fail() {
        // accepts all good and rejects certainly good: AUC undefined every draw
        let r = bayesian_metric_scores(
            &[0.1, 0.2],
            &[0, 0],
            &[0.5],
            &[0.0],
            &MetricSpec::Auc,
            &BayesConfig::default(),
        );
        assert!(matches!(r, Err(Error::TooManySkipped { .. })));
    }

    #[test]
    fn prior_construction_and_corruption() {
        let rejects = Dataset::new(DMatrix::zeros(3, 2), None).unwrap();
        let sc = Scorecard::constant(0.39, 2).unwrap();
        let p = build_prior(&rejects, &sc).unwrap();
        assert_eq!(p.probs(), &[0.39; 3]);
        let q =
            build_prior_from_scores(&rejects, &[0.39; 3], PriorSource::PreviousScorecard).unwrap();
        assert_eq!(p, q);
        let c = build_prior_from_scores(&rejects, &[1.0, 0.0, 0.5], PriorSource::OriginalScores)
            .unwrap();
        assert_eq!(c.probs(), &[0.999999, 1e-6, 0.5]);

        let base = Prior::from_parts(
            rejects.ids().to_vec(),
            vec![0.9, 0.2, 0.5],
            PriorSource::Oracle,
        )
        .unwrap();
        let same = corrupt_prior(&base, 0.0, 0.0, RngSeed::new(1)).unwrap();
        assert_eq!(same.probs(), base.probs());
        assert_eq!(same.source(), PriorSource::Corrupted);
        let flipped = corrupt_prior(&base, 1.0, 0.0, RngSeed::new(1)).unwrap();
        for (a, b) in flipped.probs().iter().zip(base.probs()) {
            assert!((a - (1.0 - b)).abs() < 1e-15);
        }
        let shifted = corrupt_prior(&base, 0.0, 0.2, RngSeed::new(1)).unwrap();
        assert_eq!(shifted.probs()[0], 1.0);
    }

    #[test]
    fn reproducible() {
        let s: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let y: Vec<u8> = (0..30).map(|i| u8::from(i % 3 == 0)).collect();
        let rs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let m = MetricSpec::abr_default();
        let a = bayesian_metric_scores(&s, &y, &rs, &rs, &m, &BayesConfig::default()).unwrap();
        let b = bayesian_metric_scores(&s, &y, &rs, &rs, &m, &BayesConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
