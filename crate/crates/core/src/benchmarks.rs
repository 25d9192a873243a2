//! Reference bias corrections for training and evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basl::{basl_fit, BaslConfig, StoppingSample};
use crate::bayes::{build_prior, Prior};
use crate::data::{Dataset, RngSeed, Split};
use crate::error::{Error, Result};
use crate::learners::{
    fit_gbt, fit_l1_logistic, fit_probit, inverse_mills, predict_proba, FitOptions, Scorecard,
    TrainingMeta,
};
use crate::metrics::{evaluate_weighted, MetricSpec, MetricValue};

fn default_cutoff() -> f64 {
    0.5
}
fn default_bands() -> usize {
    10
}
fn default_multiplier() -> f64 {
    1.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CorrectionMethod {
    Ignore,
    LabelAllBad,
    Hca {
        #[serde(default = "default_cutoff")]
        cutoff: f64,
    },
    Parceling {
        #[serde(default = "default_bands")]
        n_bands: usize,
        #[serde(default = "default_multiplier")]
        risk_multiplier: f64,
    },
    ReweightBanded {
        #[serde(default = "default_bands")]
        n_bands: usize,
    },
    HeckmanTwoStep,
    Basl(Box<BaslConfig>),
}

impl CorrectionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CorrectionMethod::Ignore => "ignore",
            CorrectionMethod::LabelAllBad => "label_all_bad",
            CorrectionMethod::Hca { .. } => "hca",
            CorrectionMethod::Parceling { .. } => "parceling",
            CorrectionMethod::ReweightBanded { .. } => "reweight_banded",
            CorrectionMethod::HeckmanTwoStep => "heckman_two_step",
            CorrectionMethod::Basl(_) => "basl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CorrectionMethod::Hca { cutoff } if !(*cutoff > 0.0 && *cutoff < 1.0) => Err(
                Error::InvalidArgument(format!("hca cutoff {cutoff} must be in (0,1)")),
            ),
            CorrectionMethod::Parceling {
                n_bands,
                risk_multiplier,
            } if *n_bands < 2 || !(*risk_multiplier >= 1.0) => Err(Error::InvalidArgument(
                "parceling needs n_bands >= 2 and risk_multiplier >= 1".into(),
            )),
            CorrectionMethod::ReweightBanded { n_bands } if *n_bands < 2 => Err(
                Error::InvalidArgument("reweight_banded needs n_bands >= 2".into()),
            ),
            CorrectionMethod::Basl(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

/// Weak learner used to label or band rejects.
fn weak_scores(
    accepts: &Dataset,
    others: &[&Dataset],
    opts: &FitOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let o = FitOptions {
        sample_weights: None,
        ..opts.clone()
    };
    let m = fit_l1_logistic(accepts, &o)?;
    let sa = predict_proba(&m, accepts)?;
    let rest = others
        .iter()
        .map(|d| {
            if d.is_empty() {
                Ok(Vec::new())
            } else {
                predict_proba(&m, d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sa, rest))
}

fn labeled(d: &Dataset, labels: Vec<u8>) -> Result<Dataset> {
    d.clone().with_accepted(None)?.with_labels(Some(labels))
}

/// Accepts plus rejects labeled bad when the accepts-trained weak
/// learner scores them at or above `cutoff`, good otherwise.
pub fn hca(
    accepts: &Dataset,
    rejects: &Dataset,
    cutoff: f64,
    opts: &FitOptions,
) -> Result<Dataset> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff} must be in (0,1)"
        )));
    }
    let (_, rest) = weak_scores(accepts, &[rejects], opts)?;
    let y = rest[0].iter().map(|&s| u8::from(s >= cutoff)).collect();
    accepts.concat(&labeled(rejects, y)?)
}

/// Quantile edges of `scores` for `n_bands` bands, deduplicated.
fn quantile_edges(scores: &[f64], n_bands: usize) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..n_bands)
        .map(|i| sorted[(i * n / n_bands).min(n - 1)])
        .collect();
    edges.dedup();
    edges
}

/// Band index: number of edges at or below `s`.
fn band_of(edges: &[f64], s: f64) -> usize {
    edges.partition_point(|&e| e <= s)
}

/// Merges bands with no accepts into a neighbour; returns the group of
/// each original band.
fn merge_empty(accept_counts: &[f64]) -> Vec<usize> {
    let nb = accept_counts.len();
    let mut group: Vec<usize> = (0..nb).collect();
    let mut merged = false;
    for b in 0..nb {
        if accept_counts[b] == 0.0 {
            merged = true;
            // nearest band with accepts, preferring the next one
            let target = (b + 1..nb)
                .find(|&j| accept_counts[j] > 0.0)
                .or_else(|| (0..b).rev().find(|&j| accept_counts[j] > 0.0));
            if let Some(t) = target {
                group[b] = t;
            }
        }
    }
    if merged {
        log::warn!("score band without accepts merged with its neighbour");
    }
    group
}

/// Accepts plus rejects labeled bad at random with probability
/// `min(1, risk_multiplier * p_b)`, where `p_b` is the accepts' bad rate in
/// the reject's score band (bands from accept-score quantiles).
pub fn parceling(
    accepts: &Dataset,
    rejects: &Dataset,
    n_bands: usize,
    risk_multiplier: f64,
    seed: RngSeed,
    opts: &FitOptions,
) -> Result<Dataset> {
    if n_bands == 0 || !(risk_multiplier >= 1.0) {
        return Err(Error::InvalidArgument(
            "parceling needs n_bands >= 1 and risk_multiplier >= 1".into(),
        ));
    }
    let ya = accepts.require_labels()?;
    let (sa, rest) = weak_scores(accepts, &[rejects], opts)?;
    let probs = parcel_probabilities(&sa, ya, &rest[0], n_bands, risk_multiplier);
    let mut rng = seed.rng();
    let y = probs
        .iter()
        .map(|&p| u8::from(rng.random::<f64>() < p))
        .collect();
    accepts.concat(&labeled(rejects, y)?)
}

/// Per-reject bad probabilities used by [`parceling`].
pub fn parcel_probabilities(
    accept_scores: &[f64],
    accept_labels: &[u8],
    reject_scores: &[f64],
    n_bands: usize,
    risk_multiplier: f64,
) -> Vec<f64> {
    let edges = quantile_edges(accept_scores, n_bands);
    let nb = edges.len() + 1;
    let mut count = vec![0.0; nb];
    let mut bads = vec![0.0; nb];
    for (s, y) in accept_scores.iter().zip(accept_labels) {
        let b = band_of(&edges, *s);
        count[b] += 1.0;
        bads[b] += *y as f64;
    }
    let group = merge_empty(&count);
    let mut gc = vec![0.0; nb];
    let mut gb = vec![0.0; nb];
    for b in 0..nb {
        gc[group[b]] += count[b];
        gb[group[b]] += bads[b];
    }
    reject_scores
        .iter()
        .map(|&s| {
            let g = group[band_of(&edges, s)];
            (risk_multiplier * gb[g] / gc[g]).min(1.0)
        })
        .collect()
}

/// Importance weights for accepts: per score band, (accepts + rejects) /
/// accepts, rescaled to mean one. Bands come from pooled score quantiles of
/// the accepts-trained weak learner.
pub fn banded_weights(
    accepts: &Dataset,
    rejects: &Dataset,
    n_bands: usize,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    if rejects.is_empty() {
        return Ok(vec![1.0; accepts.n_rows()]);
    }
    let (sa, rest) = weak_scores(accepts, &[rejects], opts)?;
    banded_weights_from_scores(&sa, &rest[0], n_bands)
}

pub fn banded_weights_from_scores(
    accept_scores: &[f64],
    reject_scores: &[f64],
    n_bands: usize,
) -> Result<Vec<f64>> {
    if n_bands == 0 || accept_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "banded weights need n_bands >= 1 and accepts".into(),
        ));
    }
    if reject_scores.is_empty() {
        return Ok(vec![1.0; accept_scores.len()]);
    }
    let pooled: Vec<f64> = accept_scores.iter().chain(reject_scores).copied().collect();
    let edges = quantile_edges(&pooled, n_bands);
    let nb = edges.len() + 1;
    let mut acc = vec![0.0; nb];
    let mut tot = vec![0.0; nb];
    for &s in accept_scores {
        let b = band_of(&edges, s);
        acc[b] += 1.0;
        tot[b] += 1.0;
    }
    for &s in reject_scores {
        tot[band_of(&edges, s)] += 1.0;
    }
    let group = merge_empty(&acc);
    let mut ga = vec![0.0; nb];
    let mut gt = vec![0.0; nb];
    for b in 0..nb {
        ga[group[b]] += acc[b];
        gt[group[b]] += tot[b];
    }
    let raw: Vec<f64> = accept_scores
        .iter()
        .map(|&s| {
            let g = group[band_of(&edges, s)];
            gt[g] / ga[g]
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Two-step selection correction: a probit of acceptance on the pooled
/// sample, then the strong learner on accepts with the inverse Mills ratio
/// of the probit index as an extra feature.
pub fn heckman_two_step(
    accepts: &Dataset,
    rejects: &Dataset,
    opts: &FitOptions,
) -> Result<Scorecard> {
    if accepts.is_empty() || rejects.is_empty() {
        return Err(Error::EmptyPart("heckman needs accepts and rejects"));
    }
    let a = vec![1u8; accepts.n_rows()];
    let r = vec![0u8; rejects.n_rows()];
    let sel_a = accepts.clone().with_accepted(None)?.with_labels(Some(a))?;
    let sel_r = rejects.clone().with_accepted(None)?.with_labels(Some(r))?;
    let pooled = sel_a.concat(&sel_r)?;
    let probit = fit_probit(
        &pooled,
        &FitOptions {
            sample_weights: None,
            ..opts.clone()
        },
    )?;
    let selection =
        probit.scorecard.linear().cloned().ok_or_else(|| {
            Error::InvalidArgument("probit fit returned a non-linear model".into())
        })?;
    let imr: Vec<f64> = selection
        .linear_index(accepts.features())
        .into_iter()
        .map(inverse_mills)
        .collect();
    let outcome_data = accepts.with_extra_feature("inverse_mills", &imr)?;
    let outcome = fit_gbt(&outcome_data, opts)?;
    let gbt = outcome
        .gbt()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("outcome fit returned a non-tree model".into()))?;
    Ok(Scorecard::heckman(
        selection,
        gbt,
        accepts.n_features(),
        TrainingMeta {
            n_train: accepts.n_rows(),
            weighted: opts.sample_weights.is_some(),
            seed: opts.seed,
        },
    ))
}

/// Metric of `f` on validation accepts with per-row importance weights.
pub fn weighted_validation(
    f: &Scorecard,
    validation_accepts: &Dataset,
    weights: &[f64],
    metric: &MetricSpec,
) -> Result<MetricValue> {
    let y = validation_accepts.require_labels()?;
    if weights.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} rows",
            weights.len(),
            y.len()
        )));
    }
    let s = predict_proba(f, validation_accepts)?;
    evaluate_weighted(metric, &s, y, weights)
}

/// Accepts plus every reject labeled bad.
pub fn label_all_bad(accepts: &Dataset, rejects: &Dataset) -> Result<Dataset> {
    accepts.concat(&labeled(rejects, vec![1; rejects.n_rows()])?)
}

/// Fits the strong learner after applying `method` to the training part of
/// `split`. `prior` scores the validation rejects for BASL's stopping
/// rule; when absent, the accepts-only strong learner supplies it.
pub fn train_corrected(
    method: &CorrectionMethod,
    split: &Split,
    opts: &FitOptions,
    prior: Option<&Prior>,
) -> Result<Scorecard> {
    method.validate()?;
    let acc = split.train_accepts();
    let rej = split.rejects();
    match method {
        CorrectionMethod::Ignore => fit_gbt(acc, opts),
        CorrectionMethod::LabelAllBad => fit_gbt(&label_all_bad(acc, rej)?, opts),
        CorrectionMethod::Hca { cutoff } => fit_gbt(&hca(acc, rej, *cutoff, opts)?, opts),
        CorrectionMethod::Parceling {
            n_bands,
            risk_multiplier,
        } => {
            let d = parceling(
                acc,
                rej,
                *n_bands,
                *risk_multiplier,
                opts.seed.substream(0xba5e),
                opts,
            )?;
            fit_gbt(&d, opts)
        }
        CorrectionMethod::ReweightBanded { n_bands } => {
            let w = banded_weights(acc, rej, *n_bands, opts)?;
            fit_gbt(acc, &opts.clone().with_weights(w))
        }
        CorrectionMethod::HeckmanTwoStep => heckman_two_step(acc, rej, opts),
        CorrectionMethod::Basl(cfg) => {
            let owned;
            let prior = match prior {
                Some(p) => p,
                None => {
                    let base = fit_gbt(acc, opts)?;
                    owned = build_prior(split.validation_rejects(), &base)?;
                    &owned
                }
            };
            let sample = StoppingSample {
                accepts: split.validation_accepts(),
                rejects: split.validation_rejects(),
                prior,
            };
            Ok(basl_fit(acc, rej, sample, cfg, opts)?.scorecard)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_band_weights() {
        let sa = [0.1; 8]
            .iter()
            .chain(&[0.9; 2])
            .copied()
            .collect::<Vec<_>>();
        let sr = [0.9; 10];
        let w = banded_weights_from_scores(&sa, &sr, 2).unwrap();
        assert!(
            (w[0] - 0.5).abs() < 1e-12 && (w[9] - 3.0).abs() < 1e-12,
            "{w:?}"
        );
        assert!((w.iter().sum::<f64>() / 10.0 - 1.0).abs() < 1e-12);
        assert_eq!(
            banded_weights_from_scores(&sa, &[], 2).unwrap(),
            vec![1.0; 10]
        );
    }

    #[test]
    fn parcel_probabilities_single_band_and_saturation() {
        let sa: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let ya = [0, 0, 1, 0, 0, 0, 1, 0, 0, 1];
        let p = parcel_probabilities(&sa, &ya, &[0.05, 0.95], 1, 1.0);
        assert_eq!(p, vec![0.3, 0.3]);
        let p = parcel_probabilities(&sa, &ya, &[0.05, 0.95], 1, 1e6);
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn method_config_roundtrip() {
        let m: CorrectionMethod = serde_json::from_str(r#"{"method":"parceling"}"#).unwrap();
        assert_eq!(
            m,
            CorrectionMethod::Parceling {
                n_bands: 10,
                risk_multiplier: 1.25
            }
        );
        assert!(CorrectionMethod::Hca { cutoff: 1.5 }.validate().is_err());
    }
}
