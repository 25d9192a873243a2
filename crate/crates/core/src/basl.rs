//! Bias-aware self-learning: novelty filtering of rejects, iterative
//! pseudo-labeling with a weak learner under asymmetric thresholds, a
//! strong learner on the augmented sample, and early stopping by Bayesian
//! evaluation.

use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::bayes::{bayesian_metric, BayesConfig, Prior};
use crate::data::{Dataset, RngSeed};
use crate::error::{Error, Result};
use crate::learners::{
    fit_gbt, fit_isolation_forest, fit_l1_logistic, predict_proba, select_l1_lambda, FitOptions,
    Scorecard, DEFAULT_LAMBDA_GRID,
};
use crate::metrics::MetricSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Upper bound on the per-tree subsample; capped at the number of accepts.
    pub subsample: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            subsample: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaslConfig {
    pub beta_upper: f64,
    pub beta_lower: f64,
    pub rho: f64,
    pub gamma: f64,
    pub theta: f64,
    pub j_max: usize,
    /// Non-improving iterations tolerated before stopping.
    pub patience: usize,
    pub bayes: BayesConfig,
    pub metric: MetricSpec,
    pub forest: ForestParams,
    /// Weak-learner penalty; `None` selects it once on the accepts.
    pub weak_lambda: Option<f64>,
    pub seed: RngSeed,
}

impl Default for BaslConfig {
    fn default() -> Self {
        BaslConfig {
            beta_upper: 0.1,
            beta_lower: 0.1,
            rho: 0.5,
            gamma: 0.05,
            theta: 2.0,
            j_max: 10,
            patience: 1,
            bayes: BayesConfig::default(),
            metric: MetricSpec::abr_default(),
            forest: ForestParams::default(),
            weak_lambda: None,
            seed: RngSeed::new(0),
        }
    }
}

impl BaslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("basl: {m}")));
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta_upper)
            || !unit(self.beta_lower)
            || self.beta_upper + self.beta_lower >= 1.0
        {
            return bad("beta_upper, beta_lower in [0,1) with sum < 1");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must be in (0,1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.theta >= 1.0) {
            return bad("gamma in (0,1) and theta >= 1 required");
        }
        if self.gamma * (1.0 + self.theta) >= 1.0 {
            return bad("gamma * (1 + theta) must be < 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.forest.n_trees == 0 || self.forest.subsample < 2 {
            return bad("forest needs n_trees >= 1 and subsample >= 2");
        }
        if let Some(l) = self.weak_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("weak_lambda must be >= 0");
            }
        }
        self.bayes.validate()?;
        self.metric.validate()
    }
}

/// Splits `rejects` by novelty relative to `accepts`: the `beta_upper`
/// most novel and `beta_lower` least novel fractions are dropped (counts
/// floored, ties in input order). Both outputs keep input order.
pub fn filter_rejects(
    accepts: &Dataset,
    rejects: &Dataset,
    beta: (f64, f64),
    forest: ForestParams,
    seed: RngSeed,
) -> Result<(Dataset, Dataset)> {
    let (bu, bl) = beta;
    if !(0.0..1.0).contains(&bu) || !(0.0..1.0).contains(&bl) || bu + bl >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "invalid filter fractions ({bu}, {bl})"
        )));
    }
    if accepts.is_empty() || rejects.is_empty() {
        return Err(Error::EmptyPart("filter input"));
    }
    let m = rejects.n_rows();
    let n_top = (bu * m as f64 + 1e-9).floor() as usize;
    let n_bottom = (bl * m as f64 + 1e-9).floor() as usize;
    if n_top + n_bottom == 0 {
        return Ok((rejects.clone(), rejects.select(&[])));
    }
    let psi = forest.subsample.min(accepts.n_rows());
    let model = fit_isolation_forest(accepts, forest.n_trees, psi, seed)?;
    let score = model.score_dataset(rejects)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut drop = vec![false; m];
    for &i in order.iter().take(n_bottom) {
        drop[i] = true;
    }
    for &i in order.iter().rev().take(n_top) {
        drop[i] = true;
    }
    let kept: Vec<usize> = (0..m).filter(|&i| !drop[i]).collect();
    let dropped: Vec<usize> = (0..m).filter(|&i| drop[i]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok((rejects.select(&kept), rejects.select(&dropped)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Observed,
    Inferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Scores at or below are labeled good.
    pub good: f64,
    /// Scores at or above are labeled bad.
    pub bad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub n_good: usize,
    pub n_bad: usize,
    pub metric: f64,
    pub improved: bool,
    pub train_size: usize,
}

#[derive(Debug, Clone)]
pub struct BaslState {
    augmented: Dataset,
    origin: Vec<Origin>,
    remaining: Dataset,
    thresholds: Option<Thresholds>,
    iteration: usize,
    labeled_good: usize,
    labeled_bad: usize,
    history: Vec<IterationRecord>,
}

impl BaslState {
    /// Initial state: accepts only, all of `rejects` unlabeled.
    pub fn new(accepts: &Dataset, rejects: &Dataset) -> Result<Self> {
        accepts.require_labels()?;
        Ok(BaslState {
            augmented: accepts.clone(),
            origin: vec![Origin::Observed; accepts.n_rows()],
            remaining: rejects.clone().without_labels(),
            thresholds: None,
            iteration: 0,
            labeled_good: 0,
            labeled_bad: 0,
            history: Vec::new(),
        })
    }

    pub fn augmented_train(&self) -> &Dataset {
        &self.augmented
    }

    pub fn origin(&self) -> &[Origin] {
        &self.origin
    }

    pub fn remaining_rejects(&self) -> &Dataset {
        &self.remaining
    }

    pub fn thresholds(&self) -> Option<Thresholds> {
        self.thresholds
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn labeled_counts(&self) -> (usize, usize) {
        (self.labeled_good, self.labeled_bad)
    }

    /// `iteration,n_good,n_bad,metric,improved` rows.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,n_good,n_bad,metric,improved\n");
        for h in &self.history {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                h.iteration, h.n_good, h.n_bad, h.metric, h.improved
            );
        }
        s
    }
}

/// Counts at or below the `frac` sample percentile.
fn percentile_count(frac: f64, s: usize) -> usize {
    (frac * s as f64 + 1e-9).floor() as usize
}

/// One labeling round: samples `rho` of the remaining rejects, scores them
/// with `weak`, labels the low tail good and the high tail bad, and moves
/// the labeled rows into the training sample.
///
/// The first round labels `floor(gamma s)` goods and `floor(gamma theta s)`
/// bads among the `s` sampled rows and stores the boundary scores as
/// absolute thresholds; later rounds compare against those thresholds,
/// taking at most the same percentile counts and never letting the
/// cumulative inferred goods exceed the inferred bads.
pub fn labeling_step(state: &BaslState, weak: &Scorecard, cfg: &BaslConfig) -> Result<BaslState> {
    let mut next = state.clone();
    next.iteration += 1;
    let m = state.remaining.n_rows();
    if m == 0 {
        return Ok(next);
    }
    let s = ((cfg.rho * m as f64 + 1e-9).floor() as usize).clamp(1, m);
    let mut rng = cfg.seed.substream(0x1abe1 + next.iteration as u64).rng();
    let mut picked: Vec<usize> = sample(&mut rng, m, s).into_vec();
    picked.sort_unstable();
    let sampled = state.remaining.select(&picked);
    let scores = predict_proba(weak, &sampled)?;
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let max_good = percentile_count(cfg.gamma, s);
    let max_bad = percentile_count(cfg.gamma * cfg.theta, s);
    let (goods, bads): (Vec<usize>, Vec<usize>) = match state.thresholds {
        None => {
            let goods: Vec<usize> = order[..max_good].to_vec();
            let bads: Vec<usize> = order[s - max_bad..].to_vec();
            next.thresholds = Some(Thresholds {
                good: goods.last().map_or(f64::NEG_INFINITY, |&i| scores[i]),
                bad: bads.first().map_or(f64::INFINITY, |&i| scores[i]),
            });
            (goods, bads)
        }
        Some(t) => {
            let bads: Vec<usize> = order
                .iter()
                .rev()
                .copied()
                .filter(|&i| scores[i] >= t.bad)
                .take(max_bad)
                .collect();
            let room = (state.labeled_bad + bads.len()).saturating_sub(state.labeled_good);
            let goods: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| scores[i] <= t.good && scores[i] < t.bad)
                .take(max_good.min(room))
                .collect();
            (goods, bads)
        }
    };

    let mut label = vec![None; s];
    for &i in &goods {
        label[i] = Some(0u8);
    }
    for &i in &bads {
        label[i] = Some(1u8);
    }
    let moved: Vec<usize> = (0..s).filter(|&i| label[i].is_some()).collect();
    let moved_labels: Vec<u8> = moved.iter().map(|&i| label[i].unwrap()).collect();
    let inferred = sampled
        .select(&moved)
        .with_labels(Some(moved_labels))?
        .with_accepted(None)?;
    next.augmented = state.augmented.concat(&inferred)?;
    next.origin
        .extend(std::iter::repeat_n(Origin::Inferred, moved.len()));
    let moved_rows: std::collections::HashSet<usize> = moved.iter().map(|&i| picked[i]).collect();
    let keep: Vec<usize> = (0..m).filter(|i| !moved_rows.contains(i)).collect();
    next.remaining = state.remaining.select(&keep);
    next.labeled_good += goods.len();
    next.labeled_bad += bads.len();
    next.history.push(IterationRecord {
        iteration: next.iteration,
        n_good: goods.len(),
        n_bad: bads.len(),
        metric: f64::NAN,
        improved: false,
        train_size: next.augmented.n_rows(),
    });
    Ok(next)
}

/// Evaluation sample for the stopping criterion: labeled accepts plus
/// unlabeled rejects with their prior.
#[derive(Debug, Clone, Copy)]
pub struct StoppingSample<'a> {
    pub accepts: &'a Dataset,
    pub rejects: &'a Dataset,
    pub prior: &'a Prior,
}

#[derive(Debug, Clone)]
pub struct BaslOutcome {
    pub scorecard: Scorecard,
    /// Iteration that produced `scorecard` (0 = accepts only).
    pub best_iteration: usize,
    pub best_metric: f64,
    pub state: BaslState,
    pub dropped_by_filter: usize,
}

/// Runs the full framework. `opts` configures the strong learner (GBT);
/// its seed is used for every strong fit, so iteration 0 reproduces the
/// accepts-only model fitted with the same options.
pub fn basl_fit(
    accepts: &Dataset,
    rejects: &Dataset,
    validation: StoppingSample<'_>,
    cfg: &BaslConfig,
    opts: &FitOptions,
) -> Result<BaslOutcome> {
    cfg.validate()?;
    accepts.require_both_classes()?;
    let va = validation.accepts;
    if va.is_empty() || va.labels().is_none() {
        return Err(Error::InvalidArgument(
            "validation needs labeled accepts".into(),
        ));
    }
    validation.prior.check_aligned(validation.rejects)?;
    let evaluate = |m: &Scorecard| -> Result<f64> {
        Ok(bayesian_metric(
            m,
            va,
            validation.rejects,
            validation.prior,
            &cfg.metric,
            &cfg.bayes,
        )?
        .value
        .value)
    };

    let baseline = fit_gbt(accepts, opts)?;
    let base_metric = evaluate(&baseline)?;
    let mut state = BaslState::new(accepts, rejects)?;
    state.history.push(IterationRecord {
        iteration: 0,
        n_good: 0,
        n_bad: 0,
        metric: base_metric,
        improved: true,
        train_size: accepts.n_rows(),
    });
    let mut best = (baseline, 0usize, base_metric);
    let mut dropped_by_filter = 0;
    if cfg.j_max == 0 || rejects.is_empty() {
        return Ok(BaslOutcome {
            scorecard: best.0,
            best_iteration: 0,
            best_metric: base_metric,
            state,
            dropped_by_filter,
        });
    }

    let (kept, dropped) = filter_rejects(
        accepts,
        rejects,
        (cfg.beta_upper, cfg.beta_lower),
        cfg.forest,
        cfg.seed.substream(0xf17),
    )?;
    dropped_by_filter = dropped.n_rows();
    state.remaining = kept.without_labels();

    let lambda = match cfg.weak_lambda {
        Some(l) => l,
        None => select_l1_lambda(
            accepts,
            &DEFAULT_LAMBDA_GRID,
            &FitOptions::default(),
            cfg.seed.substream(0x1a),
        )?,
    };
    let weak_opts = FitOptions {
        l1_lambda: lambda,
        sample_weights: None,
        ..FitOptions::default()
    };

    let mut strikes = 0;
    for _ in 0..cfg.j_max {
        if state.remaining.is_empty() {
            break;
        }
        let weak = fit_l1_logistic(&state.augmented, &weak_opts)?;
        let next = labeling_step(&state, &weak, cfg)?;
        let rec = next.history.last().cloned();
        state = next;
        let Some(rec) = rec else { break };
        if rec.n_good + rec.n_bad == 0 {
            log::debug!(
                "basl: iteration {} labeled nothing; stopping",
                rec.iteration
            );
            state.history.last_mut().unwrap().metric = best.2;
            break;
        }
        let strong = fit_gbt(&state.augmented, opts)?;
        let value = evaluate(&strong)?;
        let improved = cfg.metric.better(value, best.2);
        {
            let h = state.history.last_mut().unwrap();
            h.metric = value;
            h.improved = improved;
        }
        if improved {
            best = (strong, state.iteration, value);
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= cfg.patience {
                break;
            }
        }
    }
    Ok(BaslOutcome {
        scorecard: best.0,
        best_iteration: best.1,
        best_metric: best.2,
        state,
        dropped_by_filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RowId;
    use nalgebra::DMatrix;

    fn line(n: usize) -> Dataset {
        Dataset::new(DMatrix::from_fn(n, 1, |r, _| r as f64), None)
            .unwrap()
            .with_ids((0..n as u64).map(|i| RowId::new(1000 + i)).collect())
            .unwrap()
    }

    fn accepts() -> Dataset {
        let x = DMatrix::from_fn(40, 1, |r, _| r as f64 / 4.0);
        Dataset::new(x, Some((0..40).map(|r| u8::from(r % 4 == 0)).collect())).unwrap()
    }

    /// Logistic scorecard increasing in the single feature.
    fn ramp() -> Scorecard {
        let d = Dataset::new(
            DMatrix::from_fn(20, 1, |r, _| r as f64),
            Some((0..20).map(|r| u8::from(r >= 10)).collect()),
        )
        .unwrap();
        fit_l1_logistic(
            &d,
            &FitOptions {
                l1_lambda: 0.05,
                ..FitOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn filter_counts() {
        let a = Dataset::new(DMatrix::from_fn(50, 1, |r, _| (r % 7) as f64), None).unwrap();
        let r = line(100);
        let (k, d) =
            filter_rejects(&a, &r, (0.0, 0.0), ForestParams::default(), RngSeed::new(1)).unwrap();
        assert_eq!(k, r);
        assert!(d.is_empty());
        let (k, d) =
            filter_rejects(&a, &r, (0.1, 0.1), ForestParams::default(), RngSeed::new(1)).unwrap();
        assert_eq!((k.n_rows(), d.n_rows()), (80, 20));
    }

    #[test]
    fn first_round_percentile_counts() {
        let cfg = BaslConfig {
            rho: 1.0,
            gamma: 0.1,
            theta: 2.0,
            ..BaslConfig::default()
        };
        let state = BaslState::new(&accepts(), &line(200)).unwrap();
        let next = labeling_step(&state, &ramp(), &cfg).unwrap();
        assert_eq!(next.labeled_counts(), (20, 40));
        assert_eq!(next.remaining_rejects().n_rows(), 140);
        assert_eq!(next.augmented_train().n_rows(), 40 + 60);
        let t = next.thresholds().unwrap();
        assert!(t.good < t.bad);
        // observed rows untouched
        assert_eq!(
            &next.augmented_train().labels().unwrap()[..40],
            accepts().labels().unwrap()
        );
    }

    #[test]
    fn fixed_thresholds_can_select_nothing() {
        let cfg = BaslConfig {
            rho: 1.0,
            ..BaslConfig::default()
        };
        let mut state = BaslState::new(&accepts(), &line(100)).unwrap();
        state.thresholds = Some(Thresholds {
            good: -1.0,
            bad: 2.0,
        });
        let next = labeling_step(&state, &ramp(), &cfg).unwrap();
        assert_eq!(next.labeled_counts(), (0, 0));
        assert_eq!(next.remaining_rejects().n_rows(), 100);
    }

    #[test]
    fn config_validation() {
        assert!(BaslConfig::default().validate().is_ok());
        let bad = BaslConfig {
            gamma: 0.3,
            theta: 3.0,
            ..BaslConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
