//! Acceptance-loop simulation: batches of applicants arrive, the current
//! scorecard accepts some of them, accepted outcomes are revealed and the
//! scorecard is retrained.

use serde::{Deserialize, Serialize};

use crate::benchmarks::{train_corrected, CorrectionMethod};
use crate::data::{stratified_parts, Dataset, RngSeed, SealedLabels, Split};
use crate::error::{Error, Result};
use crate::learners::{fit_gbt, fit_l1_logistic, predict_proba, FitOptions, Scorecard};
use crate::metrics::{evaluate, MetricSpec};
use crate::synth::{apply_mnar, sample_applicants_from, MixtureSpec, MnarSpec};

pub use crate::experiments::{sensitivity_sweep, SweepAxis, SweepRow, SweepTable};

/// Learner behind the scorecard that makes acceptance decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionLearner {
    /// L1-regularized logistic regression.
    #[default]
    Logistic,
    /// Gradient-boosted trees.
    Gbt,
}

/// How a batch is accepted once a scorecard exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Acceptance {
    /// Accept the `rate` fraction with the lowest predicted risk.
    Rate { rate: f64 },
    /// Accept applicants with predicted risk at most `tau`.
    Threshold { tau: f64 },
}

impl Acceptance {
    fn warmup_rate(&self) -> f64 {
        match *self {
            Acceptance::Rate { rate } => rate,
            Acceptance::Threshold { .. } => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub mixture: MixtureSpec,
    pub mnar: MnarSpec,
    pub batch_size: usize,
    /// Scored iterations after warmup.
    pub iterations: usize,
    pub acceptance: Acceptance,
    pub retrain_every: usize,
    pub holdout_size: usize,
    /// Batches accepted at random before any scorecard exists.
    pub warmup: usize,
    /// Share of accumulated accepts and rejects set aside for validation.
    pub validation_fraction: f64,
    /// Refit the oracle every retrain to trace it; otherwise it is fit once
    /// at the end.
    pub track_oracle: bool,
    pub decision_learner: DecisionLearner,
    pub learner: FitOptions,
    pub seed: RngSeed,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            mixture: MixtureSpec::default(),
            mnar: MnarSpec::default(),
            batch_size: 1000,
            iterations: 20,
            acceptance: Acceptance::Rate { rate: 0.25 },
            retrain_every: 1,
            holdout_size: 5000,
            warmup: 5,
            validation_fraction: 0.2,
            track_oracle: false,
            decision_learner: DecisionLearner::default(),
            learner: FitOptions::default(),
            seed: RngSeed::new(0),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.mnar.validate(self.mixture.dim())?;
        self.learner.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations == 0
            || self.warmup == 0
            || self.batch_size == 0
            || self.retrain_every == 0
        {
            return bad("iterations, warmup, batch_size and retrain_every must be >= 1".into());
        }
        if self.holdout_size < 2 {
            return bad("holdout_size must be >= 2".into());
        }
        match self.acceptance {
            Acceptance::Rate { rate } if !(rate > 0.0 && rate <= 1.0) => {
                bad(format!("acceptance rate {rate} not in (0,1]"))
            }
            Acceptance::Threshold { tau } if !(0.0..=1.0).contains(&tau) => {
                bad(format!("tau {tau} not in [0,1]"))
            }
            _ if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) => {
                bad("validation_fraction must be in (0,1)".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub n_accepted: usize,
    /// Bad rate among this batch's accepts.
    pub accept_bad_rate: Option<f64>,
    /// Holdout metrics of the scorecard that made this batch's decisions.
    pub abr_biased: f64,
    pub auc_biased: f64,
    pub abr_oracle: Option<f64>,
    pub auc_oracle: Option<f64>,
    pub abr_corrected: Option<f64>,
    pub auc_corrected: Option<f64>,
    pub accepts_total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    pub records: Vec<IterationTrace>,
}

impl LoopTrace {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = String::from(
            "iteration,n_accepted,accept_bad_rate,abr_biased,auc_biased,abr_oracle,auc_oracle,abr_corrected,auc_corrected,accepts_total\n",
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.n_accepted,
                opt(r.accept_bad_rate),
                r.abr_biased,
                r.auc_biased,
                opt(r.abr_oracle),
                opt(r.auc_oracle),
                opt(r.abr_corrected),
                opt(r.auc_corrected),
                r.accepts_total
            );
        }
        s
    }
}

/// Everything a loop run produces.
#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub trace: LoopTrace,
    pub split: Split,
    /// Scorecard refit on all accumulated accepts at the end: the model
    /// that would support the next decisions.
    pub scorecard: Scorecard,
    /// Decision learner fit on accepts and rejects with true outcomes.
    pub oracle: Scorecard,
}

/// Decisions for one batch given risk scores (lowest risk accepted first,
/// ties by row order).
pub fn accept_batch(scores: &[f64], acceptance: &Acceptance) -> Vec<u8> {
    match *acceptance {
        Acceptance::Threshold { tau } => scores.iter().map(|&s| u8::from(s <= tau)).collect(),
        Acceptance::Rate { rate } => {
            let n = scores.len();
            let k = ((rate * n as f64) + 1e-9).floor() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
            let mut out = vec![0u8; n];
            for &i in idx.iter().take(k) {
                out[i] = 1;
            }
            out
        }
    }
}

fn holdout_pair(m: &Scorecard, holdout: &Dataset) -> Result<(f64, f64)> {
    let y = holdout.require_labels()?;
    let s = predict_proba(m, holdout)?;
    Ok((
        evaluate(&MetricSpec::abr_default(), &s, y)?.value,
        evaluate(&MetricSpec::Auc, &s, y)?.value,
    ))
}

struct Pool {
    accepts: Option<Dataset>,
    rejects: Option<Dataset>,
}

fn append(slot: &mut Option<Dataset>, d: Dataset) -> Result<()> {
    if d.is_empty() {
        return Ok(());
    }
    *slot = Some(match slot.take() {
        None => d,
        Some(cur) => cur.concat(&d)?,
    });
    Ok(())
}

/// Builds the consumer view of the accumulated data: accepts and rejects
/// each split into training and validation parts, the holdout kept whole,
/// reject outcomes sealed.
fn build_split(
    accepts: &Dataset,
    rejects: &Dataset,
    holdout: &Dataset,
    frac: f64,
    seed: RngSeed,
) -> Result<Split> {
    let fr = [1.0 - frac, frac];
    let ya = accepts.require_labels()?;
    let rows: Vec<usize> = (0..accepts.n_rows()).collect();
    let pa = stratified_parts(&rows, ya, &fr, seed.substream(1));
    let zeros = vec![0u8; rejects.n_rows()];
    let rows: Vec<usize> = (0..rejects.n_rows()).collect();
    let pr = stratified_parts(&rows, &zeros, &fr, seed.substream(2));
    if pa[0].is_empty() || pa[1].is_empty() {
        return Err(Error::EmptyPart("accepts"));
    }
    let rej_train = rejects.select(&pr[0]);
    let rej_val = rejects.select(&pr[1]);
    let sealed =
        SealedLabels::from_dataset(&rej_train)?.merge(SealedLabels::from_dataset(&rej_val)?);
    Split::assemble(
        accepts.select(&pa[0]),
        rej_train,
        accepts.select(&pa[1]),
        rej_val,
        holdout.clone(),
        sealed,
    )
}

fn empty_like(d: &Dataset) -> Dataset {
    d.select(&[])
}

/// Runs the acceptance loop.
///
/// The holdout is drawn once from the population. Warmup batches are
/// accepted at random at the target rate; afterwards each batch is scored
/// by the current scorecard, accepted by rate or threshold, optionally
/// overwritten (MNAR), and its accepts' outcomes are added to the training
/// pool. Scorecards only ever see the visible feature columns.
pub fn run_loop(cfg: &LoopConfig, correction: Option<&CorrectionMethod>) -> Result<LoopOutcome> {
    cfg.validate()?;
    let k = cfg.mixture.dim();
    let visible = cfg.mnar.visible_dims(k);
    let view = |d: &Dataset| d.select_features(&visible);

    let holdout_full =
        sample_applicants_from(&cfg.mixture, cfg.holdout_size, cfg.seed.substream(1), 0)?;
    let holdout = view(&holdout_full).into_ground_truth();
    let mut pool = Pool {
        accepts: None,
        rejects: None,
    };
    let n = cfg.batch_size;
    let batch_seed = cfg.seed.substream(2);
    let decide_seed = cfg.seed.substream(3);
    let first_id = |b: usize| (cfg.holdout_size + b * n) as u64;

    let admit = |pool: &mut Pool, batch: &Dataset, decisions: &[u8]| -> Result<usize> {
        let acc: Vec<usize> = (0..n).filter(|&i| decisions[i] == 1).collect();
        let rej: Vec<usize> = (0..n).filter(|&i| decisions[i] == 0).collect();
        let visible_batch = view(batch);
        let a = visible_batch
            .select(&acc)
            .with_accepted(Some(vec![1; acc.len()]))?;
        let r = visible_batch
            .select(&rej)
            .with_accepted(Some(vec![0; rej.len()]))?;
        append(&mut pool.accepts, a)?;
        append(&mut pool.rejects, r)?;
        Ok(acc.len())
    };

    // warmup
    let warm_rate = cfg.acceptance.warmup_rate();
    for b in 0..cfg.warmup {
        let batch =
            sample_applicants_from(&cfg.mixture, n, batch_seed.substream(b as u64), first_id(b))?;
        let mut rng_scores = decide_seed.substream(b as u64).rng();
        let noise: Vec<f64> = (0..n)
            .map(|_| rand::Rng::random::<f64>(&mut rng_scores))
            .collect();
        let decisions = accept_batch(&noise, &Acceptance::Rate { rate: warm_rate });
        admit(&mut pool, &batch, &decisions)?;
    }

    let accepts_now = |pool: &Pool| -> Result<Dataset> {
        pool.accepts
            .clone()
            .ok_or_else(|| Error::Simulation("warmup produced no accepts".into()))
    };
    let all_now = |pool: &Pool| -> Result<Dataset> {
        let a = accepts_now(pool)?;
        match &pool.rejects {
            Some(r) => a.concat(r),
            None => Ok(a),
        }
    };

    let decide = |d: &Dataset| -> Result<Scorecard> {
        d.require_both_classes()
            .map_err(|e| Error::Simulation(format!("training sample unusable: {e}")))?;
        match cfg.decision_learner {
            DecisionLearner::Gbt => fit_gbt(d, &cfg.learner),
            DecisionLearner::Logistic => fit_l1_logistic(d, &cfg.learner),
        }
    };
    let mut model = decide(&accepts_now(&pool)?)?;
    let mut oracle = if cfg.track_oracle {
        Some(decide(&all_now(&pool)?)?)
    } else {
        None
    };
    let mut corrected: Option<Scorecard>;
    let refresh_corrected = |pool: &Pool, it: usize| -> Result<Option<Scorecard>> {
        let Some(method) = correction else {
            return Ok(None);
        };
        let a = accepts_now(pool)?;
        let r = pool.rejects.clone().unwrap_or_else(|| empty_like(&a));
        let split = build_split(
            &a,
            &r,
            &holdout,
            cfg.validation_fraction,
            cfg.seed.substream(100 + it as u64),
        )?;
        train_corrected(method, &split, &cfg.learner, None).map(Some)
    };
    corrected = refresh_corrected(&pool, 0)?;

    let mut trace = LoopTrace::default();
    let mut zero_streak = 0;
    for j in 0..cfg.iterations {
        let b = cfg.warmup + j;
        let batch =
            sample_applicants_from(&cfg.mixture, n, batch_seed.substream(b as u64), first_id(b))?;
        let scores = predict_proba(&model, &view(&batch))?;
        let mut decisions = accept_batch(&scores, &cfg.acceptance);
        if cfg.mnar.overwrite_rate > 0.0 {
            decisions = apply_mnar(
                &decisions,
                &batch,
                &cfg.mnar,
                decide_seed.substream(b as u64),
            )?;
        }
        let y = batch.require_labels()?;
        let n_acc = decisions.iter().filter(|&&d| d == 1).count();
        let bad_acc = (0..n).filter(|&i| decisions[i] == 1 && y[i] == 1).count();

        let (abr_b, auc_b) = holdout_pair(&model, &holdout)?;
        let oracle_pair = oracle
            .as_ref()
            .map(|m| holdout_pair(m, &holdout))
            .transpose()?;
        let corrected_pair = corrected
            .as_ref()
            .map(|m| holdout_pair(m, &holdout))
            .transpose()?;

        admit(&mut pool, &batch, &decisions)?;
        trace.records.push(IterationTrace {
            iteration: j + 1,
            n_accepted: n_acc,
            accept_bad_rate: (n_acc > 0).then(|| bad_acc as f64 / n_acc as f64),
            abr_biased: abr_b,
            auc_biased: auc_b,
            abr_oracle: oracle_pair.map(|p| p.0),
            auc_oracle: oracle_pair.map(|p| p.1),
            abr_corrected: corrected_pair.map(|p| p.0),
            auc_corrected: corrected_pair.map(|p| p.1),
            accepts_total: pool.accepts.as_ref().map_or(0, |d| d.n_rows()),
        });

        if n_acc == 0 {
            zero_streak += 1;
            log::warn!("iteration {}: no applicant accepted", j + 1);
            if zero_streak >= 10 {
                return Err(Error::Simulation(format!(
                    "10 consecutive batches without accepts (last at iteration {})",
                    j + 1
                )));
            }
        } else {
            zero_streak = 0;
        }
        if (j + 1) % cfg.retrain_every == 0 && j + 1 < cfg.iterations {
            model = decide(&accepts_now(&pool)?)?;
            if cfg.track_oracle {
                oracle = Some(decide(&all_now(&pool)?)?);
            }
            if let Some(c) = refresh_corrected(&pool, j + 1)? {
                corrected = Some(c);
            }
        }
    }

    let accepts = accepts_now(&pool)?;
    let rejects = pool.rejects.clone().unwrap_or_else(|| empty_like(&accepts));
    let scorecard = decide(&accepts)?;
    let oracle_final = decide(&all_now(&pool)?)?;
    let split = build_split(
        &accepts,
        &rejects,
        &holdout,
        cfg.validation_fraction,
        cfg.seed.substream(4),
    )?;
    Ok(LoopOutcome {
        trace,
        split,
        scorecard,
        oracle: oracle_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::GbtParams;

    fn quick() -> LoopConfig {
        LoopConfig {
            batch_size: 100,
            iterations: 3,
            holdout_size: 500,
            warmup: 2,
            learner: FitOptions {
                gbt: GbtParams {
                    n_trees: 20,
                    ..GbtParams::default()
                },
                ..FitOptions::default()
            },
            ..LoopConfig::default()
        }
    }

    #[test]
    fn rate_acceptance_counts() {
        let d = accept_batch(&[0.5, 0.1, 0.3, 0.9], &Acceptance::Rate { rate: 0.5 });
        assert_eq!(d, vec![0, 1, 1, 0]);
        let d = accept_batch(&[0.5, 0.1], &Acceptance::Threshold { tau: 0.2 });
        assert_eq!(d, vec![0, 1]);
    }

    #[test]
    fn conservation_and_determinism() {
        let cfg = quick();
        let a = run_loop(&cfg, None).unwrap();
        let b = run_loop(&cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.records.len(), 3);
        let s = &a.split;
        let total = s.train_accepts().n_rows()
            + s.validation_accepts().n_rows()
            + s.rejects().n_rows()
            + s.validation_rejects().n_rows();
        assert_eq!(total, 100 * 5);
        assert_eq!(
            s.train_accepts().n_rows() + s.validation_accepts().n_rows(),
            25 * 5
        );
        assert!(s.rejects().labels().is_none());
    }

    #[test]
    fn single_iteration_uses_warmup_model() {
        let cfg = LoopConfig {
            iterations: 1,
            ..quick()
        };
        let out = run_loop(&cfg, None).unwrap();
        assert_eq!(out.trace.records.len(), 1);
    }
}
