//! Experiment orchestration: run configuration, evaluation-strategy and
//! training-method comparisons, sensitivity sweeps, loan economics and
//! report emission.

pub mod economics;
pub mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accept_loop::{run_loop, Acceptance, LoopConfig, LoopOutcome};
use crate::basl::{basl_fit, BaslConfig, StoppingSample};
use crate::bayes::{bayesian_metric, build_prior, corrupt_prior, BayesConfig, Prior, PriorSource};
use crate::benchmarks::{banded_weights_from_scores, train_corrected, CorrectionMethod};
use crate::data::{
    load_csv, load_observed, stratified_parts, ColumnSchema, Dataset, OracleAccess, RngSeed, Split,
};
use crate::error::{Error, Result};
use crate::learners::{fit_gbt, predict_proba, FitOptions, Scorecard};
use crate::metrics::{evaluate, evaluate_weighted, MetricSpec};
use crate::synth::random_covariances;

pub use economics::{
    business_impact, policy_increments, policy_profit, policy_selection, profit_per_loan,
    ImpactRow, LoanEconomics, PolicyRow,
};
pub use report::{
    aggregate, config_hash, emit_report, line_chart_svg, midranks, Aggregate, Failure, Provenance,
    RankBy, RawRow, RunReport, Series,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Experiment1,
    Experiment2,
    Sensitivity,
    Impact,
    BaslTrain,
    Evaluate,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Experiment1 => "experiment1",
            Mode::Experiment2 => "experiment2",
            Mode::Sensitivity => "sensitivity",
            Mode::Impact => "impact",
            Mode::BaslTrain => "basl-train",
            Mode::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config("mode", format!("unknown mode {s:?}")))
    }
}

/// Ways to estimate a scorecard's performance on the applicant population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStrategy {
    /// Metric on labeled validation accepts.
    AcceptsOnly,
    /// Metric on validation accepts weighted by score-band density ratios.
    Reweighted,
    /// Bayesian metric over validation accepts and rejects.
    Bayesian,
}

impl EvalStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            EvalStrategy::AcceptsOnly => "accepts_only",
            EvalStrategy::Reweighted => "reweighted",
            EvalStrategy::Bayesian => "bayesian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PriorKind {
    /// Scores of the scorecard that made the acceptance decisions.
    PreviousScorecard,
    Constant {
        rate: f64,
    },
    /// True outcomes of the rejects (simulation only).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    #[serde(flatten)]
    pub kind: PriorKind,
    pub flip_rate: f64,
    pub shift: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            kind: PriorKind::PreviousScorecard,
            flip_rate: 0.0,
            shift: 0.0,
        }
    }
}

/// Real-data input: one CSV of accepts and rejects, optionally a labeled
/// unbiased holdout CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default = "ColumnSchema::standard")]
    pub schema: ColumnSchema,
    #[serde(default)]
    pub holdout_path: Option<PathBuf>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AcceptanceRate,
    CovarianceRange,
    BadRate,
    OverwriteRate,
    ValidationMix,
    PriorCorruption,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::AcceptanceRate => "acceptance_rate",
            SweepAxis::CovarianceRange => "covariance_range",
            SweepAxis::BadRate => "bad_rate",
            SweepAxis::OverwriteRate => "overwrite_rate",
            SweepAxis::ValidationMix => "validation_mix",
            SweepAxis::PriorCorruption => "prior_corruption",
        }
    }

    /// Axes that only change how a fixed scorecard is evaluated.
    pub fn is_evaluation_axis(&self) -> bool {
        matches!(self, SweepAxis::ValidationMix | SweepAxis::PriorCorruption)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub methods: Vec<CorrectionMethod>,
    pub eval_strategies: Vec<EvalStrategy>,
    pub metrics: Vec<MetricSpec>,
    pub trials: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub bayes: BayesConfig,
    pub prior: PriorSpec,
    pub basl: BaslConfig,
    pub econ: LoanEconomics,
    pub sweep: Option<SweepConfig>,
    pub data: Option<DataSource>,
    /// Correction traced alongside the biased scorecard in simulate mode.
    pub simulate_correction: Option<CorrectionMethod>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Experiment1,
            loop_cfg: LoopConfig::default(),
            methods: vec![
                CorrectionMethod::Ignore,
                CorrectionMethod::Basl(Box::default()),
            ],
            eval_strategies: vec![
                EvalStrategy::AcceptsOnly,
                EvalStrategy::Reweighted,
                EvalStrategy::Bayesian,
            ],
            metrics: vec![MetricSpec::abr_default(), MetricSpec::Auc],
            trials: 10,
            output_dir: PathBuf::from("out"),
            seed: 0,
            bayes: BayesConfig::default(),
            prior: PriorSpec::default(),
            basl: BaslConfig::default(),
            econ: LoanEconomics::default(),
            sweep: None,
            data: None,
            simulate_correction: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(json_field(&e), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical JSON of the effective configuration; its hash names the
    /// output files. The output directory is left out since it does not
    /// affect results.
    pub fn canonical_json(&self) -> Result<String> {
        let cfg = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(serde_json::to_string(&cfg)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(&self.canonical_json()?))
    }

    /// Field-level validation of everything the selected mode needs.
    pub fn validate(&self) -> Result<()> {
        let wrap = |field: &str, r: Result<()>| r.map_err(|e| Error::config(field, e.to_string()));
        // zero trials is a valid empty run for the report modes
        if self.trials == 0 && matches!(self.mode, Mode::Impact | Mode::Sensitivity) {
            return Err(Error::config("trials", "must be >= 1"));
        }
        if self.metrics.is_empty() {
            return Err(Error::config("metrics", "at least one metric is required"));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            wrap(&format!("metrics[{i}]"), m.validate())?;
        }
        wrap("bayes", self.bayes.validate())?;
        let p = &self.prior;
        if !(0.0..=1.0).contains(&p.flip_rate) || !p.shift.is_finite() {
            return Err(Error::config(
                "prior",
                "flip_rate must be in [0,1] and shift finite",
            ));
        }
        if let PriorKind::Constant { rate } = p.kind {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config("prior.rate", "must be in [0,1]"));
            }
        }
        let needs_loop =
            !matches!(self.mode, Mode::Evaluate | Mode::BaslTrain) || self.data.is_none();
        if needs_loop {
            wrap("loop", self.loop_cfg.validate())?;
        } else {
            wrap("loop.learner", self.loop_cfg.learner.validate())?;
        }
        for (i, m) in self.methods.iter().enumerate() {
            wrap(&format!("methods[{i}]"), m.validate())?;
        }
        match self.mode {
            Mode::Experiment1 | Mode::Evaluate if self.eval_strategies.is_empty() => {
                return Err(Error::config(
                    "eval_strategies",
                    "at least one strategy is required",
                ));
            }
            Mode::Experiment2 if self.methods.is_empty() => {
                return Err(Error::config("methods", "at least one method is required"));
            }
            Mode::Impact => {
                wrap("econ", self.econ.validate())?;
                if !self.methods.contains(&CorrectionMethod::Ignore) {
                    return Err(Error::config(
                        "methods",
                        "impact mode needs the ignore baseline",
                    ));
                }
            }
            Mode::Sensitivity => {
                let s = self.sweep.as_ref().ok_or_else(|| {
                    Error::config("sweep", "sensitivity mode requires a sweep section")
                })?;
                if s.grid.is_empty() || s.grid.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("sweep.grid", "must be nonempty and finite"));
                }
            }
            Mode::BaslTrain => wrap("basl", self.basl.validate())?,
            _ => {}
        }
        if let Some(c) = &self.simulate_correction {
            wrap("simulate_correction", c.validate())?;
        }
        if let Some(d) = &self.data {
            if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
                return Err(Error::config(
                    "data.validation_fraction",
                    "must be in (0,1)",
                ));
            }
        }
        if matches!(self.mode, Mode::Evaluate) && self.data.is_some() {
            let d = self.data.as_ref().expect("checked");
            if d.holdout_path.is_none() {
                return Err(Error::config(
                    "data.holdout_path",
                    "evaluate mode needs a labeled holdout",
                ));
            }
        }
        Ok(())
    }

    /// Loop configuration of trial `t`.
    pub fn trial_loop(&self, t: usize) -> LoopConfig {
        LoopConfig {
            seed: RngSeed::new(self.seed).substream(t as u64),
            ..self.loop_cfg.clone()
        }
    }

    fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash()?,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .map_or_else(|| "config".to_string(), str::to_string)
}

/// Bayesian-evaluation prior for `rejects`. The oracle variant is the only
/// place outside the loop that reads sealed outcomes.
pub fn prior_for(
    spec: &PriorSpec,
    split: &Split,
    rejects: &Dataset,
    previous: &Scorecard,
    seed: RngSeed,
) -> Result<Prior> {
    let base = match spec.kind {
        PriorKind::PreviousScorecard => build_prior(rejects, previous)?,
        PriorKind::Constant { rate } => Prior::constant(rejects, rate)?,
        PriorKind::Oracle => {
            let access = OracleAccess::grant("oracle prior for evaluation study");
            let y = split
                .sealed(&access)
                .labels_for(rejects, &access)
                .ok_or_else(|| {
                    Error::InvalidArgument("oracle prior needs sealed reject labels".into())
                })?;
            Prior::from_parts(
                rejects.ids().to_vec(),
                y.iter().map(|&v| v as f64).collect(),
                PriorSource::Oracle,
            )?
        }
    };
    if spec.flip_rate > 0.0 || spec.shift != 0.0 {
        corrupt_prior(&base, spec.flip_rate, spec.shift, seed)
    } else {
        Ok(base)
    }
}

/// Keeps as many validation rejects as needed for them to form `mix` of
/// the validation sample (capped by availability).
pub fn mix_validation_rejects(split: &Split, mix: f64, seed: RngSeed) -> Result<Dataset> {
    if !(0.0..1.0).contains(&mix) {
        return Err(Error::InvalidArgument(format!(
            "validation mix {mix} not in [0,1)"
        )));
    }
    let na = split.validation_accepts().n_rows() as f64;
    let vr = split.validation_rejects();
    let want = ((mix / (1.0 - mix)) * na + 1e-9).floor() as usize;
    if want >= vr.n_rows() {
        return Ok(vr.clone());
    }
    let mut rng = seed.rng();
    let mut idx = rand::seq::index::sample(&mut rng, vr.n_rows(), want).into_vec();
    idx.sort_unstable();
    Ok(vr.select(&idx))
}

/// Evaluation-study settings shared by all trials.
#[derive(Debug, Clone)]
pub struct EvaluationSetup<'a> {
    pub strategies: &'a [EvalStrategy],
    pub metrics: &'a [MetricSpec],
    pub bayes: &'a BayesConfig,
    pub prior: &'a PriorSpec,
    pub learner: &'a FitOptions,
    pub n_bands: usize,
    /// Target share of rejects in the validation sample.
    pub validation_mix: Option<f64>,
}

/// One trial of the evaluation study: fits the accepts-based scorecard,
/// estimates each metric with each strategy, and pairs the estimates with
/// the holdout value.
pub fn evaluation_trial(
    trial: usize,
    split: &Split,
    previous: Option<&Scorecard>,
    setup: &EvaluationSetup,
    seed: RngSeed,
) -> Result<Vec<RawRow>> {
    let f = fit_gbt(split.train_accepts(), setup.learner)?;
    let previous = previous.unwrap_or(&f);
    let va = split.validation_accepts();
    let vr = match setup.validation_mix {
        Some(m) => mix_validation_rejects(split, m, seed.substream(3))?,
        None => split.validation_rejects().clone(),
    };
    let ya = va.require_labels()?;
    let sa = predict_proba(&f, va)?;
    let sr = if vr.is_empty() {
        Vec::new()
    } else {
        predict_proba(&f, &vr)?
    };
    let holdout = split.holdout();
    let sh = predict_proba(&f, holdout)?;
    let yh = holdout.require_labels()?;

    let needs_prior = setup.strategies.contains(&EvalStrategy::Bayesian);
    let prior = if needs_prior {
        Some(prior_for(
            setup.prior,
            split,
            &vr,
            previous,
            seed.substream(1),
        )?)
    } else {
        None
    };
    let weights = if setup.strategies.contains(&EvalStrategy::Reweighted) {
        Some(banded_weights_from_scores(&sa, &sr, setup.n_bands)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for (mi, metric) in setup.metrics.iter().enumerate() {
        let truth = evaluate(metric, &sh, yh)?.value;
        for s in setup.strategies {
            let value = match s {
                EvalStrategy::AcceptsOnly => evaluate(metric, &sa, ya)?.value,
                EvalStrategy::Reweighted => {
                    evaluate_weighted(metric, &sa, ya, weights.as_ref().expect("set"))?.value
                }
                EvalStrategy::Bayesian => {
                    let cfg = BayesConfig {
                        seed: seed.substream(100 + mi as u64),
                        ..setup.bayes.clone()
                    };
                    bayesian_metric(&f, va, &vr, prior.as_ref().expect("set"), metric, &cfg)?
                        .value
                        .value
                }
            };
            rows.push(RawRow {
                trial,
                group: s.name().to_string(),
                metric: metric.name().to_string(),
                value,
                truth: Some(truth),
            });
        }
    }
    Ok(rows)
}

/// Strong learner fit on training accepts and training rejects with their
/// true outcomes.
pub fn fit_oracle(split: &Split, opts: &FitOptions) -> Result<Scorecard> {
    let access = OracleAccess::grant("oracle scorecard");
    let rejects = split.sealed(&access).reveal(split.rejects(), &access);
    match rejects {
        Some(r) if !r.is_empty() => fit_gbt(&split.train_accepts().concat(&r)?, opts),
        _ => Err(Error::InvalidArgument(
            "oracle needs sealed reject labels".into(),
        )),
    }
}

/// One trial of the training study: every method's scorecard (and the
/// oracle when sealed labels exist) evaluated on the holdout. Method
/// failures are returned separately and do not abort the trial.
pub fn training_trial(
    trial: usize,
    split: &Split,
    methods: &[CorrectionMethod],
    metrics: &[MetricSpec],
    prior: Option<&Prior>,
    opts: &FitOptions,
) -> Result<(Vec<RawRow>, Vec<Failure>)> {
    let holdout = split.holdout();
    let yh = holdout.require_labels()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut models: Vec<(String, Result<Scorecard>)> = methods
        .iter()
        .map(|m| (m.name().to_string(), train_corrected(m, split, opts, prior)))
        .collect();
    if split.has_sealed_labels() {
        models.push(("oracle".into(), fit_oracle(split, opts)));
    }
    for (name, model) in models {
        let outcome = model.and_then(|m| {
            let s = predict_proba(&m, holdout)?;
            metrics
                .iter()
                .map(|metric| evaluate(metric, &s, yh).map(|v| v.value))
                .collect::<Result<Vec<_>>>()
        });
        match outcome {
            Ok(values) => rows.extend(metrics.iter().zip(values).map(|(metric, value)| RawRow {
                trial,
                group: name.clone(),
                metric: metric.name().to_string(),
                value,
                truth: None,
            })),
            Err(e) => {
                log::warn!("trial {trial}: {name} failed: {e}");
                failures.push(Failure {
                    trial,
                    group: name,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok((rows, failures))
}

fn previous_prior(outcome: &LoopOutcome) -> Result<Prior> {
    build_prior(outcome.split.validation_rejects(), &outcome.scorecard)
}

fn setup<'a>(cfg: &'a RunConfig) -> EvaluationSetup<'a> {
    EvaluationSetup {
        strategies: &cfg.eval_strategies,
        metrics: &cfg.metrics,
        bayes: &cfg.bayes,
        prior: &cfg.prior,
        learner: &cfg.loop_cfg.learner,
        n_bands: 10,
        validation_mix: None,
    }
}

fn trial_seed(cfg: &RunConfig, t: usize) -> RngSeed {
    RngSeed::new(cfg.seed).substream(0xe0 + t as u64)
}

/// Evaluation study over `cfg.trials` simulated loops.
pub fn experiment_evaluation(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let su = setup(cfg);
    let per_trial: Vec<Result<Vec<RawRow>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let out = run_loop(&cfg.trial_loop(t), None)?;
            evaluation_trial(t, &out.split, Some(&out.scorecard), &su, trial_seed(cfg, t))
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_trial {
        rows.extend(r?);
    }
    Ok(RunReport {
        name: "experiment1".into(),
        rank_by: RankBy::AbsError,
        rows,
        failures: Vec::new(),
        provenance: cfg.provenance()?,
    })
}

/// Training study over `cfg.trials` simulated loops.
pub fn experiment_training(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let per_trial: Vec<Result<(Vec<RawRow>, Vec<Failure>)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let out = run_loop(&cfg.trial_loop(t), None)?;
            let prior = previous_prior(&out)?;
            let opts = cfg.loop_cfg.learner.clone().with_seed(trial_seed(cfg, t));
            training_trial(
                t,
                &out.split,
                &cfg.methods,
                &cfg.metrics,
                Some(&prior),
                &opts,
            )
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in per_trial {
        let (r, f) = r?;
        rows.extend(r);
        failures.extend(f);
    }
    Ok(RunReport {
        name: "experiment2".into(),
        rank_by: RankBy::Value,
        rows,
        failures,
        provenance: cfg.provenance()?,
    })
}

/// One row of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub trial: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    /// Cells that could not be run, with the reason.
    pub failed: Vec<(f64, usize, String)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("axis,axis_value,trial,method,metric,value,truth\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.axis,
                r.axis_value,
                r.trial,
                r.method,
                r.metric,
                r.value,
                r.truth.map_or(String::new(), |t| t.to_string())
            );
        }
        s
    }

    /// Mean of `method`/`metric` values per axis value, in grid order.
    pub fn means(&self, method: &str, metric: &str) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in self
            .rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
        {
            match out.iter_mut().find(|o| o.0 == r.axis_value) {
                Some(o) => {
                    o.1 += r.value;
                    o.2 += 1;
                }
                None => out.push((r.axis_value, r.value, 1)),
            }
        }
        out.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
    }

    /// Root mean squared error of `method`/`metric` estimates per axis value.
    pub fn rmse(&self, method: &str, metric: &str) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in self
            .rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
        {
            let Some(t) = r.truth else { continue };
            let e2 = (r.value - t).powi(2);
            match out.iter_mut().find(|o| o.0 == r.axis_value) {
                Some(o) => {
                    o.1 += e2;
                    o.2 += 1;
                }
                None => out.push((r.axis_value, e2, 1)),
            }
        }
        out.into_iter()
            .map(|(x, s, n)| (x, (s / n as f64).sqrt()))
            .collect()
    }
}

/// Loop configuration with `axis` set to `value`.
pub fn apply_axis(
    base: &LoopConfig,
    axis: SweepAxis,
    value: f64,
    seed: RngSeed,
) -> Result<LoopConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::AcceptanceRate => cfg.acceptance = Acceptance::Rate { rate: value },
        SweepAxis::CovarianceRange => {
            let cov = random_covariances(cfg.mixture.dim(), value, seed.substream(0xc0))?;
            cfg.mixture = cfg.mixture.with_covariance(&cov);
        }
        SweepAxis::BadRate => cfg.mixture.bad_rate = value,
        SweepAxis::OverwriteRate => {
            if cfg.mnar.hidden_dims.is_empty() {
                cfg.mnar.hidden_dims = vec![cfg.mixture.dim() - 1];
            }
            cfg.mnar.overwrite_rate = value;
        }
        SweepAxis::ValidationMix | SweepAxis::PriorCorruption => {}
    }
    Ok(cfg)
}

/// Runs the loop for every grid value and trial, then the training study
/// (loop-shaping axes) and the evaluation study (all axes). Loss due to
/// bias is reported as method `gap` (ignore minus oracle). Cells that fail
/// are recorded and skipped.
pub fn sensitivity_sweep(
    axis: SweepAxis,
    grid: &[f64],
    base: &RunConfig,
    trials: usize,
) -> Result<SweepTable> {
    if grid.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument(
            "sweep needs a nonempty grid and trials >= 1".into(),
        ));
    }
    let cells: Vec<(f64, usize)> = grid
        .iter()
        .flat_map(|&v| (0..trials).map(move |t| (v, t)))
        .collect();
    let results: Vec<Result<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(v, t)| sweep_cell(axis, v, t, base))
        .collect();
    let mut table = SweepTable {
        axis: axis.name().into(),
        ..SweepTable::default()
    };
    for ((v, t), r) in cells.into_iter().zip(results) {
        match r {
            Ok(rows) => table.rows.extend(rows),
            Err(e) => {
                log::warn!("sweep cell {}={v} trial {t} failed: {e}", axis.name());
                table.failed.push((v, t, e.to_string()));
            }
        }
    }
    Ok(table)
}

fn sweep_cell(axis: SweepAxis, v: f64, t: usize, base: &RunConfig) -> Result<Vec<SweepRow>> {
    let seed = trial_seed(base, t);
    let lcfg = apply_axis(&base.trial_loop(t), axis, v, seed)?;
    let out = run_loop(&lcfg, None)?;
    let mut rows = Vec::new();
    let to_row = |r: RawRow| SweepRow {
        axis_value: v,
        trial: t,
        method: r.group,
        metric: r.metric,
        value: r.value,
        truth: r.truth,
    };
    if !axis.is_evaluation_axis() {
        let prior = previous_prior(&out)?;
        let opts = lcfg.learner.clone().with_seed(seed);
        let (train_rows, failures) = training_trial(
            t,
            &out.split,
            &base.methods,
            &base.metrics,
            Some(&prior),
            &opts,
        )?;
        if let Some(f) = failures.first() {
            return Err(Error::Simulation(format!("{}: {}", f.group, f.message)));
        }
        for metric in &base.metrics {
            let find = |g: &str| {
                train_rows
                    .iter()
                    .find(|r| r.group == g && r.metric == metric.name())
                    .map(|r| r.value)
            };
            if let (Some(b), Some(o)) = (find("ignore"), find("oracle")) {
                let gap = match metric.orientation() {
                    crate::metrics::Orientation::LowerBetter => b - o,
                    crate::metrics::Orientation::HigherBetter => o - b,
                };
                rows.push(SweepRow {
                    axis_value: v,
                    trial: t,
                    method: "gap".into(),
                    metric: metric.name().into(),
                    value: gap,
                    truth: None,
                });
            }
        }
        rows.extend(train_rows.into_iter().map(to_row));
    }
    let mut prior = base.prior;
    let mut su = setup(base);
    su.learner = &lcfg.learner;
    match axis {
        SweepAxis::PriorCorruption => prior.flip_rate = v,
        SweepAxis::ValidationMix => su.validation_mix = Some(v),
        _ => {}
    }
    su.prior = &prior;
    let eval_rows = evaluation_trial(t, &out.split, Some(&out.scorecard), &su, seed)?;
    rows.extend(eval_rows.into_iter().map(|r| SweepRow {
        method: format!("eval_{}", r.group),
        ..to_row(r)
    }));
    Ok(rows)
}

/// Holdout bad rates at each acceptance rate of `econ.acceptance_grid`,
/// estimated by each strategy and measured on the holdout.
pub fn bad_rates_by_rate(
    split: &Split,
    previous: &Scorecard,
    strategies: &[EvalStrategy],
    econ: &LoanEconomics,
    bayes: &BayesConfig,
    prior: &PriorSpec,
    learner: &FitOptions,
    seed: RngSeed,
) -> Result<(Vec<(String, Vec<f64>)>, Vec<f64>)> {
    let metrics: Vec<MetricSpec> = econ
        .acceptance_grid
        .iter()
        .map(|&r| MetricSpec::bad_rate_at(r))
        .collect();
    let su = EvaluationSetup {
        strategies,
        metrics: &metrics,
        bayes,
        prior,
        learner,
        n_bands: 10,
        validation_mix: None,
    };
    let rows = evaluation_trial(0, split, Some(previous), &su, seed)?;
    let n = metrics.len();
    let truth: Vec<f64> = rows
        .iter()
        .step_by(strategies.len())
        .map(|r| r.truth.expect("evaluation rows carry truth"))
        .collect();
    let est = strategies
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let v: Vec<f64> = (0..n)
                .map(|mi| rows[mi * strategies.len() + si].value)
                .collect();
            (s.name().to_string(), v)
        })
        .collect();
    Ok((est, truth))
}

/// Output of impact mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactReport {
    pub training: RunReport,
    pub impact: Vec<ImpactRow>,
    pub policy: Vec<PolicyRow>,
    /// Estimated bad rate per strategy and acceptance rate (trial means).
    pub rate_estimates: Vec<(String, Vec<f64>)>,
    pub rate_truth: Vec<f64>,
}

/// Training study, profit comparison of methods by their holdout ABR, and
/// acceptance-rate policy selection by evaluation strategy.
pub fn impact_study(cfg: &RunConfig) -> Result<ImpactReport> {
    cfg.validate()?;
    let abr = MetricSpec::abr_default();
    let per_trial: Vec<
        Result<(
            (Vec<RawRow>, Vec<Failure>),
            (Vec<(String, Vec<f64>)>, Vec<f64>),
        )>,
    > = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let out = run_loop(&cfg.trial_loop(t), None)?;
            let prior = previous_prior(&out)?;
            let opts = cfg.loop_cfg.learner.clone().with_seed(trial_seed(cfg, t));
            let train = training_trial(t, &out.split, &cfg.methods, &[abr], Some(&prior), &opts)?;
            let rates = bad_rates_by_rate(
                &out.split,
                &out.scorecard,
                &cfg.eval_strategies,
                &cfg.econ,
                &cfg.bayes,
                &cfg.prior,
                &cfg.loop_cfg.learner,
                trial_seed(cfg, t),
            )?;
            Ok((train, rates))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let n_rates = cfg.econ.acceptance_grid.len();
    let mut est_sum: Vec<(String, Vec<f64>)> = cfg
        .eval_strategies
        .iter()
        .map(|s| (s.name().to_string(), vec![0.0; n_rates]))
        .collect();
    let mut truth_sum = vec![0.0; n_rates];
    for r in per_trial {
        let ((r, f), (est, truth)) = r?;
        rows.extend(r);
        failures.extend(f);
        for (acc, (_, v)) in est_sum.iter_mut().zip(est) {
            for (a, x) in acc.1.iter_mut().zip(v) {
                *a += x;
            }
        }
        for (a, x) in truth_sum.iter_mut().zip(truth) {
            *a += x;
        }
    }
    let k = cfg.trials as f64;
    let rate_estimates: Vec<(String, Vec<f64>)> = est_sum
        .into_iter()
        .map(|(n, v)| (n, v.into_iter().map(|x| x / k).collect()))
        .collect();
    let rate_truth: Vec<f64> = truth_sum.into_iter().map(|x| x / k).collect();

    let mut per_method: Vec<(String, Vec<f64>)> = Vec::new();
    for r in &rows {
        match per_method.iter_mut().find(|(m, _)| *m == r.group) {
            Some((_, v)) => v.push(r.value),
            None => per_method.push((r.group.clone(), vec![r.value])),
        }
    }
    let impact = business_impact(
        &per_method,
        "ignore",
        &cfg.econ,
        RngSeed::new(cfg.seed).substream(0x1e),
    )?;
    let policy = policy_selection(&rate_estimates, &rate_truth, &cfg.econ)?;
    Ok(ImpactReport {
        training: RunReport {
            name: "impact_training".into(),
            rank_by: RankBy::Value,
            rows,
            failures,
            provenance: cfg.provenance()?,
        },
        impact,
        policy,
        rate_estimates,
        rate_truth,
    })
}

/// Reads the configured CSV into a split: accepted rows are divided
/// stratified into training and validation, rejected rows at random. A
/// separate holdout file is used when given; otherwise a stratified share
/// of the accepts (biased) stands in for it.
pub fn split_from_data(src: &DataSource, seed: RngSeed) -> Result<Split> {
    let (accepts, rejects) = load_observed(&src.path, &src.schema).map_err(|e| match e {
        Error::Schema(m) => Error::config("data.schema", m),
        other => other,
    })?;
    let ya = accepts.require_labels()?;
    let rows: Vec<usize> = (0..accepts.n_rows()).collect();
    let vf = src.validation_fraction;
    let (holdout, parts) = match &src.holdout_path {
        Some(p) => (
            Some(load_csv(p, &src.schema)?),
            stratified_parts(&rows, ya, &[1.0 - vf, vf], seed.substream(1)),
        ),
        None => {
            log::warn!(
                "no holdout file; holding out a share of the accepts, which is not representative"
            );
            (
                None,
                stratified_parts(&rows, ya, &[1.0 - 2.0 * vf, vf, vf], seed.substream(1)),
            )
        }
    };
    let zeros = vec![0u8; rejects.n_rows()];
    let rrows: Vec<usize> = (0..rejects.n_rows()).collect();
    let pr = stratified_parts(&rrows, &zeros, &[1.0 - vf, vf], seed.substream(2));
    let holdout = match holdout {
        Some(h) => h,
        None => accepts.select(&parts[2]),
    };
    Split::from_observed(
        accepts.select(&parts[0]),
        rejects.select(&pr[0]),
        accepts.select(&parts[1]),
        rejects.select(&pr[1]),
        holdout,
    )
}

/// Trains BASL on `split` with a prior from the accepts-only scorecard.
pub fn basl_train(
    split: &Split,
    basl: &BaslConfig,
    opts: &FitOptions,
) -> Result<crate::basl::BaslOutcome> {
    let base = fit_gbt(split.train_accepts(), opts)?;
    let prior = build_prior(split.validation_rejects(), &base)?;
    let sample = StoppingSample {
        accepts: split.validation_accepts(),
        rejects: split.validation_rejects(),
        prior: &prior,
    };
    basl_fit(split.train_accepts(), split.rejects(), sample, basl, opts)
}

/// Runs `cfg.mode` and writes its outputs under `out`. Returns the written
/// paths in a stable order.
pub fn run_mode(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    use report::write_file;
    cfg.validate()?;
    let hash = cfg.hash()?;
    let mut paths = Vec::new();
    match cfg.mode {
        Mode::Simulate => {
            let traces: Vec<Result<LoopOutcome>> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_loop(&cfg.trial_loop(t), cfg.simulate_correction.as_ref()))
                .collect();
            let mut first = None;
            for (t, tr) in traces.into_iter().enumerate() {
                let tr = tr?;
                paths.push(write_file(
                    out,
                    &format!("simulate_{hash}_trace_{t}.csv"),
                    &tr.trace.to_csv(),
                )?);
                if first.is_none() {
                    first = Some(tr.trace);
                }
            }
            if let Some(tr) = first {
                let pick = |f: &dyn Fn(&crate::accept_loop::IterationTrace) -> Option<f64>,
                            name: &str| Series {
                    name: name.into(),
                    points: tr
                        .records
                        .iter()
                        .filter_map(|r| f(r).map(|v| (r.iteration as f64, v)))
                        .collect(),
                };
                let series: Vec<Series> = [
                    pick(&|r| Some(r.abr_biased), "biased"),
                    pick(&|r| r.abr_oracle, "oracle"),
                    pick(&|r| r.abr_corrected, "corrected"),
                ]
                .into_iter()
                .filter(|s| !s.points.is_empty())
                .collect();
                let svg = line_chart_svg(
                    "Holdout ABR over loop iterations",
                    "iteration",
                    "ABR",
                    &series,
                );
                paths.push(write_file(out, &format!("simulate_{hash}_abr.svg"), &svg)?);
            }
        }
        Mode::Experiment1 => paths.extend(emit_report(&experiment_evaluation(cfg)?, out)?),
        Mode::Experiment2 => paths.extend(emit_report(&experiment_training(cfg)?, out)?),
        Mode::Sensitivity => {
            let s = cfg.sweep.as_ref().expect("validated");
            let table = sensitivity_sweep(s.axis, &s.grid, cfg, cfg.trials)?;
            paths.push(write_file(
                out,
                &format!("sensitivity_{hash}_{}.csv", s.axis.name()),
                &table.to_csv(),
            )?);
            if !table.failed.is_empty() {
                let mut f = String::from("axis_value,trial,message\n");
                for (v, t, m) in &table.failed {
                    f.push_str(&format!("{v},{t},\"{}\"\n", m.replace('"', "'")));
                }
                paths.push(write_file(
                    out,
                    &format!("sensitivity_{hash}_failed.csv"),
                    &f,
                )?);
            }
            let mut series = Vec::new();
            if !s.axis.is_evaluation_axis() {
                series.push(Series {
                    name: "loss due to bias".into(),
                    points: table.means("gap", "abr"),
                });
            }
            for st in &cfg.eval_strategies {
                series.push(Series {
                    name: format!("RMSE {}", st.name()),
                    points: table.rmse(&format!("eval_{}", st.name()), "abr"),
                });
            }
            let svg = line_chart_svg("ABR sensitivity", s.axis.name(), "ABR", &series);
            paths.push(write_file(
                out,
                &format!("sensitivity_{hash}_{}.svg", s.axis.name()),
                &svg,
            )?);
        }
        Mode::Impact => {
            let rep = impact_study(cfg)?;
            paths.extend(emit_report(&rep.training, out)?);
            let mut s = String::from("lgd,method,profit,incremental,margin\n");
            for r in &rep.impact {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.lgd, r.method, r.profit, r.incremental, r.margin
                ));
            }
            paths.push(write_file(out, &format!("impact_{hash}_profit.csv"), &s)?);
            let mut p =
                String::from("lgd,strategy,chosen_rate,estimated_profit,realized_profit,tie\n");
            for r in &rep.policy {
                p.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.lgd, r.strategy, r.chosen_rate, r.estimated_profit, r.realized_profit, r.tie
                ));
            }
            paths.push(write_file(out, &format!("impact_{hash}_policy.csv"), &p)?);
            let mut e = String::from("strategy,rate,estimate,truth\n");
            for (name, v) in &rep.rate_estimates {
                for ((r, x), t) in cfg.econ.acceptance_grid.iter().zip(v).zip(&rep.rate_truth) {
                    e.push_str(&format!("{name},{r},{x},{t}\n"));
                }
            }
            paths.push(write_file(out, &format!("impact_{hash}_rates.csv"), &e)?);
            let methods: Vec<String> =
                rep.impact
                    .iter()
                    .map(|r| r.method.clone())
                    .fold(Vec::new(), |mut acc, m| {
                        if !acc.contains(&m) {
                            acc.push(m);
                        }
                        acc
                    });
            let series: Vec<Series> = methods
                .iter()
                .map(|m| Series {
                    name: m.clone(),
                    points: rep
                        .impact
                        .iter()
                        .filter(|r| &r.method == m)
                        .map(|r| (r.lgd, r.margin))
                        .collect(),
                })
                .collect();
            let svg = line_chart_svg(
                "Expected margin vs. LGD",
                "LGD",
                "incremental profit / principal",
                &series,
            );
            paths.push(write_file(out, &format!("impact_{hash}_profit.svg"), &svg)?);
        }
        Mode::BaslTrain => {
            let seed = RngSeed::new(cfg.seed);
            let split = match &cfg.data {
                Some(src) => split_from_data(src, seed)?,
                None => run_loop(&cfg.trial_loop(0), None)?.split,
            };
            let opts = cfg.loop_cfg.learner.clone().with_seed(seed.substream(0xb));
            let outcome = basl_train(&split, &cfg.basl, &opts)?;
            let model_path = out.join(format!("basl_{hash}_scorecard.json"));
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            outcome.scorecard.save(&model_path)?;
            paths.push(model_path);
            paths.push(write_file(
                out,
                &format!("basl_{hash}_history.csv"),
                &outcome.state.history_csv(),
            )?);
        }
        Mode::Evaluate => {
            let seed = RngSeed::new(cfg.seed);
            let (split, previous) = match &cfg.data {
                Some(src) => (split_from_data(src, seed)?, None),
                None => {
                    let o = run_loop(&cfg.trial_loop(0), None)?;
                    (o.split, Some(o.scorecard))
                }
            };
            let rows = evaluation_trial(
                0,
                &split,
                previous.as_ref(),
                &setup(cfg),
                seed.substream(0xe),
            )?;
            let rep = RunReport {
                name: "evaluate".into(),
                rank_by: RankBy::AbsError,
                rows,
                failures: Vec::new(),
                provenance: cfg.provenance()?,
            };
            paths.extend(emit_report(&rep, out)?);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_parse() {
        for m in [
            Mode::Simulate,
            Mode::Experiment1,
            Mode::Experiment2,
            Mode::Sensitivity,
            Mode::Impact,
            Mode::BaslTrain,
            Mode::Evaluate,
        ] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("nope".parse::<Mode>(), Err(Error::Config { .. })));
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = RunConfig::from_json(r#"{"trials": 1, "bogus": 2}"#).unwrap_err();
        assert!(
            matches!(e, Error::Config { ref field, .. } if field == "bogus"),
            "{e}"
        );
        let cfg = RunConfig {
            mode: Mode::Sensitivity,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "sweep"));
        let cfg = RunConfig {
            mode: Mode::Impact,
            trials: 0,
            ..RunConfig::default()
        };
        assert!(
            matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "trials")
        );
    }

    #[test]
    fn empty_run_writes_header_only_csvs() {
        let cfg = RunConfig {
            trials: 0,
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = run_mode(&cfg, dir.path()).unwrap();
        let raw = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(raw.lines().count(), 1);
        assert!(paths.iter().all(|p| p.extension().unwrap() != "svg"));
    }

    #[test]
    fn default_config_roundtrips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.canonical_json().unwrap()).unwrap();
        assert_eq!(back.output_dir, PathBuf::new());
        assert_eq!(
            RunConfig {
                output_dir: cfg.output_dir.clone(),
                ..back.clone()
            },
            cfg
        );
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}
