//! From-scratch learners behind one prediction contract.
//!
//! * [`fit_l1_logistic`]: L1-penalized logistic regression, the calibrated
//!   weak learner used to pseudo-label rejects.
//! * [`fit_gbt`]: second-order gradient-boosted trees on logistic loss, the
//!   strong learner every scorecard comparison ends with.
//! * [`fit_probit`]: probit MLE for selection equations.
//! * [`fit_isolation_forest`]: novelty scores used to filter rejects.
//!
//! Linear models standardize features internally; tree models consume raw
//! features. Every fitted [`Scorecard`] is immutable and serializable.

mod gbt;
mod iforest;
mod linear;
mod logistic;
mod probit;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngSeed};
use crate::error::{Error, Result};

pub use gbt::{fit_gbt, GbtModel, GbtParams, Tree, TreeNode};
pub use iforest::{fit_isolation_forest, harmonic_normalizer, NoveltyModel};
pub use linear::{LinearModel, Link, Standardizer};
pub use logistic::{fit_l1_logistic, l1_objective, select_l1_lambda, DEFAULT_LAMBDA_GRID};
pub use probit::{fit_probit, inverse_mills, normal_cdf, normal_pdf, ProbitFit};

/// Fitting options shared by the supervised learners. Each learner reads
/// the fields relevant to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub l1_lambda: f64,
    pub gbt: GbtParams,
    #[serde(skip)]
    pub sample_weights: Option<Vec<f64>>,
    pub seed: RngSeed,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l1_lambda: 1e-3,
            gbt: GbtParams::default(),
            sample_weights: None,
            seed: RngSeed::new(0),
            max_iter: 2000,
            tol: 1e-12,
        }
    }
}

impl FitOptions {
    pub fn with_weights(mut self, w: Vec<f64>) -> Self {
        self.sample_weights = Some(w);
        self
    }

    pub fn with_seed(mut self, seed: RngSeed) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return Err(Error::InvalidArgument("l1_lambda must be >= 0".into()));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(
                "max_iter >= 1 and tol > 0 required".into(),
            ));
        }
        self.gbt.validate()
    }

    /// Per-row weights rescaled to mean one, or all ones. Rescaling makes
    /// every learner invariant to a common positive factor on the weights.
    pub(crate) fn normalized_weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.sample_weights {
            None => Ok(vec![1.0; n]),
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Shape(format!("{} weights for {n} rows", w.len())));
                }
                if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "weights must be finite and > 0".into(),
                    ));
                }
                let mean = w.iter().sum::<f64>() / n as f64;
                Ok(w.iter().map(|v| v / mean).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorecardKind {
    L1Logistic,
    Gbt,
    Probit,
    Constant,
    Heckman,
}

/// Two-step selection model: a probit selection equation whose inverse
/// Mills ratio is appended as an extra feature for the outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeckmanModel {
    pub selection: LinearModel,
    pub outcome: GbtModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    L1Logistic(LinearModel),
    Gbt(GbtModel),
    Probit(LinearModel),
    Constant { rate: f64 },
    Heckman(HeckmanModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_train: usize,
    pub weighted: bool,
    pub seed: RngSeed,
}

/// A fitted probability-of-default model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    model: Model,
    feature_arity: usize,
    meta: TrainingMeta,
}

const FORMAT_NAME: &str = "biaslab-scorecard";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScorecardFile {
    format: String,
    version: u32,
    scorecard: Scorecard,
}

impl Scorecard {
    pub(crate) fn new(model: Model, feature_arity: usize, meta: TrainingMeta) -> Self {
        Scorecard {
            model,
            feature_arity,
            meta,
        }
    }

    /// Model predicting `rate` for every row.
    pub fn constant(rate: f64, feature_arity: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::ScoreOutOfRange(rate));
        }
        Ok(Scorecard::new(
            Model::Constant { rate },
            feature_arity,
            TrainingMeta {
                n_train: 0,
                weighted: false,
                seed: RngSeed::default(),
            },
        ))
    }

    pub fn heckman(
        selection: LinearModel,
        outcome: GbtModel,
        feature_arity: usize,
        meta: TrainingMeta,
    ) -> Self {
        Scorecard::new(
            Model::Heckman(HeckmanModel { selection, outcome }),
            feature_arity,
            meta,
        )
    }

    pub fn kind(&self) -> ScorecardKind {
        match self.model {
            Model::L1Logistic(_) => ScorecardKind::L1Logistic,
            Model::Gbt(_) => ScorecardKind::Gbt,
            Model::Probit(_) => ScorecardKind::Probit,
            Model::Constant { .. } => ScorecardKind::Constant,
            Model::Heckman(_) => ScorecardKind::Heckman,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn feature_arity(&self) -> usize {
        self.feature_arity
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    /// Linear coefficients, for linear kinds.
    pub fn linear(&self) -> Option<&LinearModel> {
        match &self.model {
            Model::L1Logistic(m) | Model::Probit(m) => Some(m),
            _ => None,
        }
    }

    pub fn gbt(&self) -> Option<&GbtModel> {
        match &self.model {
            Model::Gbt(m) => Some(m),
            _ => None,
        }
    }

    /// Probabilities for each row of `x`.
    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.feature_arity {
            return Err(Error::Shape(format!(
                "scorecard expects {} features, got {}",
                self.feature_arity,
                x.ncols()
            )));
        }
        Ok(match &self.model {
            Model::L1Logistic(m) | Model::Probit(m) => m.predict(x),
            Model::Gbt(m) => m.predict(x),
            Model::Constant { rate } => vec![*rate; x.nrows()],
            Model::Heckman(h) => {
                let imr: Vec<f64> = h
                    .selection
                    .linear_index(x)
                    .into_iter()
                    .map(inverse_mills)
                    .collect();
                let k = x.ncols();
                let aug =
                    DMatrix::from_fn(
                        x.nrows(),
                        k + 1,
                        |r, c| {
                            if c < k {
                                x[(r, c)]
                            } else {
                                imr[r]
                            }
                        },
                    );
                h.outcome.predict(&aug)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ScorecardFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            scorecard: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        crate::data::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ScorecardFile = serde_json::from_str(&text)?;
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported scorecard file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.scorecard)
    }
}

/// Row-aligned probabilities of default.
pub fn predict_proba(m: &Scorecard, d: &Dataset) -> Result<Vec<f64>> {
    m.predict_matrix(d.features())
}

/// OLS of the scorecard's predictions on `d`'s features plus intercept.
/// Returns `[intercept, b_1, .., b_k]`. A singular design falls back to a
/// `1e-8` ridge with a warning.
pub fn surrogate_coefficients(m: &Scorecard, d: &Dataset) -> Result<Vec<f64>> {
    let n = d.n_rows();
    let k = d.n_features();
    if n <= k + 1 {
        return Err(Error::InvalidArgument(format!(
            "surrogate needs more than {} rows, got {n}",
            k + 1
        )));
    }
    let s = DVector::from_vec(predict_proba(m, d)?);
    let x = d.features();
    let design = DMatrix::from_fn(n, k + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    ols(&design, &s)
}

pub(crate) fn ols(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<Vec<f64>> {
    let xtx = design.transpose() * design;
    let xty = design.transpose() * target;
    let p = xtx.nrows();
    let solve = |m: DMatrix<f64>| m.cholesky().map(|c| c.solve(&xty));
    let beta = match solve(xtx.clone()).filter(|b| b.iter().all(|v| v.is_finite())) {
        Some(b) if condition_ok(&xtx) => b,
        _ => {
            log::warn!("singular surrogate design; applying 1e-8 ridge");
            solve(xtx + DMatrix::identity(p, p) * 1e-8)
                .ok_or_else(|| Error::InvalidArgument("surrogate design not solvable".into()))?
        }
    };
    Ok(beta.iter().copied().collect())
}

fn condition_ok(xtx: &DMatrix<f64>) -> bool {
    let eig = xtx.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > max * 1e-14
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted base rate `Σ w y / Σ w`.
pub(crate) fn weighted_rate(y: &[u8], w: &[f64]) -> f64 {
    let num: f64 = y.iter().zip(w).map(|(&yi, wi)| yi as f64 * wi).sum();
    num / w.iter().sum::<f64>()
}
