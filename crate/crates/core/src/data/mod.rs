//! Dataset model shared by every other module.

mod csv_io;
mod seed;
mod split;

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use csv_io::write_atomic;
pub use csv_io::{load_csv, load_observed, write_csv, ColumnSchema};
pub use seed::RngSeed;
pub(crate) use split::stratified_parts;
pub use split::{bootstrap, partition, Fractions, OracleAccess, SealedLabels, Split};

/// Stable row identifier. `draw` distinguishes repeated rows produced by
/// bootstrap resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowId {
    pub base: u64,
    pub draw: Option<u32>,
}

impl RowId {
    pub const fn new(base: u64) -> Self {
        RowId { base, draw: None }
    }
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.draw {
            Some(d) => write!(f, "{}#{}", self.base, d),
            None => write!(f, "{}", self.base),
        }
    }
}

/// Feature matrix with optional binary labels (1 = bad) and acceptance
/// flags (1 = outcome observed). Immutable once built; every transformation
/// returns a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Option<Vec<u8>>,
    accepted: Option<Vec<u8>>,
    ids: Vec<RowId>,
    feature_names: Vec<String>,
    ground_truth: bool,
}

impl Dataset {
    /// Builds a dataset with ids `0..n` and generated feature names.
    pub fn new(features: DMatrix<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        let n = features.nrows();
        let ids = (0..n as u64).map(RowId::new).collect();
        Self::from_parts(features, labels, None, ids, None)
    }

    pub fn from_parts(
        features: DMatrix<f64>,
        labels: Option<Vec<u8>>,
        accepted: Option<Vec<u8>>,
        ids: Vec<RowId>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let k = features.ncols();
        let feature_names =
            feature_names.unwrap_or_else(|| (1..=k).map(|j| format!("x{j}")).collect());
        if feature_names.len() != k {
            return Err(Error::Shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                k
            )));
        }
        if ids.len() != n {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), n)));
        }
        for (name, v) in [("labels", &labels), ("accepted", &accepted)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Shape(format!("{} {name} for {n} rows", v.len())));
                }
                if let Some(row) = v.iter().position(|&x| x > 1) {
                    return Err(if name == "labels" {
                        Error::LabelOutOfRange { row }
                    } else {
                        Error::AcceptedOutOfRange { row }
                    });
                }
            }
        }
        for c in 0..k {
            for r in 0..n {
                if !features[(r, c)].is_finite() {
                    return Err(Error::NonFinite { row: r, col: c });
                }
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Ok(Dataset {
            features,
            labels,
            accepted,
            ids,
            feature_names,
            ground_truth: false,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows() == 0
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Labels or [`Error::MissingLabels`].
    pub fn require_labels(&self) -> Result<&[u8]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    pub fn accepted(&self) -> Option<&[u8]> {
        self.accepted.as_deref()
    }

    pub fn ids(&self) -> &[RowId] {
        &self.ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn is_ground_truth(&self) -> bool {
        self.ground_truth
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Fraction of bad rows. `None` when unlabeled or empty.
    pub fn bad_rate(&self) -> Option<f64> {
        let y = self.labels.as_ref()?;
        if y.is_empty() {
            return None;
        }
        Some(y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64)
    }

    pub fn with_labels(mut self, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(y) = &labels {
            if y.len() != self.n_rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    y.len(),
                    self.n_rows()
                )));
            }
            if let Some(row) = y.iter().position(|&v| v > 1) {
                return Err(Error::LabelOutOfRange { row });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn with_accepted(mut self, accepted: Option<Vec<u8>>) -> Result<Self> {
        if let Some(a) = &accepted {
            if a.len() != self.n_rows() {
                return Err(Error::Shape(format!(
                    "{} flags for {} rows",
                    a.len(),
                    self.n_rows()
                )));
            }
            if let Some(row) = a.iter().position(|&v| v > 1) {
                return Err(Error::AcceptedOutOfRange { row });
            }
        }
        self.accepted = accepted;
        Ok(self)
    }

    pub fn with_ids(mut self, ids: Vec<RowId>) -> Result<Self> {
        if ids.len() != self.n_rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                self.n_rows()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Flags the set as a fully labeled population sample (an unbiased
    /// holdout or synthetic ground truth). Only flagged sets may carry
    /// labels on rows with `accepted = 0`.
    pub fn into_ground_truth(mut self) -> Self {
        self.ground_truth = true;
        self
    }

    /// Checks that labels appear only on accepted rows, unless the set is
    /// flagged as ground truth.
    pub fn check_label_visibility(&self) -> Result<()> {
        if self.ground_truth {
            return Ok(());
        }
        if let (Some(_), Some(a)) = (&self.labels, &self.accepted) {
            if let Some(row) = a.iter().position(|&v| v == 0) {
                return Err(Error::InvalidArgument(format!(
                    "row {row} is labeled but not accepted; flag the set as ground truth"
                )));
            }
        }
        Ok(())
    }

    /// Rows at `idx`, in that order. Indices may repeat only if the caller
    /// re-ids the result (see [`bootstrap`]).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let features = self.features.select_rows(idx);
        Dataset {
            features,
            labels: self
                .labels
                .as_ref()
                .map(|y| idx.iter().map(|&i| y[i]).collect()),
            accepted: self
                .accepted
                .as_ref()
                .map(|a| idx.iter().map(|&i| a[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            feature_names: self.feature_names.clone(),
            ground_truth: self.ground_truth,
        }
    }

    /// Keeps only the listed feature columns (used to hide MNAR dimensions).
    pub fn select_features(&self, cols: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(cols),
            labels: self.labels.clone(),
            accepted: self.accepted.clone(),
            ids: self.ids.clone(),
            feature_names: cols
                .iter()
                .map(|&c| self.feature_names[c].clone())
                .collect(),
            ground_truth: self.ground_truth,
        }
    }

    /// Appends a feature column.
    pub fn with_extra_feature(&self, name: &str, values: &[f64]) -> Result<Dataset> {
        if values.len() != self.n_rows() {
            return Err(Error::Shape(format!(
                "{} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        let k = self.n_features();
        let mut features = self.features.clone().insert_column(k, 0.0);
        for (r, v) in values.iter().enumerate() {
            features[(r, k)] = *v;
        }
        let mut names = self.feature_names.clone();
        names.push(name.to_string());
        Ok(Dataset {
            features,
            labels: self.labels.clone(),
            accepted: self.accepted.clone(),
            ids: self.ids.clone(),
            feature_names: names,
            ground_truth: self.ground_truth,
        })
    }

    /// Row-wise concatenation. Label and acceptance vectors survive only if
    /// both sides carry them; ids must stay unique.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_features() != other.n_features() {
            return Err(Error::Shape(format!(
                "cannot concatenate {} and {} feature columns",
                self.n_features(),
                other.n_features()
            )));
        }
        let (n1, n2, k) = (self.n_rows(), other.n_rows(), self.n_features());
        let features = DMatrix::from_fn(n1 + n2, k, |r, c| {
            if r < n1 {
                self.features[(r, c)]
            } else {
                other.features[(r - n1, c)]
            }
        });
        let join = |a: &Option<Vec<u8>>, b: &Option<Vec<u8>>| match (a, b) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut out = Dataset::from_parts(
            features,
            join(&self.labels, &other.labels),
            join(&self.accepted, &other.accepted),
            ids,
            Some(self.feature_names.clone()),
        )?;
        out.ground_truth = self.ground_truth && other.ground_truth;
        Ok(out)
    }

    /// Indices of rows whose label equals `class`.
    pub fn class_indices(&self, class: u8) -> Result<Vec<usize>> {
        let y = self.require_labels()?;
        Ok((0..y.len()).filter(|&i| y[i] == class).collect())
    }

    /// Errors unless both classes are present.
    pub fn require_both_classes(&self) -> Result<()> {
        let y = self.require_labels()?;
        let bads = y.iter().filter(|&&v| v == 1).count();
        if bads == 0 {
            return Err(Error::SingleClass(0));
        }
        if bads == y.len() {
            return Err(Error::SingleClass(1));
        }
        Ok(())
    }
}
