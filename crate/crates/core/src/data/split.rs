use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, RngSeed, RowId};
use crate::error::{Error, Result};

/// Capability required to read sealed ground-truth labels of rejects.
///
/// Only oracle and reporting code acquires one. Correction and evaluation
/// methods never take an `OracleAccess` argument, so they cannot observe
/// reject outcomes.
#[derive(Debug)]
pub struct OracleAccess {
    _private: (),
}

impl OracleAccess {
    pub fn grant(purpose: &str) -> OracleAccess {
        log::debug!("oracle access granted: {purpose}");
        OracleAccess { _private: () }
    }
}

/// Ground-truth labels kept out of the consumer-facing datasets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SealedLabels {
    by_id: BTreeMap<RowId, u8>,
}

impl SealedLabels {
    pub(crate) fn from_dataset(d: &Dataset) -> Result<Self> {
        let y = d.require_labels()?;
        Ok(SealedLabels {
            by_id: d.ids().iter().copied().zip(y.iter().copied()).collect(),
        })
    }

    pub(crate) fn merge(mut self, other: SealedLabels) -> Self {
        self.by_id.extend(other.by_id);
        self
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Labels aligned to `d`'s rows; `None` if any row has no sealed label.
    pub fn labels_for(&self, d: &Dataset, _access: &OracleAccess) -> Option<Vec<u8>> {
        d.ids()
            .iter()
            .map(|id| self.by_id.get(id).copied())
            .collect()
    }

    /// `d` with its sealed labels revealed.
    pub fn reveal(&self, d: &Dataset, access: &OracleAccess) -> Option<Dataset> {
        let y = self.labels_for(d, access)?;
        d.clone().with_labels(Some(y)).ok()
    }
}

/// Part sizes as fractions of each group, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub validation: f64,
    pub holdout: f64,
}

impl Fractions {
    pub fn new(train: f64, validation: f64, holdout: f64) -> Result<Self> {
        let f = Fractions {
            train,
            validation,
            holdout,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.holdout];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "negative fraction in {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.holdout]
    }
}

/// Accept/reject partition of an application sample.
///
/// `validation_accepts` and `validation_rejects` together form the mixed
/// validation sample. Reject sets carry no labels; their ground truth, when
/// it exists, sits in the sealed side channel.
#[derive(Debug, Clone)]
pub struct Split {
    train_accepts: Dataset,
    rejects: Dataset,
    validation_accepts: Dataset,
    validation_rejects: Dataset,
    holdout: Dataset,
    sealed: SealedLabels,
}

impl Split {
    /// Assembles a split from observed parts (real-data mode: no sealed
    /// labels exist).
    pub fn from_observed(
        train_accepts: Dataset,
        rejects: Dataset,
        validation_accepts: Dataset,
        validation_rejects: Dataset,
        holdout: Dataset,
    ) -> Result<Self> {
        Self::assemble(
            train_accepts,
            rejects,
            validation_accepts,
            validation_rejects,
            holdout,
            SealedLabels::default(),
        )
    }

    pub(crate) fn assemble(
        train_accepts: Dataset,
        rejects: Dataset,
        validation_accepts: Dataset,
        validation_rejects: Dataset,
        holdout: Dataset,
        sealed: SealedLabels,
    ) -> Result<Self> {
        train_accepts.require_labels()?;
        validation_accepts.require_labels()?;
        holdout.require_labels()?;
        let k = train_accepts.n_features();
        for (name, d) in [
            ("rejects", &rejects),
            ("validation_accepts", &validation_accepts),
            ("validation_rejects", &validation_rejects),
            ("holdout", &holdout),
        ] {
            if d.n_features() != k {
                return Err(Error::Shape(format!(
                    "{name} has {} features, train_accepts {k}",
                    d.n_features()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for d in [
            &train_accepts,
            &rejects,
            &validation_accepts,
            &validation_rejects,
            &holdout,
        ] {
            for id in d.ids() {
                if !seen.insert(*id) {
                    return Err(Error::DuplicateId(id.to_string()));
                }
            }
        }
        Ok(Split {
            train_accepts,
            rejects: rejects.without_labels(),
            validation_accepts,
            validation_rejects: validation_rejects.without_labels(),
            holdout: holdout.into_ground_truth(),
            sealed,
        })
    }

    pub fn train_accepts(&self) -> &Dataset {
        &self.train_accepts
    }

    /// Training rejects, unlabeled.
    pub fn rejects(&self) -> &Dataset {
        &self.rejects
    }

    pub fn validation_accepts(&self) -> &Dataset {
        &self.validation_accepts
    }

    /// Validation rejects, unlabeled.
    pub fn validation_rejects(&self) -> &Dataset {
        &self.validation_rejects
    }

    pub fn holdout(&self) -> &Dataset {
        &self.holdout
    }

    pub fn has_sealed_labels(&self) -> bool {
        !self.sealed.is_empty()
    }

    pub fn sealed(&self, _access: &OracleAccess) -> &SealedLabels {
        &self.sealed
    }

    /// Sealed ground truth of `rejects()`, if the split came from a
    /// simulation.
    pub fn sealed_reject_labels(&self, access: &OracleAccess) -> Option<Vec<u8>> {
        if self.sealed.is_empty() {
            return None;
        }
        self.sealed.labels_for(&self.rejects, access)
    }

    pub fn sealed_validation_labels(&self, access: &OracleAccess) -> Option<Vec<u8>> {
        if self.sealed.is_empty() {
            return None;
        }
        self.sealed.labels_for(&self.validation_rejects, access)
    }
}

/// Splits a fully labeled sample with acceptance flags into training,
/// validation and holdout parts.
///
/// Accepts and rejects are each divided by `fractions`, stratified by label.
/// The holdout receives both accepts and rejects in population proportion
/// and is therefore unbiased; training and validation rejects have their
/// labels sealed.
pub fn partition(d: &Dataset, fractions: Fractions, seed: RngSeed) -> Result<Split> {
    fractions.validate()?;
    let y = d.require_labels()?;
    let a = d
        .accepted()
        .ok_or_else(|| Error::InvalidArgument("partition needs accepted flags".into()))?;
    let accept_rows: Vec<usize> = (0..d.n_rows()).filter(|&i| a[i] == 1).collect();
    let reject_rows: Vec<usize> = (0..d.n_rows()).filter(|&i| a[i] == 0).collect();

    let acc_parts = stratified_parts(&accept_rows, y, &fractions.as_array(), seed.substream(1));
    let rej_parts = stratified_parts(&reject_rows, y, &fractions.as_array(), seed.substream(2));
    let names = ["train", "validation", "holdout"];
    for p in 0..3 {
        if acc_parts[p].is_empty() {
            return Err(Error::EmptyPart(names[p]));
        }
    }

    let train_accepts = d.select(&acc_parts[0]);
    let validation_accepts = d.select(&acc_parts[1]);
    let rejects_truth = d.select(&rej_parts[0]);
    let val_rejects_truth = d.select(&rej_parts[1]);
    let mut hold_idx = acc_parts[2].clone();
    hold_idx.extend_from_slice(&rej_parts[2]);
    hold_idx.sort_unstable();
    let holdout = d.select(&hold_idx);

    let sealed = SealedLabels::from_dataset(&rejects_truth)?
        .merge(SealedLabels::from_dataset(&val_rejects_truth)?);
    Split::assemble(
        train_accepts,
        rejects_truth,
        validation_accepts,
        val_rejects_truth,
        holdout,
        sealed,
    )
}

/// Divides `rows` into parts sized by largest remainder, dealing a
/// label-sorted shuffled sequence to the part with the largest deficit so
/// that every part mirrors the overall class mix.
pub(crate) fn stratified_parts(
    rows: &[usize],
    labels: &[u8],
    fractions: &[f64],
    seed: RngSeed,
) -> Vec<Vec<usize>> {
    let mut rng = seed.rng();
    let n = rows.len();
    let targets = largest_remainder(n, fractions);
    let mut bads: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == 1).collect();
    let mut goods: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == 0).collect();
    bads.shuffle(&mut rng);
    goods.shuffle(&mut rng);
    let order: Vec<usize> = bads.into_iter().chain(goods).collect();

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (pos, row) in order.into_iter().enumerate() {
        let progress = (pos + 1) as f64 / n as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (p, &t) in targets.iter().enumerate() {
            if parts[p].len() >= t {
                continue;
            }
            let deficit = t as f64 * progress - parts[p].len() as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = p;
            }
        }
        parts[best].push(row);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Integer sizes summing to `n`, proportional to `fractions`.
pub(crate) fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &p in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[p] > 0.0 {
            sizes[p] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Resamples `d` with replacement. Row ids carry the draw position so
/// repeated source rows remain distinguishable.
pub fn bootstrap(d: &Dataset, seed: RngSeed) -> Result<Dataset> {
    let n = d.n_rows();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap of an empty dataset".into(),
        ));
    }
    let mut rng = seed.rng();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let ids = idx
        .iter()
        .enumerate()
        .map(|(draw, &i)| RowId {
            base: d.ids()[i].base,
            draw: Some(draw as u32),
        })
        .collect();
    d.select(&idx).with_ids(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn population(n: usize, accept_every: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 2, |r, c| (r * 7 + c * 3) as f64 % 11.0);
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 10 < 3)).collect();
        let a: Vec<u8> = (0..n).map(|i| u8::from(i % accept_every != 0)).collect();
        Dataset::new(x, Some(y))
            .unwrap()
            .with_accepted(Some(a))
            .unwrap()
            .into_ground_truth()
    }

    fn all_accepted(n: usize) -> Dataset {
        let d = population(n, 1);
        let a = vec![1; n];
        d.with_accepted(Some(a)).unwrap()
    }

    #[test]
    fn sizes_follow_fractions() {
        let d = all_accepted(100);
        let s = partition(
            &d,
            Fractions::new(0.5, 0.25, 0.25).unwrap(),
            RngSeed::new(1),
        )
        .unwrap();
        assert_eq!(s.train_accepts().n_rows(), 50);
        assert_eq!(s.validation_accepts().n_rows(), 25);
        assert_eq!(s.holdout().n_rows(), 25);
    }

    #[test]
    fn same_seed_same_split() {
        let d = population(300, 4);
        let f = Fractions::new(0.6, 0.2, 0.2).unwrap();
        let a = partition(&d, f, RngSeed::new(9)).unwrap();
        let b = partition(&d, f, RngSeed::new(9)).unwrap();
        assert_eq!(a.train_accepts(), b.train_accepts());
        assert_eq!(a.rejects(), b.rejects());
        assert_eq!(a.holdout(), b.holdout());
        let c = partition(&d, f, RngSeed::new(10)).unwrap();
        assert_ne!(a.train_accepts().ids(), c.train_accepts().ids());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(Fractions::new(0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn empty_part_is_an_error() {
        let d = all_accepted(3);
        let r = partition(
            &d,
            Fractions::new(0.9, 0.05, 0.05).unwrap(),
            RngSeed::new(1),
        );
        assert!(matches!(r, Err(Error::EmptyPart(_))));
    }

    #[test]
    fn stratification_bound() {
        let d = population(1000, 3);
        let s = partition(&d, Fractions::new(0.5, 0.3, 0.2).unwrap(), RngSeed::new(4)).unwrap();
        let tr = s.train_accepts().bad_rate().unwrap();
        let va = s.validation_accepts().bad_rate().unwrap();
        let m = s
            .train_accepts()
            .n_rows()
            .min(s.validation_accepts().n_rows());
        assert!((tr - va).abs() <= 1.0 / m as f64, "{tr} vs {va}");
    }

    #[test]
    fn parts_disjoint_and_rejects_sealed() {
        let d = population(200, 4);
        let s = partition(
            &d,
            Fractions::new(0.5, 0.25, 0.25).unwrap(),
            RngSeed::new(2),
        )
        .unwrap();
        assert!(s.rejects().labels().is_none());
        assert!(s.validation_rejects().labels().is_none());
        let total = s.train_accepts().n_rows()
            + s.rejects().n_rows()
            + s.validation_accepts().n_rows()
            + s.validation_rejects().n_rows()
            + s.holdout().n_rows();
        assert_eq!(total, 200);
        let access = OracleAccess::grant("test");
        let truth = s.sealed_reject_labels(&access).unwrap();
        assert_eq!(truth.len(), s.rejects().n_rows());
    }

    #[test]
    fn bootstrap_single_row() {
        let d = all_accepted(1);
        let b = bootstrap(&d, RngSeed::new(3)).unwrap();
        assert_eq!(b.n_rows(), 1);
        assert_eq!(b.ids()[0].base, 0);
        assert_eq!(b.ids()[0].draw, Some(0));
    }

    #[test]
    fn bootstrap_unique_fraction_near_one_minus_inv_e() {
        let d = all_accepted(1000);
        let b = bootstrap(&d, RngSeed::new(11)).unwrap();
        let uniq: std::collections::HashSet<u64> = b.ids().iter().map(|id| id.base).collect();
        let frac = uniq.len() as f64 / 1000.0;
        let expected = 1.0 - (-1.0f64).exp();
        assert!((frac - expected).abs() < 0.03, "{frac}");
    }

    #[test]
    fn bootstrap_streams_differ() {
        let d = all_accepted(50);
        let a = bootstrap(&d, RngSeed::with_stream(3, 0)).unwrap();
        let b = bootstrap(&d, RngSeed::with_stream(3, 1)).unwrap();
        let ba: Vec<u64> = a.ids().iter().map(|i| i.base).collect();
        let bb: Vec<u64> = b.ids().iter().map(|i| i.base).collect();
        assert_ne!(ba, bb);
    }

    #[test]
    fn largest_remainder_exact_totals() {
        assert_eq!(largest_remainder(100, &[0.5, 0.25, 0.25]), vec![50, 25, 25]);
        assert_eq!(
            largest_remainder(10, &[1.0 / 3.0; 3]).iter().sum::<usize>(),
            10
        );
    }
}
