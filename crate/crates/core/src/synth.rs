//! Synthetic applicant generation from class-conditional Gaussian mixtures,
//! and the MNAR decision-overwriting mechanism.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngSeed, RowId};
use crate::error::{Error, Result};

/// One Gaussian component of a class-conditional mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `k x k` covariance.
    pub cov: Vec<Vec<f64>>,
}

impl Component {
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        let k = mean.len();
        let cov = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { variance } else { 0.0 })
                    .collect()
            })
            .collect();
        Component { weight, mean, cov }
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.mean.len();
        DMatrix::from_fn(k, k, |i, j| self.cov[i][j])
    }
}

/// Two Gaussian mixtures, one per class, plus the population bad rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub good: Vec<Component>,
    pub bad: Vec<Component>,
    pub bad_rate: f64,
}

impl Default for MixtureSpec {
    /// Three features, two components per class, 30% bad. Classes overlap
    /// heavily: a scorecard trained on the full population reaches an AUC
    /// of roughly .65 and a holdout ABR near .2.
    fn default() -> Self {
        MixtureSpec {
            good: vec![
                Component::isotropic(0.5, vec![0.0, 0.0, 0.0], 1.0),
                Component::isotropic(0.5, vec![0.2, -0.2, 0.1], 1.0),
            ],
            bad: vec![
                Component::isotropic(0.5, vec![0.4, 0.2, 0.3], 1.0),
                Component::isotropic(0.5, vec![0.3, 0.4, 0.4], 1.0),
            ],
            bad_rate: 0.3,
        }
    }
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.good.first().map(|c| c.mean.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bad_rate > 0.0 && self.bad_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bad_rate {} outside (0,1)",
                self.bad_rate
            )));
        }
        let k = self.dim();
        if k == 0 {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        }
        for (class, comps) in [("good", &self.good), ("bad", &self.bad)] {
            if comps.is_empty() {
                return Err(Error::InvalidArgument(format!("{class} mixture is empty")));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if comps.iter().any(|c| c.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "{class} component weights must be non-negative and sum to 1"
                )));
            }
            for c in comps {
                if c.mean.len() != k || c.cov.len() != k || c.cov.iter().any(|r| r.len() != k) {
                    return Err(Error::Shape(format!(
                        "{class} component is not {k}-dimensional"
                    )));
                }
                cholesky_with_jitter(&c.cov_matrix())?;
            }
        }
        Ok(())
    }

    /// Replaces every component covariance.
    pub fn with_covariance(mut self, cov: &DMatrix<f64>) -> Self {
        let rows: Vec<Vec<f64>> = (0..cov.nrows())
            .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
            .collect();
        for c in self.good.iter_mut().chain(self.bad.iter_mut()) {
            c.cov = rows.clone();
        }
        self
    }
}

/// Lower Cholesky factor, retrying once with `1e-8` diagonal jitter.
pub(crate) fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::NotPsd);
    }
    for i in 0..cov.nrows() {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                return Err(Error::NotPsd);
            }
        }
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let jittered = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * 1e-8;
    jittered.cholesky().map(|c| c.l()).ok_or(Error::NotPsd)
}

/// Draws `n` applicants with ids `0..n`. See [`sample_applicants_from`].
pub fn sample_applicants(spec: &MixtureSpec, n: usize, seed: RngSeed) -> Result<Dataset> {
    sample_applicants_from(spec, n, seed, 0)
}

/// Draws `n` applicants: labels are Bernoulli(`bad_rate`), features come
/// from the class mixture by component choice then Cholesky transform. Ids
/// start at `first_id`. No acceptance flags are set.
pub fn sample_applicants_from(
    spec: &MixtureSpec,
    n: usize,
    seed: RngSeed,
    first_id: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    spec.validate()?;
    let k = spec.dim();
    let factors = |comps: &[Component]| -> Result<Vec<(f64, DVector<f64>, DMatrix<f64>)>> {
        comps
            .iter()
            .map(|c| {
                Ok((
                    c.weight,
                    DVector::from_vec(c.mean.clone()),
                    cholesky_with_jitter(&c.cov_matrix())?,
                ))
            })
            .collect()
    };
    let good = factors(&spec.good)?;
    let bad = factors(&spec.bad)?;

    let mut rng = seed.rng();
    let mut x = DMatrix::zeros(n, k);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let is_bad = rng.random::<f64>() < spec.bad_rate;
        y.push(u8::from(is_bad));
        let comps = if is_bad { &bad } else { &good };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (i, (w, _, _)) in comps.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                pick = i;
                break;
            }
        }
        // Guard against the last component having zero weight.
        while comps[pick].0 == 0.0 && pick > 0 {
            pick -= 1;
        }
        let (_, mean, l) = &comps[pick];
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = mean + l * z;
        for c in 0..k {
            x[(r, c)] = v[c];
        }
    }
    let ids = (0..n as u64).map(|i| RowId::new(first_id + i)).collect();
    Dataset::from_parts(x, Some(y), None, ids, None)
}

/// Symmetric matrix with unit diagonal and off-diagonal entries uniform in
/// `[-range_max, range_max]`, before any projection.
pub(crate) fn raw_symmetric(k: usize, range_max: f64, seed: RngSeed) -> DMatrix<f64> {
    let mut rng = seed.rng();
    let mut m = DMatrix::identity(k, k);
    for i in 0..k {
        for j in 0..i {
            let v = rng.random_range(-range_max..=range_max);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Random covariance matrix whose off-diagonal spread grows with
/// `range_max`. The raw symmetric draw is projected to the PSD cone by
/// clipping eigenvalues at `1e-6`, then rescaled to unit diagonal.
pub fn random_covariances(k: usize, range_max: f64, seed: RngSeed) -> Result<DMatrix<f64>> {
    if !(range_max > 0.0) {
        return Err(Error::InvalidArgument("range_max must be positive".into()));
    }
    let raw = raw_symmetric(k, range_max, seed);
    let eig = SymmetricEigen::new(raw);
    let clipped = eig.eigenvalues.map(|v| v.max(1e-6));
    let psd = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let scale: Vec<f64> = (0..k).map(|i| psd[(i, i)].sqrt()).collect();
    let mut out = DMatrix::from_fn(k, k, |i, j| psd[(i, j)] / (scale[i] * scale[j]));
    for i in 0..k {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Missing-not-at-random configuration: hidden feature columns (0-based)
/// and the fraction of acceptance decisions overwritten per batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MnarSpec {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub overwrite_rate: f64,
}

impl MnarSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overwrite_rate) {
            return Err(Error::InvalidArgument(format!(
                "overwrite_rate {} outside [0,1]",
                self.overwrite_rate
            )));
        }
        if let Some(&d) = self.hidden_dims.iter().find(|&&d| d >= k) {
            return Err(Error::InvalidArgument(format!("hidden dim {d} >= {k}")));
        }
        if self.overwrite_rate > 0.0 && self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "overwriting needs a hidden feature".into(),
            ));
        }
        Ok(())
    }

    /// Columns a scorecard may see.
    pub fn visible_dims(&self, k: usize) -> Vec<usize> {
        (0..k).filter(|d| !self.hidden_dims.contains(d)).collect()
    }

    pub fn is_mar(&self) -> bool {
        self.hidden_dims.is_empty() && self.overwrite_rate == 0.0
    }
}

/// Overwrites a share of acceptance decisions.
///
/// `⌈overwrite_rate · #accepted⌉` accepted rows, chosen uniformly, become
/// rejects; the same number of originally rejected rows with the lowest
/// value of the first hidden feature become accepts. The count is clipped
/// to the number of rejects available. The acceptance total never changes.
pub fn apply_mnar(
    decisions: &[u8],
    batch: &Dataset,
    mnar: &MnarSpec,
    seed: RngSeed,
) -> Result<Vec<u8>> {
    if decisions.len() != batch.n_rows() {
        return Err(Error::Shape(format!(
            "{} decisions for {} rows",
            decisions.len(),
            batch.n_rows()
        )));
    }
    mnar.validate(batch.n_features())?;
    if mnar.overwrite_rate == 0.0 {
        return Ok(decisions.to_vec());
    }
    let hidden = mnar.hidden_dims[0];
    let accepted: Vec<usize> = (0..decisions.len())
        .filter(|&i| decisions[i] == 1)
        .collect();
    let mut rejected: Vec<usize> = (0..decisions.len())
        .filter(|&i| decisions[i] == 0)
        .collect();
    let mut count = (mnar.overwrite_rate * accepted.len() as f64 - 1e-9)
        .ceil()
        .max(0.0) as usize;
    if count > rejected.len() {
        log::warn!(
            "overwrite count {count} exceeds {} available rejects; clipping",
            rejected.len()
        );
        count = rejected.len();
    }
    let mut out = decisions.to_vec();
    let mut rng = seed.rng();
    for pos in sample(&mut rng, accepted.len(), count) {
        out[accepted[pos]] = 0;
    }
    let x = batch.features();
    rejected.sort_by(|&a, &b| x[(a, hidden)].total_cmp(&x[(b, hidden)]).then(a.cmp(&b)));
    for &r in rejected.iter().take(count) {
        out[r] = 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blob(bad_rate: f64) -> MixtureSpec {
        MixtureSpec {
            good: vec![Component::isotropic(1.0, vec![0.0, 0.0], 1.0)],
            bad: vec![Component::isotropic(1.0, vec![3.0, 3.0], 1.0)],
            bad_rate,
        }
    }

    #[test]
    fn law_of_large_numbers() {
        let d = sample_applicants(&two_blob(0.3), 100_000, RngSeed::new(5)).unwrap();
        let rate = d.bad_rate().unwrap();
        assert!((rate - 0.3).abs() < 0.005, "{rate}");
        for (class, mu) in [(0u8, 0.0), (1u8, 3.0)] {
            let idx = d.class_indices(class).unwrap();
            for c in 0..2 {
                let m: f64 =
                    idx.iter().map(|&i| d.features()[(i, c)]).sum::<f64>() / idx.len() as f64;
                assert!((m - mu).abs() < 0.02, "class {class} dim {c}: {m}");
            }
        }
    }

    #[test]
    fn zero_weight_component_is_inert() {
        let single = two_blob(0.5);
        let mut double = single.clone();
        double.good = vec![
            Component::isotropic(1.0, vec![0.0, 0.0], 1.0),
            Component::isotropic(0.0, vec![50.0, 50.0], 1.0),
        ];
        let a = sample_applicants(&single, 10_000, RngSeed::new(1)).unwrap();
        let b = sample_applicants(&double, 10_000, RngSeed::new(2)).unwrap();
        let col = |d: &Dataset| -> Vec<f64> {
            let mut v: Vec<f64> = d
                .class_indices(0)
                .unwrap()
                .iter()
                .map(|&i| d.features()[(i, 0)])
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let ks = ks_distance(&col(&a), &col(&b));
        assert!(ks < 0.02, "{ks}");
    }

    fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn deterministic() {
        let a = sample_applicants(&MixtureSpec::default(), 500, RngSeed::new(3)).unwrap();
        let b = sample_applicants(&MixtureSpec::default(), 500, RngSeed::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_psd_rejected() {
        let mut spec = two_blob(0.3);
        spec.good[0].cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            sample_applicants(&spec, 10, RngSeed::new(1)),
            Err(Error::NotPsd)
        ));
    }

    #[test]
    fn covariance_limits_and_psd() {
        let near_id = random_covariances(4, 1e-12, RngSeed::new(1)).unwrap();
        assert!((near_id - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-9);
        for s in 0..20 {
            let c = random_covariances(5, 2.0, RngSeed::new(s)).unwrap();
            assert!(cholesky_with_jitter(&c).is_ok());
            for i in 0..5 {
                assert!((c[(i, i)] - 1.0).abs() < 1e-12);
            }
        }
        let raw = raw_symmetric(2, 0.7, RngSeed::new(9));
        assert_eq!(raw[(0, 1)], raw[(1, 0)]);
        assert!(raw[(0, 1)].abs() <= 0.7);
    }

    fn batch_with_hidden(n: usize) -> Dataset {
        // column 1 is the hidden feature, equal to the row index reversed
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { r as f64 } else { (n - r) as f64 });
        Dataset::new(x, None).unwrap()
    }

    #[test]
    fn mnar_identity_at_zero_rate() {
        let d = batch_with_hidden(10);
        let dec = vec![1, 0, 1, 0, 0, 1, 0, 0, 0, 0];
        let spec = MnarSpec {
            hidden_dims: vec![1],
            overwrite_rate: 0.0,
        };
        assert_eq!(apply_mnar(&dec, &d, &spec, RngSeed::new(1)).unwrap(), dec);
    }

    #[test]
    fn mnar_full_overwrite() {
        let d = batch_with_hidden(100);
        let dec: Vec<u8> = (0..100).map(|i| u8::from(i < 10)).collect();
        let spec = MnarSpec {
            hidden_dims: vec![1],
            overwrite_rate: 1.0,
        };
        let out = apply_mnar(&dec, &d, &spec, RngSeed::new(1)).unwrap();
        // rejects 10..100 have hidden values 90..1; the ten lowest are rows 90..100
        let accepted: Vec<usize> = (0..100).filter(|&i| out[i] == 1).collect();
        assert_eq!(accepted, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn mnar_partial_count() {
        let d = batch_with_hidden(200);
        let dec: Vec<u8> = (0..200).map(|i| u8::from(i % 4 == 0)).collect();
        assert_eq!(dec.iter().filter(|&&v| v == 1).count(), 50);
        let spec = MnarSpec {
            hidden_dims: vec![1],
            overwrite_rate: 0.2,
        };
        let out = apply_mnar(&dec, &d, &spec, RngSeed::new(7)).unwrap();
        assert_eq!(out.iter().filter(|&&v| v == 1).count(), 50);
        let swapped_out = (0..200).filter(|&i| dec[i] == 1 && out[i] == 0).count();
        let swapped_in = (0..200).filter(|&i| dec[i] == 0 && out[i] == 1).count();
        assert_eq!((swapped_out, swapped_in), (10, 10));
    }
}
