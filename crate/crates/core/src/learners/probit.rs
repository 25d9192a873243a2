use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use super::linear::{LinearModel, Link, Standardizer};
use super::{weighted_rate, FitOptions, Model, Scorecard, TrainingMeta};
use crate::data::Dataset;
use crate::error::Result;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse Mills ratio `φ(x)/Φ(x)`, with an asymptotic expansion in the far
/// left tail where `Φ` underflows.
pub fn inverse_mills(x: f64) -> f64 {
    if x < -30.0 {
        let x2 = x * x;
        return -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2));
    }
    normal_pdf(x) / normal_cdf(x)
}

/// Probit estimates with standard errors on the original feature scale.
#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub scorecard: Scorecard,
    /// `[intercept, w_1, .., w_k]`.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub ridge: f64,
}

const SEPARATION_NORM: f64 = 1e3;

/// Probit maximum likelihood by Newton-Raphson with step halving.
///
/// The target is `d`'s label vector. If the coefficients diverge (complete
/// or quasi-complete separation) the fit is repeated with a `1e-6` ridge on
/// the slopes and a warning is logged.
pub fn fit_probit(d: &Dataset, opts: &FitOptions) -> Result<ProbitFit> {
    opts.validate()?;
    d.require_both_classes()?;
    let fit = newton(d, opts, 0.0)?;
    let norm = fit.coefficients.iter().map(|b| b * b).sum::<f64>().sqrt();
    if !fit.converged || !norm.is_finite() || norm > SEPARATION_NORM {
        log::warn!("probit separation detected (|w| = {norm:.3e}); refitting with 1e-6 ridge");
        return newton(d, opts, 1e-6).map(|f| f.into_fit());
    }
    Ok(fit.into_fit())
}

struct NewtonResult {
    scorecard: Scorecard,
    coefficients: Vec<f64>,
    std_errors: Vec<f64>,
    iterations: usize,
    ridge: f64,
    converged: bool,
}

impl NewtonResult {
    fn into_fit(self) -> ProbitFit {
        ProbitFit {
            scorecard: self.scorecard,
            coefficients: self.coefficients,
            std_errors: self.std_errors,
            iterations: self.iterations,
            ridge: self.ridge,
        }
    }
}

fn log_lik(z: &DMatrix<f64>, y: &[u8], w: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let mut ll = 0.0;
    for r in 0..z.nrows() {
        let eta = index(z, beta, r);
        let q = if y[r] == 1 { 1.0 } else { -1.0 };
        ll += w[r] * ln_normal_cdf(q * eta);
    }
    ll - 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

fn ln_normal_cdf(x: f64) -> f64 {
    if x < -30.0 {
        // ln Φ(x) ≈ ln φ(x) − ln(−x)
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    } else {
        normal_cdf(x).ln()
    }
}

fn index(z: &DMatrix<f64>, beta: &DVector<f64>, r: usize) -> f64 {
    let mut eta = beta[0];
    for c in 0..z.ncols() {
        eta += beta[c + 1] * z[(r, c)];
    }
    eta
}

fn newton(d: &Dataset, opts: &FitOptions, ridge: f64) -> Result<NewtonResult> {
    let y = d.require_labels()?;
    let n = d.n_rows();
    let k = d.n_features();
    let w = opts.normalized_weights(n)?;
    let standardizer = Standardizer::fit(d.features());
    let z = standardizer.transform(d.features());
    let p = k + 1;

    let base = weighted_rate(y, &w);
    let mut beta = DVector::zeros(p);
    beta[0] = inverse_normal_cdf(base);
    let mut ll = log_lik(&z, y, &w, &beta, ridge);
    let mut converged = false;
    let mut iterations = 0;
    let mut hess = DMatrix::zeros(p, p);

    for it in 0..opts.max_iter.min(200) {
        iterations = it + 1;
        let mut grad = DVector::zeros(p);
        hess = DMatrix::zeros(p, p);
        for r in 0..n {
            let eta = index(&z, &beta, r);
            let q = if y[r] == 1 { 1.0 } else { -1.0 };
            let m = inverse_mills(q * eta);
            let lam = q * m;
            let dlam = -m * (m + q * eta);
            for a in 0..p {
                let xa = if a == 0 { 1.0 } else { z[(r, a - 1)] };
                grad[a] += w[r] * lam * xa;
                for b in 0..=a {
                    let xb = if b == 0 { 1.0 } else { z[(r, b - 1)] };
                    hess[(a, b)] += w[r] * dlam * xa * xb;
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for a in 1..p {
            grad[a] -= ridge * beta[a];
            hess[(a, a)] -= ridge;
        }
        let neg = -hess.clone();
        let Some(chol) = neg.cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let cand_ll = log_lik(&z, y, &w, &cand, ridge);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let size = step.amax() * scale;
        if !accepted || beta.amax() > 1e6 {
            break;
        }
        if size < 1e-10 {
            converged = true;
            break;
        }
    }

    // Covariance of the standardized estimates, mapped to original scale.
    let info = -hess;
    let cov_std = info
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let mut t = DMatrix::zeros(p, p);
    t[(0, 0)] = 1.0;
    for j in 0..k {
        t[(0, j + 1)] = -standardizer.mean[j] / standardizer.scale[j];
        t[(j + 1, j + 1)] = 1.0 / standardizer.scale[j];
    }
    let cov = &t * cov_std * t.transpose();
    let std_errors = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    let model = LinearModel {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        standardizer,
        link: Link::Probit,
    };
    let coefficients = model.original_coefficients();
    Ok(NewtonResult {
        scorecard: Scorecard::new(
            Model::Probit(model),
            k,
            TrainingMeta {
                n_train: n,
                weighted: opts.sample_weights.is_some(),
                seed: opts.seed,
            },
        ),
        coefficients,
        std_errors,
        iterations,
        ridge,
        converged,
    })
}

/// Φ⁻¹ by bisection refined with Newton; only used for starting values.
fn inverse_normal_cdf(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngSeed;
    use crate::learners::predict_proba;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mills_closed_form_and_monotone() {
        assert!((inverse_mills(0.0) - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!(inverse_mills(-2.0) > inverse_mills(0.0));
        assert!(inverse_mills(0.0) > inverse_mills(2.0));
        // continuity across the asymptotic branch
        let a = inverse_mills(-30.0 + 1e-9);
        let b = inverse_mills(-30.0 - 1e-9);
        assert!((a - b).abs() / a < 1e-6, "{a} {b}");
    }

    #[test]
    fn intercept_only_calibration() {
        let x = DMatrix::from_element(100, 1, 1.0);
        let y: Vec<u8> = (0..100).map(|i| u8::from(i < 30)).collect();
        let d = Dataset::new(x, Some(y)).unwrap();
        let fit = fit_probit(&d, &FitOptions::default()).unwrap();
        let lm = fit.scorecard.linear().unwrap();
        assert!((normal_cdf(lm.intercept) - 0.30).abs() < 1e-6);
    }

    fn probit_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngSeed::new(seed).rng();
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|r| {
                let e: f64 = rng.sample(StandardNormal);
                u8::from(x[(r, 0)] - x[(r, 1)] + e > 0.0)
            })
            .collect();
        Dataset::new(x, Some(y)).unwrap()
    }

    #[test]
    fn recovers_known_coefficients() {
        let d = probit_data(500, 21);
        let fit = fit_probit(&d, &FitOptions::default()).unwrap();
        let truth = [0.0, 1.0, -1.0];
        for j in 0..3 {
            let z = (fit.coefficients[j] - truth[j]) / fit.std_errors[j];
            assert!(
                z.abs() < 3.0,
                "coef {j}: {} ± {}",
                fit.coefficients[j],
                fit.std_errors[j]
            );
        }
    }

    #[test]
    fn flipped_labels_negate_coefficients() {
        // symmetric design: every row appears with its mirror image
        let base = probit_data(200, 4);
        let x0 = base.features();
        let x = DMatrix::from_fn(400, 2, |r, c| {
            if r < 200 {
                x0[(r, c)]
            } else {
                -x0[(r - 200, c)]
            }
        });
        let y0 = base.labels().unwrap();
        let y: Vec<u8> = (0..400)
            .map(|r| if r < 200 { y0[r] } else { 1 - y0[r - 200] })
            .collect();
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let a = fit_probit(
            &Dataset::new(x.clone(), Some(y)).unwrap(),
            &FitOptions::default(),
        )
        .unwrap();
        let b = fit_probit(
            &Dataset::new(x, Some(flipped)).unwrap(),
            &FitOptions::default(),
        )
        .unwrap();
        for j in 0..3 {
            assert!((a.coefficients[j] + b.coefficients[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let x = DMatrix::from_row_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let d = Dataset::new(x, Some(vec![0, 0, 0, 1, 1, 1])).unwrap();
        let fit = fit_probit(&d, &FitOptions::default()).unwrap();
        assert_eq!(fit.ridge, 1e-6);
        let p = predict_proba(&fit.scorecard, &d).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p[0] < 0.5 && p[5] > 0.5);
    }
}
