use nalgebra::DMatrix;

use super::linear::{LinearModel, Link, Standardizer};
use super::{sigmoid, weighted_rate, FitOptions, Model, Scorecard, TrainingMeta};
use crate::data::{Dataset, RngSeed};
use crate::error::{Error, Result};

/// Log-spaced penalty grid searched by [`select_l1_lambda`].
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Weighted mean logistic loss plus `lambda · ‖coef‖₁` on standardized
/// features (intercept unpenalized).
pub fn l1_objective(
    z: &DMatrix<f64>,
    y: &[u8],
    w: &[f64],
    intercept: f64,
    coef: &[f64],
    lambda: f64,
) -> f64 {
    let total: f64 = w.iter().sum();
    let mut loss = 0.0;
    for r in 0..z.nrows() {
        let mut eta = intercept;
        for (c, b) in coef.iter().enumerate() {
            eta += b * z[(r, c)];
        }
        loss += w[r] * log1p_exp(eta) - w[r] * y[r] as f64 * eta;
    }
    loss / total + lambda * coef.iter().map(|b| b.abs()).sum::<f64>()
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Problem<'a> {
    z: &'a DMatrix<f64>,
    y: &'a [u8],
    w: &'a [f64],
    total: f64,
}

impl Problem<'_> {
    /// Smooth loss and its gradient at `beta = [intercept, coef..]`.
    fn loss_grad(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let k = self.z.ncols();
        let mut grad = vec![0.0; k + 1];
        let mut loss = 0.0;
        for r in 0..self.z.nrows() {
            let mut eta = beta[0];
            for c in 0..k {
                eta += beta[c + 1] * self.z[(r, c)];
            }
            let yr = self.y[r] as f64;
            loss += self.w[r] * (log1p_exp(eta) - yr * eta);
            let g = self.w[r] * (sigmoid(eta) - yr);
            grad[0] += g;
            for c in 0..k {
                grad[c + 1] += g * self.z[(r, c)];
            }
        }
        for g in &mut grad {
            *g /= self.total;
        }
        (loss / self.total, grad)
    }

    fn loss(&self, beta: &[f64]) -> f64 {
        let k = self.z.ncols();
        let mut loss = 0.0;
        for r in 0..self.z.nrows() {
            let mut eta = beta[0];
            for c in 0..k {
                eta += beta[c + 1] * self.z[(r, c)];
            }
            loss += self.w[r] * (log1p_exp(eta) - self.y[r] as f64 * eta);
        }
        loss / self.total
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn penalty(beta: &[f64], lambda: f64) -> f64 {
    lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

/// L1-penalized logistic regression by accelerated proximal gradient with
/// backtracking line search and adaptive restart.
///
/// Minimizes the weighted mean negative log-likelihood plus
/// `opts.l1_lambda · ‖w‖₁` on internally standardized features. Iteration
/// stops when the objective changes by less than `opts.tol` (relative) or
/// after `opts.max_iter` steps; a final Newton polish of the unpenalized
/// intercept makes the mean prediction match the weighted base rate.
pub fn fit_l1_logistic(d: &Dataset, opts: &FitOptions) -> Result<Scorecard> {
    opts.validate()?;
    d.require_both_classes()?;
    let y = d.require_labels()?;
    let n = d.n_rows();
    let k = d.n_features();
    let w = opts.normalized_weights(n)?;
    let standardizer = Standardizer::fit(d.features());
    let z = standardizer.transform(d.features());
    let problem = Problem {
        z: &z,
        y,
        w: &w,
        total: w.iter().sum(),
    };
    let lambda = opts.l1_lambda;

    let base = weighted_rate(y, &w);
    let mut beta = vec![0.0; k + 1];
    beta[0] = (base / (1.0 - base)).ln();
    let mut momentum = beta.clone();
    let mut t_acc = 1.0f64;
    let mut step = 4.0 / (k as f64 + 1.0);
    let mut obj = problem.loss(&beta) + penalty(&beta, lambda);

    for _ in 0..opts.max_iter {
        let (f_m, g_m) = problem.loss_grad(&momentum);
        let next = loop {
            let cand: Vec<f64> = (0..=k)
                .map(|j| {
                    let v = momentum[j] - step * g_m[j];
                    if j == 0 {
                        v
                    } else {
                        soft_threshold(v, step * lambda)
                    }
                })
                .collect();
            let f_c = problem.loss(&cand);
            let mut quad = f_m;
            let mut sq = 0.0;
            for j in 0..=k {
                let diff = cand[j] - momentum[j];
                quad += g_m[j] * diff;
                sq += diff * diff;
            }
            quad += sq / (2.0 * step);
            if f_c <= quad + 1e-15 * f_c.abs() || step < 1e-12 {
                break (cand, f_c);
            }
            step *= 0.5;
        };
        let (cand, f_c) = next;
        let new_obj = f_c + penalty(&cand, lambda);
        if new_obj > obj {
            // restart momentum from the current iterate
            momentum = beta.clone();
            t_acc = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        let factor = (t_acc - 1.0) / t_next;
        momentum = (0..=k)
            .map(|j| cand[j] + factor * (cand[j] - beta[j]))
            .collect();
        t_acc = t_next;
        let change = (obj - new_obj).abs();
        beta = cand;
        obj = new_obj;
        if change <= opts.tol * obj.abs().max(1.0) {
            break;
        }
    }

    polish_intercept(&problem, &mut beta);

    let model = LinearModel {
        intercept: beta[0],
        coef: beta[1..].to_vec(),
        standardizer,
        link: Link::Logit,
    };
    Ok(Scorecard::new(
        Model::L1Logistic(model),
        k,
        TrainingMeta {
            n_train: n,
            weighted: opts.sample_weights.is_some(),
            seed: opts.seed,
        },
    ))
}

/// Newton steps on the intercept alone until its gradient vanishes.
fn polish_intercept(problem: &Problem<'_>, beta: &mut [f64]) {
    let k = problem.z.ncols();
    let offsets: Vec<f64> = (0..problem.z.nrows())
        .map(|r| (0..k).map(|c| beta[c + 1] * problem.z[(r, c)]).sum())
        .collect();
    for _ in 0..50 {
        let mut g = 0.0;
        let mut h = 0.0;
        for (r, off) in offsets.iter().enumerate() {
            let p = sigmoid(beta[0] + off);
            g += problem.w[r] * (p - problem.y[r] as f64);
            h += problem.w[r] * p * (1.0 - p);
        }
        if h <= 0.0 {
            break;
        }
        let delta = g / h;
        beta[0] -= delta;
        if delta.abs() < 1e-14 {
            break;
        }
    }
}

/// Chooses the penalty from `grid` by log-loss on a stratified 25% split of
/// `d`, then returns it.
pub fn select_l1_lambda(
    d: &Dataset,
    grid: &[f64],
    opts: &FitOptions,
    seed: RngSeed,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let y = d.require_labels()?;
    let rows: Vec<usize> = (0..d.n_rows()).collect();
    let parts = crate::data::stratified_parts(&rows, y, &[0.75, 0.25], seed);
    let train = d.select(&parts[0]);
    let valid = d.select(&parts[1]);
    if train.require_both_classes().is_err() || valid.is_empty() {
        return Ok(grid[grid.len() / 2]);
    }
    let vy = valid.require_labels()?;
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let o = FitOptions {
            l1_lambda: lambda,
            sample_weights: None,
            ..opts.clone()
        };
        let m = fit_l1_logistic(&train, &o)?;
        let p = m.predict_matrix(valid.features())?;
        let ll: f64 = p
            .iter()
            .zip(vy)
            .map(|(&pi, &yi)| {
                let pi = pi.clamp(1e-15, 1.0 - 1e-15);
                -(yi as f64 * pi.ln() + (1.0 - yi as f64) * (1.0 - pi).ln())
            })
            .sum::<f64>()
            / p.len() as f64;
        if ll < best.0 {
            best = (ll, lambda);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::predict_proba;
    use rand::Rng;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = RngSeed::new(seed).rng();
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<u8> = (0..n)
            .map(|r| {
                let eta = 1.5 * x[(r, 0)] - 1.0 * x[(r, 1)] + 0.0 * x[(r, 2)] - 0.3;
                u8::from(rng.random::<f64>() < sigmoid(eta))
            })
            .collect();
        Dataset::new(x, Some(y)).unwrap()
    }

    #[test]
    fn separable_two_points() {
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let d = Dataset::new(x, Some(vec![0, 1])).unwrap();
        let m = fit_l1_logistic(
            &d,
            &FitOptions {
                l1_lambda: 0.0,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let p = predict_proba(&m, &d).unwrap();
        assert!(p[0] < 0.1 && p[1] > 0.9, "{p:?}");
    }

    #[test]
    fn huge_penalty_gives_base_rate() {
        let d = synthetic(300, 1);
        let m = fit_l1_logistic(
            &d,
            &FitOptions {
                l1_lambda: 1e6,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(m.linear().unwrap().nonzero_count(0.0), 0);
        let base = d.bad_rate().unwrap();
        for p in predict_proba(&m, &d).unwrap() {
            assert!((p - base).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let d = Dataset::new(x, Some(vec![1, 1, 1])).unwrap();
        assert!(matches!(
            fit_l1_logistic(&d, &FitOptions::default()),
            Err(Error::SingleClass(1))
        ));
    }

    /// Independent solver: plain subgradient descent on the same objective
    /// with diminishing steps, tracking the best iterate.
    fn subgradient_oracle(z: &DMatrix<f64>, y: &[u8], lambda: f64, iters: usize) -> f64 {
        let (n, k) = (z.nrows(), z.ncols());
        let w = vec![1.0; n];
        let mut beta = vec![0.0; k + 1];
        let mut best = f64::INFINITY;
        for it in 0..iters {
            let mut g = vec![0.0; k + 1];
            for r in 0..n {
                let eta = beta[0] + (0..k).map(|c| beta[c + 1] * z[(r, c)]).sum::<f64>();
                let e = 1.0 / (1.0 + (-eta).exp()) - y[r] as f64;
                g[0] += e / n as f64;
                for c in 0..k {
                    g[c + 1] += e * z[(r, c)] / n as f64;
                }
            }
            for c in 0..k {
                g[c + 1] += lambda * beta[c + 1].signum() * f64::from(u8::from(beta[c + 1] != 0.0));
                if beta[c + 1] == 0.0 {
                    // minimum-norm subgradient at zero
                    let s = g[c + 1];
                    g[c + 1] = if s.abs() <= lambda {
                        0.0
                    } else {
                        s - lambda * s.signum()
                    };
                }
            }
            let step = 1.0 / (1.0 + it as f64).sqrt();
            for j in 0..=k {
                let old = beta[j];
                beta[j] -= step * g[j];
                if j > 0 && old != 0.0 && old.signum() != beta[j].signum() {
                    beta[j] = 0.0;
                }
            }
            let obj = l1_objective(z, y, &w, beta[0], &beta[1..], lambda);
            best = best.min(obj);
        }
        best
    }

    #[test]
    fn objective_matches_subgradient_oracle() {
        let d = synthetic(200, 7);
        let lambda = 0.1;
        let m = fit_l1_logistic(
            &d,
            &FitOptions {
                l1_lambda: lambda,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let lm = m.linear().unwrap();
        let z = lm.standardizer.transform(d.features());
        let y = d.labels().unwrap();
        let ours = l1_objective(&z, y, &vec![1.0; 200], lm.intercept, &lm.coef, lambda);
        let oracle = subgradient_oracle(&z, y, lambda, 60_000);
        assert!(ours <= oracle * (1.0 + 1e-4), "{ours} vs {oracle}");
        assert!((ours - oracle).abs() / oracle < 1e-4, "{ours} vs {oracle}");
    }

    #[test]
    fn calibrated_on_training_data() {
        let d = synthetic(400, 3);
        let m = fit_l1_logistic(
            &d,
            &FitOptions {
                l1_lambda: 0.01,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let p = predict_proba(&m, &d).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - d.bad_rate().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn lambda_selection_returns_grid_value() {
        let d = synthetic(400, 5);
        let l = select_l1_lambda(
            &d,
            &DEFAULT_LAMBDA_GRID,
            &FitOptions::default(),
            RngSeed::new(1),
        )
        .unwrap();
        assert!(DEFAULT_LAMBDA_GRID.contains(&l));
    }
}
