//! Loan economics: per-loan profit, profit comparisons across methods and
//! acceptance-rate policy selection.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RngSeed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoanEconomics {
    pub principal_mean: f64,
    pub principal_sd: f64,
    pub interest_mean: f64,
    pub interest_sd: f64,
    pub lgd_grid: Vec<f64>,
    pub acceptance_grid: Vec<f64>,
    pub n_draws: usize,
    /// Applicant volume that an acceptance rate is applied to.
    pub population: usize,
}

impl Default for LoanEconomics {
    fn default() -> Self {
        LoanEconomics {
            principal_mean: 375.0,
            principal_sd: 75.0,
            interest_mean: 0.1733,
            interest_sd: 0.03,
            lgd_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            acceptance_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            n_draws: 10_000,
            population: 10_000,
        }
    }
}

impl LoanEconomics {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: &[f64]| !v.is_empty() && v.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&self.lgd_grid) {
            return Err(Error::config(
                "econ.lgd_grid",
                "values must lie in [0,1] and the grid must be nonempty",
            ));
        }
        if !unit(&self.acceptance_grid) {
            return Err(Error::config(
                "econ.acceptance_grid",
                "values must lie in [0,1] and the grid must be nonempty",
            ));
        }
        if self.n_draws == 0 {
            return Err(Error::config("econ.n_draws", "must be >= 1"));
        }
        if self.population == 0 {
            return Err(Error::config("econ.population", "must be >= 1"));
        }
        if !(self.principal_mean > 0.0 && self.principal_sd >= 0.0) {
            return Err(Error::config(
                "econ.principal_mean",
                "mean must be > 0 and sd >= 0",
            ));
        }
        if !(self.interest_mean > 0.0 && self.interest_sd >= 0.0) {
            return Err(Error::config(
                "econ.interest_mean",
                "mean must be > 0 and sd >= 0",
            ));
        }
        Ok(())
    }
}

/// Expected profit of one loan with principal `a`, interest `i`, default
/// probability `pd` and loss given default `lgd`.
pub fn profit_per_loan(pd: f64, a: f64, i: f64, lgd: f64) -> f64 {
    pd * a * (1.0 + i) * (1.0 - lgd) + (1.0 - pd) * a * (1.0 + i) - a
}

/// Normal draw conditioned on being positive (rejection sampling).
fn positive_normal(mean: f64, sd: f64, rng: &mut impl rand::Rng) -> Result<f64> {
    if sd == 0.0 {
        return Ok(mean);
    }
    let dist = Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 0..10_000 {
        let v = dist.sample(rng);
        if v > 0.0 {
            return Ok(v);
        }
    }
    Err(Error::InvalidArgument(format!(
        "N({mean}, {sd}) truncated at zero has negligible mass"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactRow {
    pub lgd: f64,
    pub method: String,
    pub profit: f64,
    /// Profit minus the baseline method's profit.
    pub incremental: f64,
    /// Incremental profit relative to the mean principal.
    pub margin: f64,
}

/// Average per-loan profit of each method over its default-rate estimates
/// and `econ.n_draws` draws of principal and interest, for every LGD on the
/// grid. All methods share the same draws.
pub fn business_impact(
    estimates: &[(String, Vec<f64>)],
    baseline: &str,
    econ: &LoanEconomics,
    seed: RngSeed,
) -> Result<Vec<ImpactRow>> {
    econ.validate()?;
    if !estimates.iter().any(|(m, _)| m == baseline) {
        return Err(Error::InvalidArgument(format!(
            "baseline {baseline:?} has no estimates"
        )));
    }
    for (m, v) in estimates {
        if v.is_empty() || v.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "estimates of {m} must be nonempty and in [0,1]"
            )));
        }
    }
    let mut rng = seed.rng();
    let draws: Vec<(f64, f64)> = (0..econ.n_draws)
        .map(|_| {
            Ok((
                positive_normal(econ.principal_mean, econ.principal_sd, &mut rng)?,
                positive_normal(econ.interest_mean, econ.interest_sd, &mut rng)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mean_a = draws.iter().map(|d| d.0).sum::<f64>() / draws.len() as f64;

    let mut rows = Vec::new();
    for &lgd in &econ.lgd_grid {
        // profit is affine in pd, so the mean over estimates can be taken
        // inside each draw
        let profits: Vec<(String, f64)> = estimates
            .iter()
            .map(|(m, v)| {
                let pd = v.iter().sum::<f64>() / v.len() as f64;
                let p = draws
                    .iter()
                    .map(|&(a, i)| profit_per_loan(pd, a, i, lgd))
                    .sum::<f64>()
                    / draws.len() as f64;
                (m.clone(), p)
            })
            .collect();
        let base = profits
            .iter()
            .find(|(m, _)| m == baseline)
            .map(|p| p.1)
            .unwrap_or(0.0);
        rows.extend(profits.into_iter().map(|(method, profit)| ImpactRow {
            lgd,
            method,
            profit,
            incremental: profit - base,
            margin: (profit - base) / mean_a,
        }));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub lgd: f64,
    pub strategy: String,
    pub chosen_rate: f64,
    pub estimated_profit: f64,
    /// Profit at the chosen rate under the true bad rates.
    pub realized_profit: f64,
    /// Another rate attained the same estimated profit.
    pub tie: bool,
}

/// Total profit of accepting `rate · population` applicants whose default
/// probability is `pd`, at mean principal and interest.
pub fn policy_profit(rate: f64, pd: f64, lgd: f64, econ: &LoanEconomics) -> f64 {
    rate * econ.population as f64
        * profit_per_loan(pd, econ.principal_mean, econ.interest_mean, lgd)
}

/// For each strategy and LGD, the acceptance rate with the highest
/// estimated profit (lowest rate on ties) and its realized profit.
///
/// `estimates[s].1[r]` is strategy `s`'s bad-rate estimate at
/// `econ.acceptance_grid[r]`; `truth` is aligned the same way.
pub fn policy_selection(
    estimates: &[(String, Vec<f64>)],
    truth: &[f64],
    econ: &LoanEconomics,
) -> Result<Vec<PolicyRow>> {
    econ.validate()?;
    let rates = &econ.acceptance_grid;
    if truth.len() != rates.len() || estimates.iter().any(|(_, v)| v.len() != rates.len()) {
        return Err(Error::Shape(
            "estimates and truth must align with the acceptance grid".into(),
        ));
    }
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]));
    let mut rows = Vec::new();
    for &lgd in &econ.lgd_grid {
        for (name, est) in estimates {
            let mut best: Option<(usize, f64)> = None;
            let mut tie = false;
            for &r in &order {
                let p = policy_profit(rates[r], est[r], lgd, econ);
                match best {
                    None => best = Some((r, p)),
                    Some((_, bp)) => {
                        // relative to the largest attainable profit
                        let tol = 1e-9 * econ.population as f64 * econ.principal_mean;
                        if p > bp + tol {
                            best = Some((r, p));
                            tie = false;
                        } else if (p - bp).abs() <= tol {
                            tie = true;
                        }
                    }
                }
            }
            let (r, p) = best.expect("acceptance grid is nonempty");
            if tie {
                log::info!(
                    "policy tie for {name} at lgd {lgd}; keeping rate {}",
                    rates[r]
                );
            }
            rows.push(PolicyRow {
                lgd,
                strategy: name.clone(),
                chosen_rate: rates[r],
                estimated_profit: p,
                realized_profit: policy_profit(rates[r], truth[r], lgd, econ),
                tie,
            });
        }
    }
    Ok(rows)
}

/// Realized profit of each strategy minus that of `benchmark`, per LGD.
pub fn policy_increments(rows: &[PolicyRow], benchmark: &str) -> Vec<(f64, String, f64)> {
    rows.iter()
        .filter_map(|r| {
            let b = rows
                .iter()
                .find(|o| o.strategy == benchmark && o.lgd == r.lgd)?;
            Some((
                r.lgd,
                r.strategy.clone(),
                r.realized_profit - b.realized_profit,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert!((profit_per_loan(0.0, 100.0, 0.2, 0.7) - 20.0).abs() < 1e-9);
        assert!((profit_per_loan(1.0, 100.0, 0.2, 1.0) + 100.0).abs() < 1e-9);
        assert!((profit_per_loan(0.5, 100.0, 0.2, 0.5) + 10.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_draws_and_baseline() {
        let econ = LoanEconomics {
            principal_sd: 0.0,
            interest_sd: 0.0,
            lgd_grid: vec![1.0],
            n_draws: 3,
            ..LoanEconomics::default()
        };
        let est = vec![
            ("ignore".to_string(), vec![0.0, 0.0]),
            ("m".to_string(), vec![1.0, 1.0]),
        ];
        let rows = business_impact(&est, "ignore", &econ, RngSeed::new(0)).unwrap();
        assert!((rows[0].profit - 375.0 * 0.1733).abs() < 1e-9);
        assert!((rows[1].profit + 375.0).abs() < 1e-9);
        assert_eq!(rows[0].incremental, 0.0);
        assert!(business_impact(&est, "basl", &econ, RngSeed::new(0)).is_err());
    }

    #[test]
    fn truncated_draws_are_positive() {
        let mut rng = RngSeed::new(3).rng();
        for _ in 0..1000 {
            assert!(positive_normal(1.0, 5.0, &mut rng).unwrap() > 0.0);
        }
    }

    #[test]
    fn accurate_estimates_give_zero_increment() {
        let econ = LoanEconomics::default();
        let truth = vec![0.05, 0.08, 0.12, 0.16, 0.2];
        let est = vec![
            ("a".to_string(), truth.clone()),
            ("b".to_string(), truth.clone()),
        ];
        let rows = policy_selection(&est, &truth, &econ).unwrap();
        assert!(policy_increments(&rows, "a").iter().all(|r| r.2 == 0.0));
    }

    #[test]
    fn ties_prefer_lower_rate() {
        let econ = LoanEconomics {
            acceptance_grid: vec![0.2, 0.1],
            lgd_grid: vec![0.5],
            ..LoanEconomics::default()
        };
        // zero per-loan profit at both rates
        let be = econ.interest_mean / (0.5 * (1.0 + econ.interest_mean));
        let rows = policy_selection(&[("s".into(), vec![be, be])], &[be, be], &econ).unwrap();
        assert_eq!(rows[0].chosen_rate, 0.1);
        assert!(rows[0].tie);
    }
}
