use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::probit::normal_cdf;
use super::sigmoid;

/// Column means and scales used to standardize inputs of linear models.
/// Constant columns get scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            scale.push(if s > 1e-12 { s } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn identity(k: usize) -> Self {
        Standardizer {
            mean: vec![0.0; k],
            scale: vec![1.0; k],
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
            (x[(r, c)] - self.mean[c]) / self.scale[c]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Probit,
}

/// Generalized linear model on standardized features:
/// `P(y=1|x) = link⁻¹(intercept + Σ coef_j (x_j − mean_j)/scale_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub standardizer: Standardizer,
    pub link: Link,
}

impl LinearModel {
    /// Model given directly on the original feature scale.
    pub fn from_original(intercept: f64, coef: Vec<f64>, link: Link) -> Self {
        let k = coef.len();
        LinearModel {
            intercept,
            coef,
            standardizer: Standardizer::identity(k),
            link,
        }
    }

    pub fn linear_index(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let s = &self.standardizer;
        (0..x.nrows())
            .map(|r| {
                let mut eta = self.intercept;
                for (c, w) in self.coef.iter().enumerate() {
                    eta += w * (x[(r, c)] - s.mean[c]) / s.scale[c];
                }
                eta
            })
            .collect()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let inv = match self.link {
            Link::Logit => sigmoid,
            Link::Probit => normal_cdf,
        };
        self.linear_index(x).into_iter().map(inv).collect()
    }

    /// `[intercept, w_1, .., w_k]` on the original feature scale.
    pub fn original_coefficients(&self) -> Vec<f64> {
        let s = &self.standardizer;
        let mut b0 = self.intercept;
        let mut out = vec![0.0];
        for (j, w) in self.coef.iter().enumerate() {
            b0 -= w * s.mean[j] / s.scale[j];
            out.push(w / s.scale[j]);
        }
        out[0] = b0;
        out
    }

    /// Count of coefficients with magnitude above `tol`, intercept excluded.
    pub fn nonzero_count(&self, tol: f64) -> usize {
        self.coef.iter().filter(|w| w.abs() > tol).count()
    }
}
