use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngSeed};
use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points, used to normalize isolation depths.
pub fn harmonic_normalizer(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum INode {
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
        size: usize,
    },
    External {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ITree {
    nodes: Vec<INode>,
}

impl ITree {
    fn path_length(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        let mut i = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[i] {
                INode::External { size } => return depth + harmonic_normalizer(size),
                INode::Split {
                    dim,
                    value,
                    left,
                    right,
                    ..
                } => {
                    i = if x[(r, dim)] < value { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Isolation forest; [`NoveltyModel::score`] is in (0, 1) with higher
/// values for points easier to isolate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyModel {
    trees: Vec<ITree>,
    subsample_size: usize,
    n_features: usize,
}

impl NoveltyModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    pub fn score(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Shape(format!(
                "novelty model expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let c = harmonic_normalizer(self.subsample_size);
        let t = self.trees.len() as f64;
        Ok((0..x.nrows())
            .map(|r| {
                let e = self
                    .trees
                    .iter()
                    .map(|tr| tr.path_length(x, r))
                    .sum::<f64>()
                    / t;
                2f64.powf(-e / c)
            })
            .collect())
    }

    pub fn score_dataset(&self, d: &Dataset) -> Result<Vec<f64>> {
        self.score(d.features())
    }
}

/// Fits `n_trees` isolation trees, each on `subsample` rows drawn without
/// replacement, with depth capped at `ceil(log2(subsample))`.
pub fn fit_isolation_forest(
    d: &Dataset,
    n_trees: usize,
    subsample: usize,
    seed: RngSeed,
) -> Result<NoveltyModel> {
    let n = d.n_rows();
    if n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be >= 1".into()));
    }
    if subsample < 2 || subsample > n {
        return Err(Error::InvalidArgument(format!(
            "need n >= subsample >= 2, got n={n}, subsample={subsample}"
        )));
    }
    let x = d.features();
    let constant = (0..x.ncols()).all(|c| {
        let col = x.column(c);
        col.iter().all(|v| *v == col[0])
    });
    if constant {
        return Err(Error::ConstantFeatures);
    }
    let cap = (subsample as f64).log2().ceil() as usize;
    let trees = (0..n_trees)
        .map(|t| {
            let mut rng = seed.substream(t as u64).rng();
            let rows: Vec<usize> = sample(&mut rng, n, subsample).into_vec();
            let mut nodes = Vec::new();
            build(x, rows, 0, cap, &mut rng, &mut nodes);
            ITree { nodes }
        })
        .collect();
    Ok(NoveltyModel {
        trees,
        subsample_size: subsample,
        n_features: x.ncols(),
    })
}

fn build(
    x: &DMatrix<f64>,
    rows: Vec<usize>,
    depth: usize,
    cap: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<INode>,
) -> usize {
    let id = nodes.len();
    let size = rows.len();
    nodes.push(INode::External { size });
    if size <= 1 || depth >= cap {
        return id;
    }
    let ranges: Vec<(usize, f64, f64)> = (0..x.ncols())
        .filter_map(|c| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in &rows {
                lo = lo.min(x[(r, c)]);
                hi = hi.max(x[(r, c)]);
            }
            (hi > lo).then_some((c, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return id;
    }
    let (dim, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let mut value = rng.random_range(lo..hi);
    if value <= lo {
        // keep both sides nonempty
        value = f64::min(hi, lo + (hi - lo) * 0.5);
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[(i, dim)] < value);
    let left = build(x, l, depth + 1, cap, rng, nodes);
    let right = build(x, r, depth + 1, cap, rng, nodes);
    nodes[id] = INode::Split {
        dim,
        value,
        left,
        right,
        size,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn cloud(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngSeed::new(seed).rng();
        DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn normalizer_values() {
        assert_eq!(harmonic_normalizer(1), 0.0);
        assert_eq!(harmonic_normalizer(2), 1.0);
        let c256 = harmonic_normalizer(256);
        assert!((c256 - 10.2448).abs() < 1e-3, "{c256}");
    }

    #[test]
    fn planted_outlier_ranks_top_percent() {
        let mut x = cloud(999, 1);
        x = x.insert_row(999, 10.0);
        let d = Dataset::new(x, None).unwrap();
        let m = fit_isolation_forest(&d, 100, 256, RngSeed::new(2)).unwrap();
        let s = m.score_dataset(&d).unwrap();
        let rank = s.iter().filter(|&&v| v > s[999]).count();
        assert!(rank < 10, "outlier rank {rank}");
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cluster_member_is_inlier() {
        let d = Dataset::new(cloud(500, 3), None).unwrap();
        let m = fit_isolation_forest(&d, 100, 128, RngSeed::new(4)).unwrap();
        let centre = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(m.score(&centre).unwrap()[0] < 0.5);
    }

    #[test]
    fn deterministic_and_rejects_constant_input() {
        let d = Dataset::new(cloud(200, 5), None).unwrap();
        let a = fit_isolation_forest(&d, 20, 64, RngSeed::new(6)).unwrap();
        let b = fit_isolation_forest(&d, 20, 64, RngSeed::new(6)).unwrap();
        assert_eq!(a.score_dataset(&d).unwrap(), b.score_dataset(&d).unwrap());
        let c = Dataset::new(DMatrix::from_element(10, 2, 1.0), None).unwrap();
        assert!(matches!(
            fit_isolation_forest(&c, 5, 4, RngSeed::new(0)),
            Err(Error::ConstantFeatures)
        ));
    }
}
