use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::logistic::log1p_exp;
use super::{sigmoid, weighted_rate, FitOptions, Model, Scorecard, TrainingMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Minimum Hessian mass per child.
    pub min_child_weight: f64,
    /// Row fraction sampled without replacement for each tree.
    pub subsample: f64,
    /// L2 penalty on leaf values.
    pub l2: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.1,
            min_child_weight: 1.0,
            subsample: 0.8,
            l2: 1.0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::InvalidArgument("gbt.max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidArgument(
                "gbt.learning_rate must be in (0, 1]".into(),
            ));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidArgument(
                "gbt.subsample must be in (0, 1]".into(),
            ));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return Err(Error::InvalidArgument(
                "gbt.min_child_weight must be >= 0".into(),
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument("gbt.l2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree; node 0 is the root. Leaf values already include the
/// learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_value(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[(r, feature)] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    fn leaf_index(&self, x: &DMatrix<f64>, r: usize) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[(r, feature)] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + rec(t, left).max(rec(t, right)),
            }
        }
        rec(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_margin: f64,
    pub trees: Vec<Tree>,
    /// Weighted mean training log-loss after 0, 1, .., trees.len() trees.
    pub staged_loss: Vec<f64>,
}

impl GbtModel {
    pub fn margin(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|r| {
                let mut m = self.base_margin;
                for t in &self.trees {
                    m += t.leaf_value(x, r);
                }
                m
            })
            .collect()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.margin(x).into_iter().map(sigmoid).collect()
    }
}

fn mean_loss(margin: &[f64], y: &[u8], w: &[f64], total: f64) -> f64 {
    let mut s = 0.0;
    for r in 0..margin.len() {
        s += w[r] * (log1p_exp(margin[r]) - y[r] as f64 * margin[r]);
    }
    s / total
}

/// Gradient-boosted regression trees on weighted logistic loss.
///
/// Each tree is grown level-wise with exact greedy splits on the gradient
/// and Hessian of the current margin; leaves take the Newton value
/// `-G/(H + l2)` scaled by the learning rate. If a tree would raise the
/// full-sample training loss (possible under subsampling), its scale is
/// halved up to eight times and the tree is discarded if that fails.
pub fn fit_gbt(d: &Dataset, opts: &FitOptions) -> Result<Scorecard> {
    opts.validate()?;
    d.require_both_classes()?;
    let y = d.require_labels()?;
    let x = d.features();
    let n = d.n_rows();
    let w = opts.normalized_weights(n)?;
    let total: f64 = w.iter().sum();
    let p = &opts.gbt;

    let base = weighted_rate(y, &w);
    let base_margin = (base / (1.0 - base)).ln();
    let mut margin = vec![base_margin; n];
    let mut staged_loss = vec![mean_loss(&margin, y, &w, total)];
    let mut trees = Vec::with_capacity(p.n_trees);

    let order = presort(x);
    let n_sub = ((p.subsample * n as f64).floor() as usize).clamp(1, n);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for t in 0..p.n_trees {
        for r in 0..n {
            let pr = sigmoid(margin[r]);
            grad[r] = w[r] * (pr - y[r] as f64);
            hess[r] = w[r] * pr * (1.0 - pr);
        }
        let mut active = vec![n_sub == n; n];
        if n_sub < n {
            let mut rng = opts.seed.substream(t as u64).rng();
            for i in sample(&mut rng, n, n_sub) {
                active[i] = true;
            }
        }
        let Some(raw) = grow_tree(x, &order, &grad, &hess, &active, p) else {
            continue;
        };
        let leaf_of: Vec<usize> = (0..n).map(|r| raw.leaf_index(x, r)).collect();
        let prev = *staged_loss.last().unwrap();
        let mut scale = p.learning_rate;
        let mut accepted = None;
        for _ in 0..=8 {
            let tree = scaled(&raw, scale);
            let cand: Vec<f64> = (0..n)
                .map(|r| match tree.nodes[leaf_of[r]] {
                    TreeNode::Leaf { value } => margin[r] + value,
                    TreeNode::Split { .. } => unreachable!(),
                })
                .collect();
            let loss = mean_loss(&cand, y, &w, total);
            if loss <= prev {
                accepted = Some((tree, cand, loss));
                break;
            }
            scale *= 0.5;
        }
        if let Some((tree, cand, loss)) = accepted {
            margin = cand;
            staged_loss.push(loss);
            trees.push(tree);
        } else {
            log::debug!("gbt: tree {t} discarded, no loss decrease");
        }
    }

    let model = GbtModel {
        base_margin,
        trees,
        staged_loss,
    };
    Ok(Scorecard::new(
        Model::Gbt(model),
        d.n_features(),
        TrainingMeta {
            n_train: n,
            weighted: opts.sample_weights.is_some(),
            seed: opts.seed,
        },
    ))
}

fn scaled(raw: &Tree, scale: f64) -> Tree {
    Tree {
        nodes: raw
            .nodes
            .iter()
            .map(|n| match *n {
                TreeNode::Leaf { value } => TreeNode::Leaf {
                    value: value * scale,
                },
                ref s => s.clone(),
            })
            .collect(),
    }
}

/// Row indices sorted by each feature; ties keep row order.
fn presort(x: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..x.ncols())
        .map(|c| {
            let mut idx: Vec<usize> = (0..x.nrows()).collect();
            idx.sort_by(|&a, &b| x[(a, c)].total_cmp(&x[(b, c)]));
            idx
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow_tree(
    x: &DMatrix<f64>,
    order: &[Vec<usize>],
    grad: &[f64],
    hess: &[f64],
    active: &[bool],
    p: &GbtParams,
) -> Option<Tree> {
    let n = x.nrows();
    let l2 = p.l2;
    // node id per row (usize::MAX = not sampled or in a finished leaf)
    let mut node_of: Vec<usize> = (0..n)
        .map(|r| if active[r] { 0 } else { usize::MAX })
        .collect();
    let mut nodes: Vec<Option<TreeNode>> = vec![None];
    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for r in 0..n {
        if active[r] {
            sums[0].0 += grad[r];
            sums[0].1 += hess[r];
        }
    }
    let mut frontier = vec![0usize];

    for _depth in 0..p.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot = vec![usize::MAX; nodes.len()];
        for (i, &nd) in frontier.iter().enumerate() {
            slot[nd] = i;
        }
        let m = frontier.len();
        let mut best: Vec<Option<Best>> = vec![None; m];
        for (c, ord) in order.iter().enumerate() {
            let mut gl = vec![0.0; m];
            let mut hl = vec![0.0; m];
            let mut last: Vec<Option<f64>> = vec![None; m];
            for &r in ord {
                let nd = node_of[r];
                if nd == usize::MAX || slot[nd] == usize::MAX {
                    continue;
                }
                let i = slot[nd];
                let v = x[(r, c)];
                if let Some(prev) = last[i] {
                    if v > prev {
                        let (g, h) = sums[nd];
                        let (gr, hr) = (g - gl[i], h - hl[i]);
                        if hl[i] >= p.min_child_weight && hr >= p.min_child_weight {
                            let gain = gl[i] * gl[i] / (hl[i] + l2) + gr * gr / (hr + l2)
                                - g * g / (h + l2);
                            if gain > 1e-12 && best[i].is_none_or(|b| gain > b.gain) {
                                best[i] = Some(Best {
                                    gain,
                                    feature: c,
                                    threshold: prev,
                                });
                            }
                        }
                    }
                }
                gl[i] += grad[r];
                hl[i] += hess[r];
                last[i] = Some(v);
            }
        }
        let mut next = Vec::new();
        let mut children = vec![(usize::MAX, usize::MAX); m];
        for (i, &nd) in frontier.iter().enumerate() {
            if let Some(b) = best[i] {
                let (l, r) = (nodes.len(), nodes.len() + 1);
                nodes.push(None);
                nodes.push(None);
                sums.push((0.0, 0.0));
                sums.push((0.0, 0.0));
                nodes[nd] = Some(TreeNode::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left: l,
                    right: r,
                });
                children[i] = (l, r);
                next.push(l);
                next.push(r);
            }
        }
        for r in 0..n {
            let nd = node_of[r];
            if nd == usize::MAX || slot.get(nd).is_none_or(|&s| s == usize::MAX) {
                continue;
            }
            let i = slot[nd];
            let (l, rt) = children[i];
            if l == usize::MAX {
                node_of[r] = usize::MAX;
                continue;
            }
            let b = best[i].unwrap();
            let child = if x[(r, b.feature)] <= b.threshold {
                l
            } else {
                rt
            };
            node_of[r] = child;
            sums[child].0 += grad[r];
            sums[child].1 += hess[r];
        }
        frontier = next;
    }

    if matches!(nodes[0], None) && sums[0].1 <= 0.0 {
        return None;
    }
    let out = nodes
        .into_iter()
        .enumerate()
        .map(|(i, nd)| {
            nd.unwrap_or_else(|| {
                let (g, h) = sums[i];
                TreeNode::Leaf {
                    value: -g / (h + l2),
                }
            })
        })
        .collect();
    Some(Tree { nodes: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngSeed;
    use crate::learners::predict_proba;
    use rand::Rng;

    fn opts(n_trees: usize, depth: usize) -> FitOptions {
        FitOptions {
            gbt: GbtParams {
                n_trees,
                max_depth: depth,
                ..GbtParams::default()
            },
            ..FitOptions::default()
        }
    }

    fn noisy(n: usize, seed: u64) -> Dataset {
        let mut rng = RngSeed::new(seed).rng();
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-2.0f64..2.0));
        let y = (0..n)
            .map(|r| {
                let eta = x[(r, 0)] * x[(r, 1)] + x[(r, 2)].abs() - 1.0;
                u8::from(rng.random::<f64>() < sigmoid(2.0 * eta))
            })
            .collect();
        Dataset::new(x, Some(y)).unwrap()
    }

    #[test]
    fn empty_ensemble_predicts_base_rate() {
        let d = noisy(100, 1);
        let m = fit_gbt(&d, &opts(0, 3)).unwrap();
        let base = d.bad_rate().unwrap();
        for p in predict_proba(&m, &d).unwrap() {
            assert!((p - base).abs() < 1e-12);
        }
    }

    #[test]
    fn stump_learns_step_function() {
        let x = DMatrix::from_fn(40, 1, |r, _| r as f64 - 19.5);
        let y = (0..40).map(|r| u8::from(r >= 20)).collect();
        let d = Dataset::new(x, Some(y)).unwrap();
        let m = fit_gbt(&d, &opts(50, 1)).unwrap();
        let p = predict_proba(&m, &d).unwrap();
        let max_good = p[..20].iter().cloned().fold(0.0f64, f64::max);
        let min_bad = p[20..].iter().cloned().fold(1.0f64, f64::min);
        assert!(max_good < min_bad);
    }

    #[test]
    fn staged_loss_monotone_and_consistent() {
        let d = noisy(400, 2);
        let m = fit_gbt(&d, &FitOptions::default()).unwrap();
        let g = m.gbt().unwrap();
        assert_eq!(g.staged_loss.len(), g.trees.len() + 1);
        for w in g.staged_loss.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let p = predict_proba(&m, &d).unwrap();
        let y = d.labels().unwrap();
        let ll = p
            .iter()
            .zip(y)
            .map(|(&pi, &yi)| if yi == 1 { -pi.ln() } else { -(1.0 - pi).ln() })
            .sum::<f64>()
            / p.len() as f64;
        assert!((ll - g.staged_loss.last().unwrap()).abs() < 1e-12);
        assert!(g.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn constant_weights_match_unweighted() {
        let d = noisy(300, 3);
        let a = predict_proba(&fit_gbt(&d, &FitOptions::default()).unwrap(), &d).unwrap();
        let o = FitOptions::default().with_weights(vec![3.7; 300]);
        let b = predict_proba(&fit_gbt(&d, &o).unwrap(), &d).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let d = noisy(200, 4);
        let a = fit_gbt(&d, &FitOptions::default()).unwrap();
        let b = fit_gbt(&d, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
