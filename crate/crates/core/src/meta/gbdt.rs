//! Gradient-boosted regression trees for the proxy validator.
//!
//! Least-squares boosting with histogram splits: each feature is bucketed
//! into quantile bins once, nodes accumulate per-bin residual sums, and the
//! best split maximizes the variance reduction. An internal 80/20 split with
//! early stopping picks the tree count.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtSettings {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: Real,
    pub min_leaf: usize,
    pub n_bins: usize,
    pub val_fraction: Real,
    pub early_stop_rounds: usize,
}

impl Default for GbdtSettings {
    fn default() -> Self {
        GbdtSettings {
            n_trees: 200,
            max_depth: 4,
            shrinkage: 0.05,
            min_leaf: 5,
            n_bins: 64,
            val_fraction: 0.2,
            early_stop_rounds: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Node {
    Leaf {
        value: Real,
    },
    Split {
        feature: usize,
        threshold: Real,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegTree {
    nodes: Vec<Node>,
}

impl RegTree {
    fn predict(&self, x: &[Real]) -> Real {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gbdt {
    pub settings: GbdtSettings,
    base: Real,
    trees: Vec<RegTree>,
}

struct BinIndex {
    /// Per feature: ascending bin upper edges (length ≤ n_bins − 1).
    edges: Vec<Vec<Real>>,
    /// Per sample: bin id per feature, n×d.
    bins: Vec<u16>,
    d: usize,
}

fn build_bins(features: &[Vec<Real>], n_bins: usize) -> BinIndex {
    let n = features.len();
    let d = features[0].len();
    let mut edges = Vec::with_capacity(d);
    for j in 0..d {
        let mut vals: Vec<Real> = features.iter().map(|r| r[j]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
        vals.dedup();
        let mut e = Vec::new();
        if vals.len() > 1 {
            let steps = n_bins.min(vals.len());
            for b in 1..steps {
                let idx = b * (vals.len() - 1) / steps;
                let edge = vals[idx];
                if e.last() != Some(&edge) {
                    e.push(edge);
                }
            }
        }
        edges.push(e);
    }
    let mut bins = vec![0u16; n * d];
    for (i, row) in features.iter().enumerate() {
        for j in 0..d {
            let e = &edges[j];
            // First bin whose upper edge is ≥ value.
            let b = e.partition_point(|&edge| edge < row[j]);
            bins[i * d + j] = b as u16;
        }
    }
    BinIndex { edges, bins, d }
}

fn fit_tree(
    index: &BinIndex,
    residuals: &[Real],
    rows: &[usize],
    settings: &GbdtSettings,
) -> RegTree {
    let mut nodes = Vec::new();
    build_node(index, residuals, rows, settings, 0, &mut nodes);
    RegTree { nodes }
}

fn leaf_value(residuals: &[Real], rows: &[usize]) -> Real {
    let s: Real = rows.iter().map(|&i| residuals[i]).sum();
    s / rows.len().max(1) as Real
}

fn build_node(
    index: &BinIndex,
    residuals: &[Real],
    rows: &[usize],
    settings: &GbdtSettings,
    depth: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if depth >= settings.max_depth || rows.len() < 2 * settings.min_leaf {
        nodes.push(Node::Leaf {
            value: leaf_value(residuals, rows),
        });
        return id;
    }

    let total_sum: Real = rows.iter().map(|&i| residuals[i]).sum();
    let total_cnt = rows.len() as Real;
    let parent_score = total_sum * total_sum / total_cnt;

    let mut best: Option<(Real, usize, usize)> = None; // (gain, feature, bin)
    let d = index.d;
    for j in 0..d {
        let n_edges = index.edges[j].len();
        if n_edges == 0 {
            continue;
        }
        let mut sums = vec![0.0; n_edges + 1];
        let mut cnts = vec![0usize; n_edges + 1];
        for &i in rows {
            let b = index.bins[i * d + j] as usize;
            sums[b] += residuals[i];
            cnts[b] += 1;
        }
        let mut left_sum = 0.0;
        let mut left_cnt = 0usize;
        for b in 0..n_edges {
            left_sum += sums[b];
            left_cnt += cnts[b];
            let right_cnt = rows.len() - left_cnt;
            if left_cnt < settings.min_leaf || right_cnt < settings.min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let score = left_sum * left_sum / left_cnt as Real
                + right_sum * right_sum / right_cnt as Real;
            let gain = score - parent_score;
            if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                best = Some((gain, j, b));
            }
        }
    }

    let Some((_, feature, bin)) = best else {
        nodes.push(Node::Leaf {
            value: leaf_value(residuals, rows),
        });
        return id;
    };

    let threshold = index.edges[feature][bin];
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| (index.bins[i * d + feature] as usize) <= bin);

    nodes.push(Node::Leaf { value: 0.0 }); // placeholder, patched below
    let left = build_node(index, residuals, &left_rows, settings, depth + 1, nodes);
    let right = build_node(index, residuals, &right_rows, settings, depth + 1, nodes);
    nodes[id] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

impl Gbdt {
    /// Fits least-squares boosted trees with early stopping on an internal
    /// validation split. With all-equal targets this degenerates to the
    /// constant predictor (with a warning).
    pub fn fit<R: Rng>(
        features: &[Vec<Real>],
        targets: &[Real],
        settings: &GbdtSettings,
        rng: &mut R,
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != targets.len() {
            return Err(Error::Contract(
                "gbdt: features and targets must be nonempty and aligned".into(),
            ));
        }
        let d = features[0].len();
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("gbdt: ragged feature rows".into()));
        }
        let base = targets.iter().sum::<Real>() / n as Real;
        let spread = targets
            .iter()
            .map(|t| (t - base).abs())
            .fold(0.0 as Real, Real::max);
        if spread < 1e-12 {
            log::warn!("gbdt: all targets equal; fitting a constant predictor");
            return Ok(Gbdt {
                settings: settings.clone(),
                base,
                trees: Vec::new(),
            });
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_val = ((n as Real * settings.val_fraction) as usize).min(n.saturating_sub(1));
        let (val_rows, train_rows) = order.split_at(n_val);

        let index = build_bins(features, settings.n_bins);
        let mut pred: Vec<Real> = vec![base; n];
        let mut residuals: Vec<Real> = targets.iter().zip(&pred).map(|(t, p)| t - p).collect();

        let val_mse = |pred: &[Real]| -> Real {
            if val_rows.is_empty() {
                return 0.0;
            }
            val_rows
                .iter()
                .map(|&i| (targets[i] - pred[i]) * (targets[i] - pred[i]))
                .sum::<Real>()
                / val_rows.len() as Real
        };

        let mut trees: Vec<RegTree> = Vec::new();
        let mut best_mse = val_mse(&pred);
        let mut best_len = 0usize;
        let mut stall = 0usize;
        for _ in 0..settings.n_trees {
            let tree = fit_tree(&index, &residuals, train_rows, settings);
            for i in 0..n {
                let delta = settings.shrinkage * tree.predict(&features[i]);
                pred[i] += delta;
                residuals[i] = targets[i] - pred[i];
            }
            trees.push(tree);
            if !val_rows.is_empty() {
                let mse = val_mse(&pred);
                if mse < best_mse - 1e-12 {
                    best_mse = mse;
                    best_len = trees.len();
                    stall = 0;
                } else {
                    stall += 1;
                    if stall >= settings.early_stop_rounds {
                        break;
                    }
                }
            } else {
                best_len = trees.len();
            }
        }
        if !val_rows.is_empty() {
            trees.truncate(best_len);
        }

        Ok(Gbdt {
            settings: settings.clone(),
            base,
            trees,
        })
    }

    pub fn predict(&self, x: &[Real]) -> Real {
        let mut p = self.base;
        for tree in &self.trees {
            p += self.settings.shrinkage * tree.predict(x);
        }
        p
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_regression(n: usize, seed: u64) -> (Vec<Vec<Real>>, Vec<Real>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let a: Real = rng.random_range(0.0..1.0);
            let b: Real = rng.random_range(0.0..1.0);
            let noise: Real = rng.random_range(-0.02..0.02);
            xs.push(vec![a, b, rng.random_range(0.0..1.0)]);
            ys.push(0.3 * a + 0.5 * (b > 0.5) as usize as Real + noise);
        }
        (xs, ys)
    }

    #[test]
    fn learns_a_simple_signal() {
        let (xs, ys) = toy_regression(400, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Gbdt::fit(&xs, &ys, &GbdtSettings::default(), &mut rng).unwrap();
        let mse: Real = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (model.predict(x) - y) * (model.predict(x) - y))
            .sum::<Real>()
            / xs.len() as Real;
        let var: Real = {
            let mean = ys.iter().sum::<Real>() / ys.len() as Real;
            ys.iter().map(|y| (y - mean) * (y - mean)).sum::<Real>() / ys.len() as Real
        };
        assert!(mse < 0.2 * var, "mse {mse} vs variance {var}");
    }

    #[test]
    fn depth_zero_single_tree_predicts_mean() {
        let (xs, ys) = toy_regression(100, 3);
        let settings = GbdtSettings {
            n_trees: 1,
            max_depth: 0,
            val_fraction: 0.0,
            shrinkage: 1.0,
            ..GbdtSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Gbdt::fit(&xs, &ys, &settings, &mut rng).unwrap();
        let mean = ys.iter().sum::<Real>() / ys.len() as Real;
        // base = mean, single depth-0 tree adds shrinkage·mean(residual) = 0.
        let p = model.predict(&xs[0]);
        assert!((p - mean).abs() < 1e-9, "{p} vs {mean}");
    }

    #[test]
    fn constant_targets_give_constant_predictor() {
        let xs = vec![vec![0.1, 0.2], vec![0.6, 0.9], vec![0.3, 0.3]];
        let ys = vec![0.7, 0.7, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Gbdt::fit(&xs, &ys, &GbdtSettings::default(), &mut rng).unwrap();
        assert_eq!(model.n_trees(), 0);
        assert!((model.predict(&[9.9, -1.0]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let (xs, ys) = toy_regression(200, 6);
        let fit = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Gbdt::fit(&xs, &ys, &GbdtSettings::default(), &mut rng).unwrap()
        };
        let (a, b) = (fit(7), fit(7));
        assert_eq!(a.n_trees(), b.n_trees());
        for x in xs.iter().take(10) {
            assert_eq!(a.predict(x).to_bits(), b.predict(x).to_bits());
        }
    }
}
