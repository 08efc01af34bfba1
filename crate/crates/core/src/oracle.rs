//! Independent oracles used by the self-check command and the acceptance
//! tests. Each routine recomputes a quantity along a different route than
//! the implementation it validates and must stay that way.

use rand::Rng;

use crate::dod::MaskedWeights;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Compact network: only the retained blocks of a masked weight set, with
/// per-layer shapes following the effective architecture.
#[derive(Clone, Debug)]
pub struct CompactNet {
    /// (weight [out,in], bias [out]) per effective layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub input_dim: usize,
}

/// Extracts the compact network by copying the nonzero sub-blocks out of the
/// maximal masked tensors.
pub fn compact_from_masked(mw: &MaskedWeights) -> Result<CompactNet> {
    let arch = &mw.mask().lambda_arch;
    let w = mw.max_width();
    let mut layers = Vec::new();
    let mut prev = w;
    for (l, &rows) in arch.iter().enumerate() {
        if rows == 0 {
            continue;
        }
        let full = &mw.weights()[l];
        let mut weight = Tensor::zeros(&[rows, prev]);
        for r in 0..rows {
            for c in 0..prev {
                weight.set2(r, c, full.at2(r, c));
            }
        }
        let bias = Tensor::new(vec![rows], mw.biases()[l].data()[..rows].to_vec())?;
        layers.push((weight, bias));
        prev = rows;
    }
    if layers.is_empty() {
        return Err(Error::InvalidArch("no active layers".into()));
    }
    Ok(CompactNet {
        layers,
        input_dim: w,
    })
}

/// Forward pass of the compact network (tanh hidden, linear output), written
/// directly against the raw kernels.
pub fn compact_forward(x: &Tensor, net: &CompactNet) -> Result<Tensor> {
    let n = x.rows();
    let mut h = x.data().to_vec();
    let mut h_cols = x.cols();
    for (idx, (w, b)) in net.layers.iter().enumerate() {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        if cols != h_cols {
            return Err(Error::ShapeMismatch {
                op: "compact_forward",
                left: vec![n, h_cols],
                right: w.shape().to_vec(),
            });
        }
        let mut z = crate::tensor::matmul_tb(&h, w.data(), n, cols, rows);
        crate::tensor::add_bias_in_place(&mut z, b.data());
        if idx + 1 < net.layers.len() {
            crate::tensor::tanh_in_place(&mut z);
        }
        h = z;
        h_cols = rows;
    }
    Tensor::new(vec![n, h_cols], h)
}

/// Loss value and per-layer gradients of the compact network under the same
/// loss convention as the detector (per-entry mean squared error plus weight
/// decay on the weights).
pub fn compact_loss_grads(
    x: &Tensor,
    net: &CompactNet,
    weight_decay: Real,
) -> Result<(Real, Vec<(Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut params: Vec<(Var, Var)> = Vec::new();
    let mut h = xv;
    let depth = net.layers.len();
    for (idx, (w, b)) in net.layers.iter().enumerate() {
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        params.push((wv, bv));
        let z = tape.matmul_tb(h, wv)?;
        let z = tape.add_bias(z, bv)?;
        h = if idx + 1 < depth { tape.tanh(z) } else { z };
    }
    let diff = tape.sub(h, xv)?;
    let sq = tape.hadamard(diff, diff)?;
    let mut loss = tape.mean(sq);
    if weight_decay > 0.0 {
        let mut acc: Option<Var> = None;
        for &(wv, _) in &params {
            let s = tape.sum_sq(wv);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        let scaled = tape.scale(acc.expect("layers"), weight_decay);
        loss = tape.add(loss, scaled)?;
    }
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let out = params
        .iter()
        .zip(&net.layers)
        .map(|(&(wv, bv), (w, b))| {
            (
                grads.get_or_zeros(wv, w.shape()),
                grads.get_or_zeros(bv, b.shape()),
            )
        })
        .collect();
    Ok((value, out))
}

/// O(n²) pair-counting AUROC: counts outlier/inlier score pairs directly.
pub fn pair_count_auroc(scores: &[Real], labels: &[u8]) -> Result<Real> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
        for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
            if i == j || yi != 1 || yj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::SingleClass);
    }
    Ok(wins / pairs)
}

/// Exhaustive two-sided Wilcoxon signed-rank p-value via recursive sign
/// enumeration (independent of the iterative implementation).
pub fn wilcoxon_exact_enum(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() {
        return Err(Error::Contract("length mismatch".into()));
    }
    let diffs: Vec<Real> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let abs: Vec<Real> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = crate::metrics::average_ranks(&abs);
    let w_obs: Real = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| *r)
        .sum();
    let mu: Real = ranks.iter().sum::<Real>() / 2.0;
    let dev = (w_obs - mu).abs();

    fn count(ranks: &[Real], idx: usize, acc: Real, mu: Real, dev: Real) -> u64 {
        if idx == ranks.len() {
            return ((acc - mu).abs() >= dev - 1e-12) as u64;
        }
        count(ranks, idx + 1, acc, mu, dev) + count(ranks, idx + 1, acc + ranks[idx], mu, dev)
    }
    let hits = count(&ranks, 0, 0.0, mu, dev);
    Ok(hits as Real / (1u64 << ranks.len()) as Real)
}

/// Monte-Carlo differential entropy of the factorized Gaussian: the negative
/// mean log-density over samples drawn from it.
pub fn mc_gaussian_entropy<R: Rng>(sigma: &[Real], n_samples: usize, rng: &mut R) -> Real {
    use rand_distr::{Distribution, StandardNormal};
    let ln_2pi = (2.0 * std::f64::consts::PI as Real).ln();
    let mut total = 0.0;
    for _ in 0..n_samples {
        let mut log_p = 0.0;
        for &s in sigma {
            let z: f64 = StandardNormal.sample(rng);
            let e = s * z as Real;
            log_p += -0.5 * ln_2pi - s.ln() - e * e / (2.0 * s * s);
        }
        total += log_p;
    }
    -total / n_samples as Real
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::build_arch_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compact_extraction_shapes() {
        let (d, w) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights: Vec<Tensor> = (0..d)
            .map(|_| {
                let data = (0..w * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![w, w], data).unwrap()
            })
            .collect();
        let biases: Vec<Tensor> = (0..d)
            .map(|_| {
                let data = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![w], data).unwrap()
            })
            .collect();
        let mask = build_arch_mask(&[3, 0, 0, 5], d, w).unwrap();
        let mw = MaskedWeights::new(weights, biases, mask).unwrap();
        let net = compact_from_masked(&mw).unwrap();
        assert_eq!(net.layers.len(), 2);
        assert_eq!(net.layers[0].0.shape(), &[3, 5]);
        assert_eq!(net.layers[1].0.shape(), &[5, 3]);
    }

    #[test]
    fn pair_counting_matches_rank_based_on_ties() {
        let scores = [0.3, 0.3, 0.1, 0.9, 0.3];
        let labels = [1, 0, 0, 1, 1];
        let expect = pair_count_auroc(&scores, &labels).unwrap();
        let got = crate::metrics::auroc(&scores, &labels).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn exhaustive_wilcoxon_agrees_on_small_case() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0];
        let p = wilcoxon_exact_enum(&a, &b).unwrap();
        assert!((p - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn mc_entropy_tracks_closed_form() {
        let sigma: [Real; 3] = [0.5, 1.0, 2.0];
        let closed: Real = crate::search::gaussian_entropy(&sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mc = mc_gaussian_entropy(&sigma, 100_000, &mut rng);
        assert!(
            (mc - closed).abs() / closed.abs() < 0.02,
            "mc {mc} vs closed {closed}"
        );
    }
}
