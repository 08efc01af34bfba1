//! Evaluation metrics: rank-based AUROC, normalized ROC rank vectors, the
//! paired Wilcoxon signed-rank test, and Spearman correlation.
//!
//! Ties are handled with average ranks throughout, which keeps the AUROC
//! value, the rank vectors, and the Wilcoxon tie correction mutually
//! consistent.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[Real]) -> Vec<Real> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in ranks"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as Real / 2.0; // mean of 1-based positions i+1..=j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-based AUROC: P(score_outlier > score_inlier) + ½·P(equal).
///
/// Labels are 1 for outliers, 0 for inliers; both classes must be present.
pub fn auroc(scores: &[Real], labels: &[u8]) -> Result<Real> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: Real = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as Real / 2.0;
    Ok(u / (n_pos as Real * n_neg as Real))
}

/// Normalized ROC ranks of a set of performances: 0 = best, 1 = worst,
/// ties share their average rank.
pub fn roc_rank(performances: &[Real]) -> Result<Vec<Real>> {
    let m = performances.len();
    if m < 2 {
        return Err(Error::Contract(
            "roc_rank needs at least two performances".into(),
        ));
    }
    // Rank descending: negate before ranking.
    let negated: Vec<Real> = performances.iter().map(|p| -p).collect();
    let ranks = average_ranks(&negated);
    Ok(ranks.iter().map(|r| (r - 1.0) / (m - 1) as Real).collect())
}

/// Rank of one candidate performance within a reference set, normalized to
/// [0,1] (0 best). Averaging this over every member of the set gives exactly
/// 0.5, which is the expectation for a uniformly random pick.
pub fn rank_within(reference: &[Real], candidate: Real) -> Real {
    let better = reference.iter().filter(|&&p| p > candidate).count() as Real;
    let ties = reference.iter().filter(|&&p| p == candidate).count() as Real;
    (better + 0.5 * ties) / reference.len() as Real
}

/// Two-sided paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped. Exact permutation distribution for up to 20
/// nonzero differences, normal approximation with tie correction above.
pub fn wilcoxon_signed_rank(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "wilcoxon: {} vs {} observations",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<Real> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let abs: Vec<Real> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: Real = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| *r)
        .sum();

    if n <= 20 {
        // Exact: enumerate all 2^n sign assignments of the observed ranks.
        let total: Real = ranks.iter().sum();
        let mu = total / 2.0;
        let observed_dev = (w_plus - mu).abs();
        let mut count = 0u64;
        for mask in 0u32..(1u32 << n) {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    w += r;
                }
            }
            if (w - mu).abs() >= observed_dev - 1e-12 {
                count += 1;
            }
        }
        Ok(count as Real / (1u64 << n) as Real)
    } else {
        // Normal approximation with tie correction.
        let nf = n as Real;
        let mu = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        let mut sorted = abs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as Real;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Ok(1.0);
        }
        let z = (w_plus - mu) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let p = 2.0 * (1.0 - normal.cdf(z.abs()));
        Ok(p.clamp(0.0, 1.0))
    }
}

/// Spearman rank correlation.
pub fn spearman(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract("spearman needs two equal-length series".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as Real;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::Contract("spearman undefined for constant series".into()));
    }
    Ok(num / (da * db).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_and_reversed() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        let flipped = [0, 0, 1, 1];
        assert_eq!(auroc(&scores, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn roc_rank_basic_and_ties() {
        let r = roc_rank(&[0.9, 0.5, 0.7]).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.5]);
        let all_equal = roc_rank(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(all_equal, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn roc_rank_six_way_with_tie_pair() {
        // performances: 0.9 best; 0.7 tie pair at positions 2+3 → rank 2.5;
        // then 0.6, 0.5, 0.4.
        let r = roc_rank(&[0.9, 0.7, 0.7, 0.6, 0.5, 0.4]).unwrap();
        let expect = [0.0, 0.3, 0.3, 0.6, 0.8, 1.0];
        for (got, want) in r.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn roc_rank_needs_two() {
        assert!(roc_rank(&[0.5]).is_err());
    }

    #[test]
    fn rank_within_mean_is_half() {
        let perf = [0.9, 0.1, 0.4, 0.4, 0.7];
        let mean: Real =
            perf.iter().map(|&p| rank_within(&perf, p)).sum::<Real>() / perf.len() as Real;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_equal_series() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_five_uniform_wins() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0];
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((p - 0.0625).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn wilcoxon_two_sided_symmetry() {
        let a = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let b = [2.0, 2.0, 3.0, 3.5, 8.0, 2.0];
        let p1 = wilcoxon_signed_rank(&a, &b).unwrap();
        let p2 = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn spearman_monotone_is_one() {
        let a = [1.0, 2.0, 5.0, 9.0];
        let b = [10.0, 20.0, 21.0, 100.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
