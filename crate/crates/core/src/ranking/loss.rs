//! Triplet ranking losses.

/// Default ranking margin.
pub const DEFAULT_MARGIN: f64 = 0.1;

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge argument `||q - q+|| - ||q - q-|| + delta`.
pub fn triplet_term(fq: &[f64], fqp: &[f64], fqn: &[f64], delta: f64) -> f64 {
    euclid(fq, fqp) - euclid(fq, fqn) + delta
}

/// `max(0, ||q - q+|| - ||q - q-|| + delta)`.
pub fn triplet_loss(fq: &[f64], fqp: &[f64], fqn: &[f64], delta: f64) -> f64 {
    triplet_term(fq, fqp, fqn, delta).max(0.0)
}

/// Query-level averaged loss.
///
/// `groups[q]` holds the hinge arguments of every triplet sharing query `q`.
/// Only violating terms (`> 0`) count: each active query averages over its
/// violating negatives, then active queries are averaged. Returns zero when
/// no term violates the margin.
pub fn batch_loss(groups: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut active = 0usize;
    for terms in groups {
        let (sum, n) = terms
            .iter()
            .filter(|&&t| t > 0.0)
            .fold((0.0, 0usize), |(s, n), &t| (s + t, n + 1));
        if n > 0 {
            total += sum / n as f64;
            active += 1;
        }
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Embeddings on a line so the two distances can be dialled directly.
    fn loss_at(d_pos: f64, d_neg: f64, delta: f64) -> f64 {
        triplet_loss(&[0.0], &[d_pos], &[-d_neg], delta)
    }

    #[test]
    fn single_triplet() {
        assert_eq!(loss_at(0.2, 0.5, 0.1), 0.0);
        assert!((loss_at(0.5, 0.45, 0.1) - 0.15).abs() < 1e-12);
        assert_eq!(DEFAULT_MARGIN, 0.1);
    }

    #[test]
    fn query_level_average() {
        assert_eq!(batch_loss(&[vec![-0.1, -0.3]]), 0.0);
        assert!((batch_loss(&[vec![0.2, 0.4]]) - 0.3).abs() < 1e-12);
        // second query satisfied: excluded from the active set
        let groups = vec![vec![0.1, 0.5, -0.2], vec![-0.05, -0.4]];
        assert!((batch_loss(&groups) - 0.3).abs() < 1e-12);
        assert_eq!(batch_loss(&[]), 0.0);
    }

    #[test]
    fn degenerates_to_mean_with_one_negative_per_query() {
        let terms = [0.3, -0.1, 0.05, 0.2];
        let groups: Vec<Vec<f64>> = terms.iter().map(|&t| vec![t]).collect();
        let violating: Vec<f64> = terms.iter().copied().filter(|&t| t > 0.0).collect();
        let mean = violating.iter().sum::<f64>() / violating.len() as f64;
        assert!((batch_loss(&groups) - mean).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let groups = vec![vec![0.1, 0.5], vec![0.3], vec![-0.2, 0.05]];
        let mut shuffled = vec![groups[2].clone(), groups[0].clone(), groups[1].clone()];
        shuffled[0].reverse();
        assert!((batch_loss(&groups) - batch_loss(&shuffled)).abs() < 1e-12);
    }
}
