//! Brute-force Kantorovich distance W₁ for tiny uniform empirical measures.
//!
//! For uniform weights 1/n on both sides the transport polytope is the
//! Birkhoff polytope scaled by 1/n, whose vertices are permutation
//! matrices, so some perfect matching is optimal:
//!
//!   W₁ = min_π (1/n) Σ_i |x_i − y_{π(i)}|.
//!
//! The search below enumerates all n! matchings with branch-and-bound
//! pruning. Factorial cost; intended for n ≤ 8.

/// Exact W₁ between (1/n)Σδ_{x_i} and (1/n)Σδ_{y_j} with equal atom
/// counts and uniform weights.
pub fn w1_assignment(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "matching needs equally many atoms");
    let n = xs.len();
    assert!((1..=8).contains(&n), "factorial search wants 1..=8 atoms, got {n}");
    let dim = xs[0].len();
    assert!(xs.iter().chain(ys).all(|p| p.len() == dim), "mixed dimensions");

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = xs[i]
                .iter()
                .zip(&ys[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d2.sqrt();
        }
    }
    let mut used = vec![false; n];
    let mut best = f64::INFINITY;
    search(0, 0.0, &dist, n, &mut used, &mut best);
    best / n as f64
}

fn search(i: usize, cost: f64, dist: &[f64], n: usize, used: &mut [bool], best: &mut f64) {
    if cost >= *best {
        return;
    }
    if i == n {
        *best = cost;
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            search(i + 1, cost + dist[i * n + j], dist, n, used, best);
            used[j] = false;
        }
    }
}

/// [`w1_assignment`] for scalar atoms.
pub fn w1_assignment_1d(xs: &[f64], ys: &[f64]) -> f64 {
    let xs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let ys: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y]).collect();
    w1_assignment(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_have_zero_distance() {
        let xs = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        assert_eq!(w1_assignment(&xs, &xs), 0.0);
    }

    #[test]
    fn picks_the_cheaper_matching() {
        // Identity matching costs (1 + 8)/2 = 4.5, the swap (2 + 9)/2 = 5.5.
        let d = w1_assignment_1d(&[0.0, 10.0], &[1.0, 2.0]);
        assert!((d - 4.5).abs() <= 1e-15, "{d}");
    }

    #[test]
    fn translation_moves_every_atom_by_the_shift() {
        let xs = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]];
        let ys: Vec<Vec<f64>> = xs.iter().map(|p| vec![p[0] + 3.0, p[1] - 4.0]).collect();
        let d = w1_assignment(&xs, &ys);
        assert!((d - 5.0).abs() <= 1e-12, "{d}");
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let xs = vec![vec![0.3], vec![-1.2], vec![4.0], vec![0.0]];
        let ys = vec![vec![1.0], vec![1.5], vec![-2.0], vec![0.25]];
        let a = w1_assignment(&xs, &ys);
        let b = w1_assignment(&ys, &xs);
        assert!((a - b).abs() <= 1e-15);
    }
}
