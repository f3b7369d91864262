//! Kantorovich (W1) distance between empirical measures.
//!
//! In one dimension `W1(μ, ν) = ∫ |F_μ − F_ν| dx` with `F` the CDF, computed
//! exactly on the merged support.  In higher dimensions the optimal
//! transportation problem is solved exactly by successive shortest paths on
//! the complete bipartite graph; this path is a test oracle and is capped at
//! 64 atoms per side.

use super::{EmpiricalMeasure, MeasureError};

const MAX_ATOMS: usize = 64;

/// Exact W1 distance.  Both measures must share the dimension; for `dim ≥ 2`
/// each side may hold at most 64 atoms.
pub fn w1_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if a.dim() != b.dim() {
        return Err(MeasureError::MixedDimensions { a: a.dim(), b: b.dim() });
    }
    if a.dim() == 1 {
        Ok(w1_line(a, b))
    } else {
        let atoms = a.len().max(b.len());
        if atoms > MAX_ATOMS {
            return Err(MeasureError::TooLarge { atoms });
        }
        Ok(w1_transport(a, b))
    }
}

fn w1_line(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    // Merge supports; sweep left to right accumulating F_a - F_b.
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len() {
        events.push((a.point(i)[0], a.weights()[i]));
    }
    for i in 0..b.len() {
        events.push((b.point(i)[0], -b.weights()[i]));
    }
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut dist = 0.0f64;
    let mut diff = 0.0f64;
    let mut prev = events[0].0;
    for (x, w) in events {
        dist += diff.abs() * (x - prev);
        diff += w;
        prev = x;
    }
    dist
}

/// Exact transportation cost by successive shortest paths with node
/// potentials (min-cost flow on the complete bipartite graph).  Supplies are
/// the atom weights of `a`, demands those of `b`; each augmentation saturates
/// at least one atom, so at most `len(a) + len(b)` Dijkstra passes run.
fn w1_transport(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let n = a.len();
    let m = b.len();
    let dim = a.dim();
    let mut cost = vec![0.0f64; n * m];
    for i in 0..n {
        let p = a.point(i);
        for j in 0..m {
            let q = b.point(j);
            let mut d2 = 0.0;
            for k in 0..dim {
                let d = p[k] - q[k];
                d2 += d * d;
            }
            cost[i * m + j] = d2.sqrt();
        }
    }

    let mut supply: Vec<f64> = a.weights().to_vec();
    let mut demand: Vec<f64> = b.weights().to_vec();
    let mut flow = vec![0.0f64; n * m];
    // Potentials keep reduced costs nonnegative across augmentations.
    let mut pot_a = vec![0.0f64; n];
    let mut pot_b = vec![0.0f64; m];
    let weight_floor = 1e-15;
    let mut budget = 200_000usize;

    loop {
        let active: Vec<usize> = (0..n).filter(|&i| supply[i] > weight_floor).collect();
        if active.is_empty() {
            break;
        }
        budget = budget
            .checked_sub(1)
            .expect("transportation solve exceeded its augmentation budget");
        // Dijkstra over the 2-layer residual graph.  dist_* are reduced-cost
        // distances from the set of active sources.
        let inf = f64::INFINITY;
        let mut dist_a = vec![inf; n];
        let mut dist_b = vec![inf; m];
        let mut from_b = vec![usize::MAX; m]; // source atom i feeding b-node j
        let mut from_a = vec![usize::MAX; n]; // b-node j feeding back a-node i
        let mut done_a = vec![false; n];
        let mut done_b = vec![false; m];
        for &i in &active {
            dist_a[i] = 0.0;
        }
        loop {
            // Pick the unsettled node of smallest distance on either side.
            let mut best = inf;
            let mut pick = None; // (side, index): side 0 = a, 1 = b
            for i in 0..n {
                if !done_a[i] && dist_a[i] < best {
                    best = dist_a[i];
                    pick = Some((0usize, i));
                }
            }
            for j in 0..m {
                if !done_b[j] && dist_b[j] < best {
                    best = dist_b[j];
                    pick = Some((1usize, j));
                }
            }
            let Some((side, idx)) = pick else { break };
            if side == 0 {
                done_a[idx] = true;
                for j in 0..m {
                    if done_b[j] {
                        continue;
                    }
                    let rc = (cost[idx * m + j] - pot_a[idx] - pot_b[j]).max(0.0);
                    let nd = dist_a[idx] + rc;
                    if nd < dist_b[j] {
                        dist_b[j] = nd;
                        from_b[j] = idx;
                    }
                }
            } else {
                done_b[idx] = true;
                if demand[idx] > weight_floor {
                    // A sink with remaining demand ends the search as soon as
                    // it is settled.
                    break;
                }
                for i in 0..n {
                    if done_a[i] || flow[i * m + idx] <= weight_floor {
                        continue;
                    }
                    let rc = (pot_a[i] + pot_b[idx] - cost[i * m + idx]).max(0.0);
                    let nd = dist_b[idx] + rc;
                    if nd < dist_a[i] {
                        dist_a[i] = nd;
                        from_a[i] = idx;
                    }
                }
            }
        }

        // Find the settled sink with remaining demand.
        let sink = (0..m)
            .filter(|&j| demand[j] > weight_floor && dist_b[j] < inf)
            .min_by(|&x, &y| dist_b[x].total_cmp(&dist_b[y]));
        let Some(sink) = sink else { break };

        // Trace the augmenting path back to a source.  A node without a
        // backward predecessor is one of the active sources (its distance is
        // zero and relaxations never improve on zero).
        let mut path: Vec<(usize, usize, bool)> = Vec::new(); // (i, j, forward edge)
        let mut j = sink;
        let src = loop {
            let i = from_b[j];
            path.push((i, j, true));
            match from_a[i] {
                usize::MAX => break i,
                jb => {
                    path.push((i, jb, false));
                    j = jb;
                }
            }
        };

        let mut push = supply[src].min(demand[sink]);
        for &(i, jj, forward) in &path {
            if !forward {
                push = push.min(flow[i * m + jj]);
            }
        }
        for &(i, jj, forward) in &path {
            if forward {
                flow[i * m + jj] += push;
            } else {
                flow[i * m + jj] -= push;
            }
        }
        supply[src] -= push;
        demand[sink] -= push;

        // Johnson-style potential update capped at the sink distance; keeps
        // every residual reduced cost nonnegative for the next pass.
        let cut = dist_b[sink];
        for i in 0..n {
            pot_a[i] -= dist_a[i].min(cut);
        }
        for jj in 0..m {
            pot_b[jj] += dist_b[jj].min(cut);
        }
    }

    flow.iter().zip(cost.iter()).map(|(f, c)| f * c).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::EmpiricalMeasure;
    use proptest::prelude::*;

    fn atoms_1d(pts: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(&pts.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    fn atoms_2d(pts: &[[f64; 2]]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn diracs_distance_is_euclidean() {
        let a = EmpiricalMeasure::dirac(vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(vec![3.0, 4.0]).unwrap();
        assert!((w1_distance(&a, &b).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn shifted_pair_moves_by_shift() {
        let a = atoms_1d(&[0.0, 1.0]);
        let b = atoms_1d(&[0.5, 1.5]);
        assert!((w1_distance(&a, &b).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn weighted_line_example() {
        // μ = 0.3δ_0 + 0.7δ_1, ν = δ_0.5: W1 = 0.3·0.5 + 0.7·0.5 = 0.5.
        let a = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.3, 0.7]).unwrap();
        let b = EmpiricalMeasure::dirac(vec![0.5]).unwrap();
        assert!((w1_distance(&a, &b).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn planar_solve_agrees_with_line_formula_on_collinear_atoms() {
        // Atoms on the a-axis: the 2-d transportation solve must reproduce
        // the 1-d CDF value.
        let pts_a = [0.0, 0.3, 1.1, 2.0, -0.7];
        let pts_b = [0.1, 0.4, 0.9, 1.5, -1.0];
        let a1 = atoms_1d(&pts_a);
        let b1 = atoms_1d(&pts_b);
        let a2 = atoms_2d(&pts_a.map(|x| [x, 0.0]));
        let b2 = atoms_2d(&pts_b.map(|x| [x, 0.0]));
        let d1 = w1_distance(&a1, &b1).unwrap();
        let d2 = w1_distance(&a2, &b2).unwrap();
        assert!((d1 - d2).abs() < 1e-12, "line {d1} vs plane {d2}");
    }

    #[test]
    fn atom_cap_enforced() {
        let pts: Vec<Vec<f64>> = (0..65).map(|i| vec![i as f64, 0.0]).collect();
        let big = EmpiricalMeasure::uniform(&pts).unwrap();
        let small = EmpiricalMeasure::dirac(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            w1_distance(&big, &small),
            Err(MeasureError::TooLarge { atoms: 65 })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = EmpiricalMeasure::dirac(vec![0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(vec![0.0, 0.0]).unwrap();
        assert!(matches!(w1_distance(&a, &b), Err(MeasureError::MixedDimensions { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metric_axioms_plane(
            xs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..6),
            ys in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..6),
            zs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..6),
        ) {
            let to_m = |pts: &Vec<(f64, f64)>| {
                EmpiricalMeasure::uniform(
                    &pts.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>(),
                ).unwrap()
            };
            let a = to_m(&xs);
            let b = to_m(&ys);
            let c = to_m(&zs);
            let dab = w1_distance(&a, &b).unwrap();
            let dba = w1_distance(&b, &a).unwrap();
            let daa = w1_distance(&a, &a).unwrap();
            let dac = w1_distance(&a, &c).unwrap();
            let dcb = w1_distance(&c, &b).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert!(daa.abs() <= 1e-12);
            prop_assert!((dab - dba).abs() <= 1e-9 * (1.0 + dab));
            prop_assert!(dac + dcb >= dab - 1e-9 * (1.0 + dab));
        }

        #[test]
        fn line_formula_matches_transport_solver(
            xs in prop::collection::vec(-10.0f64..10.0, 1..6),
            ys in prop::collection::vec(-10.0f64..10.0, 1..6),
        ) {
            let a1 = atoms_1d(&xs);
            let b1 = atoms_1d(&ys);
            let a2 = atoms_2d(&xs.iter().map(|&x| [x, 0.0]).collect::<Vec<_>>());
            let b2 = atoms_2d(&ys.iter().map(|&y| [y, 0.0]).collect::<Vec<_>>());
            let d1 = w1_distance(&a1, &b1).unwrap();
            let d2 = w1_distance(&a2, &b2).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-10 * (1.0 + d1));
        }
    }
}
