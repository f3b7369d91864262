//! Closed forms for the planar steering system ȧ = u, ḃ = −a·u.
//!
//! On an interval where u is constant with start state (a_s, b_s) at time s,
//!
//!   a(t) = a_s + u·(t − s),
//!   b(t) = b_s − u·a_s·(t − s) − u²·(t − s)²/2,
//!
//! and concatenating intervals gives the exact flow of any piecewise
//! constant control. With terminal cost ℓ = b this yields
//! I[u] = Σ_i w_i b_i(T) without any numerical integration.

/// Flow (a₀, b₀) from `t0` to `t` under pieces `(end_time, value)` laid
/// end to end; pieces must cover `[t0, t]`.
pub fn flow(mut a: f64, mut b: f64, t0: f64, pieces: &[(f64, f64)], t: f64) -> (f64, f64) {
    let mut s = t0;
    for &(end, u) in pieces {
        let stop = end.min(t);
        if stop > s {
            let dt = stop - s;
            b -= u * a * dt + u * u * dt * dt / 2.0;
            a += u * dt;
            s = stop;
        }
        if s >= t {
            break;
        }
    }
    assert!(s >= t - 1e-12, "control pieces end at {s} before t = {t}");
    (a, b)
}

/// Tail integral A(t) = ∫_t^T u ds of the same piece layout, with T the
/// last piece end.
pub fn tail_integral(t0: f64, pieces: &[(f64, f64)], t: f64) -> f64 {
    let mut total = 0.0;
    let mut s = t0;
    for &(end, u) in pieces {
        let lo = s.max(t);
        if end > lo {
            total += u * (end - lo);
        }
        s = end;
    }
    total
}

/// Σ_i w_i b_i(T) for atoms `(a₀, b₀, w)` flowed to `t_end`.
pub fn terminal_cost_b(atoms: &[(f64, f64, f64)], t0: f64, pieces: &[(f64, f64)], t_end: f64) -> f64 {
    atoms
        .iter()
        .map(|&(a0, b0, w)| w * flow(a0, b0, t0, pieces, t_end).1)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_control_traces_the_parabola() {
        for t in [0.0, 0.25, 0.5, 1.0] {
            let (a, b) = flow(0.0, 0.0, 0.0, &[(1.0, 1.0)], t);
            assert!((a - t).abs() <= 1e-15);
            assert!((b + t * t / 2.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn concatenation_agrees_with_a_single_piece() {
        let whole = flow(0.3, -0.2, 0.0, &[(1.0, 0.7)], 1.0);
        let split = flow(0.3, -0.2, 0.0, &[(0.4, 0.7), (1.0, 0.7)], 1.0);
        assert!((whole.0 - split.0).abs() <= 1e-15);
        assert!((whole.1 - split.1).abs() <= 1e-15);
    }

    #[test]
    fn tail_integral_sums_remaining_pieces() {
        let pieces = [(0.5, 1.0), (1.0, -1.0)];
        assert!((tail_integral(0.0, &pieces, 0.0) - 0.0).abs() <= 1e-15);
        assert!((tail_integral(0.0, &pieces, 0.25) - (0.25 - 0.5)).abs() <= 1e-15);
        assert!((tail_integral(0.0, &pieces, 0.75) - (-0.25)).abs() <= 1e-15);
    }

    #[test]
    fn saturated_controls_reach_minimal_cost() {
        for u in [1.0, -1.0] {
            let cost = terminal_cost_b(&[(0.0, 0.0, 1.0)], 0.0, &[(1.0, u)], 1.0);
            assert!((cost + 0.5).abs() <= 1e-15, "u = {u}: {cost}");
        }
    }
}
