//! Reference explicit Euler integrator. First order and slow on purpose:
//! crank the step count until the answer stops moving, then use it to judge
//! higher-order schemes.

/// Integrate ẋ = f(t, x) from `t0` to `t1` (either direction) with `steps`
/// uniform Euler steps.
pub fn euler_flow(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    x0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Vec<f64> {
    assert!(steps > 0, "need at least one step");
    let dt = (t1 - t0) / steps as f64;
    let mut x = x0.to_vec();
    let mut dx = vec![0.0; x0.len()];
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        f(t, &x, &mut dx);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += dt * di;
        }
    }
    x
}
