//! Characteristics backend: ODE flows of the controlled dynamics, empirical
//! push-forwards, and dual values along characteristics.
//!
//! Each atom follows ẋ = f(x) + Σ_k u^k(t) f^k(x) with the shared
//! piecewise-constant control; the ensemble measure is the push-forward
//! μ_t = (X_{0→t})_♯ μ_0 of the initial atoms. Because the control is
//! constant on every partition cell, the ODE is smooth within a cell and a
//! fixed-step Runge–Kutta march per cell is accurate and fully deterministic.
//!
//! The dual value admits the exact characteristic representation
//! p_t(x) = −ℓ(X_{t→T}(x)), and its gradient follows from the variational
//! equation: with M(s) the sensitivity ∂X_{t→s}(x)/∂x solving
//! Ṁ = J_w(X) M, M(t) = I, the chain rule gives
//!
//!   ∇p_t(x) = −M(T)ᵀ ∇ℓ(X_{t→T}(x)).
//!
//! Equivalently the costate q(t) = ∇p_t(X_t) along a characteristic solves
//! q̇ = −J_w(X_t)ᵀ q backward from q(T) = −∇ℓ(X_T); one backward sweep per
//! atom yields the dual gradient on every time node at once.

use crate::fields::{eval_controlled, ControlFamily, FieldError, ScalarField};
use crate::measures::{EmpiricalMeasure, MeasureError};
use crate::time::{ControlSignal, TimeGrid};
use thiserror::Error;

/// States whose sup-norm exceeds this are treated as having escaped to
/// infinity and abort the integration.
pub const FINITE_RANGE: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("state left the finite range (|x| > 1e12) near t = {t}")]
    NonFinite { t: f64 },
    #[error("time {t} lies outside the horizon [{t0}, {t_end}]")]
    TimeOutOfRange { t: f64, t0: f64, t_end: f64 },
    #[error("point has dimension {got} but the dynamics have dimension {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("control signal covers [{got_t0}, {got_t_end}] but the time grid needs [{want_t0}, {want_t_end}]")]
    SignalSpan { want_t0: f64, want_t_end: f64, got_t0: f64, got_t_end: f64 },
    #[error("signal has {got} control components but the family has {want} basis fields")]
    ControlDimension { want: usize, got: usize },
    #[error("integrator needs at least one step per control interval")]
    InvalidIntegrator,
    #[error("{got} cost functions for {want} populations")]
    CostCount { want: usize, got: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Time-stepping scheme for the characteristic ODEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorScheme {
    Rk4,
    Euler,
}

/// Scheme plus step density: each control-constancy interval is cut into
/// `steps_per_interval` equal steps (partial intervals get a proportional
/// share, at least one step).
#[derive(Debug, Clone, Copy)]
pub struct IntegratorSpec {
    pub scheme: IntegratorScheme,
    pub steps_per_interval: usize,
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self { scheme: IntegratorScheme::Rk4, steps_per_interval: 4 }
    }
}

/// The flow X_{s→t} of ẋ = f(x) + Σ_k u^k(t) f^k(x) for one fixed control
/// signal. Evaluation is deterministic and X_{t→t} is the identity.
#[derive(Debug, Clone)]
pub struct FlowMap {
    family: ControlFamily,
    signal: ControlSignal,
    time_grid: TimeGrid,
    integrator: IntegratorSpec,
}

impl FlowMap {
    pub fn new(
        family: ControlFamily,
        signal: ControlSignal,
        time_grid: TimeGrid,
        integrator: IntegratorSpec,
    ) -> Result<Self, ParticleError> {
        if signal.dim() != family.n_controls() {
            return Err(ParticleError::ControlDimension {
                want: family.n_controls(),
                got: signal.dim(),
            });
        }
        if integrator.steps_per_interval == 0 {
            return Err(ParticleError::InvalidIntegrator);
        }
        let slack = 1e-9 * (1.0 + (time_grid.t_end() - time_grid.t0()).abs());
        if signal.t0() > time_grid.t0() + slack || signal.t_end() < time_grid.t_end() - slack {
            return Err(ParticleError::SignalSpan {
                want_t0: time_grid.t0(),
                want_t_end: time_grid.t_end(),
                got_t0: signal.t0(),
                got_t_end: signal.t_end(),
            });
        }
        Ok(Self { family, signal, time_grid, integrator })
    }

    /// [`FlowMap::new`] with the default RK4 integrator.
    pub fn with_default_integrator(
        family: ControlFamily,
        signal: ControlSignal,
        time_grid: TimeGrid,
    ) -> Result<Self, ParticleError> {
        Self::new(family, signal, time_grid, IntegratorSpec::default())
    }

    pub fn family(&self) -> &ControlFamily {
        &self.family
    }

    pub fn signal(&self) -> &ControlSignal {
        &self.signal
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn integrator(&self) -> IntegratorSpec {
        self.integrator
    }

    /// Same flow with a different control signal.
    pub fn with_signal(&self, signal: ControlSignal) -> Result<Self, ParticleError> {
        Self::new(self.family.clone(), signal, self.time_grid.clone(), self.integrator)
    }

    fn check_time(&self, t: f64) -> Result<(), ParticleError> {
        let slack = 1e-9 * (1.0 + (self.time_grid.t_end() - self.time_grid.t0()).abs());
        if t < self.time_grid.t0() - slack || t > self.time_grid.t_end() + slack {
            return Err(ParticleError::TimeOutOfRange {
                t,
                t0: self.time_grid.t0(),
                t_end: self.time_grid.t_end(),
            });
        }
        Ok(())
    }

    /// Split [t_from, t_to] (either direction) at the control break points
    /// and visit each piece with its constant control value and a
    /// proportional share of the per-interval step count.
    fn for_each_segment(
        &self,
        t_from: f64,
        t_to: f64,
        mut body: impl FnMut(f64, f64, &[f64], usize) -> Result<(), ParticleError>,
    ) -> Result<(), ParticleError> {
        let span = (self.signal.t_end() - self.signal.t0()).abs();
        let eps = 1e-12 * (1.0 + span);
        let forward = t_to >= t_from;
        let mut cuts: Vec<f64> = Vec::new();
        cuts.push(t_from);
        let bps = self.signal.break_points();
        if forward {
            for &b in bps {
                if b > t_from + eps && b < t_to - eps {
                    cuts.push(b);
                }
            }
        } else {
            for &b in bps.iter().rev() {
                if b < t_from - eps && b > t_to + eps {
                    cuts.push(b);
                }
            }
        }
        cuts.push(t_to);
        for pair in cuts.windows(2) {
            let (s0, s1) = (pair[0], pair[1]);
            if (s1 - s0).abs() <= eps {
                continue;
            }
            let mid = 0.5 * (s0 + s1);
            let idx = self.signal.partition().interval_index(mid);
            let (a, b) = self.signal.partition().interval(idx);
            let frac = ((s1 - s0).abs() / (b - a)).min(1.0);
            let steps = ((self.integrator.steps_per_interval as f64 * frac).ceil() as usize).max(1);
            body(s0, s1, &self.signal.values()[idx], steps)?;
        }
        Ok(())
    }

    /// X_{t_from→t_to}(x0). Backward transport (t_to < t_from) integrates
    /// the same ODE with a negative step.
    pub fn flow(&self, x0: &[f64], t_from: f64, t_to: f64) -> Result<Vec<f64>, ParticleError> {
        if x0.len() != self.family.dim() {
            return Err(ParticleError::DimensionMismatch { want: self.family.dim(), got: x0.len() });
        }
        self.check_time(t_from)?;
        self.check_time(t_to)?;
        let mut x = x0.to_vec();
        let mut scratch = Scratch::new(self.family.dim());
        self.for_each_segment(t_from, t_to, |s0, s1, u, steps| {
            let dt = (s1 - s0) / steps as f64;
            for step in 0..steps {
                let t = s0 + dt * step as f64;
                scratch.advance(&self.family, u, &mut x, dt, self.integrator.scheme)?;
                check_finite(&x, t + dt)?;
            }
            Ok(())
        })?;
        Ok(x)
    }

    /// X_{t_from→t_to} applied atom-wise; weights are untouched.
    pub fn pushforward(
        &self,
        m: &EmpiricalMeasure,
        t_from: f64,
        t_to: f64,
    ) -> Result<EmpiricalMeasure, ParticleError> {
        if m.dim() != self.family.dim() {
            return Err(ParticleError::DimensionMismatch { want: self.family.dim(), got: m.dim() });
        }
        let mut coords = Vec::with_capacity(m.coords().len());
        for i in 0..m.len() {
            coords.extend_from_slice(&self.flow(m.point(i), t_from, t_to)?);
        }
        Ok(m.with_coords(coords)?)
    }

    /// The dual value p_t(probe) = −ℓ(X_{t→T}(probe)) for every probe.
    pub fn dual_at_points(
        &self,
        l: &ScalarField,
        t: f64,
        probes: &[Vec<f64>],
    ) -> Result<Vec<f64>, ParticleError> {
        let mut out = Vec::with_capacity(probes.len());
        for probe in probes {
            let end = self.flow(probe, t, self.time_grid.t_end())?;
            out.push(-l.eval(&end)?);
        }
        Ok(out)
    }

    /// ∇p_t(probe) = −M(T)ᵀ∇ℓ(X_{t→T}(probe)) with M the sensitivity matrix
    /// from the variational equation Ṁ = J_w(X)·M, M(t) = I.
    pub fn dual_gradient_at_points(
        &self,
        l: &ScalarField,
        t: f64,
        probes: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, ParticleError> {
        let n = self.family.dim();
        let mut out = Vec::with_capacity(probes.len());
        for probe in probes {
            let (end, m) = self.flow_with_sensitivity(probe, t, self.time_grid.t_end())?;
            let gl = l.gradient(&end)?;
            let mut g = vec![0.0; n];
            // g = −Mᵀ·gl with M stored row-major.
            for (row, &glr) in m.chunks(n).zip(&gl) {
                for (gc, &mr) in g.iter_mut().zip(row) {
                    *gc -= mr * glr;
                }
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Flow a point together with its sensitivity matrix ∂X/∂x (row-major,
    /// n×n, initialized to the identity at t_from).
    pub fn flow_with_sensitivity(
        &self,
        x0: &[f64],
        t_from: f64,
        t_to: f64,
    ) -> Result<(Vec<f64>, Vec<f64>), ParticleError> {
        let n = self.family.dim();
        if x0.len() != n {
            return Err(ParticleError::DimensionMismatch { want: n, got: x0.len() });
        }
        self.check_time(t_from)?;
        self.check_time(t_to)?;
        // Augmented state (x, M) with derivative (w(x), J_w(x)·M).
        let mut z = vec![0.0; n + n * n];
        z[..n].copy_from_slice(x0);
        for i in 0..n {
            z[n + i * n + i] = 1.0;
        }
        let family = &self.family;
        let mut jac = vec![0.0; n * n];
        let mut aug = AugScratch::new(n + n * n);
        self.for_each_segment(t_from, t_to, |s0, s1, u, steps| {
            let dt = (s1 - s0) / steps as f64;
            for step in 0..steps {
                let t = s0 + dt * step as f64;
                aug.advance(
                    &mut z,
                    dt,
                    self.integrator.scheme,
                    |state, deriv| {
                        let (x, m) = state.split_at(n);
                        let (dx, dm) = deriv.split_at_mut(n);
                        eval_controlled(family, u, x, dx)?;
                        controlled_jacobian(family, u, x, &mut jac)?;
                        // dM = J·M, all row-major.
                        for r in 0..n {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for k in 0..n {
                                    acc += jac[r * n + k] * m[k * n + c];
                                }
                                dm[r * n + c] = acc;
                            }
                        }
                        Ok(())
                    },
                )?;
                check_finite(&z[..n], t + dt)?;
                if z[n..].iter().any(|v| !v.is_finite()) {
                    return Err(ParticleError::NonFinite { t: t + dt });
                }
            }
            Ok(())
        })?;
        let x = z[..n].to_vec();
        let m = z[n..].to_vec();
        Ok((x, m))
    }

    /// States and costates on every time-grid node along the characteristic
    /// through `x0`: returns (X_{t_k}(x0), q(t_k)) with q(t) = ∇p_t(X_t)
    /// solving q̇ = −J_w(X)ᵀq backward from q(T) = −∇ℓ(X_T).
    pub fn costate_flow(
        &self,
        l: &ScalarField,
        x0: &[f64],
    ) -> Result<CostateTrajectory, ParticleError> {
        let n = self.family.dim();
        if x0.len() != n {
            return Err(ParticleError::DimensionMismatch { want: n, got: x0.len() });
        }
        let tg = &self.time_grid;
        let n_nodes = tg.n_steps() + 1;
        // Forward sweep for the states on the nodes.
        let mut states = Vec::with_capacity(n_nodes);
        states.push(x0.to_vec());
        for k in 0..tg.n_steps() {
            let next = self.flow(states[k].as_slice(), tg.node(k), tg.node(k + 1))?;
            states.push(next);
        }
        // Backward sweep for (x, q) together; x re-traces its path so that
        // the costate sees consistent states at the integrator substeps.
        let x_t = states[n_nodes - 1].clone();
        let mut q_t = l.gradient(&x_t)?;
        for q in &mut q_t {
            *q = -*q;
        }
        let mut costates = vec![Vec::new(); n_nodes];
        costates[n_nodes - 1] = q_t.clone();
        let family = &self.family;
        let mut z = vec![0.0; 2 * n];
        z[..n].copy_from_slice(&x_t);
        z[n..].copy_from_slice(&q_t);
        let mut jac = vec![0.0; n * n];
        let mut aug = AugScratch::new(2 * n);
        for k in (0..tg.n_steps()).rev() {
            let (t_hi, t_lo) = (tg.node(k + 1), tg.node(k));
            self.for_each_segment(t_hi, t_lo, |s0, s1, u, steps| {
                let dt = (s1 - s0) / steps as f64;
                for step in 0..steps {
                    let t = s0 + dt * step as f64;
                    aug.advance(
                        &mut z,
                        dt,
                        self.integrator.scheme,
                        |state, deriv| {
                            let (x, q) = state.split_at(n);
                            let (dx, dq) = deriv.split_at_mut(n);
                            eval_controlled(family, u, x, dx)?;
                            controlled_jacobian(family, u, x, &mut jac)?;
                            // dq = −Jᵀ·q.
                            for c in 0..n {
                                let mut acc = 0.0;
                                for r in 0..n {
                                    acc += jac[r * n + c] * q[r];
                                }
                                dq[c] = -acc;
                            }
                            Ok(())
                        },
                    )?;
                    check_finite(&z, t + dt)?;
                }
                Ok(())
            })?;
            costates[k] = z[n..].to_vec();
        }
        Ok(CostateTrajectory { states, costates })
    }
}

/// Characteristic states and dual gradients on the time-grid nodes.
#[derive(Debug, Clone)]
pub struct CostateTrajectory {
    /// X_{t_k}(x0) per node k.
    pub states: Vec<Vec<f64>>,
    /// q(t_k) = ∇p_{t_k}(X_{t_k}(x0)) per node k.
    pub costates: Vec<Vec<f64>>,
}

/// J_w(x) of the controlled field w = f + Σ_k u^k f^k, row-major n×n.
pub fn controlled_jacobian(
    cf: &ControlFamily,
    u: &[f64],
    x: &[f64],
    out: &mut [f64],
) -> Result<(), FieldError> {
    if u.len() != cf.n_controls() {
        return Err(FieldError::ControlDimension { expected: cf.n_controls(), got: u.len() });
    }
    cf.drift().jacobian(x, out)?;
    let mut tmp = vec![0.0; out.len()];
    for (uk, fk) in u.iter().zip(cf.basis()) {
        if *uk == 0.0 {
            continue;
        }
        fk.jacobian(x, &mut tmp)?;
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += uk * t;
        }
    }
    Ok(())
}

fn check_finite(x: &[f64], t: f64) -> Result<(), ParticleError> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > FINITE_RANGE) {
        return Err(ParticleError::NonFinite { t });
    }
    Ok(())
}

/// Fixed-size scratch buffers for stepping the plain characteristic ODE.
struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn advance(
        &mut self,
        family: &ControlFamily,
        u: &[f64],
        x: &mut [f64],
        dt: f64,
        scheme: IntegratorScheme,
    ) -> Result<(), ParticleError> {
        match scheme {
            IntegratorScheme::Euler => {
                eval_controlled(family, u, x, &mut self.k1)?;
                for (xi, k) in x.iter_mut().zip(&self.k1) {
                    *xi += dt * k;
                }
            }
            IntegratorScheme::Rk4 => {
                eval_controlled(family, u, x, &mut self.k1)?;
                for ((t, xi), k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k1) {
                    *t = xi + 0.5 * dt * k;
                }
                eval_controlled(family, u, &self.tmp, &mut self.k2)?;
                for ((t, xi), k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k2) {
                    *t = xi + 0.5 * dt * k;
                }
                eval_controlled(family, u, &self.tmp, &mut self.k3)?;
                for ((t, xi), k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k3) {
                    *t = xi + dt * k;
                }
                eval_controlled(family, u, &self.tmp, &mut self.k4)?;
                for i in 0..x.len() {
                    x[i] += dt / 6.0
                        * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
            }
        }
        Ok(())
    }
}

/// Scratch for stepping an augmented system given by a closure derivative.
struct AugScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl AugScratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn advance(
        &mut self,
        z: &mut [f64],
        dt: f64,
        scheme: IntegratorScheme,
        mut deriv: impl FnMut(&[f64], &mut [f64]) -> Result<(), ParticleError>,
    ) -> Result<(), ParticleError> {
        match scheme {
            IntegratorScheme::Euler => {
                deriv(z, &mut self.k1)?;
                for (zi, k) in z.iter_mut().zip(&self.k1) {
                    *zi += dt * k;
                }
            }
            IntegratorScheme::Rk4 => {
                deriv(z, &mut self.k1)?;
                for ((t, zi), k) in self.tmp.iter_mut().zip(z.iter()).zip(&self.k1) {
                    *t = zi + 0.5 * dt * k;
                }
                deriv(&self.tmp.clone(), &mut self.k2)?;
                for ((t, zi), k) in self.tmp.iter_mut().zip(z.iter()).zip(&self.k2) {
                    *t = zi + 0.5 * dt * k;
                }
                deriv(&self.tmp.clone(), &mut self.k3)?;
                for ((t, zi), k) in self.tmp.iter_mut().zip(z.iter()).zip(&self.k3) {
                    *t = zi + dt * k;
                }
                deriv(&self.tmp.clone(), &mut self.k4)?;
                for i in 0..z.len() {
                    z[i] += dt / 6.0
                        * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
            }
        }
        Ok(())
    }
}

/// Labeled populations at one instant; the objective of the steering problem
/// is a weighted terminal cost summed over populations.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    populations: Vec<EmpiricalMeasure>,
    time: f64,
}

impl EnsembleState {
    pub fn new(populations: Vec<EmpiricalMeasure>, time: f64) -> Self {
        Self { populations, time }
    }

    pub fn single(m: EmpiricalMeasure, time: f64) -> Self {
        Self::new(vec![m], time)
    }

    /// The two-population form (x and y) used by the crossing experiments.
    pub fn pair(x: EmpiricalMeasure, y: EmpiricalMeasure, time: f64) -> Self {
        Self::new(vec![x, y], time)
    }

    pub fn populations(&self) -> &[EmpiricalMeasure] {
        &self.populations
    }

    pub fn time(&self) -> f64 {
        self.time
    }
}

/// Σ_pop Σ_i w_i ℓ_pop(x_i): the terminal objective on an ensemble.
pub fn ensemble_cost(state: &EnsembleState, costs: &[ScalarField]) -> Result<f64, ParticleError> {
    if costs.len() != state.populations.len() {
        return Err(ParticleError::CostCount { want: state.populations.len(), got: costs.len() });
    }
    let mut total = 0.0;
    for (m, l) in state.populations.iter().zip(costs) {
        for i in 0..m.len() {
            let v = l.eval(m.point(i))?;
            if !v.is_finite() {
                return Err(ParticleError::NonFinite { t: state.time });
            }
            total += m.weights()[i] * v;
        }
    }
    Ok(total)
}

/// Empirical frames on every node of a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct EmpiricalTrajectory {
    time_grid: TimeGrid,
    frames: Vec<EmpiricalMeasure>,
}

impl EmpiricalTrajectory {
    pub(crate) fn from_frames(time_grid: TimeGrid, frames: Vec<EmpiricalMeasure>) -> Self {
        debug_assert_eq!(frames.len(), time_grid.n_steps() + 1);
        Self { time_grid, frames }
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn frames(&self) -> &[EmpiricalMeasure] {
        &self.frames
    }

    /// Frame on time node `k` (0 ..= n_steps).
    pub fn frame(&self, k: usize) -> &EmpiricalMeasure {
        &self.frames[k]
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.frames.last().expect("trajectory has at least the initial frame")
    }
}

/// March an empirical measure across every node of the flow's time grid.
pub fn solve_ensemble(
    fm: &FlowMap,
    m0: &EmpiricalMeasure,
) -> Result<EmpiricalTrajectory, ParticleError> {
    let tg = fm.time_grid().clone();
    let mut frames = Vec::with_capacity(tg.n_steps() + 1);
    frames.push(m0.clone());
    for k in 0..tg.n_steps() {
        let next = fm.pushforward(&frames[k], tg.node(k), tg.node(k + 1))?;
        frames.push(next);
    }
    Ok(EmpiricalTrajectory { time_grid: tg, frames })
}
