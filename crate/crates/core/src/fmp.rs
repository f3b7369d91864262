//! Feedback improvement engine: sampled feedback strategies, localized
//! blending, and the iterative descent loop.
//!
//! Given a reference control ū with cost I[ū] and dual states p̄, the
//! extremal feedback w_t[μ] maximizes σ(t)·u over the box U, where σ is the
//! switching vector of the *current* measure against the *reference* dual.
//! Feedback is realized through sampling on a partition π = {t_k}:
//!
//!   * u-sampling holds w_{t_{k−1}}[μ^{k−1}] constant on [t_{k−1}, t_k);
//!   * piecewise-open-loop sampling freezes the measure at t_{k−1} but
//!     re-selects the control at every solver node inside the interval.
//!
//! A localized law blends toward the reference, ω_t[μ] = α·ū(t) +
//! (1−α)·w_t[μ] with α ∈ (0,1]; the box is convex, so sampled controls stay
//! feasible. The outer loop accepts a sampled control u^π when
//! I[u^π] − I[ū] < −ε₁ with ε₁ = eps1_rel·(1 + |I[ū]|), otherwise halves
//! the partition down to a diameter floor ε₂ and then advances an
//! (α, explore) schedule. Exhausting the schedule without improvement is
//! the qualification outcome: no tried feedback refuted extremality of ū.

use crate::fields::{ControlFamily, ControlSet, FieldError, ScalarField};
use crate::measures::{EmpiricalMeasure, GridMeasure, MeasureError};
use crate::particles::{
    ensemble_cost, solve_ensemble, EmpiricalTrajectory, EnsembleState, FlowMap, IntegratorSpec,
    ParticleError,
};
use crate::pmp::{
    default_tie_tolerance, extremal_control, switching_vector_empirical, FeedbackLaw, PmpError,
};
use crate::time::{ControlSignal, Partition, TimeError, TimeGrid};
use crate::transport::{
    advance_density, check_signal_span, solve_dual_backward_sampled, solve_forward_sampled,
    substep_count, DensityTrajectory, DualState, GridField, GridSampledFamily, TransportError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FmpError {
    #[error("localization weight {alpha} lies outside (0, 1]")]
    AlphaOutOfRange { alpha: f64 },
    #[error("a problem needs at least one population")]
    EmptyProblem,
    #[error("populations live on different grids")]
    GeometryMismatch,
    #[error("family drives {got} control components but the box has {want}")]
    ControlDimension { want: usize, got: usize },
    #[error("partition node {t} does not sit on a solver node")]
    PartitionOffGrid { t: f64 },
    #[error("the (alpha, explore) schedule is empty")]
    EmptySchedule,
    #[error(transparent)]
    Pmp(#[from] PmpError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Time(#[from] TimeError),
}

/// How feedback is realized on a sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingScheme {
    /// Hold the selection made at the interval's start node.
    Hold,
    /// Freeze the measure at the start node, re-select at every solver node.
    Reselect,
}

/// Clamp of `α·reference + (1−α)·raw` into the box (exact for a convex box;
/// the clamp only mops up rounding).
fn blend_clamped(alpha: f64, reference: &[f64], raw: &[f64], u_set: &ControlSet) -> Vec<f64> {
    reference
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(k, (r, w))| {
            (alpha * r + (1.0 - alpha) * w).clamp(u_set.lo()[k], u_set.hi()[k])
        })
        .collect()
}

/// Tie selection: an explore override fills every component with the same
/// (clamped) value; otherwise ties keep the reference control.
fn tie_fallback(explore: Option<f64>, reference: &[f64], u_set: &ControlSet) -> Vec<f64> {
    match explore {
        Some(s) => (0..reference.len())
            .map(|k| s.clamp(u_set.lo()[k], u_set.hi()[k]))
            .collect(),
        None => reference.to_vec(),
    }
}

/// A grid-backend feedback law together with its reference control and
/// localization weight (α = 0 is the raw extremal law).
#[derive(Debug, Clone)]
pub struct LocalizedLaw {
    law: FeedbackLaw,
    reference: ControlSignal,
    alpha: f64,
}

/// Blend a feedback law toward its reference control: the sampled value
/// becomes α·ū(t) + (1−α)·w_t[μ]. α = 1 reproduces the reference exactly;
/// α outside (0, 1] is rejected.
pub fn localized_law(
    reference_u: &ControlSignal,
    law: FeedbackLaw,
    alpha: f64,
) -> Result<LocalizedLaw, FmpError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FmpError::AlphaOutOfRange { alpha });
    }
    Ok(LocalizedLaw { law, reference: reference_u.clone(), alpha })
}

impl LocalizedLaw {
    /// The unblended extremal law (α = 0); the reference still resolves ties.
    pub fn raw(law: FeedbackLaw, reference: ControlSignal) -> Self {
        Self { law, reference, alpha: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn law(&self) -> &FeedbackLaw {
        &self.law
    }

    pub fn reference(&self) -> &ControlSignal {
        &self.reference
    }

    /// Sampled control value at time node `node` for the given measures.
    pub fn control_at(
        &self,
        node: usize,
        measures: &[&GridMeasure],
        sampled: &GridSampledFamily,
        explore: Option<f64>,
    ) -> Result<Vec<f64>, FmpError> {
        let t = self.law.duals()[0].time_grid().node(node);
        let reference = self.reference.value_at(t);
        let u_set = self.law.control_set();
        let fallback = tie_fallback(explore, reference, u_set);
        let sigma = self.law.switching_at(node, measures, sampled)?;
        let raw = extremal_control(&sigma, u_set, &fallback, default_tie_tolerance(&sigma));
        Ok(blend_clamped(self.alpha, reference, &raw, u_set))
    }
}

/// One population on the grid backend: dynamics, terminal cost sampled on
/// the grid, and the initial density.
#[derive(Debug, Clone)]
pub struct GridPopulation {
    family: ControlFamily,
    sampled: GridSampledFamily,
    terminal_cost: GridField,
    initial: GridMeasure,
}

impl GridPopulation {
    pub fn new(
        family: ControlFamily,
        cost: &ScalarField,
        initial: GridMeasure,
    ) -> Result<Self, FmpError> {
        let spec = initial.spec().clone();
        let sampled = GridSampledFamily::new(spec.clone(), &family)?;
        let terminal_cost = GridField::sample_scalar(spec, cost)?;
        Ok(Self { family, sampled, terminal_cost, initial })
    }

    pub fn family(&self) -> &ControlFamily {
        &self.family
    }

    pub fn sampled(&self) -> &GridSampledFamily {
        &self.sampled
    }

    pub fn terminal_cost(&self) -> &GridField {
        &self.terminal_cost
    }

    pub fn initial(&self) -> &GridMeasure {
        &self.initial
    }
}

/// ∫ l dμ by midpoint quadrature over cells.
pub fn grid_integral(l: &GridField, m: &GridMeasure) -> f64 {
    let area = m.spec().cell_area();
    l.values()
        .iter()
        .zip(m.density())
        .map(|(v, rho)| v * rho)
        .sum::<f64>()
        * area
}

/// An ensemble steering problem discretized on the grid backend.
#[derive(Debug, Clone)]
pub struct GridProblem {
    control_set: ControlSet,
    time_grid: TimeGrid,
    populations: Vec<GridPopulation>,
}

impl GridProblem {
    pub fn new(
        control_set: ControlSet,
        time_grid: TimeGrid,
        populations: Vec<GridPopulation>,
    ) -> Result<Self, FmpError> {
        let first = populations.first().ok_or(FmpError::EmptyProblem)?;
        let spec = first.initial.spec().clone();
        for pop in &populations {
            if !pop.initial.spec().same_geometry(&spec) {
                return Err(FmpError::GeometryMismatch);
            }
            if pop.family.n_controls() != control_set.dim() {
                return Err(FmpError::ControlDimension {
                    want: control_set.dim(),
                    got: pop.family.n_controls(),
                });
            }
        }
        Ok(Self { control_set, time_grid, populations })
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn populations(&self) -> &[GridPopulation] {
        &self.populations
    }

    /// Forward-solve every population under `u` and total the terminal cost.
    pub fn open_loop(&self, u: &ControlSignal) -> Result<(Vec<DensityTrajectory>, f64), FmpError> {
        let mut trajectories = Vec::with_capacity(self.populations.len());
        for pop in &self.populations {
            trajectories.push(solve_forward_sampled(
                &pop.initial,
                &pop.sampled,
                u,
                &self.time_grid,
            )?);
        }
        let cost = self.cost_of(&trajectories);
        Ok((trajectories, cost))
    }

    /// Σ_pop ∫ ℓ dμ_T over the trajectories' terminal frames.
    pub fn cost_of(&self, trajectories: &[DensityTrajectory]) -> f64 {
        self.populations
            .iter()
            .zip(trajectories)
            .map(|(pop, traj)| grid_integral(&pop.terminal_cost, traj.terminal()))
            .sum()
    }

    /// Backward dual states of every population under `u`.
    pub fn duals_for(&self, u: &ControlSignal) -> Result<Vec<DualState>, FmpError> {
        let mut duals = Vec::with_capacity(self.populations.len());
        for pop in &self.populations {
            duals.push(solve_dual_backward_sampled(
                &pop.terminal_cost,
                &pop.sampled,
                u,
                &self.time_grid,
            )?);
        }
        Ok(duals)
    }

    /// The feedback law of reference control `u` (duals re-solved under it).
    pub fn feedback_law(&self, u: &ControlSignal, alpha: f64) -> Result<LocalizedLaw, FmpError> {
        let law = FeedbackLaw::new(self.duals_for(u)?, self.control_set.clone());
        if alpha == 0.0 {
            Ok(LocalizedLaw::raw(law, u.clone()))
        } else {
            localized_law(u, law, alpha)
        }
    }
}

/// Outcome of one sampled-feedback run on the grid backend.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub control: ControlSignal,
    pub cost: f64,
    pub trajectories: Vec<DensityTrajectory>,
    pub mass_loss: Vec<f64>,
}

/// Map partition nodes to solver node indices; every node must sit on the
/// grid (use [`snap_partition`] first when in doubt).
fn partition_node_indices(tg: &TimeGrid, pi: &Partition) -> Result<Vec<usize>, FmpError> {
    let span = tg.t_end() - tg.t0();
    let mut out = Vec::with_capacity(pi.nodes().len());
    for &s in pi.nodes() {
        let k = ((s - tg.t0()) / tg.tau()).round().max(0.0) as usize;
        let k = k.min(tg.n_steps());
        if (tg.node(k) - s).abs() > 1e-9 * span {
            return Err(FmpError::PartitionOffGrid { t: s });
        }
        out.push(k);
    }
    Ok(out)
}

/// Move every partition node to the nearest solver node (endpoints stay
/// exact); collapsed intervals are dropped.
pub fn snap_partition(tg: &TimeGrid, pi: &Partition) -> Result<Partition, FmpError> {
    let mut nodes: Vec<f64> = Vec::with_capacity(pi.nodes().len());
    for &s in pi.nodes() {
        let k = ((s - tg.t0()) / tg.tau()).round().max(0.0) as usize;
        nodes.push(tg.node(k.min(tg.n_steps())));
    }
    nodes.dedup();
    Ok(Partition::new(nodes)?)
}

fn sample_grid(
    problem: &GridProblem,
    law: &LocalizedLaw,
    pi: &Partition,
    explore: Option<f64>,
    scheme: SamplingScheme,
) -> Result<GridSample, FmpError> {
    let tg = &problem.time_grid;
    let tau = tg.tau();
    let idx = partition_node_indices(tg, pi)?;
    let sampled0 = &problem.populations[0].sampled;
    let mut frames: Vec<Vec<GridMeasure>> = problem
        .populations
        .iter()
        .map(|p| {
            let mut v = Vec::with_capacity(tg.n_steps() + 1);
            v.push(p.initial.clone());
            v
        })
        .collect();
    let mut hold_values: Vec<Vec<f64>> = Vec::with_capacity(idx.len() - 1);
    let mut fine_values: Vec<Vec<f64>> = Vec::with_capacity(tg.n_steps());

    for w in idx.windows(2) {
        let (k0, k1) = (w[0], w[1]);
        match scheme {
            SamplingScheme::Hold => {
                let current: Vec<&GridMeasure> =
                    frames.iter().map(|f| f.last().expect("frames start nonempty")).collect();
                let u = law.control_at(k0, &current, sampled0, explore)?;
                for (pop, pop_frames) in problem.populations.iter().zip(&mut frames) {
                    let faces = pop.sampled.faces_for(&u)?;
                    let sub = substep_count(tau, faces.max_outflow_rate())?;
                    let tau_sub = tau / sub as f64;
                    for _ in k0..k1 {
                        let mut cur = pop_frames.last().expect("frames start nonempty").clone();
                        for _ in 0..sub {
                            cur = advance_density(&cur, &faces, tau_sub)?;
                        }
                        pop_frames.push(cur);
                    }
                }
                hold_values.push(u);
            }
            SamplingScheme::Reselect => {
                let frozen: Vec<GridMeasure> = frames
                    .iter()
                    .map(|f| f.last().expect("frames start nonempty").clone())
                    .collect();
                let frozen_refs: Vec<&GridMeasure> = frozen.iter().collect();
                for k in k0..k1 {
                    let u = law.control_at(k, &frozen_refs, sampled0, explore)?;
                    for (pop, pop_frames) in problem.populations.iter().zip(&mut frames) {
                        let faces = pop.sampled.faces_for(&u)?;
                        let sub = substep_count(tau, faces.max_outflow_rate())?;
                        let tau_sub = tau / sub as f64;
                        let mut cur = pop_frames.last().expect("frames start nonempty").clone();
                        for _ in 0..sub {
                            cur = advance_density(&cur, &faces, tau_sub)?;
                        }
                        pop_frames.push(cur);
                    }
                    fine_values.push(u);
                }
            }
        }
    }

    let control = match scheme {
        SamplingScheme::Hold => ControlSignal::new(pi.clone(), hold_values)?,
        SamplingScheme::Reselect => {
            ControlSignal::new(Partition::new(tg.nodes().collect())?, fine_values)?
        }
    };
    let trajectories: Vec<DensityTrajectory> = frames
        .into_iter()
        .map(|f| DensityTrajectory::from_frames(tg.clone(), f))
        .collect();
    let cost = problem.cost_of(&trajectories);
    let mass_loss = trajectories.iter().map(DensityTrajectory::boundary_loss).collect();
    Ok(GridSample { control, cost, trajectories, mass_loss })
}

/// u-sampling on the grid backend: one selection per partition interval,
/// held constant while the densities advance (Eq.-13-style realization).
pub fn sample_u_feedback_grid(
    problem: &GridProblem,
    law: &LocalizedLaw,
    pi: &Partition,
    explore: Option<f64>,
) -> Result<GridSample, FmpError> {
    sample_grid(problem, law, pi, explore, SamplingScheme::Hold)
}

/// Piecewise-open-loop sampling on the grid backend: the measure freezes at
/// each partition node while the selection updates on every solver node.
pub fn sample_ou_feedback_grid(
    problem: &GridProblem,
    law: &LocalizedLaw,
    pi: &Partition,
    explore: Option<f64>,
) -> Result<GridSample, FmpError> {
    sample_grid(problem, law, pi, explore, SamplingScheme::Reselect)
}

/// One population on the particle backend.
#[derive(Debug, Clone)]
pub struct ParticlePopulation {
    family: ControlFamily,
    cost: ScalarField,
    initial: EmpiricalMeasure,
}

impl ParticlePopulation {
    pub fn new(family: ControlFamily, cost: ScalarField, initial: EmpiricalMeasure) -> Self {
        Self { family, cost, initial }
    }

    pub fn family(&self) -> &ControlFamily {
        &self.family
    }

    pub fn cost(&self) -> &ScalarField {
        &self.cost
    }

    pub fn initial(&self) -> &EmpiricalMeasure {
        &self.initial
    }
}

/// An ensemble steering problem discretized on the particle backend.
#[derive(Debug, Clone)]
pub struct ParticleProblem {
    control_set: ControlSet,
    time_grid: TimeGrid,
    integrator: IntegratorSpec,
    populations: Vec<ParticlePopulation>,
}

impl ParticleProblem {
    pub fn new(
        control_set: ControlSet,
        time_grid: TimeGrid,
        integrator: IntegratorSpec,
        populations: Vec<ParticlePopulation>,
    ) -> Result<Self, FmpError> {
        if populations.is_empty() {
            return Err(FmpError::EmptyProblem);
        }
        for pop in &populations {
            if pop.family.n_controls() != control_set.dim() {
                return Err(FmpError::ControlDimension {
                    want: control_set.dim(),
                    got: pop.family.n_controls(),
                });
            }
        }
        Ok(Self { control_set, time_grid, integrator, populations })
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.time_grid
    }

    pub fn populations(&self) -> &[ParticlePopulation] {
        &self.populations
    }

    /// One validated flow map per population under the open-loop control `u`.
    pub fn flow_maps(&self, u: &ControlSignal) -> Result<Vec<FlowMap>, FmpError> {
        self.populations
            .iter()
            .map(|pop| {
                FlowMap::new(
                    pop.family.clone(),
                    u.clone(),
                    self.time_grid.clone(),
                    self.integrator,
                )
                .map_err(FmpError::from)
            })
            .collect()
    }

    /// Flow every population under `u` and total the terminal cost.
    pub fn open_loop(
        &self,
        u: &ControlSignal,
    ) -> Result<(Vec<EmpiricalTrajectory>, f64), FmpError> {
        let flows = self.flow_maps(u)?;
        let mut trajectories = Vec::with_capacity(flows.len());
        for (fm, pop) in flows.iter().zip(&self.populations) {
            trajectories.push(solve_ensemble(fm, &pop.initial)?);
        }
        let cost = self.cost_of(&trajectories)?;
        Ok((trajectories, cost))
    }

    /// Σ_pop Σ_i w_i ℓ(x_i(T)).
    pub fn cost_of(&self, trajectories: &[EmpiricalTrajectory]) -> Result<f64, FmpError> {
        let terminal: Vec<EmpiricalMeasure> =
            trajectories.iter().map(|t| t.terminal().clone()).collect();
        let costs: Vec<ScalarField> =
            self.populations.iter().map(|p| p.cost.clone()).collect();
        let state = EnsembleState::new(terminal, self.time_grid.t_end());
        Ok(ensemble_cost(&state, &costs)?)
    }

    /// The feedback law of reference control `u`: reference flows for dual
    /// gradients plus the localization weight (0 = raw extremal law).
    pub fn feedback_law(&self, u: &ControlSignal, alpha: f64) -> Result<ParticleLaw, FmpError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(FmpError::AlphaOutOfRange { alpha });
        }
        Ok(ParticleLaw {
            flows: self.flow_maps(u)?,
            reference: u.clone(),
            alpha,
            control_set: self.control_set.clone(),
        })
    }
}

/// Particle-backend feedback law: reference flow maps stand in for dual
/// states, with gradients evaluated along backward variational sweeps.
#[derive(Debug, Clone)]
pub struct ParticleLaw {
    flows: Vec<FlowMap>,
    reference: ControlSignal,
    alpha: f64,
    control_set: ControlSet,
}

impl ParticleLaw {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn reference(&self) -> &ControlSignal {
        &self.reference
    }

    /// Sampled control value at time `t` for the given per-population atoms.
    pub fn control_at(
        &self,
        t: f64,
        measures: &[&EmpiricalMeasure],
        costs: &[&ScalarField],
        family: &ControlFamily,
        explore: Option<f64>,
    ) -> Result<Vec<f64>, FmpError> {
        let mut grads = Vec::with_capacity(measures.len());
        for ((fm, l), m) in self.flows.iter().zip(costs).zip(measures) {
            let points: Vec<Vec<f64>> = (0..m.len()).map(|i| m.point(i).to_vec()).collect();
            grads.push(fm.dual_gradient_at_points(l, t, &points)?);
        }
        let pairs: Vec<(&[Vec<f64>], &EmpiricalMeasure)> = grads
            .iter()
            .map(|g| g.as_slice())
            .zip(measures.iter().copied())
            .collect();
        let sigma = switching_vector_empirical(&pairs, family)?;
        let reference = self.reference.value_at(t);
        let fallback = tie_fallback(explore, reference, &self.control_set);
        let raw = extremal_control(&sigma, &self.control_set, &fallback, default_tie_tolerance(&sigma));
        Ok(blend_clamped(self.alpha, reference, &raw, &self.control_set))
    }
}

/// Outcome of one sampled-feedback run on the particle backend (atoms never
/// leave the flow, so there is no mass loss to report).
#[derive(Debug, Clone)]
pub struct ParticleSample {
    pub control: ControlSignal,
    pub cost: f64,
    pub trajectories: Vec<EmpiricalTrajectory>,
}

fn sample_particles(
    problem: &ParticleProblem,
    law: &ParticleLaw,
    pi: &Partition,
    explore: Option<f64>,
    scheme: SamplingScheme,
) -> Result<ParticleSample, FmpError> {
    let tg = &problem.time_grid;
    let idx = partition_node_indices(tg, pi)?;
    let family = &problem.populations[0].family;
    let costs: Vec<&ScalarField> = problem.populations.iter().map(|p| &p.cost).collect();
    let mut frames: Vec<Vec<EmpiricalMeasure>> = problem
        .populations
        .iter()
        .map(|p| {
            let mut v = Vec::with_capacity(tg.n_steps() + 1);
            v.push(p.initial.clone());
            v
        })
        .collect();
    let mut hold_values: Vec<Vec<f64>> = Vec::with_capacity(idx.len() - 1);
    let mut fine_values: Vec<Vec<f64>> = Vec::with_capacity(tg.n_steps());

    let advance = |frames: &mut Vec<Vec<EmpiricalMeasure>>,
                       k: usize,
                       u: &[f64]|
     -> Result<(), FmpError> {
        let signal = ControlSignal::constant(tg.t0(), tg.t_end(), u.to_vec())?;
        for (pop, pop_frames) in problem.populations.iter().zip(frames.iter_mut()) {
            let fm = FlowMap::new(
                pop.family.clone(),
                signal.clone(),
                tg.clone(),
                problem.integrator,
            )?;
            let cur = pop_frames.last().expect("frames start nonempty");
            let next = fm.pushforward(cur, tg.node(k), tg.node(k + 1))?;
            pop_frames.push(next);
        }
        Ok(())
    };

    for w in idx.windows(2) {
        let (k0, k1) = (w[0], w[1]);
        match scheme {
            SamplingScheme::Hold => {
                let current: Vec<&EmpiricalMeasure> =
                    frames.iter().map(|f| f.last().expect("frames start nonempty")).collect();
                let u = law.control_at(tg.node(k0), &current, &costs, family, explore)?;
                for k in k0..k1 {
                    advance(&mut frames, k, &u)?;
                }
                hold_values.push(u);
            }
            SamplingScheme::Reselect => {
                let frozen: Vec<EmpiricalMeasure> = frames
                    .iter()
                    .map(|f| f.last().expect("frames start nonempty").clone())
                    .collect();
                let frozen_refs: Vec<&EmpiricalMeasure> = frozen.iter().collect();
                for k in k0..k1 {
                    let u = law.control_at(tg.node(k), &frozen_refs, &costs, family, explore)?;
                    advance(&mut frames, k, &u)?;
                    fine_values.push(u);
                }
            }
        }
    }

    let control = match scheme {
        SamplingScheme::Hold => ControlSignal::new(pi.clone(), hold_values)?,
        SamplingScheme::Reselect => {
            ControlSignal::new(Partition::new(tg.nodes().collect())?, fine_values)?
        }
    };
    let trajectories: Vec<EmpiricalTrajectory> = frames
        .into_iter()
        .map(|f| EmpiricalTrajectory::from_frames(tg.clone(), f))
        .collect();
    let cost = problem.cost_of(&trajectories)?;
    Ok(ParticleSample { control, cost, trajectories })
}

/// u-sampling on the particle backend.
pub fn sample_u_feedback_particles(
    problem: &ParticleProblem,
    law: &ParticleLaw,
    pi: &Partition,
    explore: Option<f64>,
) -> Result<ParticleSample, FmpError> {
    sample_particles(problem, law, pi, explore, SamplingScheme::Hold)
}

/// Piecewise-open-loop sampling on the particle backend.
pub fn sample_ou_feedback_particles(
    problem: &ParticleProblem,
    law: &ParticleLaw,
    pi: &Partition,
    explore: Option<f64>,
) -> Result<ParticleSample, FmpError> {
    sample_particles(problem, law, pi, explore, SamplingScheme::Reselect)
}

/// Knobs of the improvement loop.
#[derive(Debug, Clone)]
pub struct FmpParams {
    /// Relative improvement threshold: accept when the cost drops by more
    /// than eps1_rel·(1 + |I[ū]|).
    pub eps1_rel: f64,
    /// Partition diameter floor: refinement stops once diam(π) < eps2.
    pub eps2: f64,
    /// Localization schedule; 0 means the raw extremal law.
    pub alphas: Vec<f64>,
    /// Tie-exploration schedule (constant override value, or None to keep
    /// the reference at ties).
    pub explores: Vec<Option<f64>>,
    pub scheme: SamplingScheme,
    pub max_outer: usize,
    /// Sampling partition to start from (defaults to the reference
    /// control's own partition), snapped to solver nodes.
    pub initial_partition: Option<Partition>,
}

impl FmpParams {
    /// Defaults: raw law first, then localized variants; explore ±1 at
    /// ties; partition floor at two solver steps.
    pub fn default_for(tg: &TimeGrid) -> Self {
        Self {
            eps1_rel: 1e-8,
            eps2: 2.0 * tg.tau(),
            alphas: vec![0.0, 0.75, 0.5, 0.25],
            explores: vec![Some(1.0), Some(-1.0)],
            scheme: SamplingScheme::Hold,
            max_outer: 100,
            initial_partition: None,
        }
    }
}

/// One tried feedback: its sampled control, achieved cost, and the schedule
/// state that produced it.
#[derive(Debug, Clone)]
pub struct FmpIterate {
    pub control: ControlSignal,
    pub cost: f64,
    pub accepted: bool,
    pub alpha: f64,
    pub explore: Option<f64>,
    pub diam: f64,
    /// Boundary mass loss per population (zeros on the particle backend).
    pub mass_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Every (α, explore) entry was refined to the partition floor without
    /// improvement.
    SchedulesExhausted,
    MaxOuterReached,
}

/// A trial summary fed to [`qualification_check`].
#[derive(Debug, Clone)]
pub struct FeedbackTrial {
    pub cost: f64,
    pub alpha: f64,
    pub explore: Option<f64>,
    pub diam: f64,
}

/// A trial that strictly beat the reference.
#[derive(Debug, Clone)]
pub struct Witness {
    pub trial: usize,
    pub diam: f64,
    pub cost: f64,
}

/// Extremality-qualification outcome over a finite trial set. `holds`
/// means no trial refuted the reference; it is never a proof of optimality.
#[derive(Debug, Clone)]
pub struct Qualification {
    pub holds: bool,
    /// Largest improvement any trial achieved over the reference (≤ 0 when
    /// none did).
    pub best_violation: f64,
    pub witnesses: Vec<Witness>,
}

/// Compare every tried feedback against the reference cost: a witness is a
/// trial with cost < reference − eps.
pub fn qualification_check(
    reference_cost: f64,
    eps: f64,
    trials: &[FeedbackTrial],
) -> Qualification {
    let mut witnesses = Vec::new();
    let mut best_violation = f64::NEG_INFINITY;
    for (i, trial) in trials.iter().enumerate() {
        best_violation = best_violation.max(reference_cost - trial.cost);
        if trial.cost < reference_cost - eps {
            witnesses.push(Witness { trial: i, diam: trial.diam, cost: trial.cost });
        }
    }
    if trials.is_empty() {
        best_violation = 0.0;
    }
    Qualification { holds: witnesses.is_empty(), best_violation, witnesses }
}

/// Full run record: every trial, the surviving control, and the terminal
/// qualification outcome.
#[derive(Debug, Clone)]
pub struct FmpReport {
    pub iterates: Vec<FmpIterate>,
    pub initial_cost: f64,
    pub final_control: ControlSignal,
    pub final_cost: f64,
    pub qualification: Qualification,
    pub termination: TerminationReason,
}

impl FmpReport {
    /// Costs of the accepted iterates, in order (strictly decreasing).
    pub fn accepted_costs(&self) -> Vec<f64> {
        self.iterates.iter().filter(|it| it.accepted).map(|it| it.cost).collect()
    }
}

trait Engine {
    type Law;
    fn time_grid(&self) -> &TimeGrid;
    fn open_cost(&self, u: &ControlSignal) -> Result<f64, FmpError>;
    fn law_for(&self, u: &ControlSignal, alpha: f64) -> Result<Self::Law, FmpError>;
    fn sample(
        &self,
        law: &Self::Law,
        pi: &Partition,
        explore: Option<f64>,
        scheme: SamplingScheme,
    ) -> Result<(ControlSignal, f64, Vec<f64>), FmpError>;
}

struct GridEngine<'a>(&'a GridProblem);

impl Engine for GridEngine<'_> {
    type Law = LocalizedLaw;

    fn time_grid(&self) -> &TimeGrid {
        self.0.time_grid()
    }

    fn open_cost(&self, u: &ControlSignal) -> Result<f64, FmpError> {
        Ok(self.0.open_loop(u)?.1)
    }

    fn law_for(&self, u: &ControlSignal, alpha: f64) -> Result<Self::Law, FmpError> {
        self.0.feedback_law(u, alpha)
    }

    fn sample(
        &self,
        law: &Self::Law,
        pi: &Partition,
        explore: Option<f64>,
        scheme: SamplingScheme,
    ) -> Result<(ControlSignal, f64, Vec<f64>), FmpError> {
        let out = sample_grid(self.0, law, pi, explore, scheme)?;
        Ok((out.control, out.cost, out.mass_loss))
    }
}

struct ParticleEngine<'a>(&'a ParticleProblem);

impl Engine for ParticleEngine<'_> {
    type Law = ParticleLaw;

    fn time_grid(&self) -> &TimeGrid {
        self.0.time_grid()
    }

    fn open_cost(&self, u: &ControlSignal) -> Result<f64, FmpError> {
        Ok(self.0.open_loop(u)?.1)
    }

    fn law_for(&self, u: &ControlSignal, alpha: f64) -> Result<Self::Law, FmpError> {
        self.0.feedback_law(u, alpha)
    }

    fn sample(
        &self,
        law: &Self::Law,
        pi: &Partition,
        explore: Option<f64>,
        scheme: SamplingScheme,
    ) -> Result<(ControlSignal, f64, Vec<f64>), FmpError> {
        let out = sample_particles(self.0, law, pi, explore, scheme)?;
        let zeros = vec![0.0; self.0.populations().len()];
        Ok((out.control, out.cost, zeros))
    }
}

fn run_iterations<E: Engine>(
    engine: &E,
    reference_u: &ControlSignal,
    params: &FmpParams,
) -> Result<FmpReport, FmpError> {
    if params.alphas.is_empty() || params.explores.is_empty() {
        return Err(FmpError::EmptySchedule);
    }
    let schedule: Vec<(f64, Option<f64>)> = params
        .alphas
        .iter()
        .flat_map(|&a| params.explores.iter().map(move |&e| (a, e)))
        .collect();
    let tg = engine.time_grid().clone();
    check_signal_span(reference_u, &tg)?;
    let initial_pi = snap_partition(
        &tg,
        params.initial_partition.as_ref().unwrap_or(reference_u.partition()),
    )?;

    let mut reference = reference_u.clone();
    let mut ref_cost = engine.open_cost(&reference)?;
    let initial_cost = ref_cost;
    let mut schedule_idx = 0usize;
    let mut pi = initial_pi.clone();
    let mut law = engine.law_for(&reference, schedule[0].0)?;
    let mut iterates: Vec<FmpIterate> = Vec::new();
    let mut termination = TerminationReason::MaxOuterReached;

    for _ in 0..params.max_outer {
        let (alpha, explore) = schedule[schedule_idx];
        let (control, cost, mass_loss) = engine.sample(&law, &pi, explore, params.scheme)?;
        let eps1 = params.eps1_rel * (1.0 + ref_cost.abs());
        let accepted = cost - ref_cost < -eps1;
        iterates.push(FmpIterate {
            control: control.clone(),
            cost,
            accepted,
            alpha,
            explore,
            diam: pi.diam(),
            mass_loss,
        });
        if accepted {
            reference = control;
            ref_cost = cost;
            law = engine.law_for(&reference, alpha)?;
        } else {
            let halved = pi.halved(Some(&tg));
            if pi.diam() >= params.eps2 && halved.n_intervals() > pi.n_intervals() {
                pi = halved;
            } else {
                schedule_idx += 1;
                if schedule_idx == schedule.len() {
                    termination = TerminationReason::SchedulesExhausted;
                    break;
                }
                pi = initial_pi.clone();
                law = engine.law_for(&reference, schedule[schedule_idx].0)?;
            }
        }
    }

    let eps_q = params.eps1_rel * (1.0 + ref_cost.abs());
    let trials: Vec<FeedbackTrial> = iterates
        .iter()
        .map(|it| FeedbackTrial {
            cost: it.cost,
            alpha: it.alpha,
            explore: it.explore,
            diam: it.diam,
        })
        .collect();
    let qualification = qualification_check(ref_cost, eps_q, &trials);
    Ok(FmpReport {
        iterates,
        initial_cost,
        final_control: reference,
        final_cost: ref_cost,
        qualification,
        termination,
    })
}

/// Improvement loop on the grid backend: solve duals, sample feedback,
/// accept strict improvements, refine the partition, advance the schedule.
pub fn fmp_iterate_grid(
    problem: &GridProblem,
    reference_u: &ControlSignal,
    params: &FmpParams,
) -> Result<FmpReport, FmpError> {
    run_iterations(&GridEngine(problem), reference_u, params)
}

/// Improvement loop on the particle backend.
pub fn fmp_iterate_particles(
    problem: &ParticleProblem,
    reference_u: &ControlSignal,
    params: &FmpParams,
) -> Result<FmpReport, FmpError> {
    run_iterations(&ParticleEngine(problem), reference_u, params)
}
