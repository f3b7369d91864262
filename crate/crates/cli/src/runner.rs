//! Command dispatch: build the declared problem from a scenario, run one
//! of solve / simulate / check-pmp / ingest, and write the artifacts.

use std::path::PathBuf;

use measure_steer_core::fields::{parse_field, ControlFamily, ControlSet, ScalarField};
use measure_steer_core::fmp::{
    fmp_iterate_grid, fmp_iterate_particles, FmpParams, FmpReport, GridPopulation, GridProblem,
    ParticlePopulation, ParticleProblem, TerminationReason,
};
use measure_steer_core::measures::{
    moment_first_empirical, moment_first_grid, EmpiricalMeasure,
};
use measure_steer_core::particles::IntegratorSpec;
use measure_steer_core::pmp::{pmp_residual_grid, pmp_residual_particles, PmpResidual};
use measure_steer_core::time::{ControlSignal, Partition, TimeGrid};
use thiserror::Error;

use crate::artifacts::{
    atoms_csv, control_csv, density_csv, fmt_float, ledger_csv, means_csv, read_control_csv,
    residual_csv, sha256_hex, ArtifactError, ArtifactSet,
};
use crate::scenario::{Backend, Scenario, ScenarioError, SourceSpec};
use crate::sources::{empirical_measure, grid_measure, SourceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Solve,
    Simulate,
    CheckPmp,
    Ingest,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Solve => "solve",
            CommandKind::Simulate => "simulate",
            CommandKind::CheckPmp => "check-pmp",
            CommandKind::Ingest => "ingest",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    /// Scenario file path or built-in name.
    pub scenario: String,
    pub out: PathBuf,
    pub backend: Option<Backend>,
    pub seed: Option<u64>,
    pub control: Option<PathBuf>,
}

/// Failures sorted by exit class: scenario and input problems exit 2,
/// solver and output problems exit 3.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Input(#[from] SourceError),
    #[error("control file: {0}")]
    Control(ArtifactError),
    #[error("{0}")]
    Usage(String),
    #[error("solver: {0}")]
    Solver(Box<dyn std::error::Error + Send + Sync>),
    #[error("output: {0}")]
    Output(ArtifactError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) | RunError::Input(_) | RunError::Control(_) | RunError::Usage(_) => 2,
            RunError::Solver(_) | RunError::Output(_) => 3,
        }
    }
}

fn solver_err(e: impl std::error::Error + Send + Sync + 'static) -> RunError {
    RunError::Solver(Box::new(e))
}

/// What a finished run reports back: the printed summary plus the numbers
/// integration tests assert on.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Vec<String>,
    pub final_cost: Option<f64>,
    pub residual_max: Option<f64>,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let mut scenario = Scenario::load(&cfg.scenario)?;
    if let Some(backend) = cfg.backend {
        scenario.backend = backend;
    }
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    if scenario.backend == Backend::Grid && scenario.grid.is_none() {
        return Err(RunError::Scenario(ScenarioError::Validation {
            field: "[grid]".into(),
            reason: "required by the grid backend".into(),
        }));
    }

    let mut summary = Vec::new();
    if scenario.backend == Backend::Grid {
        for w in &scenario.warnings {
            summary.push(format!("warning: {w}"));
        }
    }

    let mut artifacts = ArtifactSet::create(&cfg.out).map_err(RunError::Output)?;
    let outcome = match cfg.command {
        CommandKind::Solve => run_solve(&scenario, cfg, &mut artifacts, &mut summary)?,
        CommandKind::Simulate => run_simulate(&scenario, cfg, &mut artifacts, &mut summary)?,
        CommandKind::CheckPmp => run_check_pmp(&scenario, cfg, &mut artifacts, &mut summary)?,
        CommandKind::Ingest => run_ingest(&scenario, &mut artifacts, &mut summary)?,
    };
    artifacts.finish(&manifest_header(&scenario, cfg)).map_err(RunError::Output)?;
    Ok(RunOutcome { summary, final_cost: outcome.0, residual_max: outcome.1 })
}

fn manifest_header(scenario: &Scenario, cfg: &RunConfig) -> Vec<String> {
    let algo = &scenario.algorithm;
    let mut lines = vec![
        format!("command = {}", cfg.command.name()),
        format!("scenario = {}", scenario.name),
        format!("scenario_sha256 = {}", sha256_hex(scenario.source_text.as_bytes())),
        format!("backend = {}", scenario.backend.name()),
        format!("seed = {}", scenario.seed),
        format!(
            "time = t0 {} t_end {} steps {}",
            scenario.time.t0(),
            scenario.time.t_end(),
            scenario.time.n_steps()
        ),
        format!(
            "algorithm = eps1_rel {} eps2 {} alphas {:?} explores [{}] max_outer {} partition {}",
            algo.eps1_rel,
            algo.eps2.unwrap_or(2.0 * scenario.time.tau()),
            algo.alphas,
            algo.explores
                .iter()
                .map(|e| e.map_or("none".to_string(), |v| v.to_string()))
                .collect::<Vec<_>>()
                .join(", "),
            algo.max_outer,
            algo.partition
        ),
    ];
    for w in &scenario.warnings {
        lines.push(format!("warning = {w}"));
    }
    lines
}

fn population_name(i: usize) -> &'static str {
    ["mu", "nu"][i]
}

fn control_set(scenario: &Scenario) -> Result<ControlSet, RunError> {
    ControlSet::new(scenario.control.lo.clone(), scenario.control.hi.clone()).map_err(solver_err)
}

fn family_for(scenario: &Scenario, pop: usize) -> Result<ControlFamily, RunError> {
    let mut basis = Vec::with_capacity(scenario.control.basis.len());
    for src in &scenario.control.basis {
        basis.push(parse_field(src).map_err(solver_err)?);
    }
    let family = ControlFamily::driftless(basis).map_err(solver_err)?;
    match &scenario.populations[pop].drift {
        None => Ok(family),
        Some(src) => {
            let drift = parse_field(src).map_err(solver_err)?;
            family.with_drift(drift).map_err(solver_err)
        }
    }
}

fn cost_for(scenario: &Scenario, pop: usize) -> Result<ScalarField, RunError> {
    scenario.populations[pop].cost.build().map_err(solver_err)
}

fn build_grid_problem(scenario: &Scenario) -> Result<GridProblem, RunError> {
    let mut populations = Vec::with_capacity(scenario.populations.len());
    for i in 0..scenario.populations.len() {
        let family = family_for(scenario, i)?;
        let cost = cost_for(scenario, i)?;
        let initial = grid_measure(scenario, i)?;
        populations.push(GridPopulation::new(family, &cost, initial).map_err(solver_err)?);
    }
    GridProblem::new(control_set(scenario)?, scenario.time.clone(), populations)
        .map_err(solver_err)
}

fn build_particle_problem(scenario: &Scenario) -> Result<ParticleProblem, RunError> {
    let mut populations = Vec::with_capacity(scenario.populations.len());
    for i in 0..scenario.populations.len() {
        let family = family_for(scenario, i)?;
        let cost = cost_for(scenario, i)?;
        let initial = empirical_measure(scenario, i)?;
        populations.push(ParticlePopulation::new(family, cost, initial));
    }
    ParticleProblem::new(
        control_set(scenario)?,
        scenario.time.clone(),
        IntegratorSpec::default(),
        populations,
    )
    .map_err(solver_err)
}

/// The reference control: either the `--control` CSV or the scenario's
/// constant guess.
fn reference_control(scenario: &Scenario, cfg: &RunConfig) -> Result<ControlSignal, RunError> {
    match &cfg.control {
        Some(path) => read_control_csv(path, &scenario.time, scenario.control.basis.len())
            .map_err(RunError::Control),
        None => ControlSignal::constant(
            scenario.time.t0(),
            scenario.time.t_end(),
            scenario.control.guess.clone(),
        )
        .map_err(solver_err),
    }
}

fn fmp_params(scenario: &Scenario) -> Result<FmpParams, RunError> {
    let algo = &scenario.algorithm;
    let mut params = FmpParams::default_for(&scenario.time);
    params.eps1_rel = algo.eps1_rel;
    if let Some(e2) = algo.eps2 {
        params.eps2 = e2;
    }
    params.alphas = algo.alphas.clone();
    params.explores = algo.explores.clone();
    params.scheme = algo.scheme;
    params.max_outer = algo.max_outer;
    params.initial_partition =
        Some(Partition::uniform_on(&scenario.time, algo.partition).map_err(solver_err)?);
    Ok(params)
}

/// Pick `count` roughly evenly spaced node indices including both ends.
fn frame_indices(n_steps: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(2, n_steps + 1);
    let mut idx: Vec<usize> = (0..count)
        .map(|i| ((i as f64 / (count - 1) as f64) * n_steps as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

fn termination_name(t: TerminationReason) -> &'static str {
    match t {
        TerminationReason::SchedulesExhausted => "schedules exhausted",
        TerminationReason::MaxOuterReached => "iteration budget reached",
    }
}

fn solve_summary(report: &FmpReport, summary: &mut Vec<String>) {
    let accepted = report.accepted_costs();
    summary.push(format!("initial cost = {}", fmt_float(report.initial_cost)));
    summary.push(format!("final cost = {}", fmt_float(report.final_cost)));
    summary.push(format!(
        "iterates = {} tried, {} accepted",
        report.iterates.len(),
        accepted.len()
    ));
    summary.push(format!("termination = {}", termination_name(report.termination)));
    summary.push(format!(
        "qualification = {} (best improvement over the result {})",
        if report.qualification.holds { "holds" } else { "refuted" },
        fmt_float(report.qualification.best_violation)
    ));
}

fn run_solve(
    scenario: &Scenario,
    cfg: &RunConfig,
    artifacts: &mut ArtifactSet,
    summary: &mut Vec<String>,
) -> Result<(Option<f64>, Option<f64>), RunError> {
    let reference = reference_control(scenario, cfg)?;
    let params = fmp_params(scenario)?;
    let report = match scenario.backend {
        Backend::Grid => {
            let problem = build_grid_problem(scenario)?;
            let report =
                fmp_iterate_grid(&problem, &reference, &params).map_err(solver_err)?;
            write_grid_frames(scenario, &problem, &report.final_control, artifacts, 2)?;
            report
        }
        Backend::Particles => {
            let problem = build_particle_problem(scenario)?;
            let report =
                fmp_iterate_particles(&problem, &reference, &params).map_err(solver_err)?;
            write_particle_frames(scenario, &problem, &report.final_control, artifacts, 2)?;
            report
        }
    };
    artifacts.write("run_ledger.csv", &ledger_csv(&report)).map_err(RunError::Output)?;
    artifacts
        .write("final_control.csv", &control_csv(&report.final_control))
        .map_err(RunError::Output)?;
    solve_summary(&report, summary);
    Ok((Some(report.final_cost), None))
}

fn run_simulate(
    scenario: &Scenario,
    cfg: &RunConfig,
    artifacts: &mut ArtifactSet,
    summary: &mut Vec<String>,
) -> Result<(Option<f64>, Option<f64>), RunError> {
    let u = reference_control(scenario, cfg)?;
    let cost = match scenario.backend {
        Backend::Grid => {
            let problem = build_grid_problem(scenario)?;
            let cost = write_grid_frames(scenario, &problem, &u, artifacts, scenario.frames)?;
            artifacts.write("control.csv", &control_csv(&u)).map_err(RunError::Output)?;
            cost
        }
        Backend::Particles => {
            let problem = build_particle_problem(scenario)?;
            let cost = write_particle_frames(scenario, &problem, &u, artifacts, scenario.frames)?;
            artifacts.write("control.csv", &control_csv(&u)).map_err(RunError::Output)?;
            cost
        }
    };
    summary.push(format!("cost = {}", fmt_float(cost)));
    Ok((Some(cost), None))
}

/// Transport every population under `u`, dump the selected density frames
/// and per-population mean tracks, and return the terminal cost.
fn write_grid_frames(
    scenario: &Scenario,
    problem: &GridProblem,
    u: &ControlSignal,
    artifacts: &mut ArtifactSet,
    frame_count: usize,
) -> Result<f64, RunError> {
    let (trajectories, cost) = problem.open_loop(u).map_err(solver_err)?;
    let n = scenario.time.n_steps();
    let indices = frame_indices(n, frame_count);
    for (i, traj) in trajectories.iter().enumerate() {
        let name = population_name(i);
        for &k in &indices {
            artifacts
                .write(&format!("{name}_t{k}.csv"), &density_csv(traj.frame(k)))
                .map_err(RunError::Output)?;
        }
        let mut times = Vec::with_capacity(n + 1);
        let mut means = Vec::with_capacity(n + 1);
        let mut masses = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let frame = traj.frame(k);
            let mom = moment_first_grid(frame).map_err(solver_err)?;
            times.push(scenario.time.node(k));
            means.push(mom.mean);
            masses.push(frame.mass());
        }
        artifacts
            .write(&format!("means_{name}.csv"), &means_csv(&times, &means, &masses))
            .map_err(RunError::Output)?;
    }
    Ok(cost)
}

fn write_particle_frames(
    scenario: &Scenario,
    problem: &ParticleProblem,
    u: &ControlSignal,
    artifacts: &mut ArtifactSet,
    frame_count: usize,
) -> Result<f64, RunError> {
    let (trajectories, cost) = problem.open_loop(u).map_err(solver_err)?;
    let n = scenario.time.n_steps();
    let indices = frame_indices(n, frame_count);
    for (i, traj) in trajectories.iter().enumerate() {
        let name = population_name(i);
        for &k in &indices {
            artifacts
                .write(&format!("{name}_t{k}.csv"), &atoms_csv(traj.frame(k)))
                .map_err(RunError::Output)?;
        }
        let mut times = Vec::with_capacity(n + 1);
        let mut means = Vec::with_capacity(n + 1);
        let mut masses = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let frame = traj.frame(k);
            let mom = moment_first_empirical(frame).map_err(solver_err)?;
            times.push(scenario.time.node(k));
            means.push(mom.mean);
            masses.push(frame.mass());
        }
        artifacts
            .write(&format!("means_{name}.csv"), &means_csv(&times, &means, &masses))
            .map_err(RunError::Output)?;
    }
    Ok(cost)
}

fn run_check_pmp(
    scenario: &Scenario,
    cfg: &RunConfig,
    artifacts: &mut ArtifactSet,
    summary: &mut Vec<String>,
) -> Result<(Option<f64>, Option<f64>), RunError> {
    let u = reference_control(scenario, cfg)?;
    let residual: PmpResidual = match scenario.backend {
        Backend::Grid => {
            let problem = build_grid_problem(scenario)?;
            let (trajectories, _) = problem.open_loop(&u).map_err(solver_err)?;
            let duals = problem.duals_for(&u).map_err(solver_err)?;
            pmp_residual_grid(
                &u,
                &trajectories,
                &duals,
                problem.populations()[0].sampled(),
                problem.control_set(),
            )
            .map_err(solver_err)?
        }
        Backend::Particles => {
            let problem = build_particle_problem(scenario)?;
            let flows = problem.flow_maps(&u).map_err(solver_err)?;
            let costs: Vec<ScalarField> =
                problem.populations().iter().map(|p| p.cost().clone()).collect();
            let initials: Vec<EmpiricalMeasure> =
                problem.populations().iter().map(|p| p.initial().clone()).collect();
            pmp_residual_particles(&flows, &costs, &initials, problem.control_set())
                .map_err(solver_err)?
        }
    };
    artifacts.write("pmp_residual.csv", &residual_csv(&residual)).map_err(RunError::Output)?;
    summary.push(format!("residual_max = {}", fmt_float(residual.max)));
    summary.push(format!("residual_l1 = {}", fmt_float(residual.l1)));
    Ok((None, Some(residual.max)))
}

fn run_ingest(
    scenario: &Scenario,
    artifacts: &mut ArtifactSet,
    summary: &mut Vec<String>,
) -> Result<(Option<f64>, Option<f64>), RunError> {
    let mut wrote = 0usize;
    for (i, pop) in scenario.populations.iter().enumerate() {
        if !matches!(pop.source, SourceSpec::Image { .. }) {
            continue;
        }
        let atoms = empirical_measure(scenario, i)?;
        let name = population_name(i);
        artifacts
            .write(&format!("ingested_{name}.csv"), &atoms_csv(&atoms))
            .map_err(RunError::Output)?;
        summary.push(format!("{name}: {} atoms from the image source", atoms.len()));
        wrote += 1;
    }
    if wrote == 0 {
        return Err(RunError::Usage(
            "ingest needs at least one population with an image source".into(),
        ));
    }
    Ok((None, None))
}

/// Frame files carry solver node indices, so the terminal frame of an
/// `n`-step run for population `pop` is `<name>_t<n>.csv`.
pub fn terminal_frame_name(tg: &TimeGrid, pop: usize) -> String {
    format!("{}_t{}.csv", population_name(pop), tg.n_steps())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_indices_cover_both_ends_without_repeats() {
        assert_eq!(frame_indices(10, 3), vec![0, 5, 10]);
        assert_eq!(frame_indices(10, 2), vec![0, 10]);
        assert_eq!(frame_indices(1, 5), vec![0, 1]);
        let idx = frame_indices(500, 11);
        assert_eq!(idx.first(), Some(&0));
        assert_eq!(idx.last(), Some(&500));
        assert_eq!(idx.len(), 11);
    }

    #[test]
    fn exit_codes_split_validation_from_solver_failures() {
        let validation = RunError::Scenario(ScenarioError::Validation {
            field: "x".into(),
            reason: "y".into(),
        });
        assert_eq!(validation.exit_code(), 2);
        let usage = RunError::Usage("no image populations".into());
        assert_eq!(usage.exit_code(), 2);
        let solver = solver_err(measure_steer_core::transport::TransportError::GeometryMismatch);
        assert_eq!(solver.exit_code(), 3);
    }
}
