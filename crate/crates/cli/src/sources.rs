//! Initial measures from scenario sources: analytic blobs rasterized on
//! the grid or sampled into atoms, plus file-backed densities, atom
//! clouds, and raster images.

use std::path::{Path, PathBuf};

use measure_steer_core::measures::{
    grid_to_empirical, idx_image_count, image_to_measure, read_idx_raster, read_pgm_raster,
    EmpiricalMeasure, GridMeasure, GridSpec, MeasureError, Raster,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::artifacts::{read_csv, ArtifactError};
use crate::scenario::{Scenario, SourceSpec};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    BadData { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] ArtifactError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("{0}")]
    Unsupported(String),
}

/// Population salt keeps per-population random streams independent while
/// staying a pure function of the scenario seed.
fn population_seed(seed: u64, pop: usize) -> u64 {
    seed.wrapping_add((pop as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Build the population's initial measure on the scenario grid.
pub fn grid_measure(scenario: &Scenario, pop: usize) -> Result<GridMeasure, SourceError> {
    let spec = scenario
        .grid
        .clone()
        .ok_or_else(|| SourceError::Unsupported("grid measure requested without a [grid] section".into()))?;
    let p = &scenario.populations[pop];
    let blur = p.blur.unwrap_or(2.0 * spec.h(0).max(spec.h(1)));
    match &p.source {
        SourceSpec::Point(coords) => {
            let atoms = EmpiricalMeasure::dirac(coords.clone())?;
            Ok(deposit_atoms(&spec, &atoms)?)
        }
        SourceSpec::Gaussian { center, sigma } => {
            let (c, s) = (*center, *sigma);
            Ok(GridMeasure::normalized_from_fn(spec, move |x| {
                let da = x[0] - c[0];
                let db = x[1] - c[1];
                (-(da * da + db * db) / (2.0 * s * s)).exp()
            })?)
        }
        SourceSpec::Cross { center, arm, width } => {
            let (c, a, w) = (*center, *arm, *width);
            shaped_measure(spec, blur, move |x| {
                let da = (x[0] - c[0]).abs();
                let db = (x[1] - c[1]).abs();
                da.max(db) <= a && (da <= w || db <= w)
            })
        }
        SourceSpec::Ring { center, r0, r1 } => {
            let (c, lo, hi) = (*center, *r0, *r1);
            shaped_measure(spec, blur, move |x| {
                let r = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
                (lo..=hi).contains(&r)
            })
        }
        SourceSpec::Density(path) => read_density_csv(&scenario.resolve(path), &spec),
        SourceSpec::Atoms(path) => {
            let atoms = read_atoms_csv(&scenario.resolve(path))?;
            Ok(deposit_atoms(&spec, &atoms)?)
        }
        SourceSpec::Image { path, index, threshold } => {
            let atoms = image_atoms(&scenario.resolve(path), *index, *threshold)?;
            Ok(deposit_atoms(&spec, &atoms)?)
        }
    }
}

/// Build the population's initial measure as weighted atoms.
pub fn empirical_measure(scenario: &Scenario, pop: usize) -> Result<EmpiricalMeasure, SourceError> {
    let p = &scenario.populations[pop];
    let seed = population_seed(scenario.seed, pop);
    match &p.source {
        SourceSpec::Point(coords) => Ok(EmpiricalMeasure::dirac(coords.clone())?),
        SourceSpec::Gaussian { center, sigma } => {
            Ok(gaussian_atoms(*center, *sigma, p.atoms, seed)?)
        }
        SourceSpec::Cross { .. } | SourceSpec::Ring { .. } | SourceSpec::Density(_) => {
            let gm = grid_measure(scenario, pop)?;
            Ok(grid_to_empirical(&gm, p.atoms, seed)?)
        }
        SourceSpec::Atoms(path) => read_atoms_csv(&scenario.resolve(path)),
        SourceSpec::Image { path, index, threshold } => {
            image_atoms(&scenario.resolve(path), *index, *threshold)
        }
    }
}

/// Indicator blob pipeline: sample at cell centers, run one 3×3
/// triangular smoothing pass, apply the Gaussian blur, normalize.
fn shaped_measure(
    spec: GridSpec,
    blur: f64,
    inside: impl Fn([f64; 2]) -> bool,
) -> Result<GridMeasure, SourceError> {
    let [nx, ny] = spec.cells();
    let mut density = vec![0.0f64; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if inside(spec.cell_center(i, j)) {
                density[spec.index(i, j)] = 1.0;
            }
        }
    }
    triangular_pass(&spec, &mut density);
    if blur > 0.0 {
        gaussian_blur(&spec, &mut density, blur);
    }
    let mut m = GridMeasure::new(spec, density)?;
    m.normalize().map_err(|_| SourceError::Unsupported(
        "shape indicator hit no cell center; enlarge the shape or refine the grid".into(),
    ))?;
    Ok(m)
}

/// One pass of the separable triangular kernel [1, 2, 1]/4 per axis with
/// zero padding outside the domain.
fn triangular_pass(spec: &GridSpec, density: &mut Vec<f64>) {
    convolve_separable(spec, density, &[0.25, 0.5, 0.25]);
}

/// Separable Gaussian blur with standard deviation `radius` (in domain
/// units), truncated at three standard deviations.
fn gaussian_blur(spec: &GridSpec, density: &mut Vec<f64>, radius: f64) {
    for axis in 0..2 {
        let h = spec.h(axis);
        let half = ((3.0 * radius / h).ceil() as usize).max(1);
        let mut kernel = Vec::with_capacity(2 * half + 1);
        for k in 0..=(2 * half) {
            let d = (k as f64 - half as f64) * h;
            kernel.push((-d * d / (2.0 * radius * radius)).exp());
        }
        let sum: f64 = kernel.iter().sum();
        for v in &mut kernel {
            *v /= sum;
        }
        convolve_axis(spec, density, &kernel, axis);
    }
}

fn convolve_separable(spec: &GridSpec, density: &mut Vec<f64>, kernel: &[f64]) {
    convolve_axis(spec, density, kernel, 0);
    convolve_axis(spec, density, kernel, 1);
}

fn convolve_axis(spec: &GridSpec, density: &mut Vec<f64>, kernel: &[f64], axis: usize) {
    let [nx, ny] = spec.cells();
    let half = kernel.len() / 2;
    let mut out = vec![0.0f64; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let off = k as isize - half as isize;
                let (si, sj) = if axis == 0 {
                    (i as isize + off, j as isize)
                } else {
                    (i as isize, j as isize + off)
                };
                if si < 0 || sj < 0 || si >= nx as isize || sj >= ny as isize {
                    continue;
                }
                acc += w * density[spec.index(si as usize, sj as usize)];
            }
            out[spec.index(i, j)] = acc;
        }
    }
    *density = out;
}

/// Cloud-in-cell deposit: each atom spreads bilinearly over the (up to)
/// four cells whose centers surround it, so the deposited mean matches the
/// atom positions exactly away from the boundary.
pub fn deposit_atoms(spec: &GridSpec, atoms: &EmpiricalMeasure) -> Result<GridMeasure, MeasureError> {
    let [nx, ny] = spec.cells();
    let area = spec.cell_area();
    let min = spec.min();
    let mut density = vec![0.0f64; nx * ny];
    let clamp = |v: isize, n: usize| -> usize { v.clamp(0, n as isize - 1) as usize };
    for idx in 0..atoms.len() {
        let x = atoms.point(idx);
        let w = atoms.weights()[idx];
        let gx = (x[0] - min[0]) / spec.h(0) - 0.5;
        let gy = (x[1] - min[1]) / spec.h(1) - 0.5;
        let (i0, j0) = (gx.floor() as isize, gy.floor() as isize);
        let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
        let parts = [
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i0 + 1, j0, fx * (1.0 - fy)),
            (i0, j0 + 1, (1.0 - fx) * fy),
            (i0 + 1, j0 + 1, fx * fy),
        ];
        for (ci, cj, coeff) in parts {
            if coeff == 0.0 {
                continue;
            }
            density[spec.index(clamp(ci, nx), clamp(cj, ny))] += w * coeff / area;
        }
    }
    let mut m = GridMeasure::new(spec.clone(), density)?;
    m.normalize()?;
    Ok(m)
}

/// Draw atoms from an isotropic planar Gaussian by the Box–Muller
/// transform under a counter-seeded ChaCha stream.
fn gaussian_atoms(
    center: [f64; 2],
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, MeasureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        coords.push(center[0] + sigma * r * phi.cos());
        coords.push(center[1] + sigma * r * phi.sin());
    }
    let w = 1.0 / n as f64;
    let mut weights = vec![w; n];
    let sum: f64 = weights.iter().sum();
    weights[n - 1] += 1.0 - sum;
    EmpiricalMeasure::new(2, coords, weights)
}

/// Read an atom CSV (`x1,..,xn,weight` with a header row).
pub fn read_atoms_csv(path: &Path) -> Result<EmpiricalMeasure, SourceError> {
    let table = read_csv(path)?;
    let cols = table.header.len();
    if cols < 2 || table.header.last().map(String::as_str) != Some("weight") {
        return Err(SourceError::BadData {
            path: path.to_path_buf(),
            message: "expected header x1,..,xn,weight".into(),
        });
    }
    let dim = cols - 1;
    let mut coords = Vec::with_capacity(dim * table.rows.len());
    let mut weights = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != cols {
            return Err(SourceError::BadData {
                path: path.to_path_buf(),
                message: format!("row {} has {} fields, expected {cols}", r + 2, row.len()),
            });
        }
        for field in &row[..dim] {
            coords.push(parse_float(field, path, r)?);
        }
        weights.push(parse_float(&row[dim], path, r)?);
    }
    let total: f64 = weights.iter().sum();
    if total > 1e-300 {
        for w in &mut weights {
            *w /= total;
        }
    }
    Ok(EmpiricalMeasure::new(dim, coords, weights)?)
}

/// Read a grid frame CSV (`a,b,value`) back onto `spec`, renormalizing to
/// unit mass so the result is a valid initial measure even if the dump had
/// lost boundary mass.
pub fn read_density_csv(path: &Path, spec: &GridSpec) -> Result<GridMeasure, SourceError> {
    let table = read_csv(path)?;
    if table.header != ["a", "b", "value"] {
        return Err(SourceError::BadData {
            path: path.to_path_buf(),
            message: "expected header a,b,value".into(),
        });
    }
    let mut density = vec![0.0f64; spec.n_cells()];
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != 3 {
            return Err(SourceError::BadData {
                path: path.to_path_buf(),
                message: format!("row {} has {} fields, expected 3", r + 2, row.len()),
            });
        }
        let a = parse_float(&row[0], path, r)?;
        let b = parse_float(&row[1], path, r)?;
        let value = parse_float(&row[2], path, r)?;
        let [i, j] = spec.clamped_cell([a, b]);
        density[spec.index(i, j)] = value;
    }
    let mut m = GridMeasure::new(spec.clone(), density)?;
    m.normalize()?;
    Ok(m)
}

fn parse_float(field: &str, path: &Path, row: usize) -> Result<f64, SourceError> {
    field.parse::<f64>().map_err(|_| SourceError::BadData {
        path: path.to_path_buf(),
        message: format!("row {}: not a number: `{field}`", row + 2),
    })
}

/// Load one image from a PGM or IDX file and turn it into unit-square
/// atoms.
pub fn image_atoms(path: &Path, index: usize, threshold: f64) -> Result<EmpiricalMeasure, SourceError> {
    let bytes = std::fs::read(path)
        .map_err(|source| SourceError::Io { path: path.to_path_buf(), source })?;
    let raster = load_raster(&bytes, path, index)?;
    Ok(image_to_measure(&raster, threshold)?)
}

fn load_raster(bytes: &[u8], path: &Path, index: usize) -> Result<Raster, SourceError> {
    if bytes.starts_with(b"P5") {
        if index != 0 {
            return Err(SourceError::BadData {
                path: path.to_path_buf(),
                message: "PGM files hold a single image; index must be 0".into(),
            });
        }
        return Ok(read_pgm_raster(bytes)?);
    }
    let count = idx_image_count(bytes)?;
    if index >= count {
        return Err(SourceError::BadData {
            path: path.to_path_buf(),
            message: format!("image index {index} out of range; the file holds {count}"),
        });
    }
    Ok(read_idx_raster(bytes, index)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use measure_steer_core::measures::moment_first_grid;

    fn spec() -> GridSpec {
        GridSpec::new([-2.0, -2.0], [2.0, 2.0], [80, 80]).unwrap()
    }

    #[test]
    fn deposit_preserves_mean_and_mass() {
        let atoms = EmpiricalMeasure::new(
            2,
            vec![0.3, -0.4, -0.9, 0.7],
            vec![0.25, 0.75],
        )
        .unwrap();
        let m = deposit_atoms(&spec(), &atoms).unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-12);
        let mom = moment_first_grid(&m).unwrap();
        let want = [0.25 * 0.3 + 0.75 * (-0.9), 0.25 * (-0.4) + 0.75 * 0.7];
        assert!((mom.mean[0] - want[0]).abs() < 1e-12, "mean a {:?}", mom.mean);
        assert!((mom.mean[1] - want[1]).abs() < 1e-12, "mean b {:?}", mom.mean);
    }

    #[test]
    fn corner_point_deposits_symmetrically() {
        // (0,0) sits on a cell corner of the even grid, so the deposit
        // must split into four equal quarters and keep the mean at zero.
        let atoms = EmpiricalMeasure::dirac(vec![0.0, 0.0]).unwrap();
        let m = deposit_atoms(&spec(), &atoms).unwrap();
        let nonzero: Vec<f64> =
            m.density().iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        for v in &nonzero {
            assert!((v - nonzero[0]).abs() < 1e-12);
        }
        let mom = moment_first_grid(&m).unwrap();
        assert!(mom.mean[0].abs() < 1e-12 && mom.mean[1].abs() < 1e-12);
    }

    #[test]
    fn ring_mass_lives_in_the_annulus() {
        let s = spec();
        let m = shaped_measure(s.clone(), 0.05, |x| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            (0.8..=1.2).contains(&r)
        })
        .unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-12);
        let mut inside = 0.0;
        for j in 0..80 {
            for i in 0..80 {
                let c = s.cell_center(i, j);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                if (0.6..=1.4).contains(&r) {
                    inside += m.value(i, j);
                }
            }
        }
        inside *= s.cell_area();
        assert!(inside > 0.99, "only {inside} of the mass is near the annulus");
        let mom = moment_first_grid(&m).unwrap();
        assert!(mom.mean[0].abs() < 1e-10 && mom.mean[1].abs() < 1e-10);
    }

    #[test]
    fn gaussian_atoms_are_deterministic_and_centered() {
        let a = gaussian_atoms([1.0, -0.5], 0.3, 4000, 9).unwrap();
        let b = gaussian_atoms([1.0, -0.5], 0.3, 4000, 9).unwrap();
        assert_eq!(a, b);
        let mom = measure_steer_core::measures::moment_first_empirical(&a).unwrap();
        assert!((mom.mean[0] - 1.0).abs() < 0.02, "mean {:?}", mom.mean);
        assert!((mom.mean[1] + 0.5).abs() < 0.02, "mean {:?}", mom.mean);
    }

    #[test]
    fn blur_spreads_but_conserves_interior_mass() {
        let s = GridSpec::new([-2.0, -2.0], [2.0, 2.0], [100, 100]).unwrap();
        let mut density = vec![0.0; s.n_cells()];
        density[s.index(50, 50)] = 1.0;
        let before: f64 = density.iter().sum();
        gaussian_blur(&s, &mut density, 0.1);
        let after: f64 = density.iter().sum();
        assert!((after - before).abs() < 1e-9, "blur lost interior mass");
        assert!(density[s.index(50, 50)] < 0.2, "blur failed to spread the spike");
    }
}
