//! Measure-valued states.
//!
//! Two concrete representations are used throughout:
//!
//! * [`GridMeasure`] for a nonnegative density sampled at the cell centers of a
//!   fixed 2-d rectangular grid.  Mass is carried explicitly (`Σ ρ_ij·area`)
//!   and is never silently renormalized, so boundary outflow in the transport
//!   solver shows up as genuine mass loss.
//! * [`EmpiricalMeasure`] for weighted atoms `Σ w_i δ_{x_i}` in any dimension.
//!
//! [`w1_distance`] is the Kantorovich distance: exact by the CDF formula in
//! one dimension, exact by a small transportation solve for a few atoms in
//! higher dimensions (a test oracle, not a bulk metric).

mod raster;
mod w1;

pub use raster::{idx_image_count, image_to_measure, read_idx_raster, read_pgm_raster, Raster};
pub use w1::w1_distance;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid domain: need min < max per axis and at least one cell (axis {axis})")]
    InvalidDomain { axis: usize },
    #[error("density length {got} does not match grid cell count {expected}")]
    DensityLength { got: usize, expected: usize },
    #[error("densities and weights must be finite and nonnegative")]
    NegativeOrNonFinite,
    #[error("measure has no mass")]
    ZeroMass,
    #[error("empirical measure needs at least one atom")]
    EmptyMeasure,
    #[error("atom coordinates disagree with dimension {dim}")]
    DimensionMismatch { dim: usize },
    #[error("weights must sum to 1 (got {sum})")]
    WeightSum { sum: f64 },
    #[error("measures live in different dimensions ({a} vs {b})")]
    MixedDimensions { a: usize, b: usize },
    #[error("exact transportation solve limited to 64 atoms per side (got {atoms})")]
    TooLarge { atoms: usize },
    #[error("raster format: {0}")]
    Format(String),
    #[error("pixel threshold keeps no pixels")]
    EmptyImage,
}

/// Geometry of a uniform 2-d cell grid on `[min_a, max_a] × [min_b, max_b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    min: [f64; 2],
    max: [f64; 2],
    cells: [usize; 2],
}

impl GridSpec {
    pub fn new(min: [f64; 2], max: [f64; 2], cells: [usize; 2]) -> Result<Self, MeasureError> {
        for axis in 0..2 {
            let ok = min[axis].is_finite() && max[axis].is_finite() && min[axis] < max[axis];
            if !ok || cells[axis] == 0 {
                return Err(MeasureError::InvalidDomain { axis });
            }
        }
        Ok(Self { min, max, cells })
    }

    pub fn min(&self) -> [f64; 2] {
        self.min
    }

    pub fn max(&self) -> [f64; 2] {
        self.max
    }

    pub fn cells(&self) -> [usize; 2] {
        self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    /// Cell width along `axis`.
    pub fn h(&self, axis: usize) -> f64 {
        (self.max[axis] - self.min[axis]) / self.cells[axis] as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.h(0) * self.h(1)
    }

    /// Storage index of cell `(i, j)`; the `a`-index `i` varies fastest.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.cells[0] + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.min[0] + (i as f64 + 0.5) * self.h(0),
            self.min[1] + (j as f64 + 0.5) * self.h(1),
        ]
    }

    /// Cell containing `x`, clamped to the grid.
    pub fn clamped_cell(&self, x: [f64; 2]) -> [usize; 2] {
        let mut out = [0usize; 2];
        for axis in 0..2 {
            let raw = ((x[axis] - self.min[axis]) / self.h(axis)).floor();
            out[axis] = raw.clamp(0.0, (self.cells[axis] - 1) as f64) as usize;
        }
        out
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self == other
    }
}

/// Nonnegative density on a [`GridSpec`], cell-center samples, explicit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    spec: GridSpec,
    density: Vec<f64>,
}

impl GridMeasure {
    pub fn new(spec: GridSpec, density: Vec<f64>) -> Result<Self, MeasureError> {
        if density.len() != spec.n_cells() {
            return Err(MeasureError::DensityLength {
                got: density.len(),
                expected: spec.n_cells(),
            });
        }
        if density.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(MeasureError::NegativeOrNonFinite);
        }
        Ok(Self { spec, density })
    }

    pub fn zero(spec: GridSpec) -> Self {
        let n = spec.n_cells();
        Self { spec, density: vec![0.0; n] }
    }

    /// Sample `f ≥ 0` at cell centers and normalize to unit mass.
    pub fn normalized_from_fn(
        spec: GridSpec,
        f: impl Fn([f64; 2]) -> f64,
    ) -> Result<Self, MeasureError> {
        let mut density = Vec::with_capacity(spec.n_cells());
        for j in 0..spec.cells[1] {
            for i in 0..spec.cells[0] {
                density.push(f(spec.cell_center(i, j)));
            }
        }
        let mut m = Self::new(spec, density)?;
        m.normalize()?;
        Ok(m)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.density[self.spec.index(i, j)]
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.spec.cell_area()
    }

    /// Rescale to unit mass in place.
    pub fn normalize(&mut self) -> Result<(), MeasureError> {
        let mass = self.mass();
        if mass <= 1e-300 {
            return Err(MeasureError::ZeroMass);
        }
        for v in &mut self.density {
            *v /= mass;
        }
        Ok(())
    }

    pub(crate) fn from_raw(spec: GridSpec, density: Vec<f64>) -> Self {
        debug_assert_eq!(density.len(), spec.n_cells());
        Self { spec, density }
    }
}

/// Weighted atoms `Σ_i w_i δ_{x_i}` in `R^dim`, weights nonnegative with unit
/// sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if weights.is_empty() || dim == 0 {
            return Err(MeasureError::EmptyMeasure);
        }
        if coords.len() != dim * weights.len() {
            return Err(MeasureError::DimensionMismatch { dim });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NegativeOrNonFinite);
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(MeasureError::NegativeOrNonFinite);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::WeightSum { sum });
        }
        Ok(Self { dim, coords, weights })
    }

    /// Atoms from points with uniform weights `1/n`.
    pub fn uniform(points: &[Vec<f64>]) -> Result<Self, MeasureError> {
        let dim = points.first().map_or(0, Vec::len);
        let n = points.len();
        if n == 0 || dim == 0 {
            return Err(MeasureError::EmptyMeasure);
        }
        let mut coords = Vec::with_capacity(dim * n);
        for p in points {
            if p.len() != dim {
                return Err(MeasureError::DimensionMismatch { dim });
            }
            coords.extend_from_slice(p);
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Nudge the last weight so the sum is exactly 1 in floating point.
        let sum: f64 = weights.iter().sum();
        weights[n - 1] += 1.0 - sum;
        Self::new(dim, coords, weights)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self, MeasureError> {
        Self::uniform(&[point])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Replace atom positions, keeping weights (push-forward by a map already
    /// applied to `coords`).
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self, MeasureError> {
        if coords.len() != self.coords.len() {
            return Err(MeasureError::DimensionMismatch { dim: self.dim });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NegativeOrNonFinite);
        }
        Ok(Self { dim: self.dim, coords, weights: self.weights.clone() })
    }
}

/// First moments of a measure: the barycenter `∫x dμ / μ(R^n)` and the mean
/// radius `m1 = ∫|x| dμ / μ(R^n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstMoment {
    pub mean: Vec<f64>,
    pub m1: f64,
}

pub fn moment_first_grid(m: &GridMeasure) -> Result<FirstMoment, MeasureError> {
    let mass = m.mass();
    if mass <= 1e-300 {
        return Err(MeasureError::ZeroMass);
    }
    let area = m.spec.cell_area();
    let mut mean = [0.0f64; 2];
    let mut m1 = 0.0f64;
    for j in 0..m.spec.cells[1] {
        for i in 0..m.spec.cells[0] {
            let rho = m.value(i, j);
            if rho == 0.0 {
                continue;
            }
            let c = m.spec.cell_center(i, j);
            let w = rho * area;
            mean[0] += w * c[0];
            mean[1] += w * c[1];
            m1 += w * (c[0] * c[0] + c[1] * c[1]).sqrt();
        }
    }
    Ok(FirstMoment { mean: vec![mean[0] / mass, mean[1] / mass], m1: m1 / mass })
}

pub fn moment_first_empirical(m: &EmpiricalMeasure) -> Result<FirstMoment, MeasureError> {
    let mass = m.mass();
    if mass <= 1e-300 {
        return Err(MeasureError::ZeroMass);
    }
    let mut mean = vec![0.0f64; m.dim()];
    let mut m1 = 0.0f64;
    for i in 0..m.len() {
        let w = m.weights[i];
        let x = m.point(i);
        let mut norm2 = 0.0;
        for (d, acc) in mean.iter_mut().enumerate() {
            *acc += w * x[d];
            norm2 += x[d] * x[d];
        }
        m1 += w * norm2.sqrt();
    }
    for v in &mut mean {
        *v /= mass;
    }
    Ok(FirstMoment { mean, m1: m1 / mass })
}

/// Draw `n_samples` atoms at cell centers with probability proportional to
/// cell mass.  Deterministic for a fixed seed.
pub fn grid_to_empirical(
    m: &GridMeasure,
    n_samples: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, MeasureError> {
    if n_samples == 0 {
        return Err(MeasureError::EmptyMeasure);
    }
    let mass = m.mass();
    if mass <= 1e-300 {
        return Err(MeasureError::ZeroMass);
    }
    let mut cum = Vec::with_capacity(m.density.len());
    let mut acc = 0.0f64;
    for &rho in &m.density {
        acc += rho;
        cum.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(2 * n_samples);
    let nx = m.spec.cells[0];
    for _ in 0..n_samples {
        let r: f64 = rng.gen::<f64>() * total;
        let cell = cum.partition_point(|&c| c < r).min(cum.len() - 1);
        let (i, j) = (cell % nx, cell / nx);
        let c = m.spec.cell_center(i, j);
        coords.push(c[0]);
        coords.push(c[1]);
    }
    let w = 1.0 / n_samples as f64;
    let mut weights = vec![w; n_samples];
    let sum: f64 = weights.iter().sum();
    weights[n_samples - 1] += 1.0 - sum;
    EmpiricalMeasure::new(2, coords, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(center: [f64; 2], sigma: f64) -> impl Fn([f64; 2]) -> f64 {
        move |x| {
            let da = x[0] - center[0];
            let db = x[1] - center[1];
            (-(da * da + db * db) / (2.0 * sigma * sigma)).exp()
        }
    }

    #[test]
    fn grid_spec_geometry() {
        let spec = GridSpec::new([-1.0, 0.0], [1.0, 4.0], [4, 8]).unwrap();
        assert!((spec.h(0) - 0.5).abs() < 1e-15);
        assert!((spec.h(1) - 0.5).abs() < 1e-15);
        let c = spec.cell_center(0, 0);
        assert!((c[0] + 0.75).abs() < 1e-15);
        assert!((c[1] - 0.25).abs() < 1e-15);
        assert_eq!(spec.clamped_cell([-0.9, 3.9]), [0, 7]);
        assert_eq!(spec.clamped_cell([5.0, -5.0]), [3, 0]);
    }

    #[test]
    fn grid_spec_rejects_bad_domains() {
        assert!(GridSpec::new([0.0, 0.0], [0.0, 1.0], [4, 4]).is_err());
        assert!(GridSpec::new([0.0, 0.0], [1.0, 1.0], [0, 4]).is_err());
    }

    #[test]
    fn fresh_blob_has_unit_mass() {
        let spec = GridSpec::new([-5.0, -5.0], [5.0, 5.0], [100, 100]).unwrap();
        let m = GridMeasure::normalized_from_fn(spec, gaussian([1.0, 1.0], 0.3)).unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blob_moment_matches_center() {
        // h = 0.05 on [-5,5]^2; midpoint sampling of a smooth Gaussian is far
        // more accurate than the 1e-3 budget.
        let spec = GridSpec::new([-5.0, -5.0], [5.0, 5.0], [200, 200]).unwrap();
        let m = GridMeasure::normalized_from_fn(spec, gaussian([1.0, 1.0], 0.3)).unwrap();
        let mom = moment_first_grid(&m).unwrap();
        assert!((mom.mean[0] - 1.0).abs() < 1e-3, "mean_a = {}", mom.mean[0]);
        assert!((mom.mean[1] - 1.0).abs() < 1e-3, "mean_b = {}", mom.mean[1]);
    }

    #[test]
    fn blob_moment_error_shrinks_at_first_order_or_better() {
        // Coarse grids under-resolve the blob, so the quadrature error is
        // visible; halving h must cut it by at least the first-order factor.
        let center = [1.234, 0.567];
        let err_at = |cells: usize| {
            let spec = GridSpec::new([-5.0, -5.0], [5.0, 5.0], [cells, cells]).unwrap();
            let m = GridMeasure::normalized_from_fn(spec, gaussian(center, 0.3)).unwrap();
            let mom = moment_first_grid(&m).unwrap();
            ((mom.mean[0] - center[0]).powi(2) + (mom.mean[1] - center[1]).powi(2)).sqrt()
        };
        let coarse = err_at(10);
        let fine = err_at(20);
        assert!(
            coarse / fine >= 1.8,
            "error ratio {:.3} (coarse {:.3e}, fine {:.3e})",
            coarse / fine,
            coarse,
            fine
        );
    }

    #[test]
    fn dirac_moment() {
        let m = EmpiricalMeasure::dirac(vec![2.0, 3.0]).unwrap();
        let mom = moment_first_empirical(&m).unwrap();
        assert_eq!(mom.mean, vec![2.0, 3.0]);
        assert!((mom.m1 - 13f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn empirical_validation() {
        assert!(EmpiricalMeasure::new(2, vec![0.0, 0.0], vec![0.5]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 0.0], vec![1.0 + 1e-6]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, f64::NAN], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = GridSpec::new([-2.0, -2.0], [2.0, 2.0], [40, 40]).unwrap();
        let m = GridMeasure::normalized_from_fn(spec, gaussian([0.0, 0.0], 0.5)).unwrap();
        let a = grid_to_empirical(&m, 64, 9).unwrap();
        let b = grid_to_empirical(&m, 64, 9).unwrap();
        let c = grid_to_empirical(&m, 64, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_atoms_sit_on_cell_centers() {
        let spec = GridSpec::new([-2.0, -2.0], [2.0, 2.0], [8, 8]).unwrap();
        let m = GridMeasure::normalized_from_fn(spec, gaussian([0.3, -0.4], 0.7)).unwrap();
        let s = grid_to_empirical(&m, 32, 1).unwrap();
        let h = spec.h(0);
        for i in 0..s.len() {
            let p = s.point(i);
            for (axis, &v) in p.iter().enumerate() {
                let steps = (v - spec.min()[axis] - 0.5 * h) / h;
                assert!((steps - steps.round()).abs() < 1e-9, "atom off-center: {v}");
            }
        }
    }

    #[test]
    fn sampled_mean_obeys_clt_bound() {
        // Over 100 seeds, the per-axis sample mean should fall within
        // 3·σ_axis/√n of the grid mean almost always (≈99.7% per axis).
        let spec = GridSpec::new([-3.0, -3.0], [3.0, 3.0], [60, 60]).unwrap();
        let m = GridMeasure::normalized_from_fn(spec, gaussian([0.4, -0.2], 0.6)).unwrap();
        let mom = moment_first_grid(&m).unwrap();
        // Per-axis standard deviation of the discrete distribution.
        let area = spec.cell_area();
        let mut var = [0.0f64; 2];
        for j in 0..60 {
            for i in 0..60 {
                let c = spec.cell_center(i, j);
                let w = m.value(i, j) * area;
                var[0] += w * (c[0] - mom.mean[0]).powi(2);
                var[1] += w * (c[1] - mom.mean[1]).powi(2);
            }
        }
        let n = 400usize;
        let mut hits = 0usize;
        let mut total = 0usize;
        for seed in 0..100u64 {
            let s = grid_to_empirical(&m, n, seed).unwrap();
            let sm = moment_first_empirical(&s).unwrap();
            for axis in 0..2 {
                let bound = 3.0 * var[axis].sqrt() / (n as f64).sqrt();
                total += 1;
                if (sm.mean[axis] - mom.mean[axis]).abs() <= bound {
                    hits += 1;
                }
            }
        }
        assert!(hits >= total - 5, "CLT bound violated too often: {hits}/{total}");
    }

    #[test]
    fn zero_mass_is_rejected() {
        let spec = GridSpec::new([0.0, 0.0], [1.0, 1.0], [4, 4]).unwrap();
        let m = GridMeasure::zero(spec);
        assert!(matches!(moment_first_grid(&m), Err(MeasureError::ZeroMass)));
        assert!(matches!(grid_to_empirical(&m, 8, 0), Err(MeasureError::ZeroMass)));
    }
}
