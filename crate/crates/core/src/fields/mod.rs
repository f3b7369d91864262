//! Vector fields, control families `v_u = Σ_k u^k f^k`, and box control
//! sets.
//!
//! Fields are autonomous maps `R^n → R^n`, either expression-backed (via the
//! small DSL in [`expr`]) or closure-backed.  A [`ControlFamily`] bundles an
//! uncontrolled drift with the control basis; the controlled velocity is
//! affine in the control, which is what makes bang-bang extremal controls and
//! switching vectors well defined downstream.

pub mod expr;

pub use expr::{parse_expr, parse_field_exprs, print_field, Expr, Func};

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("syntax error at byte {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("expression uses x{var} but the point has dimension {dim}")]
    ArityMismatch { var: usize, dim: usize },
    #[error("division by a vanishing denominator")]
    DivisionByZero,
    #[error("field produced a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("control bounds need lo ≤ hi componentwise and finite values")]
    InvalidBounds,
    #[error("control family needs at least one basis field")]
    EmptyFamily,
    #[error("control vector has dimension {got}, family has {expected} basis fields")]
    ControlDimension { expected: usize, got: usize },
}

type EvalFn = dyn Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync;
type JacFn = dyn Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync;

enum FieldImpl {
    Exprs(Vec<Expr>),
    Closure { dim: usize, eval: Box<EvalFn>, jacobian: Option<Box<JacFn>> },
}

/// Autonomous vector field `R^n → R^n` (output dimension fixed; expression
/// fields accept any point dimension covering their coordinates).
#[derive(Clone)]
pub struct VectorField {
    inner: Arc<FieldImpl>,
}

impl std::fmt::Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &*self.inner {
            FieldImpl::Exprs(c) => write!(f, "VectorField({})", print_field(c)),
            FieldImpl::Closure { dim, .. } => write!(f, "VectorField(closure, dim {dim})"),
        }
    }
}

impl VectorField {
    pub fn from_exprs(components: Vec<Expr>) -> Result<Self, FieldError> {
        if components.is_empty() {
            return Err(FieldError::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(Self { inner: Arc::new(FieldImpl::Exprs(components)) })
    }

    /// Parse a DSL tuple such as `"(a + b, a)"`.
    pub fn parse(src: &str) -> Result<Self, FieldError> {
        Self::from_exprs(parse_field_exprs(src)?)
    }

    pub fn from_fn<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
    {
        Self {
            inner: Arc::new(FieldImpl::Closure { dim, eval: Box::new(f), jacobian: None }),
        }
    }

    pub fn from_fn_with_jacobian<F, J>(dim: usize, f: F, jac: J) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
        J: Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync + 'static,
    {
        Self {
            inner: Arc::new(FieldImpl::Closure {
                dim,
                eval: Box::new(f),
                jacobian: Some(Box::new(jac)),
            }),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_fn_with_jacobian(
            dim,
            |_, out| {
                out.fill(0.0);
                Ok(())
            },
            |_, out| {
                out.fill(0.0);
                Ok(())
            },
        )
    }

    pub fn constant(v: Vec<f64>) -> Self {
        let dim = v.len();
        Self::from_fn_with_jacobian(
            dim,
            move |_, out| {
                out.copy_from_slice(&v);
                Ok(())
            },
            |_, out| {
                out.fill(0.0);
                Ok(())
            },
        )
    }

    /// Output dimension.
    pub fn dim(&self) -> usize {
        match &*self.inner {
            FieldImpl::Exprs(c) => c.len(),
            FieldImpl::Closure { dim, .. } => *dim,
        }
    }

    /// Source text when expression-backed.
    pub fn source(&self) -> Option<String> {
        match &*self.inner {
            FieldImpl::Exprs(c) => Some(print_field(c)),
            FieldImpl::Closure { .. } => None,
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let dim = self.dim();
        if out.len() != dim {
            return Err(FieldError::DimensionMismatch { expected: dim, got: out.len() });
        }
        match &*self.inner {
            FieldImpl::Exprs(c) => {
                for (slot, e) in out.iter_mut().zip(c) {
                    *slot = e.eval(x)?;
                }
                Ok(())
            }
            FieldImpl::Closure { eval, .. } => eval(x, out),
        }
    }

    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.dim()];
        self.eval(x, &mut out)?;
        Ok(out)
    }

    /// Jacobian at `x`, row-major `dim × x.len()`.  Uses the analytic closure
    /// when one was supplied, otherwise central differences with step
    /// `1e-6·(1+|x|)`.
    pub fn jacobian(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let dim = self.dim();
        let n = x.len();
        if out.len() != dim * n {
            return Err(FieldError::DimensionMismatch { expected: dim * n, got: out.len() });
        }
        if let FieldImpl::Closure { jacobian: Some(jac), .. } = &*self.inner {
            return jac(x, out);
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = 1e-6 * (1.0 + norm);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; dim];
        let mut fm = vec![0.0; dim];
        for col in 0..n {
            xp[col] = x[col] + step;
            self.eval(&xp, &mut fp)?;
            xp[col] = x[col] - step;
            self.eval(&xp, &mut fm)?;
            xp[col] = x[col];
            for row in 0..dim {
                out[row * n + col] = (fp[row] - fm[row]) / (2.0 * step);
            }
        }
        Ok(())
    }
}

/// Box control set `U = Π_k [lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ControlSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, FieldError> {
        if lo.is_empty()
            || lo.len() != hi.len()
            || lo.iter().zip(&hi).any(|(l, h)| !l.is_finite() || !h.is_finite() || l > h)
        {
            return Err(FieldError::InvalidBounds);
        }
        Ok(Self { lo, hi })
    }

    /// The symmetric box `[-1, 1]^m`.
    pub fn symmetric_unit(m: usize) -> Self {
        Self { lo: vec![-1.0; m], hi: vec![1.0; m] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// All `2^m` vertices (test-scale helper).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                (0..m)
                    .map(|k| if mask >> k & 1 == 1 { self.hi[k] } else { self.lo[k] })
                    .collect()
            })
            .collect()
    }
}

/// Drift `f` plus control basis `f^1 … f^m`; the controlled velocity is
/// `f(x) + Σ_k u^k f^k(x)`.
#[derive(Debug, Clone)]
pub struct ControlFamily {
    drift: VectorField,
    basis: Vec<VectorField>,
}

impl ControlFamily {
    pub fn new(drift: VectorField, basis: Vec<VectorField>) -> Result<Self, FieldError> {
        if basis.is_empty() {
            return Err(FieldError::EmptyFamily);
        }
        let dim = drift.dim();
        for f in &basis {
            if f.dim() != dim {
                return Err(FieldError::DimensionMismatch { expected: dim, got: f.dim() });
            }
        }
        Ok(Self { drift, basis })
    }

    /// Basis-only family with zero drift.
    pub fn driftless(basis: Vec<VectorField>) -> Result<Self, FieldError> {
        let dim = basis.first().map_or(0, VectorField::dim);
        Self::new(VectorField::zero(dim), basis)
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn basis(&self) -> &[VectorField] {
        &self.basis
    }

    /// Number of control components `m`.
    pub fn n_controls(&self) -> usize {
        self.basis.len()
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// Same family with a different drift (populations share the basis).
    pub fn with_drift(&self, drift: VectorField) -> Result<Self, FieldError> {
        Self::new(drift, self.basis.clone())
    }
}

/// Controlled velocity `f(x) + Σ_k u^k f^k(x)`.
pub fn eval_controlled(
    cf: &ControlFamily,
    u: &[f64],
    x: &[f64],
    out: &mut [f64],
) -> Result<(), FieldError> {
    if u.len() != cf.n_controls() {
        return Err(FieldError::ControlDimension { expected: cf.n_controls(), got: u.len() });
    }
    cf.drift.eval(x, out)?;
    let mut tmp = vec![0.0; out.len()];
    for (uk, fk) in u.iter().zip(&cf.basis) {
        if *uk == 0.0 {
            continue;
        }
        fk.eval(x, &mut tmp)?;
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += uk * t;
        }
    }
    Ok(())
}

/// Parse a DSL field tuple into a [`VectorField`].
pub fn parse_field(src: &str) -> Result<VectorField, FieldError> {
    VectorField::parse(src)
}

/// Terminal cost `ℓ: R^n → R` with a gradient.
#[derive(Clone)]
pub enum ScalarField {
    /// Expression over the coordinates.
    Expr(Expr),
    /// `|x − target|²` with analytic gradient `2(x − target)`.
    SquaredDistance { target: Vec<f64> },
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarField::Expr(e) => write!(f, "ScalarField({e})"),
            ScalarField::SquaredDistance { target } => {
                write!(f, "ScalarField(|x - {target:?}|^2)")
            }
        }
    }
}

impl ScalarField {
    pub fn parse(src: &str) -> Result<Self, FieldError> {
        Ok(ScalarField::Expr(parse_expr(src)?))
    }

    pub fn squared_distance(target: Vec<f64>) -> Self {
        ScalarField::SquaredDistance { target }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, FieldError> {
        match self {
            ScalarField::Expr(e) => e.eval(x),
            ScalarField::SquaredDistance { target } => {
                if x.len() != target.len() {
                    return Err(FieldError::DimensionMismatch {
                        expected: target.len(),
                        got: x.len(),
                    });
                }
                Ok(x.iter().zip(target).map(|(xi, ti)| (xi - ti) * (xi - ti)).sum())
            }
        }
    }

    /// Gradient at `x`; analytic for the squared distance, central
    /// differences with step `1e-6·(1+|x|)` for expressions.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        match self {
            ScalarField::SquaredDistance { target } => {
                if x.len() != target.len() {
                    return Err(FieldError::DimensionMismatch {
                        expected: target.len(),
                        got: x.len(),
                    });
                }
                Ok(x.iter().zip(target).map(|(xi, ti)| 2.0 * (xi - ti)).collect())
            }
            ScalarField::Expr(_) => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let step = 1e-6 * (1.0 + norm);
                let mut xp = x.to_vec();
                let mut grad = vec![0.0; x.len()];
                for k in 0..x.len() {
                    xp[k] = x[k] + step;
                    let fp = self.eval(&xp)?;
                    xp[k] = x[k] - step;
                    let fm = self.eval(&xp)?;
                    xp[k] = x[k];
                    grad[k] = (fp - fm) / (2.0 * step);
                }
                Ok(grad)
            }
        }
    }
}

/// Empirical growth and Lipschitz constants of a field over a box,
/// `|F(x)| ≤ C_growth·(1+|x|)` and `|F(x)−F(y)| ≤ C_lip·|x−y|` over
/// deterministic low-discrepancy probes.
#[derive(Debug, Clone, PartialEq)]
pub struct H1Report {
    pub c_growth: f64,
    pub c_lip: f64,
}

/// Probe a field with `n_probes` Halton points in the box `[min, max]^n` and
/// report the empirical constants.  Non-finite field values are rejected.
pub fn validate_h1(
    field: &VectorField,
    min: &[f64],
    max: &[f64],
    n_probes: usize,
) -> Result<H1Report, FieldError> {
    let n = min.len();
    if n == 0 || max.len() != n {
        return Err(FieldError::DimensionMismatch { expected: n.max(1), got: max.len() });
    }
    let n_probes = n_probes.max(2);
    let mut points = Vec::with_capacity(n_probes);
    let mut values = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let mut x = vec![0.0; n];
        for (axis, slot) in x.iter_mut().enumerate() {
            let u = halton(k + 1, PRIMES[axis % PRIMES.len()]);
            *slot = min[axis] + (max[axis] - min[axis]) * u;
        }
        let v = field.eval_vec(&x)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::NonFinite);
        }
        points.push(x);
        values.push(v);
    }
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut c_growth = 0.0f64;
    for (x, v) in points.iter().zip(&values) {
        c_growth = c_growth.max(norm(v) / (1.0 + norm(x)));
    }
    let mut c_lip = 0.0f64;
    for i in 0..n_probes {
        for j in (i + 1)..n_probes {
            let dx: Vec<f64> =
                points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
            let dv: Vec<f64> =
                values[i].iter().zip(&values[j]).map(|(a, b)| a - b).collect();
            let d = norm(&dx);
            if d > 1e-12 {
                c_lip = c_lip.max(norm(&dv) / d);
            }
        }
    }
    Ok(H1Report { c_growth, c_lip })
}

const PRIMES: [usize; 9] = [2, 3, 5, 7, 11, 13, 17, 19, 23];

/// Element `k ≥ 1` of the van der Corput sequence in the given base.
fn halton(mut k: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= base as f64;
        r += f * (k % base) as f64;
        k /= base;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controlled_velocity_is_affine_in_u() {
        // Basis (0,1), (a+b, a), (sin a, a−b); at (1,1) with u = (1,1,1) the
        // velocity is (2 + sin 1, 2).
        let fam = ControlFamily::driftless(vec![
            parse_field("(0, 1)").unwrap(),
            parse_field("(a + b, a)").unwrap(),
            parse_field("(sin(a), a - b)").unwrap(),
        ])
        .unwrap();
        let mut out = [0.0; 2];
        eval_controlled(&fam, &[1.0, 1.0, 1.0], &[1.0, 1.0], &mut out).unwrap();
        assert!((out[0] - (2.0 + 1f64.sin())).abs() < 1e-15);
        assert!((out[1] - 2.0).abs() < 1e-15);
        // u = 0 gives the drift (zero here).
        eval_controlled(&fam, &[0.0, 0.0, 0.0], &[1.0, 1.0], &mut out).unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn control_dimension_checked() {
        let fam = ControlFamily::driftless(vec![parse_field("(1, -a)").unwrap()]).unwrap();
        let mut out = [0.0; 2];
        assert!(matches!(
            eval_controlled(&fam, &[1.0, 2.0], &[0.0, 0.0], &mut out),
            Err(FieldError::ControlDimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn family_requires_matching_dimensions() {
        let bad = ControlFamily::new(
            VectorField::zero(2),
            vec![VectorField::constant(vec![1.0, 0.0, 0.0])],
        );
        assert!(bad.is_err());
        assert!(ControlFamily::driftless(vec![]).is_err());
    }

    #[test]
    fn jacobian_matches_hand_computation() {
        let f = parse_field("(a * b, a - b)").unwrap();
        let mut jac = [0.0; 4];
        f.jacobian(&[2.0, 3.0], &mut jac).unwrap();
        let expect = [3.0, 2.0, 1.0, -1.0];
        for (g, e) in jac.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-7, "jacobian {jac:?}");
        }
    }

    #[test]
    fn control_set_box_operations() {
        let set = ControlSet::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert!(set.contains(&[0.5, 1.0], 0.0));
        assert!(!set.contains(&[1.5, 1.0], 0.0));
        let mut u = vec![3.0, -1.0];
        set.clamp(&mut u);
        assert_eq!(u, vec![1.0, 0.0]);
        assert_eq!(set.vertices().len(), 4);
        assert!(ControlSet::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn h1_constants_constant_field() {
        let f = VectorField::constant(vec![0.0, 1.0]);
        let rep = validate_h1(&f, &[-5.0, -5.0], &[5.0, 5.0], 256).unwrap();
        assert!(rep.c_growth <= 1.0 + 1e-12, "c_growth = {}", rep.c_growth);
        assert_eq!(rep.c_lip, 0.0);
    }

    #[test]
    fn h1_constants_linear_field() {
        // sup |F(x)−F(y)|/|x−y| for F = [[1,1],[1,0]]·x is the top singular
        // value (1+√5)/2.
        let f = parse_field("(a + b, a)").unwrap();
        let rep = validate_h1(&f, &[-5.0, -5.0], &[5.0, 5.0], 256).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!(rep.c_lip <= phi + 1e-9, "c_lip = {}", rep.c_lip);
        assert!(rep.c_lip >= 0.95 * phi, "c_lip = {} vs {}", rep.c_lip, phi);
    }

    #[test]
    fn h1_constants_exponential_field_stay_finite() {
        let f = parse_field("(exp(a), 0)").unwrap();
        let rep = validate_h1(&f, &[-5.0, -5.0], &[5.0, 5.0], 512).unwrap();
        let cap = 5f64.exp() / 6.0;
        assert!(rep.c_growth.is_finite());
        assert!(rep.c_growth <= cap * 1.01, "c_growth = {} vs {}", rep.c_growth, cap);
        assert!(rep.c_growth >= cap * 0.5, "c_growth = {} vs {}", rep.c_growth, cap);
    }

    #[test]
    fn h1_rejects_non_finite_fields() {
        let f = VectorField::from_fn(2, |_, out| {
            out[0] = f64::NAN;
            out[1] = 0.0;
            Ok(())
        });
        assert!(matches!(
            validate_h1(&f, &[-1.0, -1.0], &[1.0, 1.0], 16),
            Err(FieldError::NonFinite)
        ));
    }

    #[test]
    fn scalar_field_gradients() {
        let sq = ScalarField::squared_distance(vec![1.0, -1.0]);
        assert_eq!(sq.eval(&[2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(sq.gradient(&[2.0, 0.0]).unwrap(), vec![2.0, 2.0]);
        let e = ScalarField::parse("b").unwrap();
        let g = e.gradient(&[0.3, 0.7]).unwrap();
        assert!((g[0]).abs() < 1e-9);
        assert!((g[1] - 1.0).abs() < 1e-9);
    }
}
