//! Problem data: the diffusion `dX = b(X)dt + σ(X)dB`, the driver `g(y, z)`
//! and scalar fields `f(x)`.
//!
//! Everything here is autonomous (no explicit time dependence) and immutable
//! once built, so a single instance can be shared across workers.

pub mod catalog;
mod validate;

use std::collections::HashMap;

pub use validate::{
    validate_diffusion, validate_h1, validate_h2, validate_h3, H2SampleBox, ValidationReport,
    Verdict,
};

use crate::error::{Error, Result};
use crate::expr::{self, BoundExpression};

fn slot_names(prefix: &str, dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("{prefix}{i}")).collect()
}

fn bind_all(
    sources: &[String],
    slots: &[String],
    params: &HashMap<String, f64>,
) -> Result<Vec<BoundExpression>> {
    let slot_refs: Vec<&str> = slots.iter().map(String::as_str).collect();
    sources
        .iter()
        .map(|src| {
            let parsed = expr::parse(src)?;
            if parsed.free_variables().contains("t") {
                return Err(Error::Config(format!(
                    "`{src}`: coefficients must not depend on time"
                )));
            }
            parsed
                .bind(&slot_refs, params)
                .map_err(|e| Error::Config(format!("`{src}`: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Drift {
    Zero,
    Constant(Vec<f64>),
    /// `b(x) = matrix · x + offset`, matrix row-major.
    Affine {
        matrix: Vec<f64>,
        offset: Vec<f64>,
    },
    Expr(Vec<BoundExpression>),
}

#[derive(Debug, Clone)]
pub enum Volatility {
    /// `σ = s · I`
    Scalar(f64),
    /// Constant row-major matrix.
    Constant(Vec<f64>),
    /// Row-major entries as expressions in `x1..xn`.
    Expr(Vec<BoundExpression>),
}

/// An n-dimensional Itô diffusion with Lipschitz coefficients.
#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    dim: usize,
    drift: Drift,
    volatility: Volatility,
    lipschitz_bound: f64,
    name: String,
}

impl DiffusionSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: Drift,
        volatility: Volatility,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("diffusion dimension must be positive".into()));
        }
        let check = |len: usize, expected: usize| {
            if len == expected {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected, got: len })
            }
        };
        match &drift {
            Drift::Zero => {}
            Drift::Constant(b) => check(b.len(), dim)?,
            Drift::Affine { matrix, offset } => {
                check(matrix.len(), dim * dim)?;
                check(offset.len(), dim)?;
            }
            Drift::Expr(e) => check(e.len(), dim)?,
        }
        match &volatility {
            Volatility::Scalar(_) => {}
            Volatility::Constant(s) => check(s.len(), dim * dim)?,
            Volatility::Expr(e) => check(e.len(), dim * dim)?,
        }
        Ok(DiffusionSpec {
            dim,
            drift,
            volatility,
            lipschitz_bound,
            name: name.into(),
        })
    }

    /// Standard Brownian motion `X = x + B`.
    pub fn brownian(dim: usize) -> Self {
        Self::new("brownian", dim, Drift::Zero, Volatility::Scalar(1.0), 0.0)
            .expect("valid brownian spec")
    }

    /// Coefficients given as expressions in `x1..xn` plus named parameters.
    /// The Lipschitz bound is left at zero; use
    /// [`DiffusionSpec::with_lipschitz_bound`] after estimating it.
    pub fn from_expressions(
        dim: usize,
        drift: &[String],
        sigma: &[String],
        params: &HashMap<String, f64>,
    ) -> Result<Self> {
        let slots = slot_names("x", dim);
        let drift = Drift::Expr(bind_all(drift, &slots, params)?);
        let volatility = Volatility::Expr(bind_all(sigma, &slots, params)?);
        Self::new("expression", dim, drift, volatility, 0.0)
    }

    pub fn with_lipschitz_bound(mut self, bound: f64) -> Self {
        self.lipschitz_bound = bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn drift_kind(&self) -> &Drift {
        &self.drift
    }

    pub fn volatility_kind(&self) -> &Volatility {
        &self.volatility
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim;
        match &self.drift {
            Drift::Zero => out[..n].fill(0.0),
            Drift::Constant(b) => out[..n].copy_from_slice(b),
            Drift::Affine { matrix, offset } => {
                for i in 0..n {
                    let row = &matrix[i * n..(i + 1) * n];
                    out[i] = offset[i] + row.iter().zip(x).map(|(a, xj)| a * xj).sum::<f64>();
                }
            }
            Drift::Expr(e) => {
                for (o, ex) in out.iter_mut().zip(e) {
                    *o = ex.eval(x).map_err(|err| Error::evaluation(x, err))?;
                }
            }
        }
        ensure_finite(x, &out[..n], "drift")
    }

    /// Writes σ(x) row-major into `out` (length n²).
    pub fn sigma(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim;
        match &self.volatility {
            Volatility::Scalar(s) => {
                out[..n * n].fill(0.0);
                for i in 0..n {
                    out[i * n + i] = *s;
                }
            }
            Volatility::Constant(m) => out[..n * n].copy_from_slice(m),
            Volatility::Expr(e) => {
                for (o, ex) in out.iter_mut().zip(e) {
                    *o = ex.eval(x).map_err(|err| Error::evaluation(x, err))?;
                }
            }
        }
        ensure_finite(x, &out[..n * n], "diffusion")
    }

    /// σ when it does not depend on the state.
    pub fn constant_sigma(&self) -> Option<Vec<f64>> {
        let n = self.dim;
        match &self.volatility {
            Volatility::Scalar(s) => {
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    m[i * n + i] = *s;
                }
                Some(m)
            }
            Volatility::Constant(m) => Some(m.clone()),
            Volatility::Expr(_) => None,
        }
    }

    /// σσᵀ at `x`, row-major.
    pub fn covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        let mut s = vec![0.0; n * n];
        self.sigma(x, &mut s)?;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| s[i * n + k] * s[j * n + k]).sum();
            }
        }
        Ok(a)
    }

    /// Whether σσᵀ is positive definite at `x`.
    pub fn is_elliptic_at(&self, x: &[f64]) -> Result<bool> {
        let n = self.dim;
        let a = self.covariance(x)?;
        let m = nalgebra::DMatrix::from_row_slice(n, n, &a);
        let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 {
            return Ok(false);
        }
        Ok(m.symmetric_eigenvalues().min() > 1e-12 * scale)
    }
}

fn ensure_finite(x: &[f64], values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation {
            point: x.to_vec(),
            message: format!("{what} is not finite: {values:?}"),
        })
    }
}

#[derive(Debug, Clone)]
pub enum DriverKind {
    Zero,
    /// `g(y, z) = α · z`
    LinearZ(Vec<f64>),
    /// `g(y, z) = μ |z|`; a negative μ gives the concave counterpart.
    Ambiguity {
        mu: f64,
    },
    /// Expression in `y, z1..zn`.
    Expr(BoundExpression),
}

/// The BSDE generator `g(y, z)`.
#[derive(Debug, Clone)]
pub struct Driver {
    dim: usize,
    kind: DriverKind,
    satisfies_h1: bool,
    lipschitz_estimate: f64,
    mu_hint: Option<f64>,
    name: String,
}

impl Driver {
    pub fn zero(dim: usize) -> Self {
        Driver {
            dim,
            kind: DriverKind::Zero,
            satisfies_h1: true,
            lipschitz_estimate: 0.0,
            mu_hint: None,
            name: "zero".into(),
        }
    }

    pub fn linear_z(alpha: Vec<f64>) -> Self {
        let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
        Driver {
            dim: alpha.len(),
            kind: DriverKind::LinearZ(alpha),
            satisfies_h1: true,
            lipschitz_estimate: norm,
            mu_hint: None,
            name: "linear-z".into(),
        }
    }

    pub fn ambiguity(dim: usize, mu: f64) -> Self {
        Driver {
            dim,
            kind: DriverKind::Ambiguity { mu },
            satisfies_h1: true,
            lipschitz_estimate: mu.abs(),
            mu_hint: Some(mu),
            name: "ambiguity".into(),
        }
    }

    /// A driver from an expression in `y, z1..zn`. Hypothesis flags stay unset
    /// until [`validate_h1`] has been run.
    pub fn from_expression(
        dim: usize,
        source: &str,
        params: &HashMap<String, f64>,
    ) -> Result<Self> {
        let mut slots = vec!["y".to_string()];
        slots.extend(slot_names("z", dim));
        let bound = bind_all(&[source.to_string()], &slots, params)?.remove(0);
        Ok(Driver {
            dim,
            kind: DriverKind::Expr(bound),
            satisfies_h1: false,
            lipschitz_estimate: f64::INFINITY,
            mu_hint: None,
            name: "expression".into(),
        })
    }

    /// Runs the (H1) check and records its outcome on the driver.
    pub fn validated(mut self, y_grid: &[f64], seed: u64) -> Result<(Self, ValidationReport)> {
        let report = validate_h1(&self, y_grid, seed)?;
        self.satisfies_h1 = report.verdict == Verdict::Pass;
        self.lipschitz_estimate = report.metric("lipschitz_estimate").unwrap_or(f64::INFINITY);
        Ok((self, report))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn satisfies_h1(&self) -> bool {
        self.satisfies_h1
    }

    pub fn lipschitz_estimate(&self) -> f64 {
        self.lipschitz_estimate
    }

    pub fn mu_hint(&self) -> Option<f64> {
        self.mu_hint
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, DriverKind::Zero)
    }

    /// True when `g` does not depend on `y`, so the implicit step is explicit.
    pub fn is_y_independent(&self) -> bool {
        !matches!(self.kind, DriverKind::Expr(_))
    }

    #[inline]
    pub fn eval(&self, y: f64, z: &[f64]) -> Result<f64> {
        let v = match &self.kind {
            DriverKind::Zero => 0.0,
            DriverKind::LinearZ(alpha) => alpha.iter().zip(z).map(|(a, zi)| a * zi).sum(),
            DriverKind::Ambiguity { mu } => {
                if z.len() == 1 {
                    mu * z[0].abs()
                } else {
                    mu * z.iter().map(|v| v * v).sum::<f64>().sqrt()
                }
            }
            DriverKind::Expr(e) => {
                let mut buf = [0.0; 5];
                let args: &[f64] = if z.len() < buf.len() {
                    buf[0] = y;
                    buf[1..=z.len()].copy_from_slice(z);
                    &buf[..=z.len()]
                } else {
                    return eval_expr_driver(e, y, z);
                };
                e.eval(args).map_err(|err| Error::evaluation(args, err))?
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            let mut point = vec![y];
            point.extend_from_slice(z);
            Err(Error::Evaluation {
                point,
                message: "driver value is not finite".into(),
            })
        }
    }

    /// Expression text equivalent to a catalog driver.
    pub fn formula(&self) -> Option<String> {
        match &self.kind {
            DriverKind::Zero => Some("0".into()),
            DriverKind::LinearZ(alpha) => Some(
                alpha
                    .iter()
                    .enumerate()
                    .map(|(i, a)| format!("{a}*z{}", i + 1))
                    .collect::<Vec<_>>()
                    .join(" + "),
            ),
            DriverKind::Ambiguity { mu } if self.dim == 1 => Some(format!("{mu}*abs(z1)")),
            DriverKind::Ambiguity { mu } => Some(format!(
                "{mu}*sqrt({})",
                (1..=self.dim)
                    .map(|i| format!("z{i}^2"))
                    .collect::<Vec<_>>()
                    .join(" + ")
            )),
            DriverKind::Expr(e) => Some(e.source().to_string()),
        }
    }
}

fn eval_expr_driver(e: &BoundExpression, y: f64, z: &[f64]) -> Result<f64> {
    let mut args = Vec::with_capacity(z.len() + 1);
    args.push(y);
    args.extend_from_slice(z);
    e.eval(&args).map_err(|err| Error::evaluation(&args, err))
}

#[derive(Debug, Clone)]
pub enum FieldKind {
    Constant(f64),
    /// `f(x) = coef · x + offset`
    Linear {
        coef: Vec<f64>,
        offset: f64,
    },
    /// `f(x) = coef · |x|²`
    Quadratic {
        coef: f64,
    },
    /// `f(x) = offset - scale · exp(-rate · direction·x)`. With rate `2μ` and
    /// unit direction this is g-harmonic for Brownian motion and `g = μ|z|`.
    ExpProfile {
        offset: f64,
        scale: f64,
        rate: f64,
        direction: Vec<f64>,
    },
    /// `f(x) = amplitude · sin(frequency · x1 + phase)`
    Sine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    Expr(BoundExpression),
}

/// A real-valued function on R^n with an advisory polynomial growth degree.
#[derive(Debug, Clone)]
pub struct ScalarField {
    dim: usize,
    kind: FieldKind,
    growth_degree: u32,
    name: String,
}

impl ScalarField {
    pub fn new(name: impl Into<String>, dim: usize, kind: FieldKind, growth_degree: u32) -> Self {
        ScalarField {
            dim,
            kind,
            growth_degree,
            name: name.into(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new("constant", dim, FieldKind::Constant(c), 0)
    }

    pub fn linear(coef: Vec<f64>, offset: f64) -> Self {
        let dim = coef.len();
        Self::new("linear", dim, FieldKind::Linear { coef, offset }, 1)
    }

    pub fn quadratic(dim: usize, coef: f64) -> Self {
        Self::new("quadratic", dim, FieldKind::Quadratic { coef }, 2)
    }

    /// `-exp(-2μ x1)`: g-harmonic for Brownian motion under `g = μ|z|`.
    pub fn harmonic_exp_profile(dim: usize, mu: f64) -> Self {
        let mut direction = vec![0.0; dim];
        direction[0] = 1.0;
        Self::new(
            "exp-profile",
            dim,
            FieldKind::ExpProfile {
                offset: 0.0,
                scale: 1.0,
                rate: 2.0 * mu,
                direction,
            },
            0,
        )
    }

    pub fn sine(dim: usize, amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self::new(
            "sine",
            dim,
            FieldKind::Sine {
                amplitude,
                frequency,
                phase,
            },
            0,
        )
    }

    pub fn from_expression(
        dim: usize,
        source: &str,
        params: &HashMap<String, f64>,
        growth_degree: u32,
    ) -> Result<Self> {
        let slots = slot_names("x", dim);
        let bound = bind_all(&[source.to_string()], &slots, params)?.remove(0);
        Ok(Self::new(
            "expression",
            dim,
            FieldKind::Expr(bound),
            growth_degree,
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn growth_degree(&self) -> u32 {
        self.growth_degree
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let v = match &self.kind {
            FieldKind::Constant(c) => *c,
            FieldKind::Linear { coef, offset } => {
                coef.iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>() + offset
            }
            FieldKind::Quadratic { coef } => coef * x.iter().map(|v| v * v).sum::<f64>(),
            FieldKind::ExpProfile {
                offset,
                scale,
                rate,
                direction,
            } => {
                let s: f64 = direction.iter().zip(x).map(|(d, xi)| d * xi).sum();
                offset - scale * (-rate * s).exp()
            }
            FieldKind::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * x[0] + phase).sin(),
            FieldKind::Expr(e) => e.eval(x).map_err(|err| Error::evaluation(x, err))?,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation {
                point: x.to_vec(),
                message: "field value is not finite".into(),
            })
        }
    }

    /// Expression text that evaluates to the same values as the catalog form.
    pub fn formula(&self) -> String {
        let dot = |coef: &[f64]| {
            coef.iter()
                .enumerate()
                .map(|(i, c)| format!("{c}*x{}", i + 1))
                .collect::<Vec<_>>()
                .join(" + ")
        };
        match &self.kind {
            FieldKind::Constant(c) => format!("{c}"),
            FieldKind::Linear { coef, offset } => format!("({}) + {offset}", dot(coef)),
            FieldKind::Quadratic { coef } => format!(
                "{coef}*({})",
                (1..=self.dim)
                    .map(|i| format!("x{i}*x{i}"))
                    .collect::<Vec<_>>()
                    .join(" + ")
            ),
            FieldKind::ExpProfile {
                offset,
                scale,
                rate,
                direction,
            } => format!("{offset} - {scale}*exp((0 - {rate})*({}))", dot(direction)),
            FieldKind::Sine {
                amplitude,
                frequency,
                phase,
            } => format!("{amplitude}*sin({frequency}*x1 + {phase})"),
            FieldKind::Expr(e) => e.source().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_coefficients() {
        let d = DiffusionSpec::brownian(2);
        let mut b = [1.0; 2];
        let mut s = [9.0; 4];
        d.drift(&[0.3, 0.4], &mut b).unwrap();
        d.sigma(&[0.3, 0.4], &mut s).unwrap();
        assert_eq!(b, [0.0, 0.0]);
        assert_eq!(s, [1.0, 0.0, 0.0, 1.0]);
        assert!(d.is_elliptic_at(&[0.0, 0.0]).unwrap());
    }

    #[test]
    fn degenerate_diffusion_is_not_elliptic() {
        let d = DiffusionSpec::new("still", 1, Drift::Zero, Volatility::Scalar(0.0), 0.0).unwrap();
        assert!(!d.is_elliptic_at(&[0.0]).unwrap());
    }

    #[test]
    fn expression_coefficients_reject_time() {
        let params = HashMap::new();
        let err = DiffusionSpec::from_expressions(1, &["t".into()], &["1".into()], &params);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn expression_driver_evaluates() {
        let params = HashMap::from([("mu".to_string(), 0.5)]);
        let g = Driver::from_expression(1, "mu*abs(z1)", &params).unwrap();
        assert_eq!(g.eval(3.0, &[-3.0]).unwrap(), 1.5);
        assert!(!g.satisfies_h1());
        let bad = Driver::from_expression(1, "log(z1)", &params).unwrap();
        assert!(matches!(
            bad.eval(0.0, &[-1.0]),
            Err(Error::Evaluation { .. })
        ));
    }

    #[test]
    fn exp_profile_values() {
        let f = ScalarField::harmonic_exp_profile(1, 0.5);
        assert_eq!(f.eval(&[0.0]).unwrap(), -1.0);
        assert!((f.eval(&[1.0]).unwrap() + (-1.0f64).exp()).abs() < 1e-16);
    }
}
