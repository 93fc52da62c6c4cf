//! Central differences with one Richardson level, and the operator
//! `Lf + g(f, f_x σ)` built from them.

use crate::error::Result;
use crate::model::{DiffusionSpec, Driver, ScalarField};

/// Default step: `1e-4 (1 + |x|)` rounded down to a power of two, so that
/// `x ± h` is exact and linear fields have exactly vanishing second
/// differences.
pub fn default_step(x: &[f64]) -> f64 {
    let h = 1e-4 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
    2f64.powi(h.log2().floor() as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major Hessian.
    pub hessian: Vec<f64>,
}

fn raw(f: &ScalarField, x: &[f64], h: f64, value: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut p = x.to_vec();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    for i in 0..n {
        p[i] = x[i] + h;
        let plus = f.eval(&p)?;
        p[i] = x[i] - h;
        let minus = f.eval(&p)?;
        p[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
        hess[i * n + i] = (plus - 2.0 * value + minus) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = f.eval(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let mixed = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            hess[i * n + j] = mixed;
            hess[j * n + i] = mixed;
        }
    }
    Ok((grad, hess))
}

/// First and second derivatives from steps `h` and `h/2`, combined as
/// `D(h/2) + (D(h/2) - D(h)) / 3`.
pub fn derivatives(f: &ScalarField, x: &[f64], h: Option<f64>) -> Result<Derivatives> {
    let h = h.unwrap_or_else(|| default_step(x));
    let value = f.eval(x)?;
    let (g1, h1) = raw(f, x, h, value)?;
    let (g2, h2) = raw(f, x, h / 2.0, value)?;
    let extrapolate = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(coarse, fine)| fine + (fine - coarse) / 3.0)
            .collect()
    };
    Ok(Derivatives {
        value,
        gradient: extrapolate(&g1, &g2),
        hessian: extrapolate(&h1, &h2),
    })
}

/// `Σ b_i ∂_i f + ½ Σ (σσᵀ)_ij ∂_ij f + g(f, (∇f)ᵀσ)` at `x`.
pub fn apply_operator(
    f: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    x: &[f64],
    h: Option<f64>,
) -> Result<f64> {
    let n = diffusion.dim();
    let d = derivatives(f, x, h)?;
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * n];
    diffusion.drift(x, &mut b)?;
    diffusion.sigma(x, &mut s)?;
    let a = diffusion.covariance(x)?;
    let first: f64 = b.iter().zip(&d.gradient).map(|(bi, gi)| bi * gi).sum();
    let second: f64 = a
        .iter()
        .zip(&d.hessian)
        .map(|(aij, hij)| aij * hij)
        .sum::<f64>()
        * 0.5;
    let z: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| d.gradient[i] * s[i * n + j]).sum())
        .collect();
    Ok(first + second + driver.eval(d.value, &z)?)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn field(src: &str, dim: usize) -> ScalarField {
        ScalarField::from_expression(dim, src, &HashMap::new(), 2).unwrap()
    }

    #[test]
    fn default_step_is_a_power_of_two() {
        for x in [0.0, 0.3, -7.5, 1e3] {
            let h = default_step(&[x]);
            assert!(h <= 1e-4 * (1.0 + x.abs()) && h > 0.5e-4 * (1.0 + x.abs()));
            assert_eq!(h.log2().fract(), 0.0);
        }
    }

    #[test]
    fn polynomial_derivatives() {
        let f = field("x1^3 + 2*x1*x2 - x2^2", 2);
        let d = derivatives(&f, &[0.5, -1.0], None).unwrap();
        assert!((d.gradient[0] - (0.75 - 2.0)).abs() < 1e-8);
        assert!((d.gradient[1] - (1.0 + 2.0)).abs() < 1e-8);
        assert!((d.hessian[0] - 3.0).abs() < 1e-6);
        assert!((d.hessian[1] - 2.0).abs() < 1e-6);
        assert!((d.hessian[3] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn richardson_beats_single_step() {
        let f = field("exp(x1)", 1);
        let x = [1.0];
        let h = 1e-2;
        let value = f.eval(&x).unwrap();
        let (g, _) = raw(&f, &x, h, value).unwrap();
        let d = derivatives(&f, &x, Some(h)).unwrap();
        let exact = 1f64.exp();
        assert!((d.gradient[0] - exact).abs() < 1e-3 * (g[0] - exact).abs());
    }

    #[test]
    fn operator_on_simple_cases() {
        let bm = DiffusionSpec::brownian(1);
        let x = [0.3];
        // linear f with zero driver
        let r = apply_operator(&field("x1", 1), &bm, &Driver::zero(1), &x, None).unwrap();
        assert!(r.abs() < 1e-10);
        // x^2: ½ f'' = 1
        let r = apply_operator(
            &ScalarField::quadratic(1, 1.0),
            &bm,
            &Driver::zero(1),
            &x,
            None,
        )
        .unwrap();
        assert!((r - 1.0).abs() < 1e-6);
        // x with μ|z|: μ
        let r = apply_operator(&field("x1", 1), &bm, &Driver::ambiguity(1, 0.5), &x, None).unwrap();
        assert!((r - 0.5).abs() < 1e-10);
        // constant: exactly zero
        let r = apply_operator(
            &ScalarField::constant(1, 2.0),
            &bm,
            &Driver::ambiguity(1, 0.5),
            &x,
            None,
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }
}
