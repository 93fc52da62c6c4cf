//! Sampling checks for the standing hypotheses on drivers, diffusions and
//! fields. None of these prove anything; they report worst cases found on a
//! user-chosen box with a pass/warn/fail verdict.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;

use super::{DiffusionSpec, Driver, ScalarField};
use crate::error::{Error, Result};

/// Absolute tolerance for `|g(y, 0)|`.
pub const H1_ZERO_TOLERANCE: f64 = 1e-12;

const SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub check: String,
    pub verdict: Verdict,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    fn new(check: &str) -> Self {
        ValidationReport {
            check: check.to_string(),
            verdict: Verdict::Pass,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    fn downgrade(&mut self, verdict: Verdict, note: String) {
        if verdict as u8 > self.verdict as u8 {
            self.verdict = verdict;
        }
        self.notes.push(note);
    }
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn new(seed: u64) -> Self {
        Sampler(ChaCha8Rng::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0
    }

    fn between(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn in_box(&mut self, lo: &[f64], hi: &[f64], out: &mut [f64]) {
        for ((o, &a), &b) in out.iter_mut().zip(lo).zip(hi) {
            *o = self.between(a, b);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Checks `g(y, 0) = 0` on `y_grid` and estimates the Lipschitz constant of
/// `g` from random pairs (far pairs and near pairs).
pub fn validate_h1(driver: &Driver, y_grid: &[f64], seed: u64) -> Result<ValidationReport> {
    if y_grid.is_empty() {
        return Err(Error::Config("validate_h1 needs a nonempty y grid".into()));
    }
    let n = driver.dim();
    let zero = vec![0.0; n];
    let mut report = ValidationReport::new("h1");
    let mut max_at_zero = 0.0f64;
    for &y in y_grid {
        max_at_zero = max_at_zero.max(driver.eval(y, &zero)?.abs());
    }
    report.set("max_abs_g_at_zero", max_at_zero);

    let y_lo = y_grid.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let y_hi = y_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let z_rad = 1.0 + y_lo.abs().max(y_hi.abs());
    let mut rng = Sampler::new(seed);
    let (mut z1, mut z2) = (vec![0.0; n], vec![0.0; n]);
    let mut lipschitz = 0.0f64;
    for s in 0..SAMPLES {
        let y1 = rng.between(y_lo, y_hi);
        for v in z1.iter_mut() {
            *v = rng.between(-z_rad, z_rad);
        }
        let (y2, step) = if s % 2 == 0 {
            for v in z2.iter_mut() {
                *v = rng.between(-z_rad, z_rad);
            }
            (rng.between(y_lo, y_hi), 1.0)
        } else {
            let step = 1e-4 * (1.0 + y1.abs());
            for (b, a) in z2.iter_mut().zip(&z1) {
                *b = a + step * rng.between(-1.0, 1.0);
            }
            (y1 + step * rng.between(-1.0, 1.0), step)
        };
        let denom = (y1 - y2).abs() + dist(&z1, &z2);
        if denom < 1e-3 * step {
            continue;
        }
        let q = (driver.eval(y1, &z1)? - driver.eval(y2, &z2)?).abs() / denom;
        lipschitz = lipschitz.max(q);
    }
    report.set("lipschitz_estimate", lipschitz);
    if max_at_zero > H1_ZERO_TOLERANCE {
        report.downgrade(
            Verdict::Fail,
            format!("g(y, 0) reaches {max_at_zero:e}; (H1) requires g(y, 0) = 0"),
        );
    }
    Ok(report)
}

/// Box for the (H2) sampler: state `x`, value `u` and gradient `p`.
#[derive(Debug, Clone)]
pub struct H2SampleBox {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: f64,
    pub u_hi: f64,
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
}

impl H2SampleBox {
    fn scaled(&self, factor: f64) -> Self {
        let scale = |lo: f64, hi: f64| {
            let c = 0.5 * (lo + hi);
            let r = 0.5 * (hi - lo) * factor;
            (c - r, c + r)
        };
        let scale_vec = |lo: &[f64], hi: &[f64]| -> (Vec<f64>, Vec<f64>) {
            lo.iter().zip(hi).map(|(&a, &b)| scale(a, b)).unzip()
        };
        let (u_lo, u_hi) = scale(self.u_lo, self.u_hi);
        let (p_lo, p_hi) = scale_vec(&self.p_lo, &self.p_hi);
        H2SampleBox {
            x_lo: self.x_lo.clone(),
            x_hi: self.x_hi.clone(),
            u_lo,
            u_hi,
            p_lo,
            p_hi,
        }
    }
}

struct H2Bounds {
    growth: f64,
    d_u: f64,
    d_p: f64,
}

fn h2_bounds(
    driver: &Driver,
    diffusion: &DiffusionSpec,
    b: &H2SampleBox,
    rng: &mut Sampler,
) -> Result<H2Bounds> {
    let n = diffusion.dim();
    let mut x = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut sigma = vec![0.0; n * n];
    let mut z = vec![0.0; n];
    let mut out = H2Bounds {
        growth: 0.0,
        d_u: 0.0,
        d_p: 0.0,
    };
    // F(u, p) = g(u, p σ(x)), with p a row vector.
    let eval_f = |u: f64, p: &[f64], sigma: &[f64], z: &mut [f64]| -> Result<f64> {
        for j in 0..n {
            z[j] = (0..n).map(|i| p[i] * sigma[i * n + j]).sum();
        }
        driver.eval(u, z)
    };
    for _ in 0..SAMPLES / 4 {
        rng.in_box(&b.x_lo, &b.x_hi, &mut x);
        rng.in_box(&b.p_lo, &b.p_hi, &mut p);
        let u = rng.between(b.u_lo, b.u_hi);
        diffusion.sigma(&x, &mut sigma)?;
        let f0 = eval_f(u, &p, &sigma, &mut z)?;
        out.growth = out.growth.max(f0.abs() / (1.0 + u.abs() + norm(&p)));
        let hu = 1e-6 * (1.0 + u.abs());
        let d_u = (eval_f(u + hu, &p, &sigma, &mut z)? - eval_f(u - hu, &p, &sigma, &mut z)?)
            / (2.0 * hu);
        out.d_u = out.d_u.max(d_u.abs());
        let mut grad_sq = 0.0;
        for i in 0..n {
            let hp = 1e-6 * (1.0 + p[i].abs());
            let orig = p[i];
            p[i] = orig + hp;
            let plus = eval_f(u, &p, &sigma, &mut z)?;
            p[i] = orig - hp;
            let minus = eval_f(u, &p, &sigma, &mut z)?;
            p[i] = orig;
            grad_sq += ((plus - minus) / (2.0 * hp)).powi(2);
        }
        out.d_p = out.d_p.max(grad_sq.sqrt());
    }
    Ok(out)
}

/// Samples the (H2) bounds for `F(u, p) = g(u, pσ(x))` on the box and on
/// copies with the `(u, p)` ranges doubled and quadrupled. A bound that keeps
/// growing with the box is flagged as unbounded.
pub fn validate_h2(
    driver: &Driver,
    diffusion: &DiffusionSpec,
    sample_box: &H2SampleBox,
    seed: u64,
) -> Result<ValidationReport> {
    let n = diffusion.dim();
    if sample_box.x_lo.len() != n
        || sample_box.x_hi.len() != n
        || sample_box.p_lo.len() != n
        || sample_box.p_hi.len() != n
    {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sample_box.x_lo.len(),
        });
    }
    let positive = sample_box.u_hi > sample_box.u_lo
        && sample_box
            .p_lo
            .iter()
            .zip(&sample_box.p_hi)
            .all(|(a, b)| b > a)
        && sample_box
            .x_lo
            .iter()
            .zip(&sample_box.x_hi)
            .all(|(a, b)| b >= a);
    if !positive {
        return Err(Error::Config(
            "validate_h2 sample box has zero volume".into(),
        ));
    }
    let mut rng = Sampler::new(seed);
    let scales = [1.0, 2.0, 4.0];
    let bounds = scales
        .iter()
        .map(|&s| h2_bounds(driver, diffusion, &sample_box.scaled(s), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut report = ValidationReport::new("h2");
    let first = &bounds[0];
    report.set("growth_bound", first.growth);
    report.set("d_u_bound", first.d_u);
    report.set("d_p_bound", first.d_p);
    let last = &bounds[bounds.len() - 1];
    report.set("growth_bound_4x", last.growth);
    report.set("d_u_bound_4x", last.d_u);
    report.set("d_p_bound_4x", last.d_p);
    let grows = |a: f64, b: f64| b > 1.5 * a && b > 1e-9;
    let increasing =
        |sel: fn(&H2Bounds) -> f64| bounds.windows(2).all(|w| grows(sel(&w[0]), sel(&w[1])));
    for (name, sel) in [
        (
            "|F|/(1+|u|+|p|)",
            (|b: &H2Bounds| b.growth) as fn(&H2Bounds) -> f64,
        ),
        ("|D_u F|", |b: &H2Bounds| b.d_u),
        ("|D_p F|", |b: &H2Bounds| b.d_p),
    ] {
        if increasing(sel) {
            report.downgrade(
                Verdict::Fail,
                format!("{name} keeps growing as the sample box widens; it looks unbounded"),
            );
        }
    }
    Ok(report)
}

/// Fits `K` with `|f(x)| <= K (1 + |x|^degree)` on the box; warns when `K`
/// still grows between the half box and the full box.
pub fn validate_h3(
    field: &ScalarField,
    lo: &[f64],
    hi: &[f64],
    degree: u32,
    seed: u64,
) -> Result<ValidationReport> {
    let n = field.dim();
    if lo.len() != n || hi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: lo.len(),
        });
    }
    if lo.iter().chain(hi).any(|v| !v.is_finite()) {
        return Err(Error::Config("validate_h3 needs a finite box".into()));
    }
    let fit = |scale: f64, rng: &mut Sampler| -> Result<f64> {
        let c: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let l: Vec<f64> = lo
            .iter()
            .zip(&c)
            .map(|(a, m)| m + (a - m) * scale)
            .collect();
        let h: Vec<f64> = hi
            .iter()
            .zip(&c)
            .map(|(b, m)| m + (b - m) * scale)
            .collect();
        let mut x = vec![0.0; n];
        let mut k = 0.0f64;
        let mut consider = |x: &[f64]| -> Result<()> {
            let v = field.eval(x)?;
            k = k.max(v.abs() / (1.0 + norm(x).powi(degree as i32)));
            Ok(())
        };
        // corners first, then the interior
        for corner in 0..(1usize << n) {
            for i in 0..n {
                x[i] = if corner >> i & 1 == 1 { h[i] } else { l[i] };
            }
            consider(&x)?;
        }
        for _ in 0..SAMPLES {
            rng.in_box(&l, &h, &mut x);
            consider(&x)?;
        }
        Ok(k)
    };
    let mut rng = Sampler::new(seed);
    let k_half = fit(0.5, &mut rng)?;
    let k = fit(1.0, &mut rng)?;
    let mut report = ValidationReport::new("h3");
    report.set("growth_constant", k);
    report.set("growth_constant_half_box", k_half);
    if k > 1.5 * k_half && k > 1e-12 {
        report.downgrade(
            Verdict::Warn,
            format!(
                "growth constant rises from {k_half:.4e} to {k:.4e} with the box; degree {degree} may be too small"
            ),
        );
    }
    Ok(report)
}

/// Finite coefficients on probe points and a sampled Lipschitz quotient that
/// stays within ten times the recorded bound.
pub fn validate_diffusion(
    diffusion: &DiffusionSpec,
    lo: &[f64],
    hi: &[f64],
    seed: u64,
) -> Result<ValidationReport> {
    let n = diffusion.dim();
    if lo.len() != n || hi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: lo.len(),
        });
    }
    let mut rng = Sampler::new(seed);
    let (mut x1, mut x2) = (vec![0.0; n], vec![0.0; n]);
    let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
    let (mut s1, mut s2) = (vec![0.0; n * n], vec![0.0; n * n]);
    let mut quotient = 0.0f64;
    for _ in 0..SAMPLES / 2 {
        rng.in_box(lo, hi, &mut x1);
        rng.in_box(lo, hi, &mut x2);
        diffusion.drift(&x1, &mut b1)?;
        diffusion.drift(&x2, &mut b2)?;
        diffusion.sigma(&x1, &mut s1)?;
        diffusion.sigma(&x2, &mut s2)?;
        let d = dist(&x1, &x2);
        if d > 1e-12 {
            // Frobenius norm for σ
            quotient = quotient.max((dist(&b1, &b2) + dist(&s1, &s2)) / d);
        }
    }
    let mut report = ValidationReport::new("diffusion");
    report.set("lipschitz_quotient", quotient);
    report.set("lipschitz_bound", diffusion.lipschitz_bound());
    if quotient > 10.0 * diffusion.lipschitz_bound() + 1e-12 {
        report.downgrade(
            Verdict::Warn,
            format!(
                "sampled Lipschitz quotient {quotient:.4e} exceeds ten times the recorded bound {:.4e}",
                diffusion.lipschitz_bound()
            ),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::model::catalog;

    fn expr_driver(src: &str) -> Driver {
        Driver::from_expression(1, src, &HashMap::new()).unwrap()
    }

    fn grid() -> Vec<f64> {
        (-10..=10).map(|i| i as f64 * 0.5).collect()
    }

    #[test]
    fn ambiguity_driver_passes_h1() {
        let r = validate_h1(&Driver::ambiguity(1, 0.5), &grid(), 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.metric("max_abs_g_at_zero"), Some(0.0));
        let l = r.metric("lipschitz_estimate").unwrap();
        assert!(l <= 0.5 + 1e-12 && l > 0.4, "{l}");
    }

    #[test]
    fn shifted_driver_fails_h1() {
        let r = validate_h1(&expr_driver("y + z1"), &[1.0], 1).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.metric("max_abs_g_at_zero"), Some(1.0));
        let (g, _) = expr_driver("y + z1").validated(&[1.0], 1).unwrap();
        assert!(!g.satisfies_h1());
    }

    #[test]
    fn zero_driver_has_zero_lipschitz() {
        let r = validate_h1(&Driver::zero(1), &grid(), 3).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.metric("lipschitz_estimate"), Some(0.0));
    }

    #[test]
    fn catalog_drivers_pass_h1() {
        for name in catalog::DRIVERS {
            for dim in [1, 2] {
                let g = catalog::driver(name, dim, &HashMap::new()).unwrap();
                assert!(g.satisfies_h1());
                let r = validate_h1(&g, &grid(), 9).unwrap();
                assert_eq!(r.verdict, Verdict::Pass, "{name}");
            }
        }
    }

    #[test]
    fn validation_is_deterministic() {
        let g = expr_driver("0.3*z1*tanh(y)");
        let a = validate_h1(&g, &grid(), 5).unwrap();
        let b = validate_h1(&g, &grid(), 5).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    fn h2_box() -> H2SampleBox {
        H2SampleBox {
            x_lo: vec![-1.0],
            x_hi: vec![1.0],
            u_lo: -2.0,
            u_hi: 2.0,
            p_lo: vec![-2.0],
            p_hi: vec![2.0],
        }
    }

    #[test]
    fn h2_zero_driver() {
        let r = validate_h2(&Driver::zero(1), &DiffusionSpec::brownian(1), &h2_box(), 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.metric("growth_bound"), Some(0.0));
        assert_eq!(r.metric("d_u_bound"), Some(0.0));
        assert_eq!(r.metric("d_p_bound"), Some(0.0));
    }

    #[test]
    fn h2_ambiguity_gradient_is_mu() {
        let r = validate_h2(
            &Driver::ambiguity(1, 0.5),
            &DiffusionSpec::brownian(1),
            &h2_box(),
            1,
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let dp = r.metric("d_p_bound").unwrap();
        assert!((dp - 0.5).abs() < 1e-6, "{dp}");
    }

    #[test]
    fn h2_flags_quadratic_in_u() {
        let r = validate_h2(
            &expr_driver("y^2"),
            &DiffusionSpec::brownian(1),
            &h2_box(),
            1,
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.metric("d_u_bound_4x").unwrap() > 3.0 * r.metric("d_u_bound").unwrap());
    }

    #[test]
    fn h2_rejects_flat_box() {
        let mut b = h2_box();
        b.u_hi = b.u_lo;
        assert!(validate_h2(&Driver::zero(1), &DiffusionSpec::brownian(1), &b, 1).is_err());
    }

    #[test]
    fn h3_quadratic_and_zero() {
        let f = ScalarField::quadratic(1, 1.0);
        let r = validate_h3(&f, &[-10.0], &[10.0], 2, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let k = r.metric("growth_constant").unwrap();
        assert!((k - 100.0 / 101.0).abs() < 1e-12, "{k}");
        let zero = ScalarField::constant(1, 0.0);
        let r = validate_h3(&zero, &[-10.0], &[10.0], 0, 1).unwrap();
        assert_eq!(r.metric("growth_constant"), Some(0.0));
    }

    #[test]
    fn h3_exponential_warns() {
        let f = ScalarField::from_expression(1, "exp(x1)", &HashMap::new(), 4).unwrap();
        let r = validate_h3(&f, &[-20.0], &[20.0], 4, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Warn);
        let k = r.metric("growth_constant").unwrap();
        let expected = 20f64.exp() / (1.0 + 1.6e5);
        assert!((k - expected).abs() < 1e-9 * expected, "{k} vs {expected}");
    }

    #[test]
    fn diffusion_lipschitz_check() {
        let ou = catalog::diffusion("ou", 1, &HashMap::from([("kappa".into(), 2.0)])).unwrap();
        let r = validate_diffusion(&ou, &[-3.0], &[3.0], 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.metric("lipschitz_quotient").unwrap() - 2.0).abs() < 1e-9);
        let understated = ou.with_lipschitz_bound(0.1);
        let r = validate_diffusion(&understated, &[-3.0], &[3.0], 1).unwrap();
        assert_eq!(r.verdict, Verdict::Warn);
    }
}
