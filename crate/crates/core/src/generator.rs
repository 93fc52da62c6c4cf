//! The generator `A f(x) = lim_{t→0} (E^g_{0,t}[f(X^x_t)] - f(x)) / t`,
//! estimated from short-horizon g-expectations and compared with the closed
//! form `Lf + g(f, f_x σ)`.

use serde::Serialize;

use crate::bsde::{self, Numerics};
use crate::error::{Error, Result};
use crate::fd;
use crate::model::{DiffusionSpec, Driver, ScalarField};
use crate::rng::derive_seed;

pub const DEFAULT_T_SEQUENCE: [f64; 3] = [0.1, 0.05, 0.025];
/// Largest standard error accepted for the extrapolated value by default.
pub const DEFAULT_PRECISION_BUDGET: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quotient {
    pub t: f64,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorEstimate {
    pub point: Vec<f64>,
    pub analytic_value: f64,
    pub probabilistic_values: Vec<Quotient>,
    pub extrapolated_value: f64,
    pub extrapolated_se: f64,
    pub discrepancy: f64,
}

impl GeneratorEstimate {
    /// `|extrapolated - analytic| <= max(tolerance, 3 se)`.
    pub fn agrees(&self, tolerance: f64) -> bool {
        self.discrepancy <= tolerance.max(3.0 * self.extrapolated_se)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorOptions {
    pub t_sequence: Vec<f64>,
    pub numerics: Numerics,
    pub precision_budget: f64,
    pub fd_step: Option<f64>,
}

impl GeneratorOptions {
    pub fn new(numerics: Numerics) -> Self {
        GeneratorOptions {
            t_sequence: DEFAULT_T_SEQUENCE.to_vec(),
            numerics,
            precision_budget: DEFAULT_PRECISION_BUDGET,
            fd_step: None,
        }
    }
}

/// `Lf(x) + g(f(x), f_x(x) σ(x))` from extrapolated central differences.
pub fn analytic_generator(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    x: &[f64],
    fd_step: Option<f64>,
) -> Result<f64> {
    fd::apply_operator(field, diffusion, driver, x, fd_step)
}

/// Weights `w_i` with intercept `= Σ w_i q_i` for the least-squares line
/// through `(t_i, q_i)`.
pub fn intercept_weights(ts: &[f64]) -> Vec<f64> {
    let n = ts.len() as f64;
    let mean = ts.iter().sum::<f64>() / n;
    let sxx: f64 = ts.iter().map(|t| (t - mean).powi(2)).sum();
    ts.iter()
        .map(|t| 1.0 / n - mean * (t - mean) / sxx)
        .collect()
}

pub fn probabilistic_generator(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    x: &[f64],
    options: &GeneratorOptions,
) -> Result<GeneratorEstimate> {
    let ts = &options.t_sequence;
    if ts.len() < 3 {
        return Err(Error::Config(
            "the t sequence needs at least 3 entries".into(),
        ));
    }
    if ts.windows(2).any(|w| !(w[1] < w[0])) || ts.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config(format!(
            "the t sequence must be positive and decreasing: {ts:?}"
        )));
    }
    let fx = field.eval(x)?;
    let analytic_value = analytic_generator(field, diffusion, driver, x, options.fd_step)?;
    // one horizon at a time keeps a single bundle in memory
    let mut quotients = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let numerics = Numerics {
            seed: derive_seed(options.numerics.seed, i as u64),
            ..options.numerics.clone()
        };
        let est = bsde::g_expectation(diffusion, driver, field, x, t, &numerics)?;
        quotients.push(Quotient {
            t,
            estimate: (est.value - fx) / t,
            se: est.se / t,
        });
    }
    let w = intercept_weights(ts);
    let extrapolated_value: f64 = w.iter().zip(&quotients).map(|(w, q)| w * q.estimate).sum();
    let extrapolated_se = w
        .iter()
        .zip(&quotients)
        .map(|(w, q)| (w * q.se).powi(2))
        .sum::<f64>()
        .sqrt();
    if !(extrapolated_se <= options.precision_budget) {
        return Err(Error::Precision {
            se: extrapolated_se,
            budget: options.precision_budget,
        });
    }
    Ok(GeneratorEstimate {
        point: x.to_vec(),
        analytic_value,
        probabilistic_values: quotients,
        extrapolated_value,
        extrapolated_se,
        discrepancy: (extrapolated_value - analytic_value).abs(),
    })
}

/// `t,quotient,stderr` rows.
pub fn write_quotients_csv(
    est: &GeneratorEstimate,
    mut w: impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(w, "t,quotient,stderr")?;
    for q in &est.probabilistic_values {
        writeln!(w, "{},{},{}", q.t, q.estimate, q.se)?;
    }
    Ok(())
}
