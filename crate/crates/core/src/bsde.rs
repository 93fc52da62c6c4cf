//! Backward regression solver for `y_t = ξ + ∫_t^T g(y_s, z_s) ds - ∫_t^T z_s dB_s`.
//!
//! Scheme, for `k = N-1, ..., 0` on the paths still alive at step `k`:
//!
//! ```text
//! c_k = E[y_{k+1} | X_k]
//! z_k = E[(y_{k+1} - c_k) ΔB_k | X_k] / Δt
//! y_k = c_k + Δt g(y_k, z_k)          (Picard, implicit in y)
//! ```
//!
//! Paths that already stopped keep `y_k = y_{k+1}` and `z_k = 0`, which is an
//! exact solution after the stopping time because `g(y, 0) = 0`.
//! Subtracting `c_k` before the `z` regression leaves its expectation
//! unchanged and removes most of its variance.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DiffusionSpec, Driver, ScalarField};
use crate::paths::{self, Grid, PathBundle, Region};
use crate::regression::{RegressionConfig, Regressor};

pub const PICARD_TOLERANCE: f64 = 1e-12;
pub const PICARD_MAX_ITERATIONS: usize = 50;
/// Path blocks used for the standard error.
pub const SE_BLOCKS: usize = 20;
/// Truncation fraction above which exit-time expectations are refused.
pub const TRUNCATION_LIMIT: f64 = 0.10;

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub step: usize,
    pub time: f64,
    /// Mean state of each regression group.
    pub centers: Vec<Vec<f64>>,
    pub y_fit: Vec<f64>,
    pub z_fit: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct BsdeOptions {
    pub regression: RegressionConfig,
    pub record_fits: bool,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    dim: usize,
    paths: usize,
    steps: usize,
    dt: f64,
    /// `[k][m]`, `k = 0..=N`
    y: Vec<f64>,
    /// `[k][m][i]`, `k = 0..N`
    z: Vec<f64>,
    pub y0: f64,
    /// Standard error of `y0` from path-block means.
    pub se: f64,
    /// Largest Picard count at each step.
    pub picard_iterations: Vec<usize>,
    /// Regression groups that fell back to a plain mean.
    pub fallbacks: usize,
    pub regression: RegressionConfig,
    pub fits: Vec<FitSummary>,
}

impl BsdeSolution {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.paths..(k + 1) * self.paths]
    }

    pub fn z_at(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.z[k * w..(k + 1) * w]
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `step,time,group,x1..xn,y_fit,z1..zn` for every recorded fit.
    pub fn write_fits_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "step,time,group")?;
        for i in 1..=self.dim {
            write!(w, ",x{i}")?;
        }
        write!(w, ",y_fit")?;
        for i in 1..=self.dim {
            write!(w, ",z{i}")?;
        }
        writeln!(w)?;
        for f in &self.fits {
            for (g, c) in f.centers.iter().enumerate() {
                write!(w, "{},{},{g}", f.step, f.time)?;
                for v in c {
                    write!(w, ",{v}")?;
                }
                write!(w, ",{}", f.y_fit[g])?;
                for v in &f.z_fit[g] {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Mean and batch-means standard error over `SE_BLOCKS` contiguous blocks.
pub fn block_mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let blocks = SE_BLOCKS.min(n);
    let means: Vec<f64> = (0..blocks)
        .map(|b| {
            let (lo, hi) = (b * n / blocks, (b + 1) * n / blocks);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let avg = means.iter().sum::<f64>() / blocks as f64;
    let var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (blocks - 1) as f64;
    (mean, (var / blocks as f64).sqrt())
}

pub fn backward_solve(
    bundle: &PathBundle,
    driver: &Driver,
    terminal: &[f64],
    options: &BsdeOptions,
) -> Result<BsdeSolution> {
    let (n, paths, steps, dt) = (bundle.dim(), bundle.paths(), bundle.steps(), bundle.dt());
    if driver.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: driver.dim(),
        });
    }
    if terminal.len() != paths {
        return Err(Error::DimensionMismatch {
            expected: paths,
            got: terminal.len(),
        });
    }
    if let Some(m) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "terminal value of path {m} is not finite"
        )));
    }
    options.regression.validate().map_err(Error::Config)?;
    let implicit = !driver.is_y_independent();
    if implicit && !(dt * driver.lipschitz_estimate() < 1.0) {
        return Err(Error::Config(format!(
            "Δt · Lipschitz = {} must be below 1 for the Picard step; validate the driver or refine the grid",
            dt * driver.lipschitz_estimate()
        )));
    }

    let mut y = vec![0.0; (steps + 1) * paths];
    let mut z = vec![0.0; steps * paths * n];
    y[steps * paths..].copy_from_slice(terminal);
    // ξ plus the accumulated driver term, per path
    let mut psi = terminal.to_vec();
    let mut picard = vec![0usize; steps];
    let mut fallbacks = 0;
    let mut fits = Vec::new();

    let mut alive = Vec::with_capacity(paths);
    let mut points = Vec::with_capacity(paths * n);
    let mut response = Vec::with_capacity(paths);
    let mut cond = Vec::with_capacity(paths);
    let mut zfit = vec![Vec::with_capacity(paths); n];
    let mut scratch = Vec::with_capacity(paths);

    for k in (0..steps).rev() {
        let (head, tail) = y.split_at_mut((k + 1) * paths);
        let next = &tail[..paths];
        let cur = &mut head[k * paths..];
        cur.copy_from_slice(next);

        alive.clear();
        alive.extend((0..paths).filter(|&m| bundle.is_alive(m, k)));
        if alive.is_empty() {
            continue;
        }
        let states = bundle.states_at(k);
        let incs = bundle.increments_at(k);
        points.clear();
        for &m in &alive {
            points.extend_from_slice(&states[m * n..(m + 1) * n]);
        }
        let reg = Regressor::new(&options.regression, &points, n);
        fallbacks += reg.fallbacks();

        response.clear();
        response.extend(alive.iter().map(|&m| next[m]));
        cond.resize(alive.len(), 0.0);
        reg.fit(&response, &mut cond);
        for (i, zi) in zfit.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(
                alive
                    .iter()
                    .zip(&cond)
                    .map(|(&m, c)| (next[m] - c) * incs[m * n + i]),
            );
            zi.resize(alive.len(), 0.0);
            reg.fit(&scratch, zi);
            for v in zi.iter_mut() {
                *v /= dt;
            }
        }

        let solved: Vec<(f64, f64, usize)> = alive
            .par_iter()
            .enumerate()
            .map_init(
                || vec![0.0; n],
                |zj, (j, _)| {
                    for (v, zi) in zj.iter_mut().zip(&zfit) {
                        *v = zi[j];
                    }
                    picard_step(driver, cond[j], zj, dt, implicit).map_err(|e| match e {
                        Error::Solver { message, .. } => Error::Solver { step: k, message },
                        other => other,
                    })
                },
            )
            .collect::<Result<_>>()?;
        let zk = &mut z[k * paths * n..(k + 1) * paths * n];
        let mut max_iter = 0;
        for (j, &m) in alive.iter().enumerate() {
            let (yk, gk, iters) = solved[j];
            cur[m] = yk;
            psi[m] += dt * gk;
            max_iter = max_iter.max(iters);
            for i in 0..n {
                zk[m * n + i] = zfit[i][j];
            }
        }
        picard[k] = max_iter;

        if options.record_fits {
            let mut summary = FitSummary {
                step: k,
                time: bundle.time(k),
                centers: Vec::new(),
                y_fit: Vec::new(),
                z_fit: Vec::new(),
            };
            for g in reg.groups() {
                let len = g.len() as f64;
                summary.centers.push(
                    (0..n)
                        .map(|i| g.iter().map(|&p| points[p * n + i]).sum::<f64>() / len)
                        .collect(),
                );
                summary
                    .y_fit
                    .push(g.iter().map(|&p| cond[p]).sum::<f64>() / len);
                summary.z_fit.push(
                    (0..n)
                        .map(|i| g.iter().map(|&p| zfit[i][p]).sum::<f64>() / len)
                        .collect(),
                );
            }
            fits.push(summary);
        }
    }
    fits.reverse();

    let y_zero = &y[..paths];
    let shift = y_zero[0];
    let y0 = shift + y_zero.iter().map(|v| v - shift).sum::<f64>() / paths as f64;
    let (_, se) = block_mean_se(&psi);
    Ok(BsdeSolution {
        dim: n,
        paths,
        steps,
        dt,
        y,
        z,
        y0,
        se,
        picard_iterations: picard,
        fallbacks,
        regression: options.regression,
        fits,
    })
}

/// Solves `y = c + dt g(y, z)`; returns `(y, g(y, z), iterations)`.
fn picard_step(
    driver: &Driver,
    c: f64,
    z: &[f64],
    dt: f64,
    implicit: bool,
) -> Result<(f64, f64, usize)> {
    let mut yv = c;
    let mut g = driver.eval(yv, z)?;
    if !implicit {
        return Ok((c + dt * g, g, 1));
    }
    for it in 1..=PICARD_MAX_ITERATIONS {
        let next = c + dt * g;
        let done = (next - yv).abs() <= PICARD_TOLERANCE * yv.abs().max(1.0);
        yv = next;
        g = driver.eval(yv, z)?;
        if done {
            return Ok((yv, g, it));
        }
    }
    Err(Error::Solver {
        step: 0,
        message: format!("Picard iteration did not converge in {PICARD_MAX_ITERATIONS} steps"),
    })
}

/// Path count, step count, seed and regression settings.
#[derive(Debug, Clone)]
pub struct Numerics {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub options: BsdeOptions,
}

impl Numerics {
    pub fn new(paths: usize, steps: usize, seed: u64) -> Self {
        Numerics {
            paths,
            steps,
            seed,
            options: BsdeOptions::default(),
        }
    }

    pub fn with_regression(mut self, regression: RegressionConfig) -> Self {
        self.options.regression = regression;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn terminal_values(field: &ScalarField, bundle: &PathBundle) -> Result<Vec<f64>> {
    bundle
        .terminal_states()
        .chunks(bundle.dim())
        .map(|x| field.eval(x))
        .collect()
}

/// `E^g_{0,t}[f(X^x_t)]` with its standard error.
pub fn g_expectation(
    diffusion: &DiffusionSpec,
    driver: &Driver,
    field: &ScalarField,
    x: &[f64],
    t: f64,
    numerics: &Numerics,
) -> Result<Estimate> {
    let grid = Grid::new(t, numerics.steps, numerics.paths)?;
    let bundle = paths::simulate(diffusion, x, grid, numerics.seed)?;
    let terminal = terminal_values(field, &bundle)?;
    let sol = backward_solve(&bundle, driver, &terminal, &numerics.options)?;
    Ok(Estimate {
        value: sol.y0,
        se: sol.se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitEstimate {
    pub value: f64,
    pub se: f64,
    /// Fraction of paths still inside the region at `t_max`.
    pub truncation: f64,
}

/// `E^g_{0,τ∧T}[f(X_{τ∧T})]` for the first exit `τ` from `region`.
pub fn g_expectation_at_exit(
    diffusion: &DiffusionSpec,
    driver: &Driver,
    field: &ScalarField,
    x: &[f64],
    region: &Region,
    t_max: f64,
    numerics: &Numerics,
) -> Result<ExitEstimate> {
    let grid = Grid::new(t_max, numerics.steps, numerics.paths)?;
    let bundle = paths::simulate(diffusion, x, grid, numerics.seed)?.mark_exit_region(region)?;
    let truncation = bundle.truncation_fraction();
    if truncation > TRUNCATION_LIMIT {
        return Err(Error::ExitTruncation {
            fraction: truncation,
            limit: TRUNCATION_LIMIT,
        });
    }
    let terminal = terminal_values(field, &bundle)?;
    let sol = backward_solve(&bundle, driver, &terminal, &numerics.options)?;
    Ok(ExitEstimate {
        value: sol.y0,
        se: sol.se,
        truncation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub lower: Estimate,
    pub upper: Estimate,
    /// `upper - lower`
    pub gap: f64,
    pub holds_exactly: bool,
}

/// Solves with `g1 <= g2` on the same bundle and requires
/// `y0(g1) <= y0(g2) + 3 combined standard errors`.
pub fn comparison_check(
    bundle: &PathBundle,
    lower: &Driver,
    upper: &Driver,
    terminal: &[f64],
    options: &BsdeOptions,
) -> Result<ComparisonReport> {
    let a = backward_solve(bundle, lower, terminal, options)?;
    let b = backward_solve(bundle, upper, terminal, options)?;
    let combined = a.se.hypot(b.se);
    if a.y0 > b.y0 + 3.0 * combined {
        return Err(Error::ComparisonViolation {
            location: "y0".into(),
            upper: b.y0,
            lower: a.y0,
        });
    }
    Ok(ComparisonReport {
        lower: Estimate {
            value: a.y0,
            se: a.se,
        },
        upper: Estimate {
            value: b.y0,
            se: b.se,
        },
        gap: b.y0 - a.y0,
        holds_exactly: a.y0 <= b.y0,
    })
}
