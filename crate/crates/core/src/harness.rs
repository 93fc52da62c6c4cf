//! Statistical verdicts built on the solvers: g-martingale classification,
//! the PDE/BSDE cross-check, the mean value property at exit times and the
//! cascade of exits from balls of radius `r(X)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bsde::{self, Estimate, ExitEstimate, Numerics};
use crate::error::{Error, Result};
use crate::expr::{self, BoundExpression};
use crate::model::{DiffusionSpec, Driver, ScalarField};
use crate::paths::{self, Grid, PathBundle, Region};
use crate::pde::{self, Scheme, SpaceGrid};
use crate::rng::derive_seed;

/// Width of every statistical gate, in standard errors.
pub const GATE_SE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    MartingaleConsistent,
    Super,
    Sub,
    Indeterminate,
}

impl Classification {
    pub fn of(delta: f64, se: f64) -> Self {
        if !delta.is_finite() || !se.is_finite() {
            Classification::Indeterminate
        } else if delta < -GATE_SE * se {
            Classification::Super
        } else if delta > GATE_SE * se {
            Classification::Sub
        } else {
            Classification::MartingaleConsistent
        }
    }

    /// Weakest class consistent with every probe.
    pub fn overall(classes: impl IntoIterator<Item = Classification>) -> Self {
        let (mut sup, mut sub) = (false, false);
        for c in classes {
            match c {
                Classification::Indeterminate => return Classification::Indeterminate,
                Classification::Super => sup = true,
                Classification::Sub => sub = true,
                Classification::MartingaleConsistent => {}
            }
        }
        match (sup, sub) {
            (false, false) => Classification::MartingaleConsistent,
            (true, false) => Classification::Super,
            (false, true) => Classification::Sub,
            (true, true) => Classification::Indeterminate,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub t: f64,
    pub f_x: f64,
    pub value: f64,
    pub delta: f64,
    pub se: f64,
    pub classification: Classification,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleVerdict {
    pub probes: Vec<Probe>,
    pub overall: Classification,
    /// σσᵀ positive definite at every probe state.
    pub elliptic: bool,
}

/// `Δ(x, t) = E^g_{0,t}[f(X^x_t)] - f(x)` at every `(x, t)` with the
/// three-standard-error classification. Probe `i` uses seed
/// `derive_seed(seed, i)`.
pub fn check_g_martingale(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    xs: &[Vec<f64>],
    ts: &[f64],
    numerics: &Numerics,
) -> Result<MartingaleVerdict> {
    let mut probes = Vec::with_capacity(xs.len() * ts.len());
    let mut elliptic = true;
    for x in xs {
        elliptic &= diffusion.is_elliptic_at(x)?;
        for &t in ts {
            let local = Numerics {
                seed: derive_seed(numerics.seed, probes.len() as u64),
                ..numerics.clone()
            };
            let f_x = field.eval(x)?;
            let est = bsde::g_expectation(diffusion, driver, field, x, t, &local)?;
            let delta = est.value - f_x;
            probes.push(Probe {
                x: x.clone(),
                t,
                f_x,
                value: est.value,
                delta,
                se: est.se,
                classification: Classification::of(delta, est.se),
            });
        }
    }
    let overall = Classification::overall(probes.iter().map(|p| p.classification));
    Ok(MartingaleVerdict {
        probes,
        overall,
        elliptic,
    })
}

/// Grid spacing and time step for the PDE side of the cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PdeSettings {
    pub h: f64,
    /// `None` picks the largest step allowed by the certificate.
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub pde: f64,
    pub bsde: f64,
    pub se: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeynmanKacReport {
    pub points: Vec<CrossPoint>,
    pub max_discrepancy: f64,
    pub mean_discrepancy: f64,
    pub max_se: f64,
    /// `max(tolerance, 3 max se)`
    pub gate: f64,
    pub pass: bool,
    pub cfl_ratio: f64,
}

/// `u(t, x) = E^g_{0,T-t}[f(X^x_{T-t})]` from the PDE and from the BSDE at
/// every report point.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_crosscheck(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    horizon: f64,
    report_xs: &[Vec<f64>],
    report_ts: &[f64],
    numerics: &Numerics,
    settings: PdeSettings,
    tolerance: f64,
) -> Result<FeynmanKacReport> {
    let n = diffusion.dim();
    if report_xs.is_empty() || report_ts.is_empty() {
        return Err(Error::Config("the report grid is empty".into()));
    }
    if report_xs.iter().any(|x| x.len() != n) {
        return Err(Error::Config(
            "report points must match the diffusion dimension".into(),
        ));
    }
    if report_ts.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
        return Err(Error::Config(format!(
            "report times must lie in [0, {horizon}]"
        )));
    }
    let window_lo: Vec<f64> = (0..n)
        .map(|i| report_xs.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let window_hi: Vec<f64> = (0..n)
        .map(|i| {
            report_xs
                .iter()
                .map(|x| x[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    // coefficient sizes over the window for the padding
    let (mut sigma_max, mut drift_max) = (0.0f64, 0.0f64);
    let mut b = vec![0.0; n];
    for x in report_xs {
        let a = diffusion.covariance(x)?;
        sigma_max = sigma_max.max((0..n).map(|i| a[i * n + i]).fold(0.0, f64::max).sqrt());
        diffusion.drift(x, &mut b)?;
        drift_max = drift_max.max(b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let (lo, hi) = pde::padded_box(
        &window_lo,
        &window_hi,
        sigma_max.max(1e-3),
        drift_max,
        horizon,
    );
    let grid = SpaceGrid::new(lo, hi, settings.h)?;
    let dt = match settings.dt {
        Some(dt) => dt,
        None => Scheme::max_stable_dt(diffusion, driver, &grid)?,
    };
    let field_pde = pde::parabolic_solve(diffusion, driver, field, grid, horizon, dt, usize::MAX)?;
    // with save_every = MAX only the first and last layers exist; recompute
    // intermediate report times on demand
    let mut points = Vec::new();
    let mut index = 0u64;
    for &t in report_ts {
        let s = horizon - t;
        let layer_field = if s == 0.0 || s == horizon {
            None
        } else {
            Some(pde::parabolic_solve(
                diffusion,
                driver,
                field,
                field_pde.grid.clone(),
                s,
                dt,
                usize::MAX,
            )?)
        };
        for x in report_xs {
            let pde_value = match &layer_field {
                None => field_pde.value(s, x)?,
                Some(f) => f.value(s, x)?,
            };
            let est = if s == 0.0 {
                Estimate {
                    value: field.eval(x)?,
                    se: 0.0,
                }
            } else {
                let local = Numerics {
                    seed: derive_seed(numerics.seed, index),
                    ..numerics.clone()
                };
                bsde::g_expectation(diffusion, driver, field, x, s, &local)?
            };
            index += 1;
            points.push(CrossPoint {
                t,
                x: x.clone(),
                pde: pde_value,
                bsde: est.value,
                se: est.se,
                discrepancy: (pde_value - est.value).abs(),
            });
        }
    }
    let max_discrepancy = points.iter().map(|p| p.discrepancy).fold(0.0, f64::max);
    let mean_discrepancy = points.iter().map(|p| p.discrepancy).sum::<f64>() / points.len() as f64;
    let max_se = points.iter().map(|p| p.se).fold(0.0, f64::max);
    let gate = tolerance.max(GATE_SE * max_se);
    Ok(FeynmanKacReport {
        points,
        max_discrepancy,
        mean_discrepancy,
        max_se,
        gate,
        pass: max_discrepancy <= gate,
        cfl_ratio: field_pde.cfl_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MvpReport {
    pub x: Vec<f64>,
    pub radius: f64,
    pub f_x: f64,
    pub value: f64,
    pub se: f64,
    /// `E^g_{0,τ}[f(X_τ)] - f(x)`
    pub deviation: f64,
    pub truncation: f64,
    pub holds: bool,
}

/// Mean value property on the ball of radius `radius` around `x`.
pub fn check_mvp(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    x: &[f64],
    radius: f64,
    t_max: f64,
    numerics: &Numerics,
) -> Result<MvpReport> {
    let region = Region::ball(x.to_vec(), radius)?;
    let est = bsde::g_expectation_at_exit(diffusion, driver, field, x, &region, t_max, numerics)?;
    let f_x = field.eval(x)?;
    let deviation = est.value - f_x;
    Ok(MvpReport {
        x: x.to_vec(),
        radius,
        f_x,
        value: est.value,
        se: est.se,
        deviation,
        truncation: est.truncation,
        holds: deviation.abs() <= GATE_SE * est.se,
    })
}

/// `r(x)` given as an expression in `x1..xn` and `d`, the distance from `x`
/// to the boundary of the domain. Outside the domain `r = 0`.
#[derive(Debug, Clone)]
pub struct RadiusFunction {
    dim: usize,
    expr: BoundExpression,
}

impl RadiusFunction {
    pub fn from_expression(
        dim: usize,
        source: &str,
        params: &HashMap<String, f64>,
    ) -> Result<Self> {
        let mut slots: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        slots.push("d".into());
        let refs: Vec<&str> = slots.iter().map(String::as_str).collect();
        let expr = expr::parse(source)?
            .bind(&refs, params)
            .map_err(|e| Error::Config(format!("radius `{source}`: {e}")))?;
        Ok(RadiusFunction { dim, expr })
    }

    /// `r = fraction · d`
    pub fn fraction_of_distance(dim: usize, fraction: f64) -> Self {
        Self::from_expression(dim, &format!("{fraction}*d"), &HashMap::new())
            .expect("a product of a literal and d always parses")
    }

    pub fn source(&self) -> &str {
        self.expr.source()
    }

    pub fn eval(&self, x: &[f64], distance: f64) -> Result<f64> {
        if distance <= 0.0 {
            return Ok(0.0);
        }
        let mut args = x.to_vec();
        args.push(distance);
        self.expr.eval(&args).map_err(|e| Error::evaluation(x, e))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub index: usize,
    pub value: f64,
    pub se: f64,
    /// Change from the previous stage (stage 0 is `f(y)` exactly).
    pub deviation: f64,
    pub combined_se: f64,
    pub tower_ok: bool,
    /// Paths whose stopped state is within `ε` of the boundary or beyond it.
    pub proximity_fraction: f64,
    pub truncation: f64,
    /// Smallest radius used at a stopped state at least `ε` inside.
    pub min_interior_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingCascade {
    pub start: Vec<f64>,
    pub radius_function: String,
    pub epsilon: f64,
    pub stages: Vec<Stage>,
    pub direct: ExitEstimate,
    pub final_deviation: f64,
    pub final_combined_se: f64,
    pub final_match: bool,
    pub tower_ok: bool,
    /// `τ_k >= τ_{k-1}` on every path.
    pub monotone_times: bool,
    #[serde(skip)]
    pub stop_indices: Vec<Vec<usize>>,
}

impl StoppingCascade {
    pub fn final_proximity(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.proximity_fraction)
    }
}

#[derive(Debug, Clone)]
pub struct CascadeSettings {
    pub stages: usize,
    pub t_max: f64,
    /// Proximity threshold as a fraction of the domain diameter.
    pub epsilon_fraction: f64,
}

impl Default for CascadeSettings {
    fn default() -> Self {
        CascadeSettings {
            stages: 6,
            t_max: 5.0,
            epsilon_fraction: 0.05,
        }
    }
}

/// Checks `0 <= r <= d` at a stopped state inside the domain and `r > 0`
/// where `d > 0`.
fn check_radius(x: &[f64], r: f64, d: f64) -> Result<()> {
    let bad = !r.is_finite() || r < 0.0 || (d > 0.0 && (r > d || r == 0.0));
    if bad {
        return Err(Error::RadiusCondition {
            state: x.to_vec(),
            radius: r,
            distance: d,
        });
    }
    Ok(())
}

/// Cascade of exits: `τ_k` is the first time after `τ_{k-1}` that the path
/// moves `r(X_{τ_{k-1}})` away from `X_{τ_{k-1}}`. Stage `k` continues the
/// stopped paths of stage `k-1` with draws from a fresh seed.
#[allow(clippy::too_many_arguments)]
pub fn iterated_stopping(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    start: &[f64],
    domain: &Region,
    radius: &RadiusFunction,
    settings: &CascadeSettings,
    numerics: &Numerics,
) -> Result<StoppingCascade> {
    let n = diffusion.dim();
    if start.len() != n || domain.dim() != n || radius.dim != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: start.len(),
        });
    }
    if domain.signed_distance(start) <= 0.0 {
        return Err(Error::Config(format!(
            "start {start:?} is not inside the domain"
        )));
    }
    if settings.stages == 0 {
        return Err(Error::Config("the cascade needs at least one stage".into()));
    }
    let epsilon = settings.epsilon_fraction * domain.diameter();
    let grid = Grid::new(settings.t_max, numerics.steps, numerics.paths)?;
    let f_start = field.eval(start)?;

    let mut stages = Vec::with_capacity(settings.stages);
    let mut stop_indices: Vec<Vec<usize>> = Vec::with_capacity(settings.stages);
    let mut previous: Option<PathBundle> = None;
    let (mut prev_value, mut prev_se) = (f_start, 0.0);
    let mut monotone = true;
    for k in 1..=settings.stages {
        let seed = derive_seed(numerics.seed, k as u64);
        let (mut bundle, split, truncated) = match previous.take() {
            None => (
                paths::simulate(diffusion, start, grid, seed)?,
                vec![0; numerics.paths],
                vec![false; numerics.paths],
            ),
            Some(prev) => {
                let split: Vec<usize> = (0..prev.paths()).map(|m| prev.stop_index(m)).collect();
                let marks = prev.exit_marks().expect("stages are always marked");
                let truncated: Vec<bool> = marks.iter().map(Option::is_none).collect();
                let next = paths::continue_from(&prev, &split, diffusion, seed)?;
                (next, split, truncated)
            }
        };
        // centres and radii at the previous stopping states
        let mut centers = Vec::with_capacity(numerics.paths * n);
        let mut radii = Vec::with_capacity(numerics.paths);
        let mut min_interior_radius = f64::INFINITY;
        for m in 0..numerics.paths {
            let x = bundle.state(split[m], m);
            let d = domain.signed_distance(x);
            let r = radius.eval(x, d)?;
            check_radius(x, r, d)?;
            if d >= epsilon {
                min_interior_radius = min_interior_radius.min(r);
            }
            centers.extend_from_slice(x);
            radii.push(r);
        }
        bundle.mark_exits_from(&split, |m, x| {
            if truncated[m] {
                return false;
            }
            let c = &centers[m * n..(m + 1) * n];
            let dist = x
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            dist >= radii[m]
        });
        let truncation = bundle.truncation_fraction();
        if truncation > bsde::TRUNCATION_LIMIT {
            return Err(Error::ExitTruncation {
                fraction: truncation,
                limit: bsde::TRUNCATION_LIMIT,
            });
        }
        let stops: Vec<usize> = (0..numerics.paths).map(|m| bundle.stop_index(m)).collect();
        monotone &= stops.iter().zip(&split).all(|(s, p)| s >= p);
        let marks = bundle.exit_marks().expect("just marked");
        let near = (0..numerics.paths)
            .filter(|&m| {
                marks[m].is_some() && domain.signed_distance(bundle.state(stops[m], m)) <= epsilon
            })
            .count();
        let terminal: Vec<f64> = bundle
            .terminal_states()
            .chunks(n)
            .map(|x| field.eval(x))
            .collect::<Result<_>>()?;
        let sol = bsde::backward_solve(&bundle, driver, &terminal, &numerics.options)?;
        let deviation = sol.y0 - prev_value;
        let combined_se = sol.se.hypot(prev_se);
        stages.push(Stage {
            index: k,
            value: sol.y0,
            se: sol.se,
            deviation,
            combined_se,
            tower_ok: deviation.abs() <= GATE_SE * combined_se,
            proximity_fraction: near as f64 / numerics.paths as f64,
            truncation,
            min_interior_radius,
        });
        stop_indices.push(stops);
        prev_value = sol.y0;
        prev_se = sol.se;
        drop(sol);
        previous = Some(bundle);
    }
    drop(previous);

    let direct_numerics = Numerics {
        seed: derive_seed(numerics.seed, 0),
        ..numerics.clone()
    };
    let direct = bsde::g_expectation_at_exit(
        diffusion,
        driver,
        field,
        start,
        domain,
        settings.t_max,
        &direct_numerics,
    )?;
    let last = stages.last().expect("at least one stage");
    let final_deviation = last.value - direct.value;
    let final_combined_se = last.se.hypot(direct.se);
    Ok(StoppingCascade {
        start: start.to_vec(),
        radius_function: radius.source().to_string(),
        epsilon,
        tower_ok: stages.iter().all(|s| s.tower_ok),
        final_match: final_deviation.abs() <= GATE_SE * final_combined_se,
        final_deviation,
        final_combined_se,
        stages,
        direct,
        monotone_times: monotone,
        stop_indices,
    })
}
