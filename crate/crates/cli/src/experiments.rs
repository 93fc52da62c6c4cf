//! One function per experiment kind. Each returns measurements, gate
//! verdicts and CSV artifacts; nothing is written here.

use std::fmt::Write as _;

use gharmonic::bsde::{self, Numerics};
use gharmonic::generator::{self, GeneratorOptions};
use gharmonic::harness::{self, CascadeSettings, Classification, PdeSettings};
use gharmonic::paths::{self, Grid};
use gharmonic::pde::{self, Scheme, SpaceGrid};
use gharmonic::rng::derive_seed;
use gharmonic::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig, Problem};

/// A pass/fail decision kept apart from the measured numbers.
#[derive(Debug, Clone, Serialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl Gate {
    fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Gate {
            name: name.into(),
            pass: measured <= threshold,
            measured,
            threshold,
        }
    }

    fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Gate {
            name: name.into(),
            pass: measured >= threshold,
            measured,
            threshold,
        }
    }

    fn flag(name: impl Into<String>, pass: bool) -> Self {
        Gate {
            name: name.into(),
            pass,
            measured: f64::from(u8::from(pass)),
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub measurements: Value,
    pub gates: Vec<Gate>,
    pub artifacts: Vec<(String, String)>,
}

fn probe_numerics(base: &Numerics, i: usize) -> Numerics {
    Numerics {
        seed: derive_seed(base.seed, i as u64),
        ..base.clone()
    }
}

fn csv(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> String {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is ascii")
}

fn join(x: &[f64]) -> String {
    x.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn run(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    match p.experiment {
        Experiment::Simulate => simulate(cfg, p),
        Experiment::Bsde => bsde_values(cfg, p),
        Experiment::Pde => pde_solve(cfg, p),
        Experiment::Generator => generator_check(cfg, p),
        Experiment::CheckMartingale => martingale(cfg, p),
        Experiment::CheckMvp => mvp(cfg, p),
        Experiment::Cascade => cascade(cfg, p),
        Experiment::CompareFk => compare_fk(cfg, p),
        Experiment::CompareDrivers => compare_drivers(cfg, p),
    }
}

fn simulate(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let grid = Grid::new(cfg.numerics.horizon, p.numerics.steps, p.numerics.paths)?;
    let n = cfg.dim;
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    for (i, x) in cfg.probes.x.iter().enumerate() {
        let bundle = paths::simulate(
            &p.diffusion,
            x,
            grid,
            derive_seed(p.numerics.seed, i as u64),
        )?;
        let terminal = bundle.terminal_states();
        let (mut mean, mut se) = (Vec::new(), Vec::new());
        for j in 0..n {
            let col: Vec<f64> = terminal.iter().skip(j).step_by(n).copied().collect();
            let (m, s) = bsde::block_mean_se(&col);
            mean.push(m);
            se.push(s);
        }
        let mismatch = bundle.replay_mismatch(&p.diffusion)?;
        out.gates
            .push(Gate::flag(format!("replay[{i}]"), mismatch.is_none()));
        rows.push(
            json!({"x": x, "terminal_mean": mean, "terminal_se": se, "replay_mismatch": mismatch}),
        );
        out.artifacts
            .push((format!("paths_{i}.csv"), csv(|w| bundle.write_csv(w))));
    }
    out.measurements = json!({ "probes": rows });
    Ok(out)
}

fn bsde_values(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut table = String::from("x,value,stderr\n");
    let mut rows = Vec::new();
    for (i, x) in cfg.probes.x.iter().enumerate() {
        let est = bsde::g_expectation(
            &p.diffusion,
            &p.driver,
            &p.field,
            x,
            cfg.numerics.horizon,
            &probe_numerics(&p.numerics, i),
        )?;
        writeln!(table, "{},{},{}", join(x), est.value, est.se).unwrap();
        if let Some(v) = cfg.gates.expect_value {
            out.gates.push(Gate::at_most(
                format!("value[{i}]"),
                (est.value - v).abs(),
                harness::GATE_SE * est.se,
            ));
        }
        rows.push(json!({"x": x, "value": est.value, "se": est.se}));
    }
    out.measurements = json!({ "horizon": cfg.numerics.horizon, "probes": rows });
    out.artifacts.push(("bsde.csv".into(), table));
    Ok(out)
}

fn pde_grid(cfg: &ExperimentConfig, p: &Problem) -> Result<SpaceGrid> {
    match (&cfg.numerics.grid_lo, &cfg.numerics.grid_hi) {
        (Some(lo), Some(hi)) => SpaceGrid::new(lo.clone(), hi.clone(), cfg.numerics.h),
        _ => {
            let n = cfg.dim;
            let xs = &cfg.probes.x;
            let lo: Vec<f64> = (0..n)
                .map(|i| xs.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min))
                .collect();
            let hi: Vec<f64> = (0..n)
                .map(|i| xs.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut sigma = vec![0.0; n * n];
            let mut b = vec![0.0; n];
            let (mut s_max, mut b_max) = (0.0f64, 0.0f64);
            for x in xs {
                p.diffusion.sigma(x, &mut sigma)?;
                p.diffusion.drift(x, &mut b)?;
                s_max = s_max.max(sigma.iter().fold(0.0, |m, v| m.max(v.abs())));
                b_max = b_max.max(b.iter().fold(0.0, |m, v| m.max(v.abs())));
            }
            let (lo, hi) = pde::padded_box(&lo, &hi, s_max.max(1e-3), b_max, cfg.numerics.horizon);
            SpaceGrid::new(lo, hi, cfg.numerics.h)
        }
    }
}

fn pde_solve(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let grid = pde_grid(cfg, p)?;
    let dt = match cfg.numerics.dt {
        Some(dt) => dt,
        None => Scheme::max_stable_dt(&p.diffusion, &p.driver, &grid)?,
    };
    let horizon = cfg.numerics.horizon;
    let layers = ((horizon / dt).ceil() as usize / 20).max(1);
    let field = pde::parabolic_solve(&p.diffusion, &p.driver, &p.field, grid, horizon, dt, layers)?;
    let mut rows = Vec::new();
    for x in &cfg.probes.x {
        rows.push(json!({"x": x, "u0": field.value(horizon, x)?}));
    }
    let mut out = Outcome::default();
    out.gates
        .push(Gate::at_most("cfl_ratio", field.cfl_ratio, 1.0));
    out.measurements = json!({
        "horizon": horizon,
        "dt": field.dt,
        "nodes": field.grid.node_count(),
        "cfl_ratio": field.cfl_ratio,
        "max_viscosity": field.max_viscosity,
        "probes": rows,
    });
    out.artifacts
        .push(("pde.csv".into(), csv(|w| field.write_csv(w))));
    Ok(out)
}

fn generator_check(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let tolerance = cfg.gates.tolerance.unwrap_or(5e-2);
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut table = String::from("x,analytic,extrapolated,stderr,discrepancy\n");
    for (i, x) in cfg.probes.x.iter().enumerate() {
        let options = GeneratorOptions {
            t_sequence: cfg.numerics.t_sequence.clone(),
            numerics: probe_numerics(&p.numerics, i),
            precision_budget: cfg.numerics.precision_budget,
            fd_step: None,
        };
        let est =
            generator::probabilistic_generator(&p.field, &p.diffusion, &p.driver, x, &options)?;
        writeln!(
            table,
            "{},{},{},{},{}",
            join(x),
            est.analytic_value,
            est.extrapolated_value,
            est.extrapolated_se,
            est.discrepancy
        )
        .unwrap();
        out.gates.push(Gate::at_most(
            format!("generator[{i}]"),
            est.discrepancy,
            tolerance.max(harness::GATE_SE * est.extrapolated_se),
        ));
        out.artifacts.push((
            format!("quotients_{i}.csv"),
            csv(|w| generator::write_quotients_csv(&est, w)),
        ));
        rows.push(serde_json::to_value(&est).expect("plain data"));
    }
    out.measurements = json!({ "probes": rows });
    out.artifacts.push(("generator.csv".into(), table));
    Ok(out)
}

fn martingale(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let verdict = harness::check_g_martingale(
        &p.field,
        &p.diffusion,
        &p.driver,
        &cfg.probes.x,
        &cfg.probes.t,
        &p.numerics,
    )?;
    let mut table = String::from("x,t,f_x,value,delta,stderr,classification\n");
    for q in &verdict.probes {
        let class = serde_json::to_value(q.classification).expect("unit variant");
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            join(&q.x),
            q.t,
            q.f_x,
            q.value,
            q.delta,
            q.se,
            class.as_str().unwrap_or_default()
        )
        .unwrap();
    }
    let mut out = Outcome::default();
    if let Some(expect) = cfg.gates.expect {
        out.gates.push(Gate::flag(
            format!("overall == {}", json!(expect).as_str().unwrap_or_default()),
            verdict.overall == expect,
        ));
    } else {
        out.gates.push(Gate::flag(
            "determinate",
            verdict.overall != Classification::Indeterminate,
        ));
    }
    out.measurements = serde_json::to_value(&verdict).expect("plain data");
    out.artifacts.push(("martingale.csv".into(), table));
    Ok(out)
}

fn mvp(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut table = String::from("x,radius,f_x,value,stderr,deviation,truncation\n");
    let mut index = 0;
    for x in &cfg.probes.x {
        for &r in &cfg.radii {
            let rep = harness::check_mvp(
                &p.field,
                &p.diffusion,
                &p.driver,
                x,
                r,
                cfg.numerics.t_max,
                &probe_numerics(&p.numerics, index),
            )?;
            writeln!(
                table,
                "{},{},{},{},{},{},{}",
                join(x),
                r,
                rep.f_x,
                rep.value,
                rep.se,
                rep.deviation,
                rep.truncation
            )
            .unwrap();
            out.gates.push(Gate::at_most(
                format!("mvp[{index}]"),
                rep.deviation.abs(),
                harness::GATE_SE * rep.se,
            ));
            out.gates.push(Gate::at_most(
                format!("truncation[{index}]"),
                rep.truncation,
                cfg.gates.max_truncation,
            ));
            rows.push(serde_json::to_value(&rep).expect("plain data"));
            index += 1;
        }
    }
    out.measurements = json!({ "t_max": cfg.numerics.t_max, "balls": rows });
    out.artifacts.push(("mvp.csv".into(), table));
    Ok(out)
}

fn cascade(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let settings = CascadeSettings {
        stages: cfg.cascade.stages,
        t_max: cfg.numerics.t_max,
        epsilon_fraction: cfg.cascade.epsilon_fraction,
    };
    let c = harness::iterated_stopping(
        &p.field,
        &p.diffusion,
        &p.driver,
        &cfg.probes.x[0],
        p.domain.as_ref().expect("validated"),
        p.radius.as_ref().expect("validated"),
        &settings,
        &p.numerics,
    )?;
    let mut out = Outcome::default();
    let mut table =
        String::from("stage,value,stderr,deviation,combined_stderr,proximity,truncation\n");
    for s in &c.stages {
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            s.index, s.value, s.se, s.deviation, s.combined_se, s.proximity_fraction, s.truncation
        )
        .unwrap();
        out.gates.push(Gate::at_most(
            format!("tower[{}]", s.index),
            s.deviation.abs(),
            harness::GATE_SE * s.combined_se,
        ));
    }
    out.gates
        .push(Gate::flag("monotone_times", c.monotone_times));
    out.gates.push(Gate::at_most(
        "final_vs_direct",
        c.final_deviation.abs(),
        harness::GATE_SE * c.final_combined_se,
    ));
    out.gates.push(Gate::at_least(
        "final_proximity",
        c.final_proximity(),
        cfg.gates.min_proximity,
    ));
    out.measurements = serde_json::to_value(&c).expect("plain data");
    out.artifacts.push(("stages.csv".into(), table));
    Ok(out)
}

fn compare_fk(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let tolerance = cfg.gates.tolerance.unwrap_or(2e-2);
    let rep = harness::feynman_kac_crosscheck(
        &p.field,
        &p.diffusion,
        &p.driver,
        cfg.numerics.horizon,
        &cfg.probes.x,
        &cfg.probes.t,
        &p.numerics,
        PdeSettings {
            h: cfg.numerics.h,
            dt: cfg.numerics.dt,
        },
        tolerance,
    )?;
    let mut table = String::from("t,x,pde,bsde,stderr,discrepancy\n");
    for q in &rep.points {
        writeln!(
            table,
            "{},{},{},{},{},{}",
            q.t,
            join(&q.x),
            q.pde,
            q.bsde,
            q.se,
            q.discrepancy
        )
        .unwrap();
    }
    let mut out = Outcome::default();
    out.gates.push(Gate::at_most(
        "max_discrepancy",
        rep.max_discrepancy,
        rep.gate,
    ));
    out.measurements = serde_json::to_value(&rep).expect("plain data");
    out.artifacts.push(("fk.csv".into(), table));
    Ok(out)
}

fn compare_drivers(cfg: &ExperimentConfig, p: &Problem) -> Result<Outcome> {
    let lower = p.lower_driver.as_ref().expect("validated");
    let grid = Grid::new(cfg.numerics.horizon, p.numerics.steps, p.numerics.paths)?;
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut table = String::from("x,lower,lower_stderr,upper,upper_stderr,gap\n");
    for (i, x) in cfg.probes.x.iter().enumerate() {
        // both drivers see the same paths
        let bundle = paths::simulate(
            &p.diffusion,
            x,
            grid,
            derive_seed(p.numerics.seed, i as u64),
        )?;
        let terminal: Vec<f64> = bundle
            .terminal_states()
            .chunks(cfg.dim)
            .map(|y| p.field.eval(y))
            .collect::<Result<_>>()?;
        match bsde::comparison_check(&bundle, lower, &p.driver, &terminal, &p.numerics.options) {
            Ok(rep) => {
                writeln!(
                    table,
                    "{},{},{},{},{},{}",
                    join(x),
                    rep.lower.value,
                    rep.lower.se,
                    rep.upper.value,
                    rep.upper.se,
                    rep.gap
                )
                .unwrap();
                out.gates
                    .push(Gate::at_least(format!("gap[{i}]"), rep.gap, 0.0));
                rows.push(json!({"x": x, "report": rep}));
            }
            Err(Error::ComparisonViolation { upper, lower, .. }) => {
                out.gates
                    .push(Gate::at_least(format!("gap[{i}]"), upper - lower, 0.0));
                rows.push(json!({"x": x, "violation": {"upper": upper, "lower": lower}}));
            }
            Err(e) => return Err(e),
        }
    }
    out.measurements = json!({ "horizon": cfg.numerics.horizon, "probes": rows });
    out.artifacts.push(("drivers.csv".into(), table));
    Ok(out)
}
