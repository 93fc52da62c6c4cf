//! Experiment configuration: JSON schema, overrides and validation.
//!
//! Structural errors (wrong JSON types, unknown keys) come from serde one at
//! a time. Everything else is collected into a list of `field: message`
//! issues and reported together.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;

use gharmonic::bsde::{BsdeOptions, Numerics};
use gharmonic::harness::RadiusFunction;
use gharmonic::model::{catalog, DiffusionSpec, Driver, ScalarField};
use gharmonic::paths::Region;
use gharmonic::pde::{Scheme, SpaceGrid};
use gharmonic::regression::{LocalFit, RegressionConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Bsde,
    Pde,
    Generator,
    CheckMartingale,
    CheckMvp,
    Cascade,
    CompareFk,
    CompareDrivers,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variants serialize");
        f.write_str(s.as_str().expect("kebab-case string"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum DiffusionConfig {
    Catalog {
        catalog: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
    Expressions {
        drift: Vec<String>,
        /// Row-major `n × n` entries.
        sigma: Vec<String>,
        #[serde(default)]
        params: BTreeMap<String, f64>,
        #[serde(default)]
        lipschitz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum DriverConfig {
    Catalog {
        catalog: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
    /// In `y, z1..zn`.
    Expression {
        expression: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum FieldConfig {
    Catalog {
        catalog: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
    /// In `x1..xn`.
    Expression {
        expression: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
        #[serde(default = "default_growth")]
        growth_degree: u32,
    },
}

fn default_growth() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_regression")]
    pub regression: RegressionConfig,
    /// PDE grid spacing.
    #[serde(default = "default_h")]
    pub h: f64,
    /// PDE time step; the largest certified step when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    /// PDE box for the `pde` experiment; padded around the probes when absent.
    #[serde(default)]
    pub grid_lo: Option<Vec<f64>>,
    #[serde(default)]
    pub grid_hi: Option<Vec<f64>>,
    #[serde(default = "default_t_sequence")]
    pub t_sequence: Vec<f64>,
    #[serde(default = "default_budget")]
    pub precision_budget: f64,
    /// Stopping horizon for exit-time experiments.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_paths() -> usize {
    100_000
}
fn default_steps() -> usize {
    200
}
fn default_horizon() -> f64 {
    1.0
}
fn default_regression() -> RegressionConfig {
    RegressionConfig::bins(32, LocalFit::Linear)
}
fn default_h() -> f64 {
    0.05
}
fn default_t_sequence() -> Vec<f64> {
    gharmonic::generator::DEFAULT_T_SEQUENCE.to_vec()
}
fn default_budget() -> f64 {
    gharmonic::generator::DEFAULT_PRECISION_BUDGET
}
fn default_t_max() -> f64 {
    5.0
}

impl Default for NumericsConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every numerics field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probes {
    pub x: Vec<Vec<f64>>,
    #[serde(default)]
    pub t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Absolute tolerance for generator and Feynman–Kac comparisons.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Required overall class for `check-martingale`.
    #[serde(default)]
    pub expect: Option<gharmonic::harness::Classification>,
    /// Reference value for `bsde`, compared at 3 standard errors.
    #[serde(default)]
    pub expect_value: Option<f64>,
    #[serde(default = "default_truncation")]
    pub max_truncation: f64,
    #[serde(default = "default_proximity")]
    pub min_proximity: f64,
}

fn default_truncation() -> f64 {
    1e-3
}
fn default_proximity() -> f64 {
    0.99
}

impl Default for GateConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every gate field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    #[serde(default = "default_radius")]
    pub radius: String,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon_fraction: f64,
}

fn default_radius() -> String {
    "0.5*d".into()
}
fn default_stages() -> usize {
    6
}
fn default_epsilon() -> f64 {
    0.05
}

impl Default for CascadeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every cascade field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<Experiment>,
    pub dim: usize,
    pub diffusion: DiffusionConfig,
    #[serde(default = "zero_driver")]
    pub driver: DriverConfig,
    /// Smaller driver for `compare-drivers`.
    #[serde(default)]
    pub lower_driver: Option<DriverConfig>,
    pub field: FieldConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    pub probes: Probes,
    /// Exit domain for `cascade`.
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    /// Ball radii for `check-mvp`, centred at each probe.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub gates: GateConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn zero_driver() -> DriverConfig {
    DriverConfig::Catalog {
        catalog: "zero".into(),
        params: BTreeMap::new(),
    }
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(paths) = o.paths {
            self.numerics.paths = paths;
        }
        if let Some(steps) = o.steps {
            self.numerics.steps = steps;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }
}

/// One validation problem, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Built model objects for a validated config.
#[derive(Debug)]
pub struct Problem {
    pub experiment: Experiment,
    pub diffusion: DiffusionSpec,
    pub driver: Driver,
    pub lower_driver: Option<Driver>,
    pub field: ScalarField,
    pub domain: Option<Region>,
    pub radius: Option<RadiusFunction>,
    pub numerics: Numerics,
}

fn hm(params: &BTreeMap<String, f64>) -> HashMap<String, f64> {
    params.iter().map(|(k, v)| (k.clone(), *v)).collect()
}

struct Collector(Vec<Issue>);

impl Collector {
    fn push(&mut self, field: impl Into<String>, message: impl fmt::Display) {
        self.0.push(Issue {
            field: field.into(),
            message: message.to_string(),
        });
    }

    fn take<T>(&mut self, field: &str, r: gharmonic::Result<T>) -> Option<T> {
        r.map_err(|e| self.push(field, e)).ok()
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be positive and finite, got {v}"));
        }
    }
}

fn build_driver(c: &mut Collector, path: &str, cfg: &DriverConfig, dim: usize) -> Option<Driver> {
    match cfg {
        DriverConfig::Catalog { catalog, params } => {
            c.take(path, catalog::driver(catalog, dim, &hm(params)))
        }
        DriverConfig::Expression { expression, params } => {
            let g = c.take(
                &format!("{path}.expression"),
                Driver::from_expression(dim, expression, &hm(params)),
            )?;
            // H1 and a Lipschitz estimate from samples
            c.take(
                &format!("{path}.expression"),
                g.validated(&[-1.0, 0.0, 1.0], 0),
            )
            .map(|(g, _)| g)
        }
    }
}

/// Validates everything at once; `Err` holds every issue found.
pub fn build(cfg: &ExperimentConfig, experiment: Experiment) -> Result<Problem, Vec<Issue>> {
    let mut c = Collector(Vec::new());
    if let Some(e) = cfg.experiment {
        if e != experiment {
            c.push(
                "experiment",
                format!("config is for `{e}` but `{experiment}` was requested"),
            );
        }
    }
    let n = cfg.dim;
    if n == 0 {
        c.push("dim", "must be at least 1");
        return Err(c.0);
    }

    let diffusion = match &cfg.diffusion {
        DiffusionConfig::Catalog { catalog, params } => {
            c.take("diffusion", catalog::diffusion(catalog, n, &hm(params)))
        }
        DiffusionConfig::Expressions {
            drift,
            sigma,
            params,
            lipschitz,
        } => {
            if drift.len() != n {
                c.push(
                    "diffusion.drift",
                    format!("needs {n} entries, got {}", drift.len()),
                );
            }
            if sigma.len() != n * n {
                c.push(
                    "diffusion.sigma",
                    format!("needs {} entries, got {}", n * n, sigma.len()),
                );
            }
            c.take(
                "diffusion",
                DiffusionSpec::from_expressions(n, drift, sigma, &hm(params)),
            )
            .map(|d| match lipschitz {
                Some(l) => d.with_lipschitz_bound(*l),
                None => d,
            })
        }
    };
    let driver = build_driver(&mut c, "driver", &cfg.driver, n);
    let lower_driver = cfg
        .lower_driver
        .as_ref()
        .and_then(|d| build_driver(&mut c, "lower_driver", d, n));
    if experiment == Experiment::CompareDrivers && cfg.lower_driver.is_none() {
        c.push("lower_driver", "required for compare-drivers");
    }
    let field = match &cfg.field {
        FieldConfig::Catalog { catalog, params } => {
            c.take("field", catalog::field(catalog, n, &hm(params)))
        }
        FieldConfig::Expression {
            expression,
            params,
            growth_degree,
        } => c.take(
            "field.expression",
            ScalarField::from_expression(n, expression, &hm(params), *growth_degree),
        ),
    };

    let num = &cfg.numerics;
    if num.paths < 2 * gharmonic::bsde::SE_BLOCKS {
        c.push(
            "numerics.paths",
            format!("needs at least {}", 2 * gharmonic::bsde::SE_BLOCKS),
        );
    }
    if num.steps == 0 {
        c.push("numerics.steps", "must be at least 1");
    }
    c.positive("numerics.horizon", num.horizon);
    c.positive("numerics.h", num.h);
    c.positive("numerics.t_max", num.t_max);
    c.positive("numerics.precision_budget", num.precision_budget);
    if let Some(dt) = num.dt {
        c.positive("numerics.dt", dt);
    }
    if let Err(e) = num.regression.validate() {
        c.push("numerics.regression", e);
    }
    for (i, &t) in num.t_sequence.iter().enumerate() {
        c.positive(&format!("numerics.t_sequence[{i}]"), t);
    }

    if cfg.probes.x.is_empty() {
        c.push("probes.x", "needs at least one point");
    }
    for (i, x) in cfg.probes.x.iter().enumerate() {
        if x.len() != n {
            c.push(
                format!("probes.x[{i}]"),
                format!("needs {n} coordinates, got {}", x.len()),
            );
        }
    }
    let needs_t = matches!(
        experiment,
        Experiment::CheckMartingale | Experiment::CompareFk
    );
    if needs_t && cfg.probes.t.is_empty() {
        c.push(
            "probes.t",
            format!("needs at least one time for {experiment}"),
        );
    }
    for (i, &t) in cfg.probes.t.iter().enumerate() {
        if experiment == Experiment::CompareFk {
            // report times on the PDE clock, 0 included
            if !(0.0..=num.horizon).contains(&t) {
                c.push(
                    format!("probes.t[{i}]"),
                    format!("must lie in [0, {}], got {t}", num.horizon),
                );
            }
        } else {
            c.positive(&format!("probes.t[{i}]"), t);
        }
    }

    if experiment == Experiment::CheckMvp {
        if cfg.radii.is_empty() {
            c.push("radii", "needs at least one radius for check-mvp");
        }
        for (i, &r) in cfg.radii.iter().enumerate() {
            c.positive(&format!("radii[{i}]"), r);
        }
    }
    let domain = match &cfg.domain {
        None => {
            if experiment == Experiment::Cascade {
                c.push("domain", "required for cascade");
            }
            None
        }
        Some(DomainConfig::Ball { center, radius }) => {
            if center.len() != n {
                c.push("domain.ball.center", format!("needs {n} coordinates"));
                None
            } else {
                c.take("domain.ball", Region::ball(center.clone(), *radius))
            }
        }
        Some(DomainConfig::Box { lo, hi }) => {
            if lo.len() != n || hi.len() != n {
                c.push("domain.box", format!("lo and hi need {n} coordinates"));
                None
            } else {
                c.take("domain.box", Region::cube(lo.clone(), hi.clone()))
            }
        }
    };
    let radius = if experiment == Experiment::Cascade {
        if cfg.cascade.stages == 0 {
            c.push("cascade.stages", "must be at least 1");
        }
        c.positive("cascade.epsilon_fraction", cfg.cascade.epsilon_fraction);
        c.take(
            "cascade.radius",
            RadiusFunction::from_expression(n, &cfg.cascade.radius, &HashMap::new()),
        )
    } else {
        None
    };
    if experiment == Experiment::Cascade {
        if let (Some(d), Some(x)) = (&domain, cfg.probes.x.first()) {
            if x.len() == n && d.signed_distance(x) <= 0.0 {
                c.push("probes.x[0]", "cascade start must lie inside the domain");
            }
        }
    }

    // CFL certificate for the pde experiment with an explicit grid and step
    if experiment == Experiment::Pde {
        match (&num.grid_lo, &num.grid_hi) {
            (Some(lo), Some(hi)) if lo.len() == n && hi.len() == n => {
                if let (Some(d), Some(g), Some(grid)) = (
                    &diffusion,
                    &driver,
                    c.take(
                        "numerics.grid_lo",
                        SpaceGrid::new(lo.clone(), hi.clone(), num.h),
                    ),
                ) {
                    if let Some(dt) = num.dt {
                        c.take("numerics.dt", Scheme::new(d, g, grid, dt));
                    }
                }
            }
            (None, None) => {}
            _ => c.push(
                "numerics.grid_lo",
                format!("grid_lo and grid_hi need {n} coordinates each"),
            ),
        }
    }

    if !c.0.is_empty() {
        return Err(c.0);
    }
    Ok(Problem {
        experiment,
        diffusion: diffusion.expect("no issues"),
        driver: driver.expect("no issues"),
        lower_driver,
        field: field.expect("no issues"),
        domain,
        radius,
        numerics: Numerics {
            paths: num.paths,
            steps: num.steps,
            seed: cfg.seed,
            options: BsdeOptions {
                regression: num.regression,
                record_fits: false,
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> ExperimentConfig {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(
            r#"{"dim":1,"diffusion":{"catalog":"brownian"},"field":{"expression":"x1"},"probes":{"x":[[0]],"t":[1]}}"#,
        );
        assert_eq!(c.numerics.paths, 100_000);
        assert_eq!(c.cascade.radius, "0.5*d");
        assert!(build(&c, Experiment::CheckMartingale).is_ok());
    }

    #[test]
    fn issues_are_collected_with_paths() {
        let c = parse(
            r#"{"dim":1,"diffusion":{"catalog":"levy"},"driver":{"expression":"abs("},
                "field":{"catalog":"linear"},"numerics":{"paths":3,"horizon":-1},
                "probes":{"x":[[0,1]]}}"#,
        );
        let issues = build(&c, Experiment::CompareFk).unwrap_err();
        let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
        for f in [
            "diffusion",
            "driver.expression",
            "numerics.paths",
            "numerics.horizon",
            "probes.x[0]",
            "probes.t",
        ] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
        let parse_issue = issues
            .iter()
            .find(|i| i.field == "driver.expression")
            .unwrap();
        assert!(parse_issue.message.contains("column"), "{parse_issue}");
    }

    #[test]
    fn overrides_apply() {
        let mut c = parse(
            r#"{"dim":1,"diffusion":{"catalog":"brownian"},"field":{"catalog":"linear"},"probes":{"x":[[0]]}}"#,
        );
        c.apply(&Overrides {
            seed: Some(9),
            paths: Some(1000),
            steps: Some(7),
            out: None,
        });
        assert_eq!((c.seed, c.numerics.paths, c.numerics.steps), (9, 1000, 7));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<ExperimentConfig, _> = serde_json::from_str(
            r#"{"dim":1,"diffusion":{"catalog":"brownian"},"field":{"catalog":"linear"},"probes":{"x":[[0]]},"sed":3}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn pde_certificate_is_checked() {
        let c = parse(
            r#"{"dim":1,"diffusion":{"catalog":"brownian"},"field":{"catalog":"linear"},"probes":{"x":[[0]]},
                "numerics":{"h":0.1,"dt":0.1,"grid_lo":[-1],"grid_hi":[1]}}"#,
        );
        let issues = build(&c, Experiment::Pde).unwrap_err();
        assert_eq!(issues[0].field, "numerics.dt");
    }
}
