//! Named, parameterised problem data with closed-form references.
//!
//! | kind      | names                                   |
//! |-----------|-----------------------------------------|
//! | diffusion | `brownian`, `constant`, `ou`            |
//! | driver    | `zero`, `linear-z`, `ambiguity`         |
//! | field     | `constant`, `linear`, `quadratic`, `exp-profile`, `sine` |

use std::collections::{BTreeSet, HashMap};

use super::{DiffusionSpec, Drift, Driver, ScalarField, Volatility};
use crate::error::{Error, Result};

pub const DIFFUSIONS: &[&str] = &["brownian", "constant", "ou"];
pub const DRIVERS: &[&str] = &["zero", "linear-z", "ambiguity", "kappa-ambiguity"];
pub const FIELDS: &[&str] = &["constant", "linear", "quadratic", "exp-profile", "sine"];

struct Params<'a> {
    entry: &'a str,
    values: &'a HashMap<String, f64>,
    used: BTreeSet<String>,
}

impl<'a> Params<'a> {
    fn new(entry: &'a str, values: &'a HashMap<String, f64>) -> Self {
        Params {
            entry,
            values,
            used: BTreeSet::new(),
        }
    }

    fn get(&mut self, key: &str, default: f64) -> f64 {
        self.used.insert(key.to_string());
        self.values.get(key).copied().unwrap_or(default)
    }

    /// `key1..keyn`, falling back to the scalar `key` for every component.
    fn vector(&mut self, key: &str, dim: usize, default: f64) -> Vec<f64> {
        let scalar = self.get(key, default);
        (1..=dim)
            .map(|i| self.get(&format!("{key}{i}"), scalar))
            .collect()
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown parameter(s) {unknown:?} for catalog entry `{}`",
                self.entry
            )))
        }
    }
}

fn unknown(kind: &str, name: &str, known: &[&str]) -> Error {
    Error::Config(format!(
        "unknown {kind} `{name}`; known: {}",
        known.join(", ")
    ))
}

pub fn diffusion(name: &str, dim: usize, params: &HashMap<String, f64>) -> Result<DiffusionSpec> {
    let mut p = Params::new(name, params);
    let spec = match name {
        "brownian" => {
            let sigma = p.get("sigma", 1.0);
            DiffusionSpec::new("brownian", dim, Drift::Zero, Volatility::Scalar(sigma), 0.0)?
        }
        "constant" => {
            let b = p.vector("b", dim, 0.0);
            let sigma = p.get("sigma", 1.0);
            let mut entries = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    let diag = if i == j { sigma } else { 0.0 };
                    entries[i * dim + j] = p.get(&format!("s{}{}", i + 1, j + 1), diag);
                }
            }
            DiffusionSpec::new(
                "constant",
                dim,
                Drift::Constant(b),
                Volatility::Constant(entries),
                0.0,
            )?
        }
        "ou" => {
            let kappa = p.get("kappa", 1.0);
            let theta = p.vector("theta", dim, 0.0);
            let sigma = p.get("sigma", 1.0);
            let mut matrix = vec![0.0; dim * dim];
            for i in 0..dim {
                matrix[i * dim + i] = -kappa;
            }
            let offset = theta.iter().map(|t| kappa * t).collect();
            DiffusionSpec::new(
                "ou",
                dim,
                Drift::Affine { matrix, offset },
                Volatility::Scalar(sigma),
                kappa.abs(),
            )?
        }
        _ => return Err(unknown("diffusion", name, DIFFUSIONS)),
    };
    p.finish()?;
    Ok(spec)
}

pub fn driver(name: &str, dim: usize, params: &HashMap<String, f64>) -> Result<Driver> {
    let mut p = Params::new(name, params);
    let g = match name {
        "zero" => Driver::zero(dim),
        "linear-z" => Driver::linear_z(p.vector("alpha", dim, 0.0)),
        "ambiguity" | "kappa-ambiguity" => Driver::ambiguity(dim, p.get("mu", 0.5)),
        _ => return Err(unknown("driver", name, DRIVERS)),
    };
    p.finish()?;
    Ok(g)
}

pub fn field(name: &str, dim: usize, params: &HashMap<String, f64>) -> Result<ScalarField> {
    let mut p = Params::new(name, params);
    let f = match name {
        "constant" => ScalarField::constant(dim, p.get("c", 0.0)),
        "linear" => {
            let mut coef = vec![0.0; dim];
            coef[0] = 1.0;
            let coef: Vec<f64> = coef
                .iter()
                .enumerate()
                .map(|(i, &d)| p.get(&format!("a{}", i + 1), d))
                .collect();
            ScalarField::linear(coef, p.get("offset", 0.0))
        }
        "quadratic" => ScalarField::quadratic(dim, p.get("coef", 1.0)),
        "exp-profile" => {
            let mu = p.get("mu", 0.5);
            let rate = p.get("rate", 2.0 * mu);
            let scale = p.get("scale", 1.0);
            let offset = p.get("offset", 0.0);
            let mut direction = vec![0.0; dim];
            direction[0] = 1.0;
            ScalarField::new(
                "exp-profile",
                dim,
                super::FieldKind::ExpProfile {
                    offset,
                    scale,
                    rate,
                    direction,
                },
                0,
            )
        }
        "sine" => ScalarField::sine(
            dim,
            p.get("amplitude", 1.0),
            p.get("frequency", 1.0),
            p.get("phase", 0.0),
        ),
        _ => return Err(unknown("field", name, FIELDS)),
    };
    p.finish()?;
    Ok(f)
}
