//! Least-squares conditional expectations on the Markov state.
//!
//! A [`Regressor`] is built once per time step from the alive states and then
//! fits any number of responses. All fits contain an intercept, so the mean
//! of the fitted values equals the mean of the response (up to rounding),
//! and responses are shifted by their first value before fitting so that a
//! constant response is reproduced exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalFit {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Basis {
    /// Equal-count bins per axis with a local fit inside each bin.
    Bins { per_axis: usize, local: LocalFit },
    /// Global polynomial of total degree at most `degree` (<= 4).
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub basis: Basis,
    /// Bins with fewer samples are merged into a neighbour.
    pub min_bin_size: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            basis: Basis::Bins {
                per_axis: 32,
                local: LocalFit::Constant,
            },
            min_bin_size: 10,
        }
    }
}

impl RegressionConfig {
    pub fn bins(per_axis: usize, local: LocalFit) -> Self {
        RegressionConfig {
            basis: Basis::Bins { per_axis, local },
            ..Default::default()
        }
    }

    pub fn polynomial(degree: usize) -> Self {
        RegressionConfig {
            basis: Basis::Polynomial { degree },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.basis {
            Basis::Bins { per_axis: 0, .. } => Err("bins per axis must be positive".into()),
            Basis::Polynomial { degree } if degree > 4 => {
                Err(format!("polynomial degree must be at most 4, got {degree}"))
            }
            _ if self.min_bin_size == 0 => Err("min_bin_size must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Solver for one group of points: either a plain mean or centered
/// least squares on `features`.
#[derive(Debug)]
enum GroupFit {
    Mean,
    Least {
        /// Cholesky factor of the centered normal matrix.
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        /// Centered features, row per member, `p` columns.
        features: Vec<f64>,
        p: usize,
    },
}

#[derive(Debug)]
struct Group {
    members: Vec<usize>,
    fit: GroupFit,
}

#[derive(Debug)]
pub struct Regressor {
    dim: usize,
    count: usize,
    groups: Vec<Group>,
    /// Singular systems that fell back to a plain mean.
    fallbacks: usize,
}

/// Monotone map from finite floats to integers; `-0.0` and `0.0` coincide.
fn order_key(v: f64) -> u64 {
    let b = (v + 0.0).to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Splits `idx` (sorted by `key`) into about `parts` runs of equal size,
/// never separating equal keys.
fn equal_count_runs(idx: &[usize], key: impl Fn(usize) -> f64, parts: usize) -> Vec<Vec<usize>> {
    let len = idx.len();
    let target = len.div_ceil(parts.max(1)).max(1);
    let mut runs = Vec::new();
    let mut start = 0;
    while start < len {
        let mut end = (start + target).min(len);
        while end < len && key(idx[end]) == key(idx[end - 1]) {
            end += 1;
        }
        runs.push(idx[start..end].to_vec());
        start = end;
    }
    runs
}

/// Merges runs below `min` into their neighbour (the previous one, or the
/// next one for the first run).
fn merge_small(mut runs: Vec<Vec<usize>>, min: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(runs.len());
    for run in runs.drain(..) {
        match out.last_mut() {
            Some(last) if run.len() < min || last.len() < min => last.extend(run),
            _ => out.push(run),
        }
    }
    out
}

impl Regressor {
    /// `points` holds `count` states of dimension `dim`, point-major.
    pub fn new(config: &RegressionConfig, points: &[f64], dim: usize) -> Self {
        let count = points.len() / dim;
        let coord = |p: usize, i: usize| points[p * dim + i];
        let min = config.min_bin_size.max(1);
        let mut fallbacks = 0;
        let groups = match config.basis {
            Basis::Bins { per_axis, local } => {
                let mut cells: Vec<Vec<usize>> = vec![(0..count).collect()];
                for axis in 0..dim {
                    let mut next = Vec::new();
                    for mut cell in cells {
                        let mut keyed: Vec<u128> = cell
                            .iter()
                            .map(|&p| (u128::from(order_key(coord(p, axis))) << 64) | p as u128)
                            .collect();
                        keyed.sort_unstable();
                        cell.clear();
                        cell.extend(keyed.iter().map(|&k| k as u64 as usize));
                        let runs = equal_count_runs(&cell, |p| coord(p, axis), per_axis);
                        next.extend(merge_small(runs, min));
                    }
                    cells = next;
                }
                let cells = merge_small(cells, min);
                cells
                    .into_iter()
                    .map(|members| {
                        let fit = match local {
                            LocalFit::Constant => GroupFit::Mean,
                            LocalFit::Linear => least_squares(
                                &members,
                                |p, out| out.copy_from_slice(&points[p * dim..(p + 1) * dim]),
                                dim,
                                &mut fallbacks,
                            ),
                        };
                        Group { members, fit }
                    })
                    .collect()
            }
            Basis::Polynomial { degree } => {
                let members: Vec<usize> = (0..count).collect();
                let exps = monomials(dim, degree);
                // scale each axis for conditioning
                let mut mean = vec![0.0; dim];
                let mut sd = vec![0.0; dim];
                for i in 0..dim {
                    mean[i] = (0..count).map(|p| coord(p, i)).sum::<f64>() / count.max(1) as f64;
                    sd[i] = ((0..count)
                        .map(|p| (coord(p, i) - mean[i]).powi(2))
                        .sum::<f64>()
                        / count.max(1) as f64)
                        .sqrt();
                    if sd[i] == 0.0 {
                        sd[i] = 1.0;
                    }
                }
                let p = exps.len();
                let fit = if p == 0 || count < min {
                    GroupFit::Mean
                } else {
                    least_squares(
                        &members,
                        |pt, out| {
                            for (o, e) in out.iter_mut().zip(&exps) {
                                *o = e
                                    .iter()
                                    .enumerate()
                                    .map(|(i, &k)| {
                                        ((coord(pt, i) - mean[i]) / sd[i]).powi(k as i32)
                                    })
                                    .product();
                            }
                        },
                        p,
                        &mut fallbacks,
                    )
                };
                vec![Group { members, fit }]
            }
        };
        Regressor {
            dim,
            count,
            groups,
            fallbacks,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// Members (point indices) of every group.
    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.groups.iter().map(|g| g.members.as_slice())
    }

    /// Fitted values of `response` at every point, written to `out`.
    pub fn fit(&self, response: &[f64], out: &mut [f64]) {
        assert_eq!(response.len(), self.count);
        for g in &self.groups {
            let shift = response[g.members[0]];
            let mean = g.members.iter().map(|&p| response[p] - shift).sum::<f64>()
                / g.members.len() as f64;
            match &g.fit {
                GroupFit::Mean => {
                    for &p in &g.members {
                        out[p] = shift + mean;
                    }
                }
                GroupFit::Least { chol, features, p } => {
                    let mut rhs = DVector::zeros(*p);
                    for (row, &pt) in g.members.iter().enumerate() {
                        let r = response[pt] - shift - mean;
                        for j in 0..*p {
                            rhs[j] += features[row * p + j] * r;
                        }
                    }
                    let beta = chol.solve(&rhs);
                    for (row, &pt) in g.members.iter().enumerate() {
                        let slope: f64 = (0..*p).map(|j| features[row * p + j] * beta[j]).sum();
                        out[pt] = shift + mean + slope;
                    }
                }
            }
        }
    }
}

/// Exponent tuples of all monomials with total degree in `1..=degree`.
fn monomials(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    fn rec(dim: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == dim {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(dim, left - k, cur, out);
            cur.pop();
        }
    }
    rec(dim, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| e.iter().sum::<usize>());
    out
}

/// Centers the features of `members` and factors the normal matrix; falls
/// back to a plain mean when the features do not vary or the system is
/// singular.
fn least_squares(
    members: &[usize],
    features_of: impl Fn(usize, &mut [f64]),
    p: usize,
    fallbacks: &mut usize,
) -> GroupFit {
    let len = members.len();
    let mut features = vec![0.0; len * p];
    for (row, &pt) in members.iter().enumerate() {
        features_of(pt, &mut features[row * p..(row + 1) * p]);
    }
    let mut center = vec![0.0; p];
    for row in features.chunks(p) {
        for (c, v) in center.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in center.iter_mut() {
        *c /= len as f64;
    }
    let mut varies = false;
    for row in features.chunks_mut(p) {
        for (v, c) in row.iter_mut().zip(&center) {
            *v -= c;
            varies |= *v != 0.0;
        }
    }
    if !varies || len <= p {
        return GroupFit::Mean;
    }
    let mut normal = DMatrix::zeros(p, p);
    for row in features.chunks(p) {
        for i in 0..p {
            for j in 0..=i {
                normal[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            normal[(j, i)] = normal[(i, j)];
        }
    }
    let scale = (0..p).map(|i| normal[(i, i)]).fold(0.0f64, f64::max);
    let conditioned = (0..p).all(|i| normal[(i, i)] > 1e-12 * scale);
    match nalgebra::Cholesky::new(normal) {
        Some(chol) if conditioned => GroupFit::Least { chol, features, p },
        _ => {
            *fallbacks += 1;
            GroupFit::Mean
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn fit_once(config: &RegressionConfig, x: &[f64], dim: usize, r: &[f64]) -> Vec<f64> {
        let reg = Regressor::new(config, x, dim);
        let mut out = vec![0.0; r.len()];
        reg.fit(r, &mut out);
        out
    }

    #[test]
    fn constant_response_is_exact() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = vec![0.1; 1000];
        for config in [
            RegressionConfig::default(),
            RegressionConfig::bins(16, LocalFit::Linear),
            RegressionConfig::polynomial(4),
        ] {
            assert!(fit_once(&config, &x, 1, &r).iter().all(|&v| v == 0.1));
        }
    }

    #[test]
    fn linear_fits_reproduce_linear_response() {
        let x: Vec<f64> = (0..2000)
            .map(|i| ((i * 7919) % 2000) as f64 / 1000.0 - 1.0)
            .collect();
        let r: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        for config in [
            RegressionConfig::bins(8, LocalFit::Linear),
            RegressionConfig::polynomial(2),
        ] {
            let out = fit_once(&config, &x, 1, &r);
            for (o, e) in out.iter().zip(&r) {
                assert!((o - e).abs() < 1e-10, "{o} vs {e}");
            }
        }
    }

    #[test]
    fn polynomial_reproduces_quadratic_in_2d() {
        let n = 900;
        let x: Vec<f64> = (0..n)
            .flat_map(|i| [(i % 30) as f64 / 10.0, (i / 30) as f64 / 15.0 - 1.0])
            .collect();
        let r: Vec<f64> = x
            .chunks(2)
            .map(|p| p[0] * p[1] + p[1] * p[1] - 2.0 * p[0])
            .collect();
        let out = fit_once(&RegressionConfig::polynomial(2), &x, 2, &r);
        for (o, e) in out.iter().zip(&r) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_states_form_one_group() {
        let x = vec![0.5; 500];
        let reg = Regressor::new(&RegressionConfig::bins(10, LocalFit::Linear), &x, 1);
        assert_eq!(reg.group_count(), 1);
        assert_eq!(reg.fallbacks(), 0);
    }

    #[test]
    fn small_bins_merge() {
        let x: Vec<f64> = (0..95).map(|i| i as f64).collect();
        let reg = Regressor::new(&RegressionConfig::bins(20, LocalFit::Constant), &x, 1);
        assert!(reg.groups().all(|g| g.len() >= 10));
        let total: usize = reg.groups().map(<[usize]>::len).sum();
        assert_eq!(total, 95);
    }

    #[test]
    fn two_dimensional_bins_cover_everything() {
        let x: Vec<f64> = (0..4000)
            .flat_map(|i| [(i as f64 * 0.13).sin(), (i as f64 * 0.71).cos()])
            .collect();
        let reg = Regressor::new(&RegressionConfig::bins(6, LocalFit::Linear), &x, 2);
        let mut seen = vec![false; 4000];
        for g in reg.groups() {
            assert!(g.len() >= 10);
            for &p in g {
                assert!(!seen[p]);
                seen[p] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(reg.group_count() > 20);
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(1, 4).len(), 4);
        assert_eq!(monomials(2, 2).len(), 5);
        assert_eq!(monomials(2, 4).len(), 14);
    }

    proptest! {
        #[test]
        fn fitted_mean_matches_response_mean(
            xs in prop::collection::vec(-5.0f64..5.0, 20..300),
            seed in 0u64..1000,
            linear in any::<bool>(),
        ) {
            let r: Vec<f64> = xs.iter().enumerate()
                .map(|(i, x)| x * x + ((i as u64 * 31 + seed) % 17) as f64)
                .collect();
            let local = if linear { LocalFit::Linear } else { LocalFit::Constant };
            let out = fit_once(&RegressionConfig::bins(5, local), &xs, 1, &r);
            let a = r.iter().sum::<f64>() / r.len() as f64;
            let b = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
