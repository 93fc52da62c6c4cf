//! Explicit monotone finite differences for `v_s = Lv + g(v, v_x σ)`,
//! `v(0, ·) = f`, on a box with Dirichlet data `f` on its boundary.
//!
//! The drift uses upwind differences, the diffusion central second
//! differences, and the mixed derivative in 2-d the seven-point stencil that
//! keeps off-diagonal weights nonnegative when `A_ii >= |A_12|`. Where the
//! gradient dependence of `g` or a weak diagonal would break monotonicity an
//! O(h) artificial viscosity `ν_i` is added. The time step must satisfy the
//! certificate
//!
//! ```text
//! Δt · max_nodes [ Σ_i (A_ii + 2ν_i)/h_i² - |A_12|/(h_1 h_2) + Σ_i |b_i|/h_i + C_g ] <= 1
//! ```
//!
//! which in 1-d without viscosity is `Δt <= h² / (σ² + h|b| + h² C_g)`.
//! Terminal-value problems `u(T, ·) = f` are read off as `u(t, x) = v(T - t, x)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd;
use crate::model::{DiffusionSpec, Driver, ScalarField};

/// A uniform tensor grid on `[lo, hi]`, 1-d or 2-d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis.
    pub cells: Vec<usize>,
}

impl SpaceGrid {
    /// Cells per axis chosen so the spacing is at most `h`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, h: f64) -> Result<Self> {
        let n = lo.len();
        if n == 0 || n > 2 || hi.len() != n {
            return Err(Error::Config(format!(
                "grids are 1-d or 2-d with matching bounds; got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!(
                "grid spacing must be positive, got {h}"
            )));
        }
        let mut cells = Vec::with_capacity(n);
        for (a, b) in lo.iter().zip(&hi) {
            if !(b > a) || !a.is_finite() || !b.is_finite() {
                return Err(Error::Config(format!(
                    "grid bounds must satisfy lo < hi, got [{a}, {b}]"
                )));
            }
            let c = ((b - a) / h - 1e-9).ceil().max(2.0) as usize;
            cells.push(c);
        }
        Ok(SpaceGrid { lo, hi, cells })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.hi[i] - self.lo[i]) / self.cells[i] as f64)
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    /// Multi-index of a flat node index (axis 0 fastest).
    pub fn index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.cells
            .iter()
            .map(|c| {
                let i = rest % (c + 1);
                rest /= c + 1;
                i
            })
            .collect()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        let mut node = 0;
        let mut stride = 1;
        for (i, c) in idx.iter().zip(&self.cells) {
            node += i * stride;
            stride *= c + 1;
        }
        node
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let h = self.spacing();
        self.index(node)
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k == self.cells[i] {
                    self.hi[i]
                } else {
                    self.lo[i] + k as f64 * h[i]
                }
            })
            .collect()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.index(node)
            .iter()
            .zip(&self.cells)
            .any(|(&i, &c)| i == 0 || i == c)
    }

    /// Linear (1-d) or bilinear (2-d) interpolation of nodal `values`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        let n = self.dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let h = self.spacing();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for i in 0..n {
            if x[i] < self.lo[i] || x[i] > self.hi[i] {
                return Err(Error::Config(format!("point {x:?} lies outside the grid")));
            }
            let s = ((x[i] - self.lo[i]) / h[i]).min(self.cells[i] as f64);
            let k = (s.floor() as usize).min(self.cells[i] - 1);
            base[i] = k;
            frac[i] = s - k as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for i in 0..n {
                if corner >> i & 1 == 1 {
                    idx[i] += 1;
                    w *= frac[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                total += w * values[self.flat(&idx)];
            }
        }
        Ok(total)
    }
}

/// Per-node coefficients and the certificate for one explicit step.
#[derive(Debug, Clone)]
pub struct Scheme {
    grid: SpaceGrid,
    driver: Driver,
    dt: f64,
    h: Vec<f64>,
    /// Per node: `½A_ii + ν_i` for each axis.
    diag: Vec<f64>,
    /// Per node: `A_12` (2-d only).
    mixed: Vec<f64>,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    /// Largest `Δt ·` (center weight) over interior nodes.
    pub cfl_ratio: f64,
    /// Largest artificial viscosity added.
    pub max_viscosity: f64,
}

impl Scheme {
    pub fn new(
        diffusion: &DiffusionSpec,
        driver: &Driver,
        grid: SpaceGrid,
        dt: f64,
    ) -> Result<Self> {
        let n = grid.dim();
        if diffusion.dim() != n || driver.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: diffusion.dim(),
            });
        }
        let c_g = driver.lipschitz_estimate();
        if !c_g.is_finite() {
            return Err(Error::Config(
                "the driver needs a finite Lipschitz estimate; validate it first".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let h = grid.spacing();
        let nodes = grid.node_count();
        let mut diag = vec![0.0; nodes * n];
        let mut mixed = vec![0.0; nodes];
        let mut drift = vec![0.0; nodes * n];
        let mut sigma = vec![0.0; nodes * n * n];
        let mut worst = 0.0f64;
        let mut max_viscosity = 0.0f64;
        for node in 0..nodes {
            let x = grid.coords(node);
            diffusion.drift(&x, &mut drift[node * n..(node + 1) * n])?;
            diffusion.sigma(&x, &mut sigma[node * n * n..(node + 1) * n * n])?;
            let a = diffusion.covariance(&x)?;
            let a12 = if n == 2 { a[1] } else { 0.0 };
            mixed[node] = a12;
            let mut weight = c_g;
            for i in 0..n {
                let row = &sigma[node * n * n + i * n..node * n * n + (i + 1) * n];
                let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cross = if n == 2 {
                    0.5 * a12.abs() * h[i] / h[1 - i]
                } else {
                    0.0
                };
                let nu = (cross + 0.5 * c_g * row_norm * h[i] - 0.5 * a[i * n + i]).max(0.0);
                max_viscosity = max_viscosity.max(nu);
                diag[node * n + i] = 0.5 * a[i * n + i] + nu;
                weight +=
                    2.0 * diag[node * n + i] / (h[i] * h[i]) + drift[node * n + i].abs() / h[i];
            }
            if n == 2 {
                weight -= a12.abs() / (h[0] * h[1]);
            }
            if !grid.is_boundary(node) {
                worst = worst.max(dt * weight);
            }
        }
        let scheme = Scheme {
            grid,
            driver: driver.clone(),
            dt,
            h,
            diag,
            mixed,
            drift,
            sigma,
            cfl_ratio: worst,
            max_viscosity,
        };
        if worst > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "time step {dt} violates the monotonicity certificate (ratio {worst:.4}); largest stable step {:.4e}",
                dt / worst
            )));
        }
        Ok(scheme)
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Largest `Δt` meeting the certificate on this grid.
    pub fn max_stable_dt(
        diffusion: &DiffusionSpec,
        driver: &Driver,
        grid: &SpaceGrid,
    ) -> Result<f64> {
        let probe = Scheme::new(diffusion, driver, grid.clone(), 1e-300)?;
        Ok(1e-300 / probe.cfl_ratio.max(f64::MIN_POSITIVE))
    }

    fn update(&self, prev: &[f64], node: usize) -> Result<f64> {
        let n = self.grid.dim();
        let u = prev[node];
        if self.grid.is_boundary(node) {
            return Ok(u);
        }
        let idx = self.grid.index(node);
        let at = |offsets: &[isize]| -> f64 {
            let shifted: Vec<usize> = idx
                .iter()
                .zip(offsets)
                .map(|(&i, &o)| (i as isize + o) as usize)
                .collect();
            prev[self.grid.flat(&shifted)]
        };
        let mut lu = 0.0;
        let mut p = [0.0; 2];
        for i in 0..n {
            let mut off = [0isize; 2];
            off[i] = 1;
            let plus = at(&off[..n]);
            off[i] = -1;
            let minus = at(&off[..n]);
            let hi = self.h[i];
            lu += self.diag[node * n + i] * (plus - 2.0 * u + minus) / (hi * hi);
            let b = self.drift[node * n + i];
            lu += if b > 0.0 {
                b * (plus - u) / hi
            } else {
                b * (u - minus) / hi
            };
            p[i] = (plus - minus) / (2.0 * hi);
        }
        if n == 2 {
            let a12 = self.mixed[node];
            if a12 != 0.0 {
                let s = a12.signum() as isize;
                let core = at(&[1, s]) + at(&[-1, -s])
                    - at(&[1, 0])
                    - at(&[-1, 0])
                    - at(&[0, 1])
                    - at(&[0, -1])
                    + 2.0 * u;
                lu += a12.abs() * core / (2.0 * self.h[0] * self.h[1]);
            }
        }
        let s = &self.sigma[node * n * n..(node + 1) * n * n];
        let mut z = [0.0; 2];
        for j in 0..n {
            z[j] = (0..n).map(|i| p[i] * s[i * n + j]).sum();
        }
        let g = self.driver.eval(u, &z[..n])?;
        let next = u + self.dt * (lu + g);
        if next.is_finite() {
            Ok(next)
        } else {
            Err(Error::Solver {
                step: node,
                message: format!("value overflowed at node {:?}", self.grid.coords(node)),
            })
        }
    }

    /// One explicit step from `prev` into `out`.
    pub fn step(&self, prev: &[f64], out: &mut [f64]) -> Result<()> {
        out.par_iter_mut().enumerate().try_for_each(|(node, o)| {
            *o = self.update(prev, node)?;
            Ok(())
        })
    }

    pub fn sample(&self, f: &ScalarField) -> Result<Vec<f64>> {
        (0..self.grid.node_count())
            .map(|node| f.eval(&self.grid.coords(node)))
            .collect()
    }
}

/// Space-time field: layers of nodal values at the stored times.
#[derive(Debug, Clone, Serialize)]
pub struct GridField {
    pub grid: SpaceGrid,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `[layer][node]`
    pub values: Vec<f64>,
    pub cfl_ratio: f64,
    pub max_viscosity: f64,
}

impl GridField {
    pub fn layers(&self) -> usize {
        self.times.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let w = self.grid.node_count();
        &self.values[l * w..(l + 1) * w]
    }

    /// Stored layer closest to `s`.
    pub fn nearest_layer(&self, s: f64) -> usize {
        let mut best = 0;
        for (l, t) in self.times.iter().enumerate() {
            if (t - s).abs() < (self.times[best] - s).abs() {
                best = l;
            }
        }
        best
    }

    /// `v(s, x)` on the stored layer nearest to `s`.
    pub fn value(&self, s: f64, x: &[f64]) -> Result<f64> {
        self.grid.interpolate(self.layer(self.nearest_layer(s)), x)
    }

    /// `time,x1..xn,value` for every stored layer.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "time")?;
        for i in 1..=self.grid.dim() {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",value")?;
        for (l, t) in self.times.iter().enumerate() {
            for (node, v) in self.layer(l).iter().enumerate() {
                write!(w, "{t}")?;
                for c in self.grid.coords(node) {
                    write!(w, ",{c}")?;
                }
                writeln!(w, ",{v}")?;
            }
        }
        Ok(())
    }
}

/// Box padded by `4 max|σ| √T + max|b| T` around the reporting window.
pub fn padded_box(
    window_lo: &[f64],
    window_hi: &[f64],
    sigma_max: f64,
    drift_max: f64,
    t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let pad = 4.0 * sigma_max * t.sqrt() + drift_max * t;
    (
        window_lo.iter().map(|v| v - pad).collect(),
        window_hi.iter().map(|v| v + pad).collect(),
    )
}

/// Evolves `v_s = Lv + g(v, v_x σ)` from `v(0) = f` up to `horizon`.
/// The step is `dt` shrunk so it divides the horizon; every `save_every`-th
/// layer is stored along with the first and the last.
pub fn parabolic_solve(
    diffusion: &DiffusionSpec,
    driver: &Driver,
    initial: &ScalarField,
    grid: SpaceGrid,
    horizon: f64,
    dt: f64,
    save_every: usize,
) -> Result<GridField> {
    if !(horizon > 0.0) {
        return Err(Error::Config(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let scheme = Scheme::new(diffusion, driver, grid, dt)?;
    let save_every = save_every.max(1);
    let mut cur = scheme.sample(initial)?;
    let mut next = vec![0.0; cur.len()];
    let mut times = vec![0.0];
    let mut values = cur.clone();
    for k in 1..=steps {
        scheme.step(&cur, &mut next).map_err(|e| match e {
            Error::Solver { message, .. } => Error::Solver { step: k, message },
            other => other,
        })?;
        std::mem::swap(&mut cur, &mut next);
        if k % save_every == 0 || k == steps {
            times.push(k as f64 * dt);
            values.extend_from_slice(&cur);
        }
    }
    Ok(GridField {
        grid: scheme.grid.clone(),
        dt,
        times,
        values,
        cfl_ratio: scheme.cfl_ratio,
        max_viscosity: scheme.max_viscosity,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub probes: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub max_abs: f64,
}

/// `Lf + g(f, f_x σ)` at each probe, from extrapolated central differences.
pub fn elliptic_residual(
    field: &ScalarField,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    probes: &[Vec<f64>],
    h: Option<f64>,
) -> Result<ResidualReport> {
    let residuals = probes
        .iter()
        .map(|x| fd::apply_operator(field, diffusion, driver, x, h))
        .collect::<Result<Vec<_>>>()?;
    let max_abs = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    Ok(ResidualReport {
        probes: probes.to_vec(),
        residuals,
        max_abs,
    })
}

/// Either evolved under the scheme or held fixed in time.
#[derive(Debug, Clone)]
pub enum Candidate {
    Evolved(ScalarField),
    Static(ScalarField),
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonPrincipleReport {
    /// Smallest `upper - lower` over all nodes and steps.
    pub min_gap: f64,
    pub steps: usize,
    pub cfl_ratio: f64,
}

/// Requires `upper >= lower - 1e-10` at every node and step.
pub fn comparison_principle_check(
    upper: &Candidate,
    lower: &Candidate,
    diffusion: &DiffusionSpec,
    driver: &Driver,
    grid: SpaceGrid,
    horizon: f64,
    dt: f64,
) -> Result<ComparisonPrincipleReport> {
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let scheme = Scheme::new(diffusion, driver, grid, dt)?;
    let init = |c: &Candidate| match c {
        Candidate::Evolved(f) | Candidate::Static(f) => scheme.sample(f),
    };
    let mut up = init(upper)?;
    let mut lo = init(lower)?;
    let mut scratch = vec![0.0; up.len()];
    let mut min_gap = f64::INFINITY;
    for k in 0..=steps {
        if k > 0 {
            for (c, state) in [(upper, &mut up), (lower, &mut lo)] {
                if let Candidate::Evolved(_) = c {
                    scheme.step(state, &mut scratch)?;
                    std::mem::swap(state, &mut scratch);
                }
            }
        }
        for (node, (u, l)) in up.iter().zip(&lo).enumerate() {
            let gap = u - l;
            min_gap = min_gap.min(gap);
            if gap < -1e-10 {
                return Err(Error::ComparisonViolation {
                    location: format!(
                        "node {:?} at t = {}",
                        scheme.grid.coords(node),
                        k as f64 * dt
                    ),
                    upper: *u,
                    lower: *l,
                });
            }
        }
    }
    Ok(ComparisonPrincipleReport {
        min_gap,
        steps,
        cfl_ratio: scheme.cfl_ratio,
    })
}
