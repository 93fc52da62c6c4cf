//! Euler–Maruyama ensembles with Brownian increments and exit marks.
//!
//! Storage is time-major: `states[k][m][i]` for step `k`, path `m` and
//! coordinate `i`, so a backward sweep reads one contiguous slab per step.
//! Normal draw `k * n + i` of path `m` comes from `NormalStream(seed, m, ·)`,
//! which makes every bundle reproducible bit for bit and lets a path be
//! continued from any step with a different seed.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::DiffusionSpec;
use crate::rng::NormalStream;

/// Paths simulated together inside one work item.
const CHUNK: usize = 512;

/// A ball or an axis-aligned box; exits are taken from its open interior.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        Ok(Region::Ball { center, radius })
    }

    pub fn cube(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::Config(format!(
                "box bounds must satisfy lo < hi: {lo:?} {hi:?}"
            )));
        }
        Ok(Region::Box { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { center, .. } => center.len(),
            Region::Box { lo, .. } => lo.len(),
        }
    }

    /// Signed distance to the boundary: positive inside, negative outside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Region::Ball { center, radius } => {
                let d = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c).powi(2))
                    .sum::<f64>()
                    .sqrt();
                radius - d
            }
            Region::Box { lo, hi } => {
                let inside = x
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(v, (a, b))| (v - a).min(b - v))
                    .fold(f64::INFINITY, f64::min);
                if inside >= 0.0 {
                    inside
                } else {
                    // outside: Euclidean distance to the box
                    let out = x
                        .iter()
                        .zip(lo.iter().zip(hi))
                        .map(|(v, (a, b))| (a - v).max(v - b).max(0.0).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    -out
                }
            }
        }
    }

    /// True when `x` has left the open region.
    pub fn is_exited(&self, x: &[f64]) -> bool {
        self.signed_distance(x) <= 0.0
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Region::Ball { radius, .. } => 2.0 * radius,
            Region::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| (b - a).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// A seeded ensemble of discretized paths on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    dim: usize,
    paths: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    states: Vec<f64>,
    increments: Vec<f64>,
    exit_index: Option<Vec<Option<usize>>>,
}

impl PathBundle {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// All states at step `k`, path-major (`paths * dim`).
    pub fn states_at(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.states[k * w..(k + 1) * w]
    }

    /// Brownian increments over `[t_k, t_{k+1}]`, `k < steps`.
    pub fn increments_at(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.increments[k * w..(k + 1) * w]
    }

    pub fn state(&self, k: usize, m: usize) -> &[f64] {
        let start = (k * self.paths + m) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn increment(&self, k: usize, m: usize) -> &[f64] {
        let start = (k * self.paths + m) * self.dim;
        &self.increments[start..start + self.dim]
    }

    pub fn terminal_states(&self) -> &[f64] {
        self.states_at(self.steps)
    }

    pub fn exit_marks(&self) -> Option<&[Option<usize>]> {
        self.exit_index.as_deref()
    }

    /// Step index at which path `m` stops evolving (`steps` when it never does).
    pub fn stop_index(&self, m: usize) -> usize {
        self.exit_index
            .as_ref()
            .and_then(|e| e[m])
            .unwrap_or(self.steps)
    }

    /// Whether path `m` still moves over `[t_k, t_{k+1}]`.
    #[inline]
    pub fn is_alive(&self, m: usize, k: usize) -> bool {
        match &self.exit_index {
            Some(e) => e[m].is_none_or(|s| k < s),
            None => true,
        }
    }

    /// Fraction of paths without an exit mark; zero when nothing was marked.
    pub fn truncation_fraction(&self) -> f64 {
        match &self.exit_index {
            Some(e) => e.iter().filter(|v| v.is_none()).count() as f64 / self.paths as f64,
            None => 0.0,
        }
    }

    /// Marks the first step with `|X - center| >= radius` and freezes later
    /// states at the exit state.
    pub fn mark_exit(self, center: &[f64], radius: f64) -> Result<Self> {
        let region = Region::ball(center.to_vec(), radius)?;
        self.mark_exit_region(&region)
    }

    pub fn mark_exit_region(mut self, region: &Region) -> Result<Self> {
        if region.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: region.dim(),
            });
        }
        let start = vec![0; self.paths];
        self.mark_exits_from(&start, |_, x| region.is_exited(x));
        Ok(self)
    }

    /// Per-path exit search starting at `start[m]`; `exited(m, x)` decides.
    /// Any earlier marks are replaced.
    pub fn mark_exits_from(&mut self, start: &[usize], exited: impl Fn(usize, &[f64]) -> bool) {
        let (n, w) = (self.dim, self.paths * self.dim);
        let mut marks = vec![None; self.paths];
        for (m, mark) in marks.iter_mut().enumerate() {
            for k in start[m]..=self.steps {
                let at = k * w + m * n;
                if exited(m, &self.states[at..at + n]) {
                    *mark = Some(k);
                    break;
                }
            }
            if let Some(e) = *mark {
                let src = e * w + m * n;
                for k in e + 1..=self.steps {
                    self.states.copy_within(src..src + n, k * w + m * n);
                }
            }
        }
        self.exit_index = Some(marks);
    }

    /// Recomputes every non-frozen step from the stored increments and
    /// returns the first `(path, step)` that differs bit-wise, if any.
    pub fn replay_mismatch(&self, diffusion: &DiffusionSpec) -> Result<Option<(usize, usize)>> {
        let n = self.dim;
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * n];
        let mut next = vec![0.0; n];
        for m in 0..self.paths {
            for k in 0..self.steps {
                if !self.is_alive(m, k) {
                    break;
                }
                let x = self.state(k, m);
                euler_step(
                    diffusion,
                    x,
                    self.increment(k, m),
                    self.dt,
                    &mut b,
                    &mut s,
                    &mut next,
                )
                .map_err(|e| simulation_error(m, k, e))?;
                if next != self.state(k + 1, m) {
                    return Ok(Some((m, k + 1)));
                }
            }
        }
        Ok(None)
    }

    /// Columnar dump: `path,step,time,x1..xn`.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "path,step,time")?;
        for i in 1..=self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for m in 0..self.paths {
            for k in 0..=self.steps {
                write!(w, "{m},{k},{}", self.time(k))?;
                for v in self.state(k, m) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Time grid and ensemble size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
}

impl Grid {
    pub fn new(horizon: f64, steps: usize, paths: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 || paths == 0 {
            return Err(Error::Config(format!(
                "need T > 0, N >= 1, M >= 1; got T = {horizon}, N = {steps}, M = {paths}"
            )));
        }
        Ok(Grid {
            horizon,
            steps,
            paths,
        })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// All paths start at `x`.
pub fn simulate(diffusion: &DiffusionSpec, x: &[f64], grid: Grid, seed: u64) -> Result<PathBundle> {
    if x.len() != diffusion.dim() {
        return Err(Error::DimensionMismatch {
            expected: diffusion.dim(),
            got: x.len(),
        });
    }
    let starts: Vec<f64> = x
        .iter()
        .copied()
        .cycle()
        .take(x.len() * grid.paths)
        .collect();
    restart(diffusion, &starts, grid, seed, 0)
}

/// Path `m` starts at `from_states[m]` and uses normal draws from step
/// `step_offset` on. With the seed and offset of an earlier run this
/// continues that run exactly; with a fresh seed it is an independent
/// restart.
pub fn restart(
    diffusion: &DiffusionSpec,
    from_states: &[f64],
    grid: Grid,
    seed: u64,
    step_offset: u64,
) -> Result<PathBundle> {
    let n = diffusion.dim();
    if from_states.len() != n * grid.paths {
        return Err(Error::DimensionMismatch {
            expected: n * grid.paths,
            got: from_states.len(),
        });
    }
    let mut bundle = PathBundle {
        dim: n,
        paths: grid.paths,
        steps: grid.steps,
        dt: grid.dt(),
        seed,
        states: vec![0.0; (grid.steps + 1) * grid.paths * n],
        increments: vec![0.0; grid.steps * grid.paths * n],
        exit_index: None,
    };
    bundle.states[..grid.paths * n].copy_from_slice(from_states);
    let split = vec![0; grid.paths];
    generate(&mut bundle, None, &split, diffusion, seed, step_offset)?;
    Ok(bundle)
}

/// Path `m` follows `base` (states and increments) up to step `split[m]`
/// and continues from there with draws from `seed`. Exit marks are dropped.
pub fn continue_from(
    base: &PathBundle,
    split: &[usize],
    diffusion: &DiffusionSpec,
    seed: u64,
) -> Result<PathBundle> {
    if split.len() != base.paths {
        return Err(Error::DimensionMismatch {
            expected: base.paths,
            got: split.len(),
        });
    }
    if diffusion.dim() != base.dim {
        return Err(Error::DimensionMismatch {
            expected: base.dim,
            got: diffusion.dim(),
        });
    }
    let mut bundle = PathBundle {
        seed,
        states: vec![0.0; base.states.len()],
        increments: vec![0.0; base.increments.len()],
        exit_index: None,
        ..*base
    };
    let w = base.paths * base.dim;
    bundle.states[..w].copy_from_slice(&base.states[..w]);
    let split: Vec<usize> = split.iter().map(|&s| s.min(base.steps)).collect();
    generate(&mut bundle, Some(base), &split, diffusion, seed, 0)?;
    Ok(bundle)
}

fn simulation_error(path: usize, step: usize, err: Error) -> Error {
    Error::Simulation {
        path,
        step,
        message: err.to_string(),
    }
}

#[inline]
fn euler_step(
    diffusion: &DiffusionSpec,
    x: &[f64],
    db: &[f64],
    dt: f64,
    b: &mut [f64],
    s: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    let n = x.len();
    diffusion.drift(x, b)?;
    diffusion.sigma(x, s)?;
    for i in 0..n {
        let noise: f64 = (0..n).map(|j| s[i * n + j] * db[j]).sum();
        out[i] = x[i] + b[i] * dt + noise;
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation {
            point: x.to_vec(),
            message: format!("state overflowed to {out:?}"),
        })
    }
}

struct ChunkOut {
    first: usize,
    count: usize,
    /// `[k][local m][i]`, k in 1..=steps
    states: Vec<f64>,
    /// `[k][local m][i]`, k in 0..steps
    increments: Vec<f64>,
}

fn generate(
    bundle: &mut PathBundle,
    base: Option<&PathBundle>,
    split: &[usize],
    diffusion: &DiffusionSpec,
    seed: u64,
    step_offset: u64,
) -> Result<()> {
    let (n, steps, paths, dt) = (bundle.dim, bundle.steps, bundle.paths, bundle.dt);
    let sqrt_dt = dt.sqrt();
    let starts = bundle.states[..paths * n].to_vec();
    let chunk_starts: Vec<usize> = (0..paths).step_by(CHUNK).collect();
    let wave = rayon::current_num_threads().max(1) * 2;
    for group in chunk_starts.chunks(wave) {
        let outs: Vec<ChunkOut> = group
            .par_iter()
            .map(|&first| {
                let count = CHUNK.min(paths - first);
                let mut out = ChunkOut {
                    first,
                    count,
                    states: vec![0.0; steps * count * n],
                    increments: vec![0.0; steps * count * n],
                };
                let mut streams: Vec<Option<NormalStream>> = vec![None; count];
                let mut current: Vec<f64> = starts[first * n..(first + count) * n].to_vec();
                let (mut b, mut s) = (vec![0.0; n], vec![0.0; n * n]);
                let mut next = vec![0.0; n];
                for k in 0..steps {
                    for l in 0..count {
                        let m = first + l;
                        let cur = &mut current[l * n..(l + 1) * n];
                        let inc = &mut out.increments[(k * count + l) * n..(k * count + l + 1) * n];
                        let dst = (k * count + l) * n;
                        if k < split[m] {
                            let base = base.expect("split > 0 only when continuing");
                            inc.copy_from_slice(base.increment(k, m));
                            cur.copy_from_slice(base.state(k + 1, m));
                        } else {
                            let stream = streams[l].get_or_insert_with(|| {
                                NormalStream::new(
                                    seed,
                                    m as u64,
                                    (step_offset + k as u64) * n as u64,
                                )
                            });
                            for v in inc.iter_mut() {
                                *v = sqrt_dt * stream.next_normal();
                            }
                            euler_step(diffusion, cur, inc, dt, &mut b, &mut s, &mut next)
                                .map_err(|e| simulation_error(m, k + 1, e))?;
                            cur.copy_from_slice(&next);
                        }
                        out.states[dst..dst + n].copy_from_slice(cur);
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for out in outs {
            for k in 0..steps {
                let src = k * out.count * n..(k + 1) * out.count * n;
                let inc_dst = (k * paths + out.first) * n;
                bundle.increments[inc_dst..inc_dst + out.count * n]
                    .copy_from_slice(&out.increments[src.clone()]);
                let st_dst = ((k + 1) * paths + out.first) * n;
                bundle.states[st_dst..st_dst + out.count * n].copy_from_slice(&out.states[src]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::model::catalog;

    fn constant(b: f64, sigma: f64) -> DiffusionSpec {
        let params = HashMap::from([("b".to_string(), b), ("sigma".to_string(), sigma)]);
        catalog::diffusion("constant", 1, &params).unwrap()
    }

    #[test]
    fn degenerate_sde_stays_put() {
        let bundle = simulate(
            &constant(0.0, 0.0),
            &[1.0],
            Grid::new(1.0, 5, 3).unwrap(),
            1,
        )
        .unwrap();
        for k in 0..=5 {
            assert!(bundle.states_at(k).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn deterministic_ode() {
        let bundle = simulate(
            &constant(1.0, 0.0),
            &[0.0],
            Grid::new(1.0, 10, 2).unwrap(),
            1,
        )
        .unwrap();
        for k in 0..=10 {
            for m in 0..2 {
                let expected = k as f64 / 10.0;
                assert!((bundle.state(k, m)[0] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exit_index_for_linear_path() {
        let bundle = simulate(
            &constant(1.0, 0.0),
            &[0.0],
            Grid::new(1.0, 10, 1).unwrap(),
            1,
        )
        .unwrap();
        // k/10 accumulated in floating point; step 3 is the first at or past 0.25
        let marked = bundle.mark_exit(&[0.0], 0.25).unwrap();
        assert_eq!(marked.exit_marks().unwrap()[0], Some(3));
        let frozen = marked.state(3, 0)[0];
        for k in 3..=10 {
            assert_eq!(marked.state(k, 0)[0], frozen);
        }
        assert!(!marked.is_alive(0, 3));
        assert!(marked.is_alive(0, 2));
    }

    #[test]
    fn constant_path_never_exits() {
        let bundle = simulate(
            &constant(0.0, 0.0),
            &[0.5],
            Grid::new(1.0, 10, 4).unwrap(),
            1,
        )
        .unwrap()
        .mark_exit(&[0.5], 0.1)
        .unwrap();
        assert!(bundle.exit_marks().unwrap().iter().all(Option::is_none));
        assert_eq!(bundle.truncation_fraction(), 1.0);
    }

    #[test]
    fn seed_determinism_and_replay() {
        let d = catalog::diffusion("ou", 2, &HashMap::from([("kappa".into(), 0.7)])).unwrap();
        let grid = Grid::new(1.0, 17, 1500).unwrap();
        let a = simulate(&d, &[0.1, -0.2], grid, 42).unwrap();
        let b = simulate(&d, &[0.1, -0.2], grid, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replay_mismatch(&d).unwrap(), None);
        let c = simulate(&d, &[0.1, -0.2], grid, 43).unwrap();
        assert_ne!(a.terminal_states(), c.terminal_states());
    }

    #[test]
    fn two_stage_splice_matches_one_stage() {
        let d = catalog::diffusion("ou", 1, &HashMap::new()).unwrap();
        let full = simulate(&d, &[0.3], Grid::new(1.0, 20, 700).unwrap(), 9).unwrap();
        let half = simulate(&d, &[0.3], Grid::new(0.5, 10, 700).unwrap(), 9).unwrap();
        let rest = restart(
            &d,
            half.terminal_states(),
            Grid::new(0.5, 10, 700).unwrap(),
            9,
            10,
        )
        .unwrap();
        assert_eq!(rest.terminal_states(), full.terminal_states());
        assert_eq!(rest.increments_at(3), full.increments_at(13));
    }

    #[test]
    fn restart_with_zero_noise_is_deterministic() {
        let d = constant(2.0, 0.0);
        let starts = [0.0, 1.0, -1.0];
        let r = restart(&d, &starts, Grid::new(1.0, 4, 3).unwrap(), 5, 0).unwrap();
        for (m, s) in starts.iter().enumerate() {
            assert!((r.state(4, m)[0] - (s + 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn continue_from_keeps_prefix() {
        let d = DiffusionSpec::brownian(1);
        let base = simulate(&d, &[0.0], Grid::new(1.0, 8, 5).unwrap(), 1).unwrap();
        let split = [0, 3, 8, 5, 1];
        let next = continue_from(&base, &split, &d, 2).unwrap();
        for (m, &s) in split.iter().enumerate() {
            for k in 0..=s {
                assert_eq!(next.state(k, m), base.state(k, m));
            }
            if s < 8 {
                assert_ne!(next.state(8, m), base.state(8, m));
            }
        }
        assert_eq!(next.replay_mismatch(&d).unwrap(), None);
    }

    #[test]
    fn brownian_moments() {
        let m = 100_000;
        let bundle = simulate(
            &DiffusionSpec::brownian(1),
            &[0.0],
            Grid::new(1.0, 10, m).unwrap(),
            3,
        )
        .unwrap();
        let xt = bundle.terminal_states();
        let mean = xt.iter().sum::<f64>() / m as f64;
        let var = xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let second = xt.iter().map(|x| x * x).sum::<f64>() / m as f64;
        assert!(mean.abs() < 3.0 / (m as f64).sqrt(), "{mean}");
        // Var(sample variance) = 2/m for unit variance
        assert!((var - 1.0).abs() < 3.0 * (2.0 / m as f64).sqrt(), "{var}");
        assert!(
            (second - 1.0).abs() < 3.0 * (2.0 / m as f64).sqrt(),
            "{second}"
        );
        // per-step increment variance within 5 standard errors of dt
        let dt = bundle.dt();
        for k in 0..bundle.steps() {
            let v = bundle.increments_at(k).iter().map(|x| x * x).sum::<f64>() / m as f64;
            assert!(
                (v - dt).abs() < 5.0 * dt * (2.0 / m as f64).sqrt(),
                "step {k}: {v}"
            );
        }
    }

    #[test]
    fn exit_time_mean_is_r_squared() {
        let (m, r) = (20_000, 0.25);
        let grid = Grid::new(0.75, 750, m).unwrap();
        let bundle = simulate(&DiffusionSpec::brownian(1), &[0.0], grid, 11)
            .unwrap()
            .mark_exit(&[0.0], r)
            .unwrap();
        assert!(bundle.truncation_fraction() < 1e-3);
        let times: Vec<f64> = (0..m).map(|p| bundle.time(bundle.stop_index(p))).collect();
        let mean = times.iter().sum::<f64>() / m as f64;
        let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        // discrete monitoring acts like a barrier pushed out by 0.5826 sqrt(dt)
        let shifted = (r + 0.5826 * grid.dt().sqrt()).powi(2);
        assert!(
            (mean - shifted).abs() < 3.0 * sd / (m as f64).sqrt() + grid.dt(),
            "{mean}"
        );
        assert!((mean - r * r).abs() < 0.2 * r * r);
    }

    #[test]
    fn region_distances() {
        let b = Region::cube(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(b.signed_distance(&[0.0, 1.0]), 1.0);
        assert_eq!(b.signed_distance(&[0.5, 0.25]), 0.25);
        assert_eq!(b.signed_distance(&[4.0, 6.0]), -5.0);
        let ball = Region::ball(vec![0.0, 0.0], 2.0).unwrap();
        assert_eq!(ball.signed_distance(&[0.0, 1.5]), 0.5);
        assert!(ball.is_exited(&[2.0, 0.0]));
        assert!(Region::ball(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let bundle = simulate(
            &DiffusionSpec::brownian(2),
            &[0.0, 1.0],
            Grid::new(1.0, 2, 2).unwrap(),
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        bundle.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,time,x1,x2");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0,0,1"));
    }
}
