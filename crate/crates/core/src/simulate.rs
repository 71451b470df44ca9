//! Euler–Maruyama path engine for the pair `(X, V) = (log S, V)`.
//!
//! Every path owns a ChaCha8 generator seeded from `(master_seed, index)`, so
//! results do not depend on the number of threads or the order of work.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, XvaError};
use crate::quad;
use crate::timefn::TimeFn;
use crate::volmodel::VolModel;

/// Fraction of paths allowed to turn non-finite before a run fails.
pub const INVALID_PATH_BUDGET: f64 = 1e-3;

/// Default step: 500 steps per year.
pub const DEFAULT_STEPS_PER_YEAR: f64 = 500.0;

/// Uniform grid `t_k = t0 + kΔ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        let g = TimeGrid { t0, horizon, n_steps };
        g.validate()?;
        Ok(g)
    }

    /// Grid with the default step size, at least one step.
    pub fn with_default_step(t0: f64, horizon: f64) -> Result<Self> {
        let n = ((horizon - t0) * DEFAULT_STEPS_PER_YEAR).ceil().max(1.0) as usize;
        TimeGrid::new(t0, horizon, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 >= 0.0 && self.t0 < self.horizon && self.horizon.is_finite()) {
            return domain(format!("time grid needs 0 ≤ t0 < T, got t0={} T={}", self.t0, self.horizon));
        }
        if self.n_steps == 0 {
            return domain("time grid needs at least one step");
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }

    /// Same interval with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            n_steps: self.n_steps * factor.max(1),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerFull,
}

impl Scheme {
    fn code(self) -> u8 {
        match self {
            Scheme::EulerFull => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Scheme::EulerFull),
            _ => Err(XvaError::Parse(format!("unknown scheme code {c}"))),
        }
    }
}

/// Initial state `(t0, x0, v0)` with `x0 = log S_{t0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub t0: f64,
    pub x0: f64,
    pub v0: f64,
}

/// Seed of the generator of one path: a splitmix64 mix of both inputs.
pub fn path_seed(master_seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(master_seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn path_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(path_seed(master_seed, index))
}

/// Standard normal pair `(z, z̃)` driving `W` and `W̃` on one step.
#[inline]
pub fn draw_pair(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

/// Deterministic per-step quantities of a grid.
#[derive(Debug, Clone)]
pub struct StepTable {
    pub times: Vec<f64>,
    pub dt: Vec<f64>,
    pub sqrt_dt: Vec<f64>,
    pub b: Vec<f64>,
    pub rho: Vec<f64>,
    /// `√(1 − ρ²)`
    pub rho_c: Vec<f64>,
}

impl StepTable {
    pub fn new(model: &VolModel, nodes: &[f64]) -> Self {
        let n = nodes.len().saturating_sub(1);
        let mut t = Vec::with_capacity(n);
        let mut dt = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        for k in 0..n {
            t.push(nodes[k]);
            dt.push(nodes[k + 1] - nodes[k]);
            b.push(model.drift_b.eval(nodes[k]));
            rho.push(model.rho(nodes[k]));
        }
        StepTable {
            sqrt_dt: dt.iter().map(|d| d.sqrt()).collect(),
            rho_c: rho.iter().map(|r| (1.0 - r * r).sqrt()).collect(),
            times: t,
            dt,
            b,
            rho,
        }
    }

    pub fn for_grid(model: &VolModel, grid: &TimeGrid) -> Self {
        StepTable::new(model, &grid.nodes())
    }

    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    /// Increment `ΔŴ = √(1−ρ²)ΔW + ρΔW̃` of the price noise on step `k`.
    #[inline]
    pub fn price_increment(&self, k: usize, z: [f64; 2]) -> f64 {
        self.sqrt_dt[k] * (self.rho_c[k] * z[0] + self.rho[k] * z[1])
    }

    /// One Euler step from `(x, v)` at node `k`.
    #[inline]
    pub fn step(&self, model: &VolModel, k: usize, x: f64, v: f64, z: [f64; 2]) -> (f64, f64) {
        let t = self.times[k];
        let dt = self.dt[k];
        let dw_tilde = self.sqrt_dt[k] * z[1];
        let th = model.price_vol(t, v);
        let x1 = x + (self.b[k] - 0.5 * th * th) * dt + th * self.price_increment(k, z);
        let v1 = v + model.variance_drift(t, v) * dt + model.variance_vol(t, v) * dw_tilde;
        (x1, v1)
    }
}

/// Simulated paths stored row-major, one row of `n_steps + 1` values per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub grid: TimeGrid,
    pub x_paths: Vec<f64>,
    pub v_paths: Vec<f64>,
    pub n_paths: usize,
    pub master_seed: u64,
    pub scheme: Scheme,
    /// `invalid[i]` is set when path `i` produced a non-finite value.
    pub invalid: Vec<bool>,
}

impl PathSet {
    #[inline]
    pub fn width(&self) -> usize {
        self.grid.n_steps + 1
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x_paths[i * w..(i + 1) * w]
    }

    pub fn v_row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.v_paths[i * w..(i + 1) * w]
    }

    pub fn invalid_count(&self) -> usize {
        self.invalid.iter().filter(|b| **b).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(|i| !self.invalid[*i])
    }

    /// Normal draws that drove path `i`, regenerated from the seed.
    pub fn noise(&self, i: usize) -> Vec<[f64; 2]> {
        let mut rng = path_rng(self.master_seed, i as u64);
        (0..self.grid.n_steps).map(|_| draw_pair(&mut rng)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "path_id,t,x,v")?;
        let nodes = self.grid.nodes();
        for i in 0..self.n_paths {
            for (k, t) in nodes.iter().enumerate() {
                writeln!(w, "{i},{t:.16e},{:.16e},{:.16e}", self.x_row(i)[k], self.v_row(i)[k])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`PathSet::write_csv`]; the grid and seed come
    /// from the caller since the CSV does not carry them.
    pub fn read_csv(path: &Path, grid: TimeGrid, master_seed: u64) -> Result<PathSet> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut x = Vec::new();
        let mut v = Vec::new();
        for (n, line) in r.lines().enumerate().skip(1) {
            let line = line?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(XvaError::Parse(format!("line {}: expected 4 columns", n + 1)));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| XvaError::Parse(format!("line {}: {e}", n + 1)));
            x.push(parse(cols[2])?);
            v.push(parse(cols[3])?);
        }
        let w = grid.n_steps + 1;
        if x.len() % w != 0 {
            return Err(XvaError::Parse(format!("{} rows is not a multiple of the grid width {w}", x.len())));
        }
        let n_paths = x.len() / w;
        let invalid = (0..n_paths)
            .map(|i| x[i * w..(i + 1) * w].iter().chain(&v[i * w..(i + 1) * w]).any(|z| !z.is_finite()))
            .collect();
        Ok(PathSet {
            grid,
            x_paths: x,
            v_paths: v,
            n_paths,
            master_seed,
            scheme: Scheme::EulerFull,
            invalid,
        })
    }

    const MAGIC: &'static [u8; 8] = b"XVAPATH1";

    /// Binary cache: header `{magic, master_seed, t0, T, n_steps, scheme,
    /// n_paths}` followed by the x and v matrices, all little endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.master_seed.to_le_bytes())?;
        w.write_all(&self.grid.t0.to_le_bytes())?;
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        w.write_all(&(self.grid.n_steps as u64).to_le_bytes())?;
        w.write_all(&[self.scheme.code()])?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        for z in self.x_paths.iter().chain(&self.v_paths) {
            w.write_all(&z.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<PathSet> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(XvaError::Parse("not a path cache".into()));
        }
        let mut b8 = [0u8; 8];
        let mut u64_ = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let master_seed = u64_(&mut r)?;
        let t0 = f64::from_bits(u64_(&mut r)?);
        let horizon = f64::from_bits(u64_(&mut r)?);
        let n_steps = u64_(&mut r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let scheme = Scheme::from_code(code[0])?;
        let n_paths = u64_(&mut r)? as usize;
        let grid = TimeGrid::new(t0, horizon, n_steps).map_err(|e| XvaError::Parse(e.to_string()))?;
        let len = n_paths * (n_steps + 1);
        let mut read_block = |r: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let x_paths = read_block(&mut r)?;
        let v_paths = read_block(&mut r)?;
        let w = n_steps + 1;
        let invalid = (0..n_paths)
            .map(|i| {
                x_paths[i * w..(i + 1) * w]
                    .iter()
                    .chain(&v_paths[i * w..(i + 1) * w])
                    .any(|z| !z.is_finite())
            })
            .collect();
        Ok(PathSet {
            grid,
            x_paths,
            v_paths,
            n_paths,
            master_seed,
            scheme,
            invalid,
        })
    }
}

fn check_start(start: &StartPoint, grid: &TimeGrid) -> Result<()> {
    grid.validate()?;
    if !(start.v0 > 0.0 && start.v0.is_finite()) {
        return domain(format!("initial variance must be positive, got {}", start.v0));
    }
    if !start.x0.is_finite() {
        return domain("initial log-price must be finite");
    }
    if start.t0 != grid.t0 {
        return domain(format!("start time {} differs from grid start {}", start.t0, grid.t0));
    }
    Ok(())
}

/// Fails when more than [`INVALID_PATH_BUDGET`] of `total` paths are invalid.
pub fn check_invalid_budget(invalid: usize, total: usize) -> Result<()> {
    let budget = (INVALID_PATH_BUDGET * total as f64).floor() as usize;
    if invalid > budget {
        return Err(XvaError::InvalidPaths { invalid, total, budget });
    }
    Ok(())
}

/// Simulates one path into `x`, `v` (length `n_steps + 1`); returns false if
/// a non-finite value appeared.
pub fn simulate_into(
    model: &VolModel,
    table: &StepTable,
    start: &StartPoint,
    rng: &mut ChaCha8Rng,
    x: &mut [f64],
    v: &mut [f64],
) -> bool {
    x[0] = start.x0;
    v[0] = start.v0;
    let mut ok = true;
    for k in 0..table.len() {
        let z = draw_pair(rng);
        let (x1, v1) = table.step(model, k, x[k], v[k], z);
        x[k + 1] = x1;
        v[k + 1] = v1;
        if !(x1.is_finite() && v1.is_finite()) {
            ok = false;
        }
    }
    ok
}

pub fn simulate_paths(
    model: &VolModel,
    start: StartPoint,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
) -> Result<PathSet> {
    check_start(&start, &grid)?;
    if n_paths == 0 {
        return domain("n_paths must be positive");
    }
    let table = StepTable::for_grid(model, &grid);
    let w = grid.n_steps + 1;
    let mut x_paths = vec![0.0; n_paths * w];
    let mut v_paths = vec![0.0; n_paths * w];
    let invalid: Vec<bool> = x_paths
        .par_chunks_mut(w)
        .zip(v_paths.par_chunks_mut(w))
        .enumerate()
        .map(|(i, (x, v))| {
            let mut rng = path_rng(master_seed, i as u64);
            !simulate_into(model, &table, &start, &mut rng, x, v)
        })
        .collect();
    let n_invalid = invalid.iter().filter(|b| **b).count();
    check_invalid_budget(n_invalid, n_paths)?;
    Ok(PathSet {
        grid,
        x_paths,
        v_paths,
        n_paths,
        master_seed,
        scheme: Scheme::EulerFull,
        invalid,
    })
}

/// Result of [`map_paths`]: one entry per path, `None` for invalid paths.
#[derive(Debug, Clone)]
pub struct PathMap<T> {
    pub values: Vec<Option<T>>,
    pub invalid: usize,
}

impl<T> PathMap<T> {
    pub fn valid(&self) -> impl Iterator<Item = &T> {
        self.values.iter().flatten()
    }
}

/// Streams paths through `f(index, x_row, v_row, noise)` without storing
/// them all; used for large runs where only functionals are needed.
pub fn map_paths<T, F>(
    model: &VolModel,
    start: StartPoint,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
    f: F,
) -> Result<PathMap<T>>
where
    T: Send,
    F: Fn(usize, &[f64], &[f64], &[[f64; 2]]) -> T + Sync,
{
    check_start(&start, &grid)?;
    if n_paths == 0 {
        return domain("n_paths must be positive");
    }
    let table = StepTable::for_grid(model, &grid);
    let w = grid.n_steps + 1;
    let values: Vec<Option<T>> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || (vec![0.0; w], vec![0.0; w], vec![[0.0; 2]; w - 1]),
            |(x, v, z), i| {
                let mut rng = path_rng(master_seed, i as u64);
                x[0] = start.x0;
                v[0] = start.v0;
                let mut ok = true;
                for k in 0..table.len() {
                    z[k] = draw_pair(&mut rng);
                    let (x1, v1) = table.step(model, k, x[k], v[k], z[k]);
                    x[k + 1] = x1;
                    v[k + 1] = v1;
                    ok &= x1.is_finite() && v1.is_finite();
                }
                ok.then(|| f(i, x, v, z))
            },
        )
        .collect();
    let invalid = values.iter().filter(|v| v.is_none()).count();
    check_invalid_budget(invalid, n_paths)?;
    Ok(PathMap { values, invalid })
}

/// Price path `S_t = χ exp(Σ θ ΔŴ + Σ (b − θ²/2) Δ)` rebuilt from the
/// variance path and the normal draws that generated it.
pub fn exact_price(
    chi: f64,
    grid: &TimeGrid,
    v_row: &[f64],
    noise: &[[f64; 2]],
    b: &TimeFn,
    model: &VolModel,
) -> Vec<f64> {
    let nodes = grid.nodes();
    let mut out = Vec::with_capacity(nodes.len());
    let mut stoch = 0.0;
    let mut drift = 0.0;
    out.push(chi);
    for k in 0..grid.n_steps {
        let t = nodes[k];
        let dt = nodes[k + 1] - t;
        let rho = model.rho(t);
        let dw_hat = dt.sqrt() * ((1.0 - rho * rho).sqrt() * noise[k][0] + rho * noise[k][1]);
        let th = model.price_vol(t, v_row[k]);
        stoch += th * dw_hat;
        drift += (b.eval(t) - 0.5 * th * th) * dt;
        out.push(chi * (stoch + drift).exp());
    }
    out
}

/// Empirical moments against the growth bounds.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub times: Vec<f64>,
    /// Sample `E|V_t|` and its standard error at each node.
    pub mean_abs_v: Vec<f64>,
    pub stderr_abs_v: Vec<f64>,
    /// `e^{∫l_ζ}|v0| + ∫ e^{∫l_ζ} k_ζ`, if the model supplies growth data.
    pub variance_bound: Option<Vec<f64>>,
    /// Nodes where the sample mean exceeds the bound by more than 3 stderr.
    pub variance_violations: Vec<usize>,
    pub mean_sup_abs_x: f64,
    pub stderr_sup_abs_x: f64,
    /// `|x0| + c₀ + c₁ sup_t E[V_t]` on the whole grid.
    pub log_price_bound: Option<f64>,
    pub log_price_violation: bool,
}

fn mean_stderr(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0.0;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for x in xs {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let m = s / n;
    let var = if n > 1.0 { ((s2 - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 };
    (m, (var / n).sqrt())
}

pub fn moment_report(paths: &PathSet, model: &VolModel) -> MomentReport {
    let grid = paths.grid;
    let times = grid.nodes();
    let valid: Vec<usize> = paths.valid_indices().collect();
    let (mean_abs_v, stderr_abs_v): (Vec<f64>, Vec<f64>) = (0..times.len())
        .map(|k| mean_stderr(valid.iter().map(|i| paths.v_row(*i)[k].abs())))
        .unzip();
    let sup_abs_x = valid.iter().map(|i| {
        let row = paths.x_row(*i);
        row.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    });
    let (mean_sup_abs_x, stderr_sup_abs_x) = mean_stderr(sup_abs_x);
    let x0 = valid.first().map(|i| paths.x_row(*i)[0]).unwrap_or(0.0);
    let v0 = valid.first().map(|i| paths.v_row(*i)[0]).unwrap_or(0.0);

    let bounds = model.growth_bounds();
    let variance_bound = bounds.as_ref().map(|g| {
        times
            .iter()
            .map(|&t| {
                let l = |a: f64, b: f64| g.l_zeta.integral(a, b);
                let forced = quad::integrate(|s| (l(s, t)).exp() * g.k_zeta.eval(s), grid.t0, t, 1e-12, 1e-10).value;
                l(grid.t0, t).exp() * v0.abs() + forced
            })
            .collect::<Vec<f64>>()
    });
    let variance_violations = variance_bound
        .as_ref()
        .map(|b| {
            (0..times.len())
                .filter(|k| mean_abs_v[*k] - b[*k] > 3.0 * stderr_abs_v[*k] + 1e-12 * b[*k].abs())
                .collect()
        })
        .unwrap_or_default();

    let log_price_bound = bounds.as_ref().map(|g| {
        let (t0, t1) = (grid.t0, grid.horizon);
        let kt2 = quad::integrate(|s| g.k_theta.eval(s).powi(2), t0, t1, 1e-12, 1e-10).value;
        let lt2 = quad::integrate(|s| g.lambda_theta.eval(s).powi(2), t0, t1, 1e-12, 1e-10).value;
        let b_abs = quad::integrate(|s| model.drift_b.eval(s).abs(), t0, t1, 1e-12, 1e-10).value;
        let c0 = b_abs + kt2 + 2.0 * kt2.sqrt() + lt2.sqrt();
        let c1 = lt2 + lt2.sqrt();
        let sup_ev = mean_abs_v.iter().fold(0.0f64, |m, v| m.max(*v));
        x0.abs() + c0 + c1 * sup_ev
    });
    let log_price_violation = log_price_bound.is_some_and(|b| mean_sup_abs_x - b > 3.0 * stderr_sup_abs_x);

    MomentReport {
        times,
        mean_abs_v,
        stderr_abs_v,
        variance_bound,
        variance_violations,
        mean_sup_abs_x,
        stderr_sup_abs_x,
        log_price_bound,
        log_price_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivityStats {
    pub min_v: f64,
    /// Fraction of `(path, node)` pairs with `V ≤ 0`, initial nodes included.
    pub frac_nonpositive: f64,
}

pub fn positivity_report(paths: &PathSet) -> PositivityStats {
    let mut min_v = f64::INFINITY;
    let mut bad = 0usize;
    let mut total = 0usize;
    for i in paths.valid_indices() {
        for v in paths.v_row(i) {
            min_v = min_v.min(*v);
            bad += (*v <= 0.0) as usize;
            total += 1;
        }
    }
    PositivityStats {
        min_v,
        frac_nonpositive: if total == 0 { 0.0 } else { bad as f64 / total as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volmodel::{build_power_model, measure_change, PowerModel};

    fn bs_model(b: f64) -> VolModel {
        build_power_model(&PowerModel::black_scholes(), TimeFn::constant(b), TimeFn::zero(), 0.0, 1.0).unwrap()
    }

    fn heston(k: f64, l0: f64, lambda: f64, rho: f64) -> VolModel {
        build_power_model(&PowerModel::heston(k, l0, lambda), TimeFn::zero(), TimeFn::constant(rho), 0.0, 1.0)
            .unwrap()
    }

    #[test]
    fn grid_nodes_end_exactly_at_horizon() {
        let g = TimeGrid::new(0.1, 1.0, 7).unwrap();
        let n = g.nodes();
        assert_eq!(n[0], 0.1);
        assert_eq!(*n.last().unwrap(), 1.0);
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert_eq!(TimeGrid::with_default_step(0.0, 1.0).unwrap().n_steps, 500);
    }

    #[test]
    fn black_scholes_variance_is_frozen_and_log_price_gaussian() {
        let m = bs_model(0.0);
        let start = StartPoint { t0: 0.0, x0: 0.0, v0: 0.04 };
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let p = simulate_paths(&m, start, grid, 4000, 11).unwrap();
        assert!(p.v_paths.iter().all(|v| *v == 0.04));
        let (mean, se) = mean_stderr((0..p.n_paths).map(|i| p.x_row(i)[50]));
        assert!((mean + 0.02).abs() < 3.0 * se, "{mean} ± {se}");
        let s = positivity_report(&p);
        assert_eq!(s.min_v, 0.04);
        assert_eq!(s.frac_nonpositive, 0.0);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let m = heston(0.08, 2.0, 0.3, -0.6);
        let start = StartPoint { t0: 0.0, x0: 4.6, v0: 0.04 };
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let a = simulate_paths(&m, start, grid, 1, 5).unwrap();
        let b = simulate_paths(&m, start, grid, 1, 5).unwrap();
        assert_eq!(a, b);
        let many = simulate_paths(&m, start, grid, 64, 5).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_paths(&m, start, grid, 64, 5).unwrap());
        assert_eq!(many, single);
        assert_eq!(many.x_row(0), a.x_row(0));
    }

    #[test]
    fn heston_mean_variance_matches_ode() {
        let (k, l0) = (0.08, 2.0);
        let m = heston(k, l0, 0.3, -0.5);
        let start = StartPoint { t0: 0.0, x0: 0.0, v0: 0.04 };
        let grid = TimeGrid::new(0.0, 1.0, 500).unwrap();
        let map = map_paths(&m, start, grid, 20_000, 3, |_, _, v, _| v[500]).unwrap();
        let (mean, se) = mean_stderr(map.valid().copied());
        let exact = 0.04 * (-l0).exp() + k / l0 * (1.0 - (-l0).exp());
        assert!((mean - exact).abs() < 3.0 * se, "{mean} ± {se} vs {exact}");
    }

    #[test]
    fn exact_price_matches_log_recursion() {
        let m = heston(0.08, 2.0, 0.3, -0.7);
        let start = StartPoint { t0: 0.0, x0: 100f64.ln(), v0: 0.04 };
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let p = simulate_paths(&m, start, grid, 100, 17).unwrap();
        let mut gap = 0.0f64;
        for i in 0..100 {
            let s = exact_price(100.0, &grid, p.v_row(i), &p.noise(i), &m.drift_b, &m);
            for (sk, xk) in s.iter().zip(p.x_row(i)) {
                gap = gap.max((sk / xk.exp() - 1.0).abs());
            }
        }
        assert!(gap <= 1e-12, "{gap}");
    }

    #[test]
    fn exact_price_without_volatility_is_deterministic() {
        let mut p = PowerModel::black_scholes();
        p.theta1 = TimeFn::zero();
        let m = build_power_model(&p, TimeFn::linear(0.01, 0.02), TimeFn::zero(), 0.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let s = exact_price(2.0, &grid, &[0.04; 11], &[[0.3, -1.0]; 10], &m.drift_b, &m);
        // left-point sums of b on the grid
        let riemann: f64 = (0..10).map(|k| (0.01 + 0.02 * k as f64 / 10.0) * 0.1).sum();
        assert!((s[10] - 2.0 * riemann.exp()).abs() < 1e-14);
    }

    #[test]
    fn discounted_price_is_a_martingale() {
        let h = heston(0.08, 2.0, 0.3, -0.7);
        let q = measure_change(&h, &TimeFn::constant(0.05), 0.0).unwrap();
        let start = StartPoint { t0: 0.0, x0: 100f64.ln(), v0: 0.04 };
        let grid = TimeGrid::new(0.0, 1.0, 250).unwrap();
        let map = map_paths(&q, start, grid, 20_000, 9, |_, x, _, _| (x[250] - 0.05).exp()).unwrap();
        let (mean, se) = mean_stderr(map.valid().copied());
        assert!((mean - 100.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn increments_carry_the_requested_correlation() {
        let rho = -0.6;
        let m = heston(0.08, 2.0, 0.3, rho);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let table = StepTable::for_grid(&m, &grid);
        let p = simulate_paths(&m, StartPoint { t0: 0.0, x0: 0.0, v0: 0.04 }, grid, 2000, 2).unwrap();
        let (mut sxy, mut sxx, mut syy, mut n) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..p.n_paths {
            for (k, z) in p.noise(i).iter().enumerate() {
                let a = table.price_increment(k, *z);
                let b = table.sqrt_dt[k] * z[1];
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
                n += 1.0;
            }
        }
        let corr = sxy / (sxx * syy).sqrt();
        let se = (1.0 - rho * rho) / n.sqrt();
        assert!((corr - rho).abs() < 3.0 * se, "{corr}");
    }

    #[test]
    fn moment_report_for_heston_and_zero_noise() {
        let m = heston(0.08, 2.0, 0.3, -0.5);
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let p = simulate_paths(&m, StartPoint { t0: 0.0, x0: 0.0, v0: 0.04 }, grid, 5000, 4).unwrap();
        let r = moment_report(&p, &m);
        assert!(r.variance_violations.is_empty());
        assert!(!r.log_price_violation);
        let again = moment_report(&p, &m);
        assert_eq!(r.mean_abs_v, again.mean_abs_v);

        let mut zp = PowerModel::black_scholes();
        zp.theta1 = TimeFn::zero();
        let z = build_power_model(&zp, TimeFn::constant(0.03), TimeFn::zero(), 0.0, 1.0).unwrap();
        let p = simulate_paths(&z, StartPoint { t0: 0.0, x0: 1.0, v0: 0.04 }, grid, 3, 4).unwrap();
        let gap = (p.x_row(0)[100] - 1.0).abs();
        assert!((gap - 0.03).abs() < 1e-14);
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let m = heston(0.08, 2.0, 0.3, -0.5);
        let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let p = simulate_paths(&m, StartPoint { t0: 0.0, x0: 4.0, v0: 0.04 }, grid, 7, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("p.bin");
        p.write_binary(&bin).unwrap();
        assert_eq!(PathSet::read_binary(&bin).unwrap(), p);
        let csv = dir.path().join("p.csv");
        p.write_csv(&csv).unwrap();
        assert_eq!(PathSet::read_csv(&csv, grid, 21).unwrap(), p);
    }

    #[test]
    fn invalid_budget() {
        assert!(check_invalid_budget(0, 10).is_ok());
        assert!(check_invalid_budget(1, 10).is_err());
        assert!(check_invalid_budget(1, 1000).is_ok());
        assert!(check_invalid_budget(2, 1000).is_err());
    }

    #[test]
    fn start_validation() {
        let m = bs_model(0.0);
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        assert!(simulate_paths(&m, StartPoint { t0: 0.0, x0: 0.0, v0: 0.0 }, grid, 1, 0).is_err());
        assert!(simulate_paths(&m, StartPoint { t0: 0.5, x0: 0.0, v0: 0.1 }, grid, 1, 0).is_err());
    }
}
