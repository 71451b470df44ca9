//! Monte-Carlo evaluation of the mild-form right-hand side
//!
//! ```text
//! (Φu)(s, x, v) = E[φ(e^{X_T}, V_T)] + E[∫_s^T B̂(t, e^{X_t}, V_t, u(t, X_t, V_t)) dt]
//! ```
//!
//! on every node of a grid. The coefficients of the dynamics do not depend
//! on `x`, so one bundle of paths started from `(s, 0, v)` serves all `x`
//! nodes by translation. All bundles draw from one noise table indexed by
//! (path, simulation step), which gives common random numbers across nodes
//! and across Picard iterations.
//!
//! Brownian increments are built backward from the slab end: the terminal
//! value `W_{t_b} − W_s = √(t_b − s) ζ` uses one normal per path shared by
//! every start time, and the intermediate steps are filled in by the
//! Brownian bridge. Paths from neighbouring time nodes then differ by
//! `O(Δt)` rather than `O(√Δt)`, which keeps time differences of the
//! estimate smooth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, XvaError};
use crate::simulate::{check_invalid_budget, draw_pair, path_rng, StepTable};
use crate::valuation::{DriverCoefficients, Hedge, MarketSpec, COVERAGE_LIMIT};
use crate::volmodel::VolModel;

use super::grid::{Axis, Bracket, GridFunction};

fn default_substeps() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Monte-Carlo settings of the Feynman–Kac operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Simulation steps per interval of the time axis.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Pair every draw with its negative.
    #[serde(default = "default_true")]
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        McConfig {
            n_paths,
            seed,
            substeps: 1,
            antithetic: true,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return domain("mc.n_paths must be positive");
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return domain(format!("mc.n_paths must be even with antithetic draws, got {}", self.n_paths));
        }
        if self.substeps == 0 {
            return domain("mc.substeps must be at least 1");
        }
        Ok(())
    }

    /// Independent noise rows; each row drives one path or one antithetic pair.
    pub fn rows(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }
}

/// Standard normal pairs `(z, z̃)`, one row per path.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    rows: usize,
    steps: usize,
    data: Vec<[f64; 2]>,
}

/// Upper bound on the memory of a noise table.
const NOISE_TABLE_LIMIT_BYTES: usize = 2 << 30;

impl NoiseTable {
    pub fn new(seed: u64, rows: usize, steps: usize) -> Result<Self> {
        if rows.saturating_mul(steps).saturating_mul(16) > NOISE_TABLE_LIMIT_BYTES {
            return domain(format!(
                "noise table of {rows} paths × {steps} steps exceeds the memory limit"
            ));
        }
        let mut data = vec![[0.0; 2]; rows * steps];
        if steps > 0 {
            data.par_chunks_mut(steps).enumerate().for_each(|(j, row)| {
                let mut rng = path_rng(seed, j as u64);
                for z in row.iter_mut() {
                    *z = draw_pair(&mut rng);
                }
            });
        }
        Ok(NoiseTable { rows, steps, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[[f64; 2]] {
        &self.data[j * self.steps..(j + 1) * self.steps]
    }
}

/// Terminal condition of a slab.
#[derive(Debug, Clone, Copy)]
pub enum Terminal<'a> {
    /// `φ(e^x, v)` at the horizon.
    Payoff,
    /// Values of a grid function at the slab end.
    Grid(&'a GridFunction),
}

/// Estimates on the time nodes `ia..ib` of a slab, laid out like a
/// [`GridFunction`] restricted to those nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabEstimate {
    pub ia: usize,
    pub ib: usize,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Visited states outside the grid hull, counted for inner start nodes.
    pub outside: u64,
    pub visited: u64,
    pub invalid: usize,
    pub total: usize,
}

impl SlabEstimate {
    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().fold(0.0f64, |m, s| m.max(*s))
    }

    pub fn check_coverage(&self) -> Result<()> {
        if self.outside as f64 > COVERAGE_LIMIT * self.visited as f64 {
            return Err(XvaError::Coverage {
                outside: self.outside,
                visited: self.visited,
            });
        }
        Ok(())
    }
}

const CHUNK_ROWS: usize = 256;

/// Feynman–Kac operator bound to a model, a market and a grid.
pub struct FeynmanKac<'a> {
    model: &'a VolModel,
    spec: &'a MarketSpec,
    t: Axis,
    x: Axis,
    v: Axis,
    mc: McConfig,
    mc_nodes: Vec<f64>,
    steps: StepTable,
    coefs: Vec<DriverCoefficients>,
    noise: NoiseTable,
    /// Set when `B̂` depends on the state through a custom dividend or hedge.
    needs_state: bool,
    delta: f64,
    inner_x: (usize, usize),
    inner_v: (usize, usize),
}

fn inner_range(n: usize) -> (usize, usize) {
    if n <= 2 {
        (0, n)
    } else {
        (n / 4, n - n / 4)
    }
}

impl<'a> FeynmanKac<'a> {
    pub fn new(model: &'a VolModel, spec: &'a MarketSpec, t: Axis, x: Axis, v: Axis, mc: McConfig) -> Result<Self> {
        mc.validate()?;
        if t.len() < 2 {
            return domain("time axis needs at least two nodes");
        }
        if v.first() <= 0.0 {
            return domain("variance nodes must be positive");
        }
        model.validate_on(t.first(), t.last())?;
        let sub = mc.substeps;
        let mut mc_nodes = Vec::with_capacity((t.len() - 1) * sub + 1);
        for w in t.nodes().windows(2) {
            for j in 0..sub {
                mc_nodes.push(w[0] + (w[1] - w[0]) * j as f64 / sub as f64);
            }
        }
        mc_nodes.push(t.last());
        let steps = StepTable::new(model, &mc_nodes);
        let coefs = spec.coefficient_table(&mc_nodes)?;
        // the last column holds the terminal draws of the bridge
        let noise = NoiseTable::new(mc.seed, mc.rows(), mc_nodes.len())?;
        let (needs_state, delta) = match (&spec.hedge, spec.dividend.time_only()) {
            (Hedge::Zero, Some(_)) => (false, 0.0),
            (Hedge::DeltaProportional { delta }, Some(_)) => (false, *delta),
            _ => (true, 0.0),
        };
        Ok(FeynmanKac {
            model,
            spec,
            inner_x: inner_range(x.len()),
            inner_v: inner_range(v.len()),
            t,
            x,
            v,
            mc,
            mc_nodes,
            steps,
            coefs,
            noise,
            needs_state,
            delta,
        })
    }

    pub fn mc_config(&self) -> McConfig {
        self.mc
    }

    /// Time nodes of the simulation grid.
    pub fn mc_nodes(&self) -> &[f64] {
        &self.mc_nodes
    }

    pub fn axes(&self) -> (&Axis, &Axis, &Axis) {
        (&self.t, &self.x, &self.v)
    }

    /// Same operator with a fresh noise table drawn from `seed`.
    pub fn reseeded(&self, seed: u64) -> Result<FeynmanKac<'a>> {
        FeynmanKac::new(
            self.model,
            self.spec,
            self.t.clone(),
            self.x.clone(),
            self.v.clone(),
            self.mc.with_seed(seed),
        )
    }

    #[inline]
    fn time_bracket(&self, k: usize) -> Bracket {
        let sub = self.mc.substeps;
        let lo = k / sub;
        if lo + 1 >= self.t.len() {
            return Bracket {
                lo,
                hi: lo,
                w: 0.0,
                outside: false,
            };
        }
        Bracket {
            lo,
            hi: lo + 1,
            w: (k % sub) as f64 / sub as f64,
            outside: false,
        }
    }

    #[inline]
    fn driver(&self, k: usize, x: f64, v: f64, y: f64) -> f64 {
        let c = &self.coefs[k];
        if self.needs_state {
            c.eval(self.spec, x.exp(), v, y)
        } else {
            c.eval_with(c.dividend.unwrap_or(0.0), self.delta * y, y)
        }
    }

    /// Bracket of `x_ix + shift` using the shift decomposed once per step.
    #[inline]
    fn x_bracket(&self, ix: usize, shift: f64, cell: Option<(isize, f64)>) -> Bracket {
        let n = self.x.len();
        match cell {
            Some((m, w)) => {
                let lo = ix as isize + m;
                if lo < 0 {
                    Bracket { lo: 0, hi: 0, w: 0.0, outside: true }
                } else if lo as usize >= n - 1 {
                    let inside = lo as usize == n - 1 && w == 0.0;
                    Bracket { lo: n - 1, hi: n - 1, w: 0.0, outside: !inside }
                } else {
                    let lo = lo as usize;
                    Bracket { lo, hi: lo + 1, w, outside: false }
                }
            }
            None => self.x.bracket(self.x.nodes()[ix] + shift),
        }
    }

    /// Estimates `Φu` on the time nodes `ia..ib`, taking the terminal values
    /// at node `ib` from `terminal`. Without the driver the result is the
    /// plain terminal expectation.
    pub fn apply_slab(
        &self,
        u_in: &GridFunction,
        ia: usize,
        ib: usize,
        terminal: Terminal<'_>,
        with_driver: bool,
    ) -> Result<SlabEstimate> {
        let (nt, nx, nv) = (self.t.len(), self.x.len(), self.v.len());
        if !(ia < ib && ib < nt) {
            return domain(format!("invalid slab [{ia}, {ib}] on {nt} time nodes"));
        }
        if u_in.t != self.t || u_in.x != self.x || u_in.v != self.v {
            return domain("input grid function does not match the operator grid");
        }
        if matches!(terminal, Terminal::Payoff) && ib != nt - 1 {
            return domain("payoff terminal condition only applies at the horizon");
        }
        let rows = self.noise.rows();
        let n_chunks = rows.div_ceil(CHUNK_ROWS);
        let tasks: Vec<(usize, usize, usize)> = (ia..ib)
            .flat_map(|it| (0..nv).flat_map(move |iv| (0..n_chunks).map(move |c| (it, iv, c))))
            .collect();
        let partials: Vec<ChunkSums> = tasks
            .par_iter()
            .map(|&(it, iv, c)| {
                let r0 = c * CHUNK_ROWS;
                let r1 = (r0 + CHUNK_ROWS).min(rows);
                self.chunk(u_in, it, iv, ib, r0..r1, terminal, with_driver)
            })
            .collect();

        let per_node = n_chunks;
        let mut values = vec![0.0; (ib - ia) * nx * nv];
        let mut stderr = vec![0.0; values.len()];
        let (mut outside, mut visited, mut invalid) = (0u64, 0u64, 0usize);
        for (task_block, ids) in partials.chunks(per_node).zip(tasks.chunks(per_node)) {
            let (it, iv, _) = ids[0];
            let mut sum = vec![0.0; nx];
            let mut sumsq = vec![0.0; nx];
            let mut n = 0usize;
            for p in task_block {
                for ix in 0..nx {
                    sum[ix] += p.sum[ix];
                    sumsq[ix] += p.sumsq[ix];
                }
                n += p.n;
                outside += p.outside;
                visited += p.visited;
                invalid += p.invalid;
            }
            for ix in 0..nx {
                let local = ((it - ia) * nx + ix) * nv + iv;
                if n == 0 {
                    return Err(XvaError::NonFinite(u_in.index(it, ix, iv)));
                }
                let mean = sum[ix] / n as f64;
                let var = if n > 1 {
                    ((sumsq[ix] - n as f64 * mean * mean) / (n - 1) as f64).max(0.0)
                } else {
                    0.0
                };
                if !mean.is_finite() {
                    return Err(XvaError::NonFinite(u_in.index(it, ix, iv)));
                }
                values[local] = mean;
                stderr[local] = (var / n as f64).sqrt();
            }
        }
        let per_row = if self.mc.antithetic { 2 } else { 1 };
        let total = (ib - ia) * nv * rows * per_row;
        check_invalid_budget(invalid, total)?;
        Ok(SlabEstimate {
            ia,
            ib,
            values,
            stderr,
            outside,
            visited,
            invalid,
            total,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn chunk(
        &self,
        u_in: &GridFunction,
        it: usize,
        iv: usize,
        ib: usize,
        rows: std::ops::Range<usize>,
        terminal: Terminal<'_>,
        with_driver: bool,
    ) -> ChunkSums {
        let nx = self.x.len();
        let sub = self.mc.substeps;
        let (k0, k1) = (it * sub, ib * sub);
        let len = k1 - k0;
        let v0 = self.v.nodes()[iv];
        let uniform = self.x.uniform_spacing();
        let inner_start = (self.inner_v.0..self.inner_v.1).contains(&iv);
        let signs: &[f64] = if self.mc.antithetic { &[1.0, -1.0] } else { &[1.0] };
        let weight = 1.0 / signs.len() as f64;

        let mut out = ChunkSums {
            sum: vec![0.0; nx],
            sumsq: vec![0.0; nx],
            n: 0,
            outside: 0,
            visited: 0,
            invalid: 0,
        };
        let mut xs = vec![0.0; len + 1];
        let mut vs = vec![0.0; len + 1];
        let mut bv = vec![Bracket { lo: 0, hi: 0, w: 0.0, outside: false }; len + 1];
        let mut cells: Vec<Option<(isize, f64)>> = vec![None; len + 1];
        let bt: Vec<Bracket> = (k0..=k1).map(|k| self.time_bracket(k)).collect();
        let mut y_row = vec![0.0; nx];

        let t_end = self.mc_nodes[k1];
        'rows: for j in rows {
            let row = self.noise.row(j);
            let noise = &row[k0..k1];
            let end = row[row.len() - 1];
            y_row.iter_mut().for_each(|y| *y = 0.0);
            let mut row_outside = 0u64;
            let mut row_visited = 0u64;
            for &sign in signs {
                xs[0] = 0.0;
                vs[0] = v0;
                let (mut x, mut v) = (0.0, v0);
                let span = (t_end - self.mc_nodes[k0]).sqrt();
                // remaining Brownian distance to the bridge end point
                let mut gap = [sign * span * end[0], sign * span * end[1]];
                for k in 0..len {
                    let dt = self.steps.dt[k0 + k];
                    let rest = t_end - self.mc_nodes[k0 + k];
                    let after = (rest - dt).max(0.0);
                    let (frac, spread) = if rest > 0.0 { (dt / rest, (dt * after / rest).sqrt()) } else { (1.0, 0.0) };
                    let mut z = [0.0; 2];
                    for c in 0..2 {
                        let dw = frac * gap[c] + spread * sign * noise[k][c];
                        gap[c] -= dw;
                        z[c] = dw / dt.sqrt();
                    }
                    (x, v) = self.steps.step(self.model, k0 + k, x, v, z);
                    xs[k + 1] = x;
                    vs[k + 1] = v;
                }
                if !(x.is_finite() && v.is_finite()) {
                    out.invalid += signs.len();
                    continue 'rows;
                }
                for k in 0..=len {
                    bv[k] = self.v.bracket(vs[k]);
                    cells[k] = uniform.map(|(_, h)| {
                        let q = xs[k] / h;
                        let m = q.floor();
                        (m as isize, q - m)
                    });
                }
                for (ix, y_acc) in y_row.iter_mut().enumerate() {
                    let x_node = self.x.nodes()[ix];
                    let count = inner_start && (self.inner_x.0..self.inner_x.1).contains(&ix);
                    let bx_end = self.x_bracket(ix, xs[len], cells[len]);
                    let y_end = match terminal {
                        Terminal::Payoff => self.spec.payoff.eval((x_node + xs[len]).exp(), vs[len]),
                        Terminal::Grid(g) => g.interpolate_bracketed(bt[len], bx_end, bv[len]),
                    };
                    let mut integral = 0.0;
                    if with_driver || count {
                        let mut prev = 0.0;
                        for k in 0..=len {
                            let bx = if k == len { bx_end } else { self.x_bracket(ix, xs[k], cells[k]) };
                            if count {
                                row_outside += (bx.outside || bv[k].outside) as u64;
                                row_visited += 1;
                            }
                            if !with_driver {
                                continue;
                            }
                            let y = if k == len {
                                y_end
                            } else {
                                u_in.interpolate_bracketed(bt[k], bx, bv[k])
                            };
                            let b = self.driver(k0 + k, x_node + xs[k], vs[k], y);
                            if k > 0 {
                                integral += 0.5 * self.steps.dt[k0 + k - 1] * (prev + b);
                            }
                            prev = b;
                        }
                    }
                    *y_acc += weight * (y_end + integral);
                }
            }
            for ix in 0..nx {
                out.sum[ix] += y_row[ix];
                out.sumsq[ix] += y_row[ix] * y_row[ix];
            }
            out.n += 1;
            out.outside += row_outside;
            out.visited += row_visited;
        }
        out
    }
}

struct ChunkSums {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: usize,
    outside: u64,
    visited: u64,
    invalid: usize,
}

/// Writes a slab estimate into the matching nodes of `u`.
pub fn write_slab(u: &mut GridFunction, est: &SlabEstimate) {
    let plane = u.x.len() * u.v.len();
    let offset = est.ia * plane;
    u.values[offset..offset + est.values.len()].copy_from_slice(&est.values);
    let n = u.values.len();
    let se = u.stderr.get_or_insert_with(|| vec![0.0; n]);
    se[offset..offset + est.stderr.len()].copy_from_slice(&est.stderr);
}

/// Sets the last time slice of `u` to `φ(e^x, v)` with zero error.
pub fn set_terminal(u: &mut GridFunction, spec: &MarketSpec) {
    let (nt, nx, nv) = (u.t.len(), u.x.len(), u.v.len());
    for ix in 0..nx {
        for iv in 0..nv {
            let idx = u.index(nt - 1, ix, iv);
            u.values[idx] = spec.payoff.eval(u.x.nodes()[ix].exp(), u.v.nodes()[iv]);
            if let Some(se) = u.stderr.as_mut() {
                se[idx] = 0.0;
            }
        }
    }
}

/// One application of the mild-form operator over the whole horizon with
/// `B̂` evaluated on `u_in`. The horizon slice equals `φ` exactly.
pub fn feynman_kac_apply(model: &VolModel, spec: &MarketSpec, u_in: &GridFunction, mc: McConfig) -> Result<GridFunction> {
    let fk = FeynmanKac::new(model, spec, u_in.t.clone(), u_in.x.clone(), u_in.v.clone(), mc)?;
    let nt = u_in.t.len();
    let est = fk.apply_slab(u_in, 0, nt - 1, Terminal::Payoff, true)?;
    est.check_coverage()?;
    let mut out = u_in.clone();
    write_slab(&mut out, &est);
    set_terminal(&mut out, spec);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::TimeFn;
    use crate::valuation::Payoff;
    use crate::volmodel::{build_power_model, PowerModel};

    fn bs_model(r: f64) -> VolModel {
        build_power_model(&PowerModel::black_scholes(), TimeFn::constant(r), TimeFn::zero(), 0.0, 1.0).unwrap()
    }

    fn axes() -> (Axis, Axis, Axis) {
        (
            Axis::uniform(0.0, 1.0, 5).unwrap(),
            Axis::uniform(100f64.ln() - 1.2, 100f64.ln() + 1.2, 25).unwrap(),
            Axis::new(vec![0.04]).unwrap(),
        )
    }

    #[test]
    fn zero_market_gives_terminal_expectation() {
        let model = bs_model(0.0);
        let spec = MarketSpec::zero(Payoff::Put { strike: 100.0 });
        let (t, x, v) = axes();
        let u0 = GridFunction::constant(t.clone(), x.clone(), v.clone(), 0.0).unwrap();
        let mc = McConfig::new(4000, 7);
        let u = feynman_kac_apply(&model, &spec, &u0, mc).unwrap();
        let fk = FeynmanKac::new(&model, &spec, t, x, v, mc).unwrap();
        let plain = fk.apply_slab(&u0, 0, 4, Terminal::Payoff, false).unwrap();
        assert_eq!(&u.values[..plain.values.len()], &plain.values[..]);
    }

    #[test]
    fn bond_is_reproduced() {
        let r = 0.05;
        let model = bs_model(r);
        let spec = MarketSpec::risk_free(TimeFn::constant(r), Payoff::Constant { value: 1.0 });
        let (t, x, v) = axes();
        let exact = GridFunction::from_fn(t, x, v, |s, _, _| (-r * (1.0 - s)).exp()).unwrap();
        let u = feynman_kac_apply(&model, &spec, &exact, McConfig::new(200, 3)).unwrap();
        // x-independent integrand: only quadrature error remains
        assert!(u.max_abs_diff(&exact) < 1e-4, "{}", u.max_abs_diff(&exact));
    }

    #[test]
    fn first_step_of_affine_driver_adds_integral() {
        let model = bs_model(0.0);
        let mut spec = MarketSpec::zero(Payoff::Constant { value: 2.0 });
        spec.dividend = crate::valuation::Dividend::Deterministic(TimeFn::linear(1.0, 2.0));
        let (t, x, v) = axes();
        let zero = GridFunction::constant(t, x, v, 0.0).unwrap();
        let u = feynman_kac_apply(&model, &spec, &zero, McConfig::new(100, 1)).unwrap();
        for it in 0..5 {
            let s = it as f64 / 4.0;
            let expect = 2.0 + (1.0 - s) + (1.0 - s * s);
            for ix in 0..25 {
                assert!((u.at(it, ix, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let model = bs_model(0.03);
        let spec = MarketSpec::risk_free(TimeFn::constant(0.03), Payoff::Put { strike: 100.0 });
        let (t, x, v) = axes();
        let u0 = GridFunction::constant(t, x, v, 1.0).unwrap();
        let a = feynman_kac_apply(&model, &spec, &u0, McConfig::new(600, 11)).unwrap();
        let b = feynman_kac_apply(&model, &spec, &u0, McConfig::new(600, 11)).unwrap();
        assert_eq!(a, b);
        let c = feynman_kac_apply(&model, &spec, &u0, McConfig::new(600, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn coverage_alarm_on_narrow_grid() {
        let model = bs_model(0.0);
        let spec = MarketSpec::zero(Payoff::Put { strike: 100.0 });
        let t = Axis::uniform(0.0, 1.0, 3).unwrap();
        let x = Axis::uniform(100f64.ln() - 0.05, 100f64.ln() + 0.05, 9).unwrap();
        let v = Axis::new(vec![0.04]).unwrap();
        let u0 = GridFunction::constant(t, x, v, 0.0).unwrap();
        let err = feynman_kac_apply(&model, &spec, &u0, McConfig::new(400, 1)).unwrap_err();
        assert!(matches!(err, XvaError::Coverage { .. }), "{err}");
    }

    #[test]
    fn noise_rows_are_reproducible() {
        let a = NoiseTable::new(5, 3, 4).unwrap();
        let b = NoiseTable::new(5, 3, 4).unwrap();
        assert_eq!(a.row(2), b.row(2));
        let mut rng = path_rng(5, 1);
        assert_eq!(a.row(1)[0], draw_pair(&mut rng));
    }
}
