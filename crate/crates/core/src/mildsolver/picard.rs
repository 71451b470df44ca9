//! Picard iteration `u^{k+1} = Φ u^k` for the mild form, solved backward over
//! time slabs on which the Lipschitz budget of `B̂` stays below one half.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::quad::trapezoid;
use crate::simulate::{map_paths, StartPoint, TimeGrid};
use crate::valuation::MarketSpec;
use crate::volmodel::VolModel;

use super::feynman_kac::{set_terminal, write_slab, FeynmanKac, McConfig, Terminal};
use super::grid::{Axis, GridFunction};

/// Tensor grid on `[t0, horizon] × x_range × v_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t0: f64,
    pub horizon: f64,
    pub nt: usize,
    pub nx: usize,
    pub nv: usize,
    pub x_range: (f64, f64),
    /// A single variance node sits at the lower end.
    pub v_range: (f64, f64),
}

impl GridSpec {
    pub fn axes(&self) -> Result<(Axis, Axis, Axis)> {
        if !(self.horizon > self.t0 && self.t0 >= 0.0) {
            return domain(format!("grid: need 0 ≤ t0 < T, got t0={}, T={}", self.t0, self.horizon));
        }
        if self.nt < 2 || self.nx < 2 || self.nv < 1 {
            return domain("grid: need nt ≥ 2, nx ≥ 2 and nv ≥ 1");
        }
        if !(self.x_range.0 < self.x_range.1) {
            return domain("grid.x_range must be increasing");
        }
        if !(self.v_range.0 > 0.0 && (self.nv == 1 || self.v_range.0 < self.v_range.1)) {
            return domain("grid.v_range must be positive and increasing");
        }
        Ok((
            Axis::uniform(self.t0, self.horizon, self.nt)?,
            Axis::uniform(self.x_range.0, self.x_range.1, self.nx)?,
            Axis::uniform(self.v_range.0, self.v_range.1, self.nv)?,
        ))
    }

    /// Same hull with `factor` times as many intervals per axis; the time
    /// axis is refined as well. Axes with a single node are kept.
    pub fn refined(&self, factor: usize) -> GridSpec {
        let r = |n: usize| if n == 1 { 1 } else { (n - 1) * factor + 1 };
        GridSpec {
            nt: r(self.nt),
            nx: r(self.nx),
            nv: r(self.nv),
            ..self.clone()
        }
    }
}

/// Spatial hull from simulated quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    pub x: (f64, f64),
    pub v: (f64, f64),
}

/// Lower and upper quantile levels of the simulated states.
pub const HULL_QUANTILES: (f64, f64) = (0.001, 0.999);

/// Sizes a hull from the 0.1% and 99.9% quantiles of paths started at
/// `start`, widened by half the quantile width on each side. The `x` hull is
/// symmetric about `x0`, so an odd node count puts a node on `x0`. The
/// variance hull stays positive and collapses to `v0` when `V` never moves.
pub fn auto_hull(model: &VolModel, start: StartPoint, horizon: f64, n_paths: usize, seed: u64) -> Result<Hull> {
    let grid = TimeGrid::new(start.t0, horizon, 50)?;
    let paths = map_paths(model, start, grid, n_paths, seed, |_, x, v, _| (x.to_vec(), v.to_vec()))?;
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for (x, v) in paths.valid() {
        xs.extend_from_slice(x);
        vs.extend_from_slice(v);
    }
    let quantiles = |d: &mut Vec<f64>| {
        d.sort_by(f64::total_cmp);
        let q = |p: f64| d[((d.len() - 1) as f64 * p).round() as usize];
        (q(HULL_QUANTILES.0), q(HULL_QUANTILES.1))
    };
    let (xl, xh) = quantiles(&mut xs);
    let (vl, vh) = quantiles(&mut vs);
    let wx = xh - xl;
    let half = (start.x0 - (xl - 0.5 * wx)).max(xh + 0.5 * wx - start.x0);
    let wv = vh - vl;
    let v = if wv <= 1e-12 * start.v0.abs().max(1e-300) {
        (start.v0, start.v0)
    } else {
        let lo = (vl - 0.5 * wv).max(vl.max(start.v0 * 1e-3) / 3.0);
        (lo, vh + 0.5 * wv)
    };
    Ok(Hull {
        x: (start.x0 - half, start.x0 + half),
        v,
    })
}

fn default_max_iter() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-4
}
fn default_noise_factor() -> f64 {
    3.0
}
fn default_budget() -> f64 {
    0.5
}
fn default_min_slabs() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Stop once `sup_diff ≤ noise_factor × stderr floor`.
    #[serde(default = "default_noise_factor")]
    pub noise_factor: f64,
    /// Upper bound of `∫ L_B̂ dt` per slab.
    #[serde(default = "default_budget")]
    pub slab_budget: f64,
    #[serde(default = "default_min_slabs")]
    pub min_slabs: usize,
    /// Re-apply the operator with fresh noise after convergence.
    #[serde(default = "default_true")]
    pub validate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: default_max_iter(),
            tol: default_tol(),
            noise_factor: default_noise_factor(),
            slab_budget: default_budget(),
            min_slabs: default_min_slabs(),
            validate: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return domain("solver.max_iter must be positive");
        }
        if !(self.tol >= 0.0 && self.noise_factor >= 0.0) {
            return domain("solver.tol and solver.noise_factor must be non-negative");
        }
        if !(self.slab_budget > 0.0 && self.slab_budget < 1.0) {
            return domain(format!("solver.slab_budget must lie in (0, 1), got {}", self.slab_budget));
        }
        if self.min_slabs == 0 {
            return domain("solver.min_slabs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabTrace {
    pub t_start: f64,
    pub t_end: f64,
    /// `∫ L_B̂ dt` over the slab.
    pub lipschitz_integral: f64,
    pub sup_diffs: Vec<f64>,
    /// Largest node stderr of the final iterate.
    pub stderr_floor: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    /// `max |Φ_fresh u − u|`
    pub sup_diff: f64,
    /// Largest difference in units of the combined stderr.
    pub max_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub iterates: usize,
    /// Traces of all slabs, latest slab first in time order of solution.
    pub sup_diffs: Vec<f64>,
    pub converged: bool,
    pub mc_stderr_floor: f64,
    pub slabs: Vec<SlabTrace>,
    pub sup_abs: f64,
    /// `(sup|φ| + ∫c)·exp(∫c)` with `|B̂(t,·,·,y)| ≤ c(t)(1 + |y|)`.
    pub growth_bound: f64,
    pub within_growth_bound: bool,
    pub outside: u64,
    pub visited: u64,
    pub validation: Option<ValidationReport>,
}

impl PicardReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| crate::error::XvaError::Parse(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Splits the time nodes into slabs `[ia, ib]` with `∫ L ≤ budget`, listed
/// from the horizon backward, together with the budget used.
pub fn time_slabs(spec: &MarketSpec, t_nodes: &[f64], budget: f64, min_slabs: usize) -> Result<Vec<(usize, usize, f64)>> {
    let n = t_nodes.len();
    let lips: Vec<f64> = t_nodes.iter().map(|t| spec.lipschitz_at(*t)).collect::<Result<_>>()?;
    let max_len = (n - 1).div_ceil(min_slabs.max(1)).max(1);
    let mut slabs = Vec::new();
    let mut ib = n - 1;
    while ib > 0 {
        let mut ia = ib;
        let mut used = 0.0;
        while ia > 0 && ib - ia < max_len {
            let step = 0.5 * (t_nodes[ia] - t_nodes[ia - 1]) * (lips[ia] + lips[ia - 1]);
            if used + step > budget {
                break;
            }
            used += step;
            ia -= 1;
        }
        if ia == ib {
            return domain(format!(
                "time step at t={} exceeds the Lipschitz budget {budget}; refine the time axis",
                t_nodes[ib - 1]
            ));
        }
        slabs.push((ia, ib, used));
        ib = ia;
    }
    Ok(slabs)
}

const VALIDATION_SEED_MIX: u64 = 0x5851_f42d_4c95_7f2d;

/// Picard iteration from the terminal-expectation field on the grid `grid`.
pub fn picard_solve(
    model: &VolModel,
    spec: &MarketSpec,
    grid: &GridSpec,
    mc: McConfig,
    solver: SolverConfig,
) -> Result<(GridFunction, PicardReport)> {
    solver.validate()?;
    spec.validate(grid.horizon)?;
    let (t, x, v) = grid.axes()?;
    let fk = FeynmanKac::new(model, spec, t.clone(), x.clone(), v.clone(), mc)?;
    let nt = t.len();

    let mut u = GridFunction::constant(t.clone(), x, v, 0.0)?;
    let start = fk.apply_slab(&u, 0, nt - 1, Terminal::Payoff, false)?;
    start.check_coverage()?;
    write_slab(&mut u, &start);
    set_terminal(&mut u, spec);

    let slabs = time_slabs(spec, t.nodes(), solver.slab_budget, solver.min_slabs)?;
    let mut traces = Vec::with_capacity(slabs.len());
    let (mut outside, mut visited) = (0u64, 0u64);
    let mut iterates = 0;
    for &(ia, ib, lip) in &slabs {
        let mut trace = SlabTrace {
            t_start: t.nodes()[ia],
            t_end: t.nodes()[ib],
            lipschitz_integral: lip,
            sup_diffs: Vec::new(),
            stderr_floor: 0.0,
            converged: false,
        };
        for _ in 0..solver.max_iter {
            let est = {
                let terminal = if ib == nt - 1 { Terminal::Payoff } else { Terminal::Grid(&u) };
                fk.apply_slab(&u, ia, ib, terminal, true)?
            };
            est.check_coverage()?;
            let offset = u.index(ia, 0, 0);
            let diff = est
                .values
                .iter()
                .zip(&u.values[offset..])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            write_slab(&mut u, &est);
            iterates += 1;
            trace.sup_diffs.push(diff);
            trace.stderr_floor = est.max_stderr();
            outside = est.outside;
            visited = est.visited;
            if diff <= solver.tol.max(solver.noise_factor * trace.stderr_floor) {
                trace.converged = true;
                break;
            }
        }
        traces.push(trace);
    }

    let validation = if solver.validate {
        let seed = mc.seed ^ VALIDATION_SEED_MIX;
        let fresh = fk.reseeded(seed)?;
        let (mut sup_diff, mut max_z) = (0.0f64, 0.0f64);
        for &(ia, ib, _) in &slabs {
            let terminal = if ib == nt - 1 { Terminal::Payoff } else { Terminal::Grid(&u) };
            let est = fresh.apply_slab(&u, ia, ib, terminal, true)?;
            let offset = u.index(ia, 0, 0);
            let se = u.stderr.as_ref().expect("solved grid carries stderr");
            for (k, val) in est.values.iter().enumerate() {
                let d = (val - u.values[offset + k]).abs();
                sup_diff = sup_diff.max(d);
                let s = (est.stderr[k].powi(2) + se[offset + k].powi(2)).sqrt();
                if s > 0.0 {
                    max_z = max_z.max(d / s);
                } else if d > 0.0 {
                    max_z = f64::INFINITY;
                }
            }
        }
        Some(ValidationReport { seed, sup_diff, max_z })
    } else {
        None
    };

    let floor = traces.iter().fold(0.0f64, |m, s| m.max(s.stderr_floor));
    let growth: Vec<f64> = t
        .nodes()
        .iter()
        .map(|s| spec.growth_at(*s, grid.horizon))
        .collect::<Result<_>>()?;
    let c_int = trapezoid(t.nodes(), &growth);
    let (plo, phi) = spec.payoff.range();
    let growth_bound = (plo.abs().max(phi.abs()) + c_int) * c_int.exp();
    let sup_abs = u.sup_abs();
    let report = PicardReport {
        iterates,
        sup_diffs: traces.iter().flat_map(|s| s.sup_diffs.iter().copied()).collect(),
        converged: traces.iter().all(|s| s.converged),
        mc_stderr_floor: floor,
        slabs: traces,
        sup_abs,
        growth_bound,
        within_growth_bound: sup_abs <= growth_bound + 3.0 * floor,
        outside,
        visited,
        validation,
    };
    Ok((u, report))
}

/// Share of nodes with `u ∉ [lo − k·stderr, hi + k·stderr]`.
pub fn bound_violations(u: &GridFunction, lo: f64, hi: f64, k: f64) -> f64 {
    let bad = (0..u.len())
        .filter(|&i| {
            let (it, ix, iv) = u.coords(i);
            let s = k * u.stderr_at(it, ix, iv);
            u.values[i] < lo - s || u.values[i] > hi + s
        })
        .count();
    bad as f64 / u.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub nodes: usize,
    /// Share of nodes with `u_hi < u_lo − 3·(combined stderr)`.
    pub fraction_violating: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    pub pass: bool,
}

/// Compares two solved grids on identical nodes, expecting `hi ≥ lo`.
pub fn compare_grids(lo: &GridFunction, hi: &GridFunction) -> Result<ComparisonReport> {
    if !lo.same_nodes(hi) {
        return domain("comparison needs identical grids");
    }
    let (mut bad, mut min_gap, mut max_gap) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..lo.len() {
        let (it, ix, iv) = lo.coords(i);
        let s = (lo.stderr_at(it, ix, iv).powi(2) + hi.stderr_at(it, ix, iv).powi(2)).sqrt();
        let gap = hi.values[i] - lo.values[i];
        min_gap = min_gap.min(gap);
        max_gap = max_gap.max(gap);
        bad += (gap < -3.0 * s) as usize;
    }
    let fraction = bad as f64 / lo.len() as f64;
    Ok(ComparisonReport {
        nodes: lo.len(),
        fraction_violating: fraction,
        min_gap,
        max_gap,
        pass: bad == 0,
    })
}

/// Solves both specs with shared noise and checks `u_hi ≥ u_lo` node-wise.
pub fn comparison_check(
    model: &VolModel,
    spec_lo: &MarketSpec,
    spec_hi: &MarketSpec,
    grid: &GridSpec,
    mc: McConfig,
    solver: SolverConfig,
) -> Result<ComparisonReport> {
    let (lo, _) = picard_solve(model, spec_lo, grid, mc, solver)?;
    let (hi, _) = picard_solve(model, spec_hi, grid, mc, solver)?;
    compare_grids(&lo, &hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::TimeFn;
    use crate::valuation::{Dividend, Payoff};
    use crate::volmodel::{build_power_model, PowerModel};

    fn bs(r: f64) -> VolModel {
        build_power_model(&PowerModel::black_scholes(), TimeFn::constant(r), TimeFn::zero(), 0.0, 1.0).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec {
            t0: 0.0,
            horizon: 1.0,
            nt: 6,
            nx: 21,
            nv: 1,
            x_range: (100f64.ln() - 1.2, 100f64.ln() + 1.2),
            v_range: (0.04, 0.04),
        }
    }

    #[test]
    fn slabs_respect_budget() {
        let spec = MarketSpec::risk_free(TimeFn::constant(2.0), Payoff::Constant { value: 1.0 });
        let nodes: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let slabs = time_slabs(&spec, &nodes, 0.5, 1).unwrap();
        assert_eq!(slabs.first().unwrap().1, 10);
        assert_eq!(slabs.last().unwrap().0, 0);
        for w in slabs.windows(2) {
            assert_eq!(w[0].0, w[1].1);
        }
        assert!(slabs.iter().all(|s| s.2 <= 0.5 + 1e-12));
        assert_eq!(slabs.len(), 5);
        let few = time_slabs(&spec, &nodes, 0.5, 1).unwrap();
        let many = time_slabs(&MarketSpec::zero(Payoff::Constant { value: 1.0 }), &nodes, 0.5, 4).unwrap();
        assert!(few.len() >= 5 && many.len() == 4);
        let coarse = [0.0, 1.0];
        assert!(time_slabs(&spec, &coarse, 0.5, 1).is_err());
    }

    #[test]
    fn zero_market_converges_immediately() {
        let model = bs(0.0);
        let spec = MarketSpec::zero(Payoff::Put { strike: 100.0 });
        let (u, rep) = picard_solve(&model, &spec, &grid(), McConfig::new(2000, 5), SolverConfig::default()).unwrap();
        assert_eq!(rep.iterates, 1);
        assert_eq!(rep.sup_diffs, vec![0.0]);
        assert!(rep.converged);
        assert!(u.values.iter().all(|y| *y >= 0.0));
    }

    #[test]
    fn bond_matches_closed_form() {
        let r = 0.05;
        let model = bs(r);
        let spec = MarketSpec::risk_free(TimeFn::constant(r), Payoff::Constant { value: 1.0 });
        let (u, rep) = picard_solve(&model, &spec, &grid(), McConfig::new(100, 5), SolverConfig::default()).unwrap();
        assert!(rep.converged);
        for i in 0..u.len() {
            let (it, _, _) = u.coords(i);
            let s = u.t.nodes()[it];
            assert!((u.values[i] - (-r * (1.0 - s)).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_specs_compare_equal() {
        let model = bs(0.02);
        let spec = MarketSpec::risk_free(TimeFn::constant(0.02), Payoff::Put { strike: 100.0 });
        let mut solver = SolverConfig::default();
        solver.validate = false;
        let rep = comparison_check(&model, &spec, &spec, &grid(), McConfig::new(400, 9), solver).unwrap();
        assert!(rep.pass);
        assert_eq!((rep.min_gap, rep.max_gap), (0.0, 0.0));
        let mut hi = spec.clone();
        hi.dividend = Dividend::Deterministic(TimeFn::constant(0.01));
        let rep = comparison_check(&model, &spec, &hi, &grid(), McConfig::new(400, 9), solver).unwrap();
        assert!(rep.pass && rep.min_gap >= 0.0);
    }

    #[test]
    fn hull_is_centered_and_positive() {
        let heston = build_power_model(&PowerModel::heston(0.08, 2.0, 0.3), TimeFn::constant(0.05), TimeFn::constant(-0.5), 0.0, 1.0)
            .unwrap();
        let start = StartPoint { t0: 0.0, x0: 100f64.ln(), v0: 0.04 };
        let h = auto_hull(&heston, start, 1.0, 2000, 3).unwrap();
        assert!(((h.x.0 + h.x.1) / 2.0 - start.x0).abs() < 1e-12);
        assert!(h.v.0 > 0.0 && h.v.0 < 0.04 && h.v.1 > 0.04);
        let b = auto_hull(&bs(0.05), start, 1.0, 500, 3).unwrap();
        assert_eq!(b.v, (0.04, 0.04));
    }
}
