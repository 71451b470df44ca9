//! Subcommands. Each writes its outputs through an [`OutputDir`] and returns
//! the exit code of a run that completed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use xva_core::defaultclock::{
    default_density, sample_default_times, survival_curve, write_curve_csv, DefaultDensity, DefaultTarget,
};
use xva_core::error::XvaError;
use xva_core::mildsolver::{
    bound_violations, compare_grids, interior_probes, linear_oracle, pde_residual, picard_solve, GridFunction,
    PicardReport,
};
use xva_core::simulate::{moment_report, positivity_report, simulate_paths, StartPoint};
use xva_core::valuation::{check_boundary_condition, martingale_residual, Dividend, MartingaleReport};
use xva_core::volmodel::{check_positivity, PositivityReport, VolModel};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_OK, EXIT_VERIFY};
use crate::manifest::OutputDir;

/// Tolerance of the density identity `∫φ_ρ + atom = 1`.
pub const DENSITY_IDENTITY_TOL: f64 = 1e-6;
/// Largest accepted sup gap between sampled and analytic survival.
pub const SAMPLER_GAP_TOL: f64 = 0.01;

const MARTINGALE_SEED_MIX: u64 = 0x2545_f491_4f6c_dd1d;
const DEFAULTS_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;
const PROBE_SEED_MIX: u64 = 0xd1b5_4a32_d192_ed03;
const VALIDATION_SEED_MIX: u64 = 0x5851_f42d_4c95_7f2d;

fn write_config(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    out.write_text("config.json", &(cfg.to_json() + "\n"))
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    start: StartPoint,
    n_paths: usize,
    n_steps: usize,
    invalid_paths: usize,
    positivity_condition: &'a PositivityReport,
    min_v: f64,
    frac_nonpositive: f64,
}

pub fn simulate(cfg: &RunConfig, out: &mut OutputDir) -> Result<i32, CliError> {
    write_config(cfg, out)?;
    let model = cfg.physical_model()?;
    let grid = cfg.time_grid()?;
    out.seeds.insert("master_seed".into(), cfg.mc.master_seed);
    let paths = simulate_paths(&model, cfg.start(), grid, cfg.mc.n_paths, cfg.mc.master_seed)?;
    paths.write_csv(&out.file("paths.csv"))?;
    paths.write_binary(&out.file("paths.bin"))?;
    out.write_json("moments.json", &moment_report(&paths, &model))?;
    let stats = positivity_report(&paths);
    let condition = check_positivity(&cfg.power_model()?, cfg.grid.t0, cfg.grid.horizon);
    out.write_json(
        "positivity.json",
        &SimulateReport {
            start: cfg.start(),
            n_paths: paths.n_paths,
            n_steps: grid.n_steps,
            invalid_paths: paths.invalid_count(),
            positivity_condition: &condition,
            min_v: stats.min_v,
            frac_nonpositive: stats.frac_nonpositive,
        },
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DensityFile {
    investor: DefaultDensity,
    counterparty: DefaultDensity,
    first: DefaultDensity,
    sampler_sup_gap: Option<f64>,
}

pub fn defaults(cfg: &RunConfig, out: &mut OutputDir, mc_check: Option<usize>) -> Result<i32, CliError> {
    write_config(cfg, out)?;
    let spec = &cfg.market.defaults;
    let grid = cfg.time_grid()?;
    let density = |target| default_density(spec, target, &grid);
    let (investor, counterparty, first) = (
        density(DefaultTarget::Investor)?,
        density(DefaultTarget::Counterparty)?,
        density(DefaultTarget::First)?,
    );
    for (name, d) in [("investor", &investor), ("counterparty", &counterparty), ("first", &first)] {
        if !(d.identity_error <= DENSITY_IDENTITY_TOL) {
            return Err(CliError::Verify(format!(
                "density identity of the {name} default time off by {:.3e}",
                d.identity_error
            )));
        }
    }
    write_curve_csv(spec, &grid, &out.file("curves.csv"))?;

    let mut sup_gap = None;
    if let Some(n) = mc_check {
        let seed = cfg.mc.master_seed ^ DEFAULTS_SEED_MIX;
        out.seeds.insert("default_sampler_seed".into(), seed);
        let samples = sample_default_times(spec, &grid, n, seed)?;
        let curve = survival_curve(spec, &grid)?;
        let rows: Vec<[f64; 7]> = curve
            .nodes
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                [
                    t,
                    curve.g_investor[k],
                    samples.survival_investor(t),
                    curve.g_counterparty[k],
                    samples.survival_counterparty(t),
                    curve.g_joint[k],
                    samples.survival_first(t),
                ]
            })
            .collect();
        let gap = |r: &[f64; 7]| (r[1] - r[2]).abs().max((r[3] - r[4]).abs()).max((r[5] - r[6]).abs());
        let sup = rows.iter().map(gap).fold(0.0f64, f64::max);
        let mut text = String::from("t,g_I,g_I_mc,g_C,g_C_mc,g_joint,g_joint_mc,gap,sup_gap\n");
        for r in &rows {
            for v in r {
                text += &format!("{v:.16e},");
            }
            text += &format!("{:.16e},{sup:.16e}\n", gap(r));
        }
        out.write_text("defaults_mc.csv", &text)?;
        sup_gap = Some(sup);
    }
    out.write_json(
        "density.json",
        &DensityFile {
            investor,
            counterparty,
            first,
            sampler_sup_gap: sup_gap,
        },
    )?;
    if sup_gap.is_some_and(|g| g > SAMPLER_GAP_TOL) {
        return Ok(EXIT_VERIFY);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualSummary {
    pub martingale: MartingaleReport,
    pub martingale_seed: u64,
    /// Median `|residual|` of the semilinear equation at interior nodes, when
    /// the grid has enough margin.
    pub pde_median_abs: Option<f64>,
    pub pde_probes: usize,
}

/// Solution, solver report and residual checks of one configuration.
pub struct Solved {
    pub model: VolModel,
    pub u: GridFunction,
    pub report: PicardReport,
    pub residuals: ResidualSummary,
}

fn solve_only(cfg: &RunConfig, out: &mut OutputDir) -> Result<Solved, CliError> {
    let model = cfg.pricing_model()?;
    let grid = cfg.grid_spec(&model)?;
    out.seeds.insert("master_seed".into(), cfg.mc.master_seed);
    if cfg.solver.validate {
        out.seeds.insert("validation_seed".into(), cfg.mc.master_seed ^ VALIDATION_SEED_MIX);
    }
    let (u, report) = picard_solve(&model, &cfg.market, &grid, cfg.mc_config(), cfg.solver_config())?;

    let seed = cfg.mc.master_seed ^ MARTINGALE_SEED_MIX;
    out.seeds.insert("martingale_seed".into(), seed);
    let martingale = martingale_residual(
        &cfg.market,
        &model,
        &u,
        cfg.start(),
        cfg.time_grid()?,
        &cfg.checkpoints(),
        cfg.checks.martingale_paths,
        seed,
    )?;
    let probes = interior_probes(&u);
    let pde_median_abs = match pde_residual(&u, &model, &cfg.market, &probes) {
        Ok(mut r) if !r.is_empty() => {
            r.iter_mut().for_each(|e| *e = e.abs());
            r.sort_by(f64::total_cmp);
            Some(r[r.len() / 2])
        }
        Ok(_) | Err(XvaError::Margin(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Solved {
        model,
        u,
        report,
        residuals: ResidualSummary {
            martingale,
            martingale_seed: seed,
            pde_median_abs,
            pde_probes: if pde_median_abs.is_some() { probes.len() } else { 0 },
        },
    })
}

fn write_solution(s: &Solved, out: &mut OutputDir) -> Result<(), CliError> {
    s.u.write_csv(&out.file("u.csv"))?;
    s.u.write_binary(&out.file("u.bin"))?;
    s.report.write_json(&out.file("picard.json"))?;
    s.residuals.martingale.write_csv(&out.file("martingale.csv"))?;
    out.write_json("residual.json", &s.residuals)
}

pub fn solve(cfg: &RunConfig, out: &mut OutputDir) -> Result<(i32, Solved), CliError> {
    write_config(cfg, out)?;
    let solved = solve_only(cfg, out)?;
    write_solution(&solved, out)?;
    Ok((EXIT_OK, solved))
}

#[derive(Debug, Clone, Serialize)]
pub struct PriceReport {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub value: f64,
    /// Standard error at the nearest grid node.
    pub stderr: f64,
    pub converged: bool,
}

fn nearest(nodes: &[f64], q: f64) -> usize {
    (0..nodes.len())
        .min_by(|a, b| (nodes[*a] - q).abs().total_cmp(&(nodes[*b] - q).abs()))
        .unwrap_or(0)
}

pub fn price(cfg: &RunConfig, out: &mut OutputDir) -> Result<i32, CliError> {
    let (code, s) = solve(cfg, out)?;
    let start = cfg.start();
    let u = &s.u;
    let report = PriceReport {
        t: start.t0,
        s: cfg.model.s0,
        v: start.v0,
        value: u.interpolate(start.t0, start.x0, start.v0),
        stderr: u.stderr_at(
            nearest(u.t.nodes(), start.t0),
            nearest(u.x.nodes(), start.x0),
            nearest(u.v.nodes(), start.v0),
        ),
        converged: s.report.converged,
    };
    println!("value {:.10} ± {:.2e} at t={} S={} v={}", report.value, report.stderr, report.t, report.s, report.v);
    out.write_json("price.json", &report)?;
    Ok(code)
}

/// Outcome of one property check; `pass == None` marks a skipped check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: Option<bool>,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Check {
        Check {
            name: name.into(),
            pass: Some(pass),
            detail,
        }
    }

    fn skipped(name: &str, why: &str) -> Check {
        Check {
            name: name.into(),
            pass: None,
            detail: why.into(),
        }
    }
}

#[derive(Serialize)]
struct VerifyFile<'a> {
    passed: bool,
    checks: &'a [Check],
}

/// Property suite at desk scale. Failing checks give exit code 1.
pub fn verify(cfg: &RunConfig, out: &mut OutputDir) -> Result<i32, CliError> {
    write_config(cfg, out)?;
    let (t0, horizon) = (cfg.grid.t0, cfg.grid.horizon);
    let mut checks = Vec::new();

    let positivity = check_positivity(&cfg.power_model()?, t0, horizon);
    checks.push(Check::new(
        "variance positivity",
        positivity.holds,
        format!("{}: lhs {:.6e} vs rhs {:.6e}", positivity.witness, positivity.lhs, positivity.rhs),
    ));

    let grid = cfg.time_grid()?;
    let spec = &cfg.market.defaults;
    let first = default_density(spec, DefaultTarget::First, &grid)?;
    checks.push(Check::new(
        "default density identity",
        first.identity_error <= DENSITY_IDENTITY_TOL,
        format!("|∫φ + atom − 1| = {:.3e}", first.identity_error),
    ));
    let seed = cfg.mc.master_seed ^ DEFAULTS_SEED_MIX;
    out.seeds.insert("default_sampler_seed".into(), seed);
    let samples = sample_default_times(spec, &grid, cfg.checks.default_samples, seed)?;
    let curve = survival_curve(spec, &grid)?;
    let gap = curve
        .nodes
        .iter()
        .zip(&curve.g_joint)
        .map(|(t, g)| (samples.survival_first(*t) - g).abs())
        .fold(0.0f64, f64::max);
    checks.push(Check::new(
        "default sampler",
        gap <= SAMPLER_GAP_TOL,
        format!("sup gap {gap:.4} over {} samples", cfg.checks.default_samples),
    ));

    if positivity.holds {
        checks.extend(solver_checks(cfg, out)?);
    } else {
        for name in ["picard convergence", "martingale residual", "J-invariance", "comparison", "oracle agreement"] {
            checks.push(Check::skipped(name, "model rejected by the positivity condition"));
        }
    }

    for c in &checks {
        let status = match c.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("{status} {}: {}", c.name, c.detail);
    }
    let passed = checks.iter().all(|c| c.pass != Some(false));
    out.write_json("verify.json", &VerifyFile { passed, checks: &checks })?;
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
}

fn solver_checks(cfg: &RunConfig, out: &mut OutputDir) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let s = solve_only(cfg, out)?;
    write_solution(&s, out)?;
    let (u, report) = (&s.u, &s.report);
    checks.push(Check::new(
        "picard convergence",
        report.converged && report.within_growth_bound,
        format!(
            "{} iterations over {} slabs, last sup_diff {:.3e}, stderr floor {:.3e}, sup|u| {:.4} ≤ bound {:.4}",
            report.iterates,
            report.slabs.len(),
            report.sup_diffs.last().copied().unwrap_or(0.0),
            report.mc_stderr_floor,
            report.sup_abs,
            report.growth_bound
        ),
    ));
    let m = &s.residuals.martingale;
    let zs: Vec<String> = m.rows.iter().map(|r| format!("{:.2}", r.mean / r.stderr)).collect();
    checks.push(Check::new(
        "martingale residual",
        m.all_within,
        format!("z-scores [{}]", zs.join(", ")),
    ));

    let spec = &cfg.market;
    let (lo, hi) = spec.payoff.range();
    let boundary = check_boundary_condition(spec, Some(lo), Some(hi), u.t.nodes(), u.x.nodes(), u.v.nodes())?;
    if boundary.holds {
        let share = bound_violations(u, lo, hi, 3.0);
        checks.push(Check::new(
            "J-invariance",
            share == 0.0,
            format!("{:.2}% of nodes outside [{lo}, {hi}] ± 3 stderr", 100.0 * share),
        ));
    } else {
        checks.push(Check::skipped("J-invariance", "boundary condition does not hold for the payoff range"));
    }

    let grid = cfg.grid_spec(&s.model)?;
    if let Dividend::Deterministic(d) = &spec.dividend {
        let mut raised = spec.clone();
        raised.dividend = Dividend::Deterministic(d.shifted(0.01));
        let (u_hi, _) = picard_solve(&s.model, &raised, &grid, cfg.mc_config(), cfg.solver_config())?;
        let c = compare_grids(u, &u_hi)?;
        checks.push(Check::new(
            "comparison",
            c.pass,
            format!(
                "dividend +0.01: {:.2}% nodes violate, gap in [{:.4e}, {:.4e}]",
                100.0 * c.fraction_violating,
                c.min_gap,
                c.max_gap
            ),
        ));
    } else {
        checks.push(Check::skipped("comparison", "dividend depends on the state"));
    }

    checks.push(oracle_check(cfg, &s.model, u, out)?);
    Ok(checks)
}

fn oracle_check(cfg: &RunConfig, model: &VolModel, u: &GridFunction, out: &mut OutputDir) -> Result<Check, CliError> {
    let name = "oracle agreement";
    let sim = cfg.time_grid()?;
    for t in sim.nodes() {
        if cfg.market.affine_at(t)?.is_none() {
            return Ok(Check::skipped(name, "driver is not affine"));
        }
    }
    let seed = cfg.mc.master_seed ^ PROBE_SEED_MIX;
    out.seeds.insert("oracle_seed".into(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nt, nx, nv) = (u.t.len(), u.x.len(), u.v.len());
    let tol = cfg.solver.tol;
    let mut worst = 0.0f64;
    for p in 0..cfg.checks.oracle_probes {
        let it = rng.random_range(0..nt - 1);
        let ix = rng.random_range(nx / 4..(nx - nx / 4).max(nx / 4 + 1));
        let iv = rng.random_range(nv / 4..(nv - nv / 4).max(nv / 4 + 1));
        let point = StartPoint {
            t0: u.t.nodes()[it],
            x0: u.x.nodes()[ix],
            v0: u.v.nodes()[iv],
        };
        let steps = (nt - 1 - it) * cfg.mc.substeps;
        let o = linear_oracle(&cfg.market, model, point, cfg.grid.horizon, steps, cfg.checks.oracle_paths, seed + p as u64)?;
        let se = (o.stderr.powi(2) + u.stderr_at(it, ix, iv).powi(2)).sqrt();
        worst = worst.max((u.at(it, ix, iv) - o.value).abs() / tol.max(3.0 * se));
    }
    Ok(Check::new(
        name,
        worst <= 1.0,
        format!(
            "max |u − oracle| / max(tol, 3·combined stderr) = {worst:.3} over {} probes",
            cfg.checks.oracle_probes
        ),
    ))
}
