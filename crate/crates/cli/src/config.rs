//! Run configuration: JSON ingestion, validation and normalisation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use xva_core::defaultclock::DefaultSpec;
use xva_core::mildsolver::{auto_hull, GridSpec, McConfig, SolverConfig};
use xva_core::simulate::{StartPoint, TimeGrid};
use xva_core::timefn::TimeFn;
use xva_core::valuation::MarketSpec;
use xva_core::volmodel::{build_power_model, measure_change, PowerModel, VolModel};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BlackScholes,
    Heston,
    Garch,
}

/// Constant coefficients `(k, l₀, λ)` of the Heston and Garch presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetParams {
    pub k: f64,
    pub l0: f64,
    pub lambda: f64,
}

/// Variance model, either a named preset or explicit power-family
/// parameters, plus the physical drift, correlation and initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PresetParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerModel>,
    /// Drift `b` of the log-price under the physical measure.
    #[serde(default)]
    pub drift_b: TimeFn,
    #[serde(default)]
    pub rho: TimeFn,
    pub s0: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Intervals of the time axis.
    pub n_steps: usize,
    pub nx: usize,
    #[serde(default = "one")]
    pub nv: usize,
    /// Sized from simulated quantiles when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_range: Option<(f64, f64)>,
}

fn one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub master_seed: u64,
    /// Simulation steps per interval of the time axis.
    #[serde(default = "one")]
    pub substeps: usize,
    #[serde(default = "default_true")]
    pub antithetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    #[serde(default = "tol")]
    pub tol: f64,
    /// Market price of risk of the variance noise.
    #[serde(default)]
    pub gamma: f64,
    /// Minimum number of time slabs.
    #[serde(default = "one")]
    pub time_slabs: usize,
    #[serde(default = "slab_budget")]
    pub slab_budget: f64,
    #[serde(default = "noise_factor")]
    pub noise_factor: f64,
    #[serde(default = "default_true")]
    pub validate: bool,
}

fn max_iter() -> usize {
    SolverConfig::default().max_iter
}

fn tol() -> f64 {
    SolverConfig::default().tol
}

fn slab_budget() -> f64 {
    SolverConfig::default().slab_budget
}

fn noise_factor() -> f64 {
    SolverConfig::default().noise_factor
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            max_iter: max_iter(),
            tol: tol(),
            gamma: 0.0,
            time_slabs: 1,
            slab_budget: slab_budget(),
            noise_factor: noise_factor(),
            validate: true,
        }
    }
}

/// Sizes of the post-solve checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default = "martingale_paths")]
    pub martingale_paths: usize,
    /// Checkpoint times; quarters of the horizon when empty.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_samples")]
    pub default_samples: usize,
    #[serde(default = "oracle_probes")]
    pub oracle_probes: usize,
    #[serde(default = "oracle_paths")]
    pub oracle_paths: usize,
}

fn martingale_paths() -> usize {
    20_000
}

fn default_samples() -> usize {
    100_000
}

fn oracle_probes() -> usize {
    5
}

fn oracle_paths() -> usize {
    20_000
}

impl Default for ChecksSection {
    fn default() -> Self {
        ChecksSection {
            martingale_paths: martingale_paths(),
            checkpoints: Vec::new(),
            default_samples: default_samples(),
            oracle_probes: oracle_probes(),
            oracle_paths: oracle_paths(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub market: MarketSpec,
    /// Overrides `market.defaults` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defaults: Option<DefaultSpec>,
    pub grid: GridConfig,
    pub mc: McSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub checks: ChecksSection,
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.normalised()
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Moves the default model into `market.defaults`, mirrors it at the
    /// top level and validates every section.
    pub fn normalised(mut self) -> Result<RunConfig, CliError> {
        if let Some(d) = self.defaults.take() {
            let inline = &self.market.defaults;
            if *inline != DefaultSpec::default_free() && *inline != d {
                return Err(invalid("defaults", "given both here and in market.defaults with different values"));
            }
            self.market.defaults = d;
        }
        self.defaults = Some(self.market.defaults.clone());
        self.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs hold no custom callables")
    }

    /// SHA-256 of the normalised JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if !(g.t0 >= 0.0 && g.horizon > g.t0 && g.horizon.is_finite()) {
            return Err(invalid("grid", format!("need 0 ≤ t0 < T, got t0={} T={}", g.t0, g.horizon)));
        }
        if g.n_steps == 0 || g.nx < 2 || g.nv == 0 {
            return Err(invalid("grid", "need n_steps ≥ 1, nx ≥ 2 and nv ≥ 1"));
        }
        let m = &self.model;
        if !(m.s0 > 0.0 && m.s0.is_finite()) {
            return Err(invalid("model.s0", format!("must be positive, got {}", m.s0)));
        }
        if !(m.v0 > 0.0 && m.v0.is_finite()) {
            return Err(invalid("model.v0", format!("must be positive, got {}", m.v0)));
        }
        for (name, f) in [("model.drift_b", &m.drift_b), ("model.rho", &m.rho)] {
            f.validate().map_err(|e| invalid(name, e))?;
        }
        let (lo, hi) = m.rho.range_on(g.t0, g.horizon);
        if !(lo >= -1.0 && hi <= 1.0) {
            return Err(invalid("model.rho", format!("must lie in [-1, 1], range [{lo}, {hi}]")));
        }
        self.power_model()?
            .validate_structure(g.t0, g.horizon)
            .map_err(|e| invalid("model", e))?;
        self.market.validate(g.horizon).map_err(|e| CliError::Config(e.to_string()))?;
        self.market.defaults.validate(g.horizon).map_err(|e| invalid("defaults", e))?;
        self.mc_config().validate().map_err(|e| invalid("mc", e))?;
        self.solver_config().validate().map_err(|e| invalid("solver", e))?;
        if !self.solver.gamma.is_finite() {
            return Err(invalid("solver.gamma", "must be finite"));
        }
        if self.checks.checkpoints.iter().any(|c| !(*c > g.t0 && *c <= g.horizon)) {
            return Err(invalid("checks.checkpoints", "must lie in (t0, T]"));
        }
        Ok(())
    }

    pub fn power_model(&self) -> Result<PowerModel, CliError> {
        let m = &self.model;
        match (m.preset, &m.power) {
            (Some(_), Some(_)) => Err(invalid("model", "give either preset or power, not both")),
            (None, None) => Err(invalid("model", "needs a preset or power parameters")),
            (None, Some(p)) => {
                if m.params.is_some() {
                    return Err(invalid("model.params", "only used with a preset"));
                }
                Ok(p.clone())
            }
            (Some(Preset::BlackScholes), None) => {
                if m.params.is_some() {
                    return Err(invalid("model.params", "black_scholes takes no parameters; v0 is σ²"));
                }
                Ok(PowerModel::black_scholes())
            }
            (Some(preset), None) => {
                let p = m.params.ok_or_else(|| invalid("model.params", "k, l0 and lambda are required"))?;
                Ok(match preset {
                    Preset::Heston => PowerModel::heston(p.k, p.l0, p.lambda),
                    _ => PowerModel::garch(p.k, p.l0, p.lambda),
                })
            }
        }
    }

    /// Physical-measure model; fails on a violated positivity condition.
    pub fn physical_model(&self) -> xva_core::error::Result<VolModel> {
        let p = self.power_model().expect("validated at load");
        build_power_model(&p, self.model.drift_b.clone(), self.model.rho.clone(), self.grid.t0, self.grid.horizon)
    }

    /// Pricing-measure model with `b = r̂` and the configured `γ`.
    pub fn pricing_model(&self) -> xva_core::error::Result<VolModel> {
        measure_change(&self.physical_model()?, &self.market.r_hat, self.solver.gamma)
    }

    pub fn start(&self) -> StartPoint {
        StartPoint {
            t0: self.grid.t0,
            x0: self.model.s0.ln(),
            v0: self.model.v0,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            n_paths: self.mc.n_paths,
            seed: self.mc.master_seed,
            substeps: self.mc.substeps,
            antithetic: self.mc.antithetic,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iter: self.solver.max_iter,
            tol: self.solver.tol,
            noise_factor: self.solver.noise_factor,
            slab_budget: self.solver.slab_budget,
            min_slabs: self.solver.time_slabs,
            validate: self.solver.validate,
        }
    }

    /// Simulation grid: the time axis subdivided by `mc.substeps`.
    pub fn time_grid(&self) -> xva_core::error::Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.horizon, self.grid.n_steps * self.mc.substeps)
    }

    pub fn checkpoints(&self) -> Vec<f64> {
        if !self.checks.checkpoints.is_empty() {
            return self.checks.checkpoints.clone();
        }
        let (t0, t1) = (self.grid.t0, self.grid.horizon);
        (1..=4).map(|i| t0 + (t1 - t0) * i as f64 / 4.0).collect()
    }

    /// Solver grid; missing ranges come from simulated quantiles under `model`.
    pub fn grid_spec(&self, model: &VolModel) -> xva_core::error::Result<GridSpec> {
        let g = &self.grid;
        let (x_range, v_range) = match (g.x_range, g.v_range) {
            (Some(x), Some(v)) => (x, v),
            (x, v) => {
                let hull = auto_hull(model, self.start(), g.horizon, 4000, self.mc.master_seed)?;
                (x.unwrap_or(hull.x), v.unwrap_or(hull.v))
            }
        };
        Ok(GridSpec {
            t0: g.t0,
            horizon: g.horizon,
            nt: g.n_steps + 1,
            nx: g.nx,
            nv: g.nv,
            x_range,
            v_range: if g.nv == 1 { (self.model.v0, self.model.v0) } else { v_range },
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
