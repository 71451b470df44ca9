//! Default times of investor and counterparty.
//!
//! Party `i` defaults at `τ_i = inf{t : ∫₀^t λ̂_i ≥ ξ_i}` with an independent
//! gamma threshold `ξ_i`. With deterministic intensities the survival
//! function is `G_t(τ_i) = Q(α_i, β_i ∫₀^t λ̂_i)` and the parties are
//! independent, so `G(τ) = G(τ_I) G(τ_C)` for `τ = τ_I ∧ τ_C`.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, XvaError};
use crate::quad;
use crate::simulate::{path_rng, TimeGrid};
use crate::special::{gamma_hazard_factor, gamma_survival, GammaParams};
use crate::timefn::TimeFn;

/// Default model of one party.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySpec {
    pub intensity: TimeFn,
    #[serde(default = "GammaParams::exponential")]
    pub threshold: GammaParams,
}

impl PartySpec {
    pub fn new(intensity: TimeFn, threshold: GammaParams) -> Self {
        PartySpec { intensity, threshold }
    }

    /// A party that never defaults.
    pub fn default_free() -> Self {
        PartySpec::new(TimeFn::zero(), GammaParams::exponential())
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        self.threshold.validate()?;
        if let Err(e) = self.intensity.validate() {
            return domain(format!("intensity: {e}"));
        }
        let (lo, _) = self.intensity.range_on(0.0, horizon);
        if lo < 0.0 {
            return domain(format!("intensity must be non-negative, found {lo}"));
        }
        if !self.cumulative(horizon).is_finite() {
            return domain("cumulative intensity must be finite on [0, T]");
        }
        Ok(())
    }

    pub fn is_default_free(&self) -> bool {
        self.intensity == TimeFn::zero()
    }

    /// `∫₀^t λ̂`, exact for constant, linear and piecewise intensities.
    #[inline]
    pub fn cumulative(&self, t: f64) -> f64 {
        self.intensity.integral(0.0, t).max(0.0)
    }

    pub fn survival(&self, t: f64) -> Result<f64> {
        gamma_survival(self.threshold, self.cumulative(t))
    }

    /// `−Ġ_t(τ_i)/G_t(τ_i) = λ̂_i(t) · factor(∫₀^t λ̂_i)`.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        let lam = self.intensity.eval(t);
        if lam == 0.0 {
            return Ok(0.0);
        }
        Ok(lam * gamma_hazard_factor(self.threshold, self.cumulative(t))?)
    }

    /// Signed logarithmic derivative `Ġ_t(τ_i)/G_t(τ_i) = −hazard ≤ 0`.
    pub fn log_survival_rate(&self, t: f64) -> Result<f64> {
        Ok(-self.hazard(t)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultSpec {
    pub investor: PartySpec,
    pub counterparty: PartySpec,
}

impl DefaultSpec {
    pub fn new(investor: PartySpec, counterparty: PartySpec) -> Self {
        DefaultSpec { investor, counterparty }
    }

    pub fn default_free() -> Self {
        DefaultSpec::new(PartySpec::default_free(), PartySpec::default_free())
    }

    /// Both parties with exponential thresholds and constant intensities.
    pub fn exponential(lambda_investor: f64, lambda_counterparty: f64) -> Self {
        DefaultSpec::new(
            PartySpec::new(TimeFn::constant(lambda_investor), GammaParams::exponential()),
            PartySpec::new(TimeFn::constant(lambda_counterparty), GammaParams::exponential()),
        )
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        self.investor
            .validate(horizon)
            .map_err(|e| XvaError::Domain(format!("investor: {e}")))?;
        self.counterparty
            .validate(horizon)
            .map_err(|e| XvaError::Domain(format!("counterparty: {e}")))
    }

    pub fn parties(&self) -> [&PartySpec; 2] {
        [&self.investor, &self.counterparty]
    }
}

/// Which default time a density refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultTarget {
    Investor,
    Counterparty,
    /// `τ = τ_I ∧ τ_C`
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurve {
    pub nodes: Vec<f64>,
    pub g_investor: Vec<f64>,
    pub g_counterparty: Vec<f64>,
    pub g_joint: Vec<f64>,
}

/// Running trapezoid integral `∫₀^{t_k} λ̂` on `nodes`, starting from the
/// exact integral on `[0, t_0]`.
fn cumulative_on(party: &PartySpec, nodes: &[f64]) -> Vec<f64> {
    let values: Vec<f64> = nodes.iter().map(|t| party.intensity.eval(*t)).collect();
    let head = nodes.first().map(|t0| party.cumulative(*t0)).unwrap_or(0.0);
    quad::cumulative_trapezoid(nodes, &values)
        .into_iter()
        .map(|c| (c + head).max(0.0))
        .collect()
}

pub fn survival_curve_on(spec: &DefaultSpec, nodes: &[f64]) -> Result<SurvivalCurve> {
    let curve = |p: &PartySpec| -> Result<Vec<f64>> {
        cumulative_on(p, nodes)
            .into_iter()
            .map(|c| gamma_survival(p.threshold, c))
            .collect()
    };
    let g_investor = curve(&spec.investor)?;
    let g_counterparty = curve(&spec.counterparty)?;
    let g_joint = g_investor.iter().zip(&g_counterparty).map(|(a, b)| a * b).collect();
    Ok(SurvivalCurve {
        nodes: nodes.to_vec(),
        g_investor,
        g_counterparty,
        g_joint,
    })
}

/// Survival processes on the grid, cumulative intensity by trapezoid rule.
pub fn survival_curve(spec: &DefaultSpec, grid: &TimeGrid) -> Result<SurvivalCurve> {
    survival_curve_on(spec, &grid.nodes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardCurve {
    pub nodes: Vec<f64>,
    pub investor: Vec<f64>,
    pub counterparty: Vec<f64>,
}

pub fn hazard_curve_on(spec: &DefaultSpec, nodes: &[f64]) -> Result<HazardCurve> {
    let curve = |p: &PartySpec| -> Result<Vec<f64>> {
        nodes
            .iter()
            .zip(cumulative_on(p, nodes))
            .map(|(t, c)| {
                let lam = p.intensity.eval(*t);
                if lam == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(lam * gamma_hazard_factor(p.threshold, c)?)
                }
            })
            .collect()
    };
    Ok(HazardCurve {
        nodes: nodes.to_vec(),
        investor: curve(&spec.investor)?,
        counterparty: curve(&spec.counterparty)?,
    })
}

/// Hazard rates `−Ġ(τ_i)/G(τ_i)` on the grid.
pub fn hazard_curve(spec: &DefaultSpec, grid: &TimeGrid) -> Result<HazardCurve> {
    hazard_curve_on(spec, &grid.nodes())
}

/// Sampled default times; `f64::INFINITY` marks no default up to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultSamples {
    pub investor: Vec<f64>,
    pub counterparty: Vec<f64>,
    /// Samples where both parties default at the same finite grid node.
    pub ties: usize,
}

impl DefaultSamples {
    fn survival(times: &[f64], t: f64) -> f64 {
        times.iter().filter(|s| **s > t).count() as f64 / times.len() as f64
    }

    pub fn survival_investor(&self, t: f64) -> f64 {
        Self::survival(&self.investor, t)
    }

    pub fn survival_counterparty(&self, t: f64) -> f64 {
        Self::survival(&self.counterparty, t)
    }

    /// Empirical `P(τ_I ∧ τ_C > t)`.
    pub fn survival_first(&self, t: f64) -> f64 {
        let n = self.investor.len();
        (0..n).filter(|i| self.investor[*i].min(self.counterparty[*i]) > t).count() as f64 / n as f64
    }

    pub fn tie_fraction(&self) -> f64 {
        self.ties as f64 / self.investor.len().max(1) as f64
    }
}

fn first_crossing(nodes: &[f64], cumulative: &[f64], xi: f64) -> f64 {
    let k = cumulative.partition_point(|c| *c < xi);
    if k < nodes.len() {
        nodes[k]
    } else {
        f64::INFINITY
    }
}

/// Draws thresholds and returns the first grid node at which the cumulative
/// intensity reaches them. Sample `j` uses its own generator, so the result
/// depends on `(spec, grid, n_samples, seed)` only.
pub fn sample_default_times(spec: &DefaultSpec, grid: &TimeGrid, n_samples: usize, seed: u64) -> Result<DefaultSamples> {
    spec.validate(grid.horizon)?;
    let nodes = grid.nodes();
    let cum_i = cumulative_on(&spec.investor, &nodes);
    let cum_c = cumulative_on(&spec.counterparty, &nodes);
    let gamma = |p: &GammaParams| {
        Gamma::new(p.shape, 1.0 / p.rate).map_err(|e| XvaError::Domain(format!("gamma threshold: {e}")))
    };
    let (gi, gc) = (gamma(&spec.investor.threshold)?, gamma(&spec.counterparty.threshold)?);
    let pairs: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = path_rng(seed, j as u64);
            let xi_i: f64 = gi.sample(&mut rng);
            let xi_c: f64 = gc.sample(&mut rng);
            (first_crossing(&nodes, &cum_i, xi_i), first_crossing(&nodes, &cum_c, xi_c))
        })
        .collect();
    let ties = pairs.iter().filter(|(a, b)| a.is_finite() && a == b).count();
    let (investor, counterparty) = pairs.into_iter().unzip();
    Ok(DefaultSamples {
        investor,
        counterparty,
        ties,
    })
}

/// Density of a default time on `[0, T]` and its mass beyond `T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultDensity {
    pub nodes: Vec<f64>,
    pub phi: Vec<f64>,
    /// `P(ρ > T)`, the survival at the horizon.
    pub atom: f64,
    /// `∫₀^T φ` by adaptive quadrature.
    pub integral: f64,
    /// `|∫₀^T φ + atom − 1|`
    pub identity_error: f64,
}

fn density_at(spec: &DefaultSpec, target: DefaultTarget, s: f64) -> Result<f64> {
    let parties: Vec<&PartySpec> = match target {
        DefaultTarget::Investor => vec![&spec.investor],
        DefaultTarget::Counterparty => vec![&spec.counterparty],
        DefaultTarget::First => vec![&spec.investor, &spec.counterparty],
    };
    let mut g = 1.0;
    let mut rate = 0.0;
    for p in parties {
        g *= p.survival(s)?;
        rate += p.hazard(s)?;
    }
    Ok(g * rate)
}

fn survival_of(spec: &DefaultSpec, target: DefaultTarget, t: f64) -> Result<f64> {
    Ok(match target {
        DefaultTarget::Investor => spec.investor.survival(t)?,
        DefaultTarget::Counterparty => spec.counterparty.survival(t)?,
        DefaultTarget::First => spec.investor.survival(t)? * spec.counterparty.survival(t)?,
    })
}

/// `φ_ρ(s) = G_s(ρ) Σ_i λ̂_i(s) factor_i(s)` on the grid nodes, with the mass
/// `G_T(ρ)` left at infinity.
pub fn default_density(spec: &DefaultSpec, target: DefaultTarget, grid: &TimeGrid) -> Result<DefaultDensity> {
    spec.validate(grid.horizon)?;
    let nodes = grid.nodes();
    let phi = nodes
        .iter()
        .map(|s| density_at(spec, target, *s))
        .collect::<Result<Vec<f64>>>()?;
    let atom = survival_of(spec, target, grid.horizon)?;
    // Kronrod nodes are interior, so an integrable singularity at 0 is fine.
    let failure = std::cell::RefCell::new(None);
    let integral = quad::integrate(
        |s| match density_at(spec, target, s) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        },
        0.0,
        grid.horizon,
        1e-11,
        1e-11,
    )
    .value;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(DefaultDensity {
        nodes,
        phi,
        atom,
        integral,
        identity_error: (integral + atom - 1.0).abs(),
    })
}

/// CSV with columns `t,g_I,g_C,g_joint,hazard_I,hazard_C,phi_rho`; singular
/// hazards are written as `inf`.
pub fn write_curve_csv(spec: &DefaultSpec, grid: &TimeGrid, path: &Path) -> Result<()> {
    let surv = survival_curve(spec, grid)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,g_I,g_C,g_joint,hazard_I,hazard_C,phi_rho")?;
    let or_inf = |r: Result<f64>| match r {
        Ok(v) => Ok(v),
        Err(XvaError::Singular(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    for (k, t) in surv.nodes.iter().enumerate() {
        let hi = or_inf(spec.investor.hazard(*t))?;
        let hc = or_inf(spec.counterparty.hazard(*t))?;
        let phi = or_inf(density_at(spec, DefaultTarget::First, *t))?;
        writeln!(
            w,
            "{t:.16e},{:.16e},{:.16e},{:.16e},{hi:.16e},{hc:.16e},{phi:.16e}",
            surv.g_investor[k], surv.g_counterparty[k], surv.g_joint[k]
        )?;
    }
    w.flush()?;
    Ok(())
}
