//! Deterministic market data, the driver `B̂` and the martingale test of
//! candidate pre-default value functions.
//!
//! ```text
//! B̂(t,s,v,y) = π̂ − (ĉ₊α + f̂₊(1−α)) y⁺ + (ĉ₋α + f̂₋(1−α)) y⁻
//!            − (r̂ − ĥ₊) Ĥ⁺ + (r̂ − ĥ₋) Ĥ⁻
//!            + g_I ((1−β) y − LGD_I ((β−α) y⁻ + (1−α) y⁺) 1_bank)
//!            + g_C ((1−β) y + LGD_C (β−α) y⁺)
//! ```
//!
//! with `g_i = Ġ(τ_i)/G(τ_i) ≤ 0`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::defaultclock::DefaultSpec;
use crate::error::{domain, Result, XvaError};
use crate::mildsolver::grid::GridFunction;
use crate::simulate::{map_paths, StartPoint, TimeGrid};
use crate::timefn::TimeFn;
use crate::volmodel::VolModel;

type DividendFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type HedgeFn = dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync;
type PayoffFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Dividend rate `π̂(t, s, v)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dividend {
    /// Depends on time only.
    Deterministic(TimeFn),
    /// General function with a bound `sup |π̂|`.
    #[serde(skip)]
    Custom { f: Arc<DividendFn>, bound: f64 },
}

impl Default for Dividend {
    fn default() -> Self {
        Dividend::Deterministic(TimeFn::zero())
    }
}

impl fmt::Debug for Dividend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dividend::Deterministic(g) => write!(f, "Deterministic({g:?})"),
            Dividend::Custom { bound, .. } => write!(f, "Custom {{ bound: {bound} }}"),
        }
    }
}

impl Dividend {
    #[inline]
    pub fn eval(&self, t: f64, s: f64, v: f64) -> f64 {
        match self {
            Dividend::Deterministic(g) => g.eval(t),
            Dividend::Custom { f, .. } => f(t, s, v),
        }
    }

    pub fn time_only(&self) -> Option<&TimeFn> {
        match self {
            Dividend::Deterministic(g) => Some(g),
            Dividend::Custom { .. } => None,
        }
    }

    pub fn sup_abs_on(&self, a: f64, b: f64) -> f64 {
        match self {
            Dividend::Deterministic(g) => g.sup_abs_on(a, b),
            Dividend::Custom { bound, .. } => *bound,
        }
    }
}

/// Pre-default hedging function `Ĥ(t, s, v, y)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Hedge {
    Zero,
    /// `Ĥ = δ·y`
    DeltaProportional { delta: f64 },
    /// User function, assumed to satisfy `|Ĥ| ≤ growth (1 + |y|)` and to be
    /// `lipschitz`-Lipschitz in `y`.
    #[serde(skip)]
    Custom {
        f: Arc<HedgeFn>,
        growth: f64,
        lipschitz: f64,
    },
}

impl Default for Hedge {
    fn default() -> Self {
        Hedge::Zero
    }
}

impl fmt::Debug for Hedge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hedge::Zero => write!(f, "Zero"),
            Hedge::DeltaProportional { delta } => write!(f, "DeltaProportional {{ delta: {delta} }}"),
            Hedge::Custom { growth, lipschitz, .. } => {
                write!(f, "Custom {{ growth: {growth}, lipschitz: {lipschitz} }}")
            }
        }
    }
}

impl Hedge {
    #[inline]
    pub fn eval(&self, t: f64, s: f64, v: f64, y: f64) -> f64 {
        match self {
            Hedge::Zero => 0.0,
            Hedge::DeltaProportional { delta } => delta * y,
            Hedge::Custom { f, .. } => f(t, s, v, y),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Hedge::Zero => 0.0,
            Hedge::DeltaProportional { delta } => delta.abs(),
            Hedge::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

/// Bounded non-negative payoff `φ(s_T, v_T)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payoff {
    Constant { value: f64 },
    /// `min((s − K)⁺, cap)`
    CappedCall { strike: f64, cap: f64 },
    /// `(K − s)⁺`
    Put { strike: f64 },
    /// `base + shift`
    Shifted { base: Box<Payoff>, shift: f64 },
    #[serde(skip)]
    Custom { f: Arc<PayoffFn>, sup: f64 },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Constant { value } => write!(f, "Constant({value})"),
            Payoff::CappedCall { strike, cap } => write!(f, "CappedCall {{ strike: {strike}, cap: {cap} }}"),
            Payoff::Put { strike } => write!(f, "Put {{ strike: {strike} }}"),
            Payoff::Shifted { base, shift } => write!(f, "Shifted {{ base: {base:?}, shift: {shift} }}"),
            Payoff::Custom { sup, .. } => write!(f, "Custom {{ sup: {sup} }}"),
        }
    }
}

impl Payoff {
    #[inline]
    pub fn eval(&self, s: f64, v: f64) -> f64 {
        match self {
            Payoff::Constant { value } => *value,
            Payoff::CappedCall { strike, cap } => (s - strike).max(0.0).min(*cap),
            Payoff::Put { strike } => (strike - s).max(0.0),
            Payoff::Shifted { base, shift } => base.eval(s, v) + shift,
            Payoff::Custom { f, .. } => f(s, v),
        }
    }

    /// Bounds `(inf φ, sup φ)`.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Payoff::Constant { value } => (*value, *value),
            Payoff::CappedCall { cap, .. } => (0.0, *cap),
            Payoff::Put { strike } => (0.0, *strike),
            Payoff::Shifted { base, shift } => {
                let (lo, hi) = base.range();
                (lo + shift, hi + shift)
            }
            Payoff::Custom { sup, .. } => (0.0, *sup),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Payoff::CappedCall { strike, cap } if !(*strike >= 0.0 && *cap >= 0.0 && cap.is_finite()) => {
                domain(format!("capped call needs strike ≥ 0 and finite cap ≥ 0, got K={strike} cap={cap}"))
            }
            Payoff::Put { strike } if !(*strike >= 0.0 && strike.is_finite()) => {
                domain(format!("put strike must be finite and non-negative, got {strike}"))
            }
            Payoff::Shifted { base, .. } => base.validate().and_then(|_| self.check_range()),
            Payoff::Custom { sup, .. } if !(sup.is_finite() && *sup >= 0.0) => {
                domain("custom payoff needs a finite non-negative bound")
            }
            _ => self.check_range(),
        }
    }

    fn check_range(&self) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo >= 0.0 && hi.is_finite()) {
            return domain(format!("payoff must be non-negative and bounded, range [{lo}, {hi}]"));
        }
        Ok(())
    }
}

fn default_one() -> TimeFn {
    TimeFn::constant(1.0)
}

/// Deterministic market specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub r_hat: TimeFn,
    pub c_plus: TimeFn,
    pub c_minus: TimeFn,
    pub f_plus: TimeFn,
    pub f_minus: TimeFn,
    pub h_plus: TimeFn,
    pub h_minus: TimeFn,
    /// Collateral fraction α.
    #[serde(default = "default_one")]
    pub alpha_frac: TimeFn,
    /// Close-out fraction β.
    #[serde(default = "default_one")]
    pub beta_frac: TimeFn,
    #[serde(default)]
    pub lgd_investor: f64,
    #[serde(default)]
    pub lgd_counterparty: f64,
    #[serde(default)]
    pub investor_is_bank: bool,
    #[serde(default)]
    pub dividend: Dividend,
    #[serde(default)]
    pub hedge: Hedge,
    pub payoff: Payoff,
    #[serde(default = "DefaultSpec::default_free")]
    pub defaults: DefaultSpec,
}

impl MarketSpec {
    /// All rates equal to `r`, full collateral and close-out, no defaults.
    pub fn risk_free(r: TimeFn, payoff: Payoff) -> Self {
        MarketSpec {
            c_plus: r.clone(),
            c_minus: r.clone(),
            f_plus: r.clone(),
            f_minus: r.clone(),
            h_plus: r.clone(),
            h_minus: r.clone(),
            r_hat: r,
            alpha_frac: default_one(),
            beta_frac: default_one(),
            lgd_investor: 0.0,
            lgd_counterparty: 0.0,
            investor_is_bank: false,
            dividend: Dividend::default(),
            hedge: Hedge::Zero,
            payoff,
            defaults: DefaultSpec::default_free(),
        }
    }

    /// Zero rates, no defaults, no dividends: `B̂ ≡ 0`.
    pub fn zero(payoff: Payoff) -> Self {
        MarketSpec::risk_free(TimeFn::zero(), payoff)
    }

    fn time_fns(&self) -> [(&'static str, &TimeFn); 9] {
        [
            ("r_hat", &self.r_hat),
            ("c_plus", &self.c_plus),
            ("c_minus", &self.c_minus),
            ("f_plus", &self.f_plus),
            ("f_minus", &self.f_minus),
            ("h_plus", &self.h_plus),
            ("h_minus", &self.h_minus),
            ("alpha_frac", &self.alpha_frac),
            ("beta_frac", &self.beta_frac),
        ]
    }

    /// Checks ordering `0 ≤ α ≤ β ≤ 1`, LGD bounds, payoff bounds and the
    /// default model on `[0, horizon]`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        for (name, f) in self.time_fns() {
            if let Err(e) = f.validate() {
                return domain(format!("market.{name}: {e}"));
            }
        }
        for (name, f) in [("alpha_frac", &self.alpha_frac), ("beta_frac", &self.beta_frac)] {
            if matches!(f, TimeFn::Shaped(crate::timefn::Shape::Piecewise { .. })) && !f.is_constant() {
                return domain(format!("market.{name}: fractions must be continuous in time"));
            }
        }
        // piecewise breaks plus a dense sample catch ordering violations
        let mut probes: Vec<f64> = (0..=2000).map(|i| horizon * i as f64 / 2000.0).collect();
        for f in [&self.alpha_frac, &self.beta_frac] {
            if let TimeFn::Shaped(crate::timefn::Shape::Piecewise { breaks, .. }) = f {
                probes.extend(breaks.iter().filter(|b| **b <= horizon));
            }
        }
        for t in probes {
            let (a, b) = (self.alpha_frac.eval(t), self.beta_frac.eval(t));
            if !(0.0 <= a && a <= b && b <= 1.0) {
                return domain(format!(
                    "market.alpha_frac/beta_frac: need 0 ≤ α ≤ β ≤ 1, got α={a}, β={b} at t={t}"
                ));
            }
        }
        for (name, l) in [("lgd_investor", self.lgd_investor), ("lgd_counterparty", self.lgd_counterparty)] {
            if !(0.0..=1.0).contains(&l) {
                return domain(format!("market.{name}: must lie in [0, 1], got {l}"));
            }
        }
        if let Dividend::Deterministic(g) = &self.dividend {
            if let Err(e) = g.validate() {
                return domain(format!("market.dividend: {e}"));
            }
        }
        if let Hedge::DeltaProportional { delta } = self.hedge {
            if !delta.is_finite() {
                return domain("market.hedge.delta must be finite");
            }
        }
        self.payoff
            .validate()
            .map_err(|e| XvaError::Domain(format!("market.payoff: {e}")))?;
        self.defaults
            .validate(horizon)
            .map_err(|e| XvaError::Domain(format!("market.defaults: {e}")))
    }

    /// Time-dependent coefficients of `B̂` at `t`.
    pub fn coefficients_at(&self, t: f64) -> Result<DriverCoefficients> {
        let (a, b) = (self.alpha_frac.eval(t), self.beta_frac.eval(t));
        let r = self.r_hat.eval(t);
        let inv = &self.defaults.investor;
        let cpt = &self.defaults.counterparty;
        Ok(DriverCoefficients {
            t,
            r,
            k_plus: self.c_plus.eval(t) * a + self.f_plus.eval(t) * (1.0 - a),
            k_minus: self.c_minus.eval(t) * a + self.f_minus.eval(t) * (1.0 - a),
            rh_plus: r - self.h_plus.eval(t),
            rh_minus: r - self.h_minus.eval(t),
            g_investor: inv.log_survival_rate(t)?,
            g_counterparty: cpt.log_survival_rate(t)?,
            survival: inv.survival(t)? * cpt.survival(t)?,
            one_minus_alpha: 1.0 - a,
            one_minus_beta: 1.0 - b,
            beta_minus_alpha: b - a,
            lgd_investor: if self.investor_is_bank { self.lgd_investor } else { 0.0 },
            lgd_counterparty: self.lgd_counterparty,
            dividend: self.dividend.time_only().map(|g| g.eval(t)),
        })
    }

    pub fn coefficient_table(&self, times: &[f64]) -> Result<Vec<DriverCoefficients>> {
        times.iter().map(|t| self.coefficients_at(*t)).collect()
    }

    /// If `B̂(t, s, v, y) = a(t) + m(t) y` exactly, returns `(a, m)` at `t`.
    pub fn affine_at(&self, t: f64) -> Result<Option<(f64, f64)>> {
        let c = self.coefficients_at(t)?;
        let delta = match self.hedge {
            Hedge::Zero => 0.0,
            Hedge::DeltaProportional { delta } => delta,
            Hedge::Custom { .. } => return Ok(None),
        };
        let Some(a) = c.dividend else { return Ok(None) };
        let (sp, sm) = c.slopes(delta);
        if (sp - sm).abs() > 1e-14 * (1.0 + sp.abs()) {
            return Ok(None);
        }
        Ok(Some((a, sp)))
    }

    /// Lipschitz constant of `y ↦ B̂(t, s, v, y)`.
    pub fn lipschitz_at(&self, t: f64) -> Result<f64> {
        let c = self.coefficients_at(t)?;
        Ok(match self.hedge {
            Hedge::Zero => {
                let (sp, sm) = c.slopes(0.0);
                sp.abs().max(sm.abs())
            }
            Hedge::DeltaProportional { delta } => {
                let (sp, sm) = c.slopes(delta);
                sp.abs().max(sm.abs())
            }
            Hedge::Custom { lipschitz, .. } => {
                let (sp, sm) = c.slopes(0.0);
                sp.abs().max(sm.abs()) + c.rh_plus.abs().max(c.rh_minus.abs()) * lipschitz
            }
        })
    }

    /// Affine growth constant `c(t)` with `|B̂(t, ·, ·, y)| ≤ c(t)(1 + |y|)`.
    pub fn growth_at(&self, t: f64, horizon: f64) -> Result<f64> {
        let c = self.coefficients_at(t)?;
        let pi = match &self.dividend {
            Dividend::Deterministic(g) => g.eval(t).abs(),
            Dividend::Custom { bound, .. } => {
                let _ = horizon;
                *bound
            }
        };
        let hedge0 = match &self.hedge {
            Hedge::Custom { growth, .. } => c.rh_plus.abs().max(c.rh_minus.abs()) * growth,
            _ => 0.0,
        };
        Ok((pi + hedge0).max(self.lipschitz_at(t)?))
    }
}

/// `B̂` with its time-dependent coefficients frozen at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriverCoefficients {
    pub t: f64,
    pub r: f64,
    /// `ĉ₊α + f̂₊(1−α)`
    pub k_plus: f64,
    /// `ĉ₋α + f̂₋(1−α)`
    pub k_minus: f64,
    /// `r̂ − ĥ₊`
    pub rh_plus: f64,
    /// `r̂ − ĥ₋`
    pub rh_minus: f64,
    /// `g_I = Ġ(τ_I)/G(τ_I)`
    pub g_investor: f64,
    /// `g_C = Ġ(τ_C)/G(τ_C)`
    pub g_counterparty: f64,
    /// `G_t(τ) = G_t(τ_I) G_t(τ_C)`
    pub survival: f64,
    pub one_minus_alpha: f64,
    pub one_minus_beta: f64,
    pub beta_minus_alpha: f64,
    /// `LGD_I` if the investor is a bank, else 0.
    pub lgd_investor: f64,
    pub lgd_counterparty: f64,
    /// `π̂(t)` when the dividend depends on time only.
    pub dividend: Option<f64>,
}

impl DriverCoefficients {
    /// `B̂(t, s, v, y)` given the hedge value `Ĥ(t, s, v, y)` and dividend.
    #[inline]
    pub fn eval_with(&self, pi: f64, hedge: f64, y: f64) -> f64 {
        let yp = y.max(0.0);
        let ym = (-y).max(0.0);
        pi - self.k_plus * yp + self.k_minus * ym - self.rh_plus * hedge.max(0.0)
            + self.rh_minus * (-hedge).max(0.0)
            + self.g_investor
                * (self.one_minus_beta * y
                    - self.lgd_investor * (self.beta_minus_alpha * ym + self.one_minus_alpha * yp))
            + self.g_counterparty * (self.one_minus_beta * y + self.lgd_counterparty * self.beta_minus_alpha * yp)
    }

    #[inline]
    pub fn eval(&self, spec: &MarketSpec, s: f64, v: f64, y: f64) -> f64 {
        let pi = match self.dividend {
            Some(p) => p,
            None => spec.dividend.eval(self.t, s, v),
        };
        let h = spec.hedge.eval(self.t, s, v, y);
        self.eval_with(pi, h, y)
    }

    /// Slopes of `y ↦ B̂` on `y > 0` and `y < 0` for `Ĥ = δ y`.
    pub fn slopes(&self, delta: f64) -> (f64, f64) {
        let (dp, dm) = (delta.max(0.0), (-delta).max(0.0));
        let plus = -self.k_plus - self.rh_plus * dp + self.rh_minus * dm
            + self.g_investor * (self.one_minus_beta - self.lgd_investor * self.one_minus_alpha)
            + self.g_counterparty * (self.one_minus_beta + self.lgd_counterparty * self.beta_minus_alpha);
        let minus = -self.k_minus + self.rh_plus * dm - self.rh_minus * dp
            + self.g_investor * (self.one_minus_beta + self.lgd_investor * self.beta_minus_alpha)
            + self.g_counterparty * self.one_minus_beta;
        (plus, minus)
    }

    /// `Ȧ_t = G_t(τ) (B̂ + (r̂ − g_I − g_C) y)`.
    #[inline]
    pub fn a_rate(&self, b_hat: f64, y: f64) -> f64 {
        self.survival * (b_hat + (self.r - self.g_investor - self.g_counterparty) * y)
    }
}

/// `D_{s,t} = exp(−∫_s^t r)`, and `1` when `s > t`.
pub fn discount(r: &TimeFn, s: f64, t: f64) -> f64 {
    if s > t {
        1.0
    } else {
        (-r.integral(s, t)).exp()
    }
}

fn check_state(s: f64, v: f64) -> Result<()> {
    if !(s > 0.0) {
        return domain(format!("price must be positive, got {s}"));
    }
    if !(v > 0.0) {
        return domain(format!("variance must be positive, got {v}"));
    }
    Ok(())
}

/// `B̂(t, s, v, y)`.
pub fn driver(spec: &MarketSpec, t: f64, s: f64, v: f64, y: f64) -> Result<f64> {
    check_state(s, v)?;
    Ok(spec.coefficients_at(t)?.eval(spec, s, v, y))
}

/// Density `Ȧ_t(y) = G_t(τ)(B̂(t,s,v,y) + (r̂ − g_I − g_C)(t) y)` of the
/// finite-variation process.
pub fn a_process_increment(spec: &MarketSpec, t: f64, s: f64, v: f64, y: f64) -> Result<f64> {
    check_state(s, v)?;
    let c = spec.coefficients_at(t)?;
    Ok(c.a_rate(c.eval(spec, s, v, y), y))
}

/// Pointwise check of the interval condition on `B̂` over a grid:
/// `B̂(·, e^x, v, lower) ≥ 0` and `B̂(·, e^x, v, upper) ≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    pub holds: bool,
    /// `min B̂(·, ·, ·, lower)` over the probes.
    pub min_at_lower: Option<f64>,
    /// `max B̂(·, ·, ·, upper)` over the probes.
    pub max_at_upper: Option<f64>,
}

pub fn check_boundary_condition(
    spec: &MarketSpec,
    lower: Option<f64>,
    upper: Option<f64>,
    times: &[f64],
    x_nodes: &[f64],
    v_nodes: &[f64],
) -> Result<BoundaryReport> {
    let mut min_lo = lower.map(|_| f64::INFINITY);
    let mut max_hi = upper.map(|_| f64::NEG_INFINITY);
    for t in times {
        let c = spec.coefficients_at(*t)?;
        for x in x_nodes {
            for v in v_nodes {
                let s = x.exp();
                if let (Some(d), Some(m)) = (lower, min_lo.as_mut()) {
                    *m = m.min(c.eval(spec, s, *v, d));
                }
                if let (Some(d), Some(m)) = (upper, max_hi.as_mut()) {
                    *m = m.max(c.eval(spec, s, *v, d));
                }
            }
        }
    }
    Ok(BoundaryReport {
        holds: min_lo.is_none_or(|m| m >= 0.0) && max_hi.is_none_or(|m| m <= 0.0),
        min_at_lower: min_lo,
        max_at_upper: max_hi,
    })
}

/// `π̂ ≥ (r̂ − ĥ₊) Ĥ⁺(·, 0) − (r̂ − ĥ₋) Ĥ⁻(·, 0)` on a grid, i.e. `B̂(·, 0) ≥ 0`,
/// which keeps the valuation function non-negative.
pub fn check_non_negativity(spec: &MarketSpec, times: &[f64], x_nodes: &[f64], v_nodes: &[f64]) -> Result<bool> {
    Ok(check_boundary_condition(spec, Some(0.0), None, times, x_nodes, v_nodes)?.holds)
}

/// Mean increment of the pre-default martingale between two checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub checkpoint: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    /// `|mean| > 3 stderr`
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub rows: Vec<ResidualRow>,
    pub outside: u64,
    pub visited: u64,
    pub all_within: bool,
}

impl MartingaleReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "checkpoint,mean,stderr,n")?;
        for r in &self.rows {
            writeln!(w, "{:.16e},{:.16e},{:.16e},{}", r.checkpoint, r.mean, r.stderr, r.n)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest tolerated share of visited states outside the grid hull.
pub const COVERAGE_LIMIT: f64 = 0.01;

/// Simulates `(X, V)` under `model` and tests whether
/// `M_t = D_{0,t} u(t, X_t, V_t) G_t(τ) + ∫₀^t D_{0,s} dA_s` has zero-mean
/// increments between consecutive checkpoints. The value at the horizon is
/// the payoff itself. `checkpoints` are snapped to the nearest grid node.
#[allow(clippy::too_many_arguments)]
pub fn martingale_residual(
    spec: &MarketSpec,
    model: &VolModel,
    u: &GridFunction,
    start: StartPoint,
    grid: TimeGrid,
    checkpoints: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let nodes = grid.nodes();
    let horizon = grid.horizon;
    let table = spec.coefficient_table(&nodes)?;
    let disc: Vec<f64> = nodes.iter().map(|t| discount(&spec.r_hat, 0.0, *t)).collect();
    let mut marks: Vec<usize> = checkpoints
        .iter()
        .map(|c| (((c - grid.t0) / grid.dt()).round().max(0.0) as usize).min(grid.n_steps))
        .filter(|k| *k > 0)
        .collect();
    marks.sort_unstable();
    marks.dedup();
    if marks.is_empty() {
        return domain("martingale test needs at least one checkpoint after the start");
    }
    let marks_ref = &marks;
    let out = map_paths(model, start, grid, n_paths, seed, |_, x, v, _| {
        let mut outside = 0u64;
        let mut m_at = Vec::with_capacity(marks_ref.len() + 1);
        let mut integral = 0.0;
        let mut prev_rate = 0.0;
        let mut next_mark = 0;
        for k in 0..nodes.len() {
            let t = nodes[k];
            let s = x[k].exp();
            let inside = u.contains(x[k], v[k]);
            outside += (!inside) as u64;
            let y = if k == nodes.len() - 1 && t == horizon {
                spec.payoff.eval(s, v[k])
            } else {
                u.interpolate(t, x[k], v[k])
            };
            let c = &table[k];
            let rate = disc[k] * c.a_rate(c.eval(spec, s, v[k].max(f64::MIN_POSITIVE), y), y);
            if k > 0 {
                integral += 0.5 * (nodes[k] - nodes[k - 1]) * (rate + prev_rate);
            }
            prev_rate = rate;
            let m = disc[k] * y * c.survival + integral;
            if k == 0 {
                m_at.push(m);
            } else if next_mark < marks_ref.len() && marks_ref[next_mark] == k {
                m_at.push(m);
                next_mark += 1;
            }
        }
        (m_at, outside)
    })?;
    let total_visited = (out.values.len() - out.invalid) as u64 * nodes.len() as u64;
    let outside: u64 = out.valid().map(|r| r.1).sum();
    if outside as f64 > COVERAGE_LIMIT * total_visited as f64 {
        return Err(XvaError::Coverage {
            outside,
            visited: total_visited,
        });
    }
    let mut rows = Vec::with_capacity(marks.len());
    for (j, k) in marks.iter().enumerate() {
        let incs: Vec<f64> = out.valid().map(|(m, _)| m[j + 1] - m[j]).collect();
        let n = incs.len();
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        let stderr = (var / n as f64).sqrt();
        let scale = incs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        rows.push(ResidualRow {
            checkpoint: nodes[*k],
            mean,
            stderr,
            n,
            rejected: mean.abs() > 3.0 * stderr + 1e-12 * scale.max(1e-300),
        });
    }
    let all_within = rows.iter().all(|r| !r.rejected);
    Ok(MartingaleReport {
        rows,
        outside,
        visited: total_visited,
        all_within,
    })
}
