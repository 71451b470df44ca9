//! Coefficients of the two-dimensional stochastic volatility model
//!
//! ```text
//! dS = b(t) S dt + θ(t, V) S dŴ
//! dV = ζ(t, V) dt + η(t, V) dW̃,      d⟨Ŵ, W̃⟩ = ρ(t) dt
//! ```
//!
//! together with the power-function family
//! `ζ = k − l₀v + Σ lᵢ (v⁺)^{αᵢ}`, `η = Σ λᵢ |v|^{βᵢ}`, `θ = θ̂₀ + θ̂ |v|^{1/2}`
//! (Black–Scholes, Heston and Garch diffusion are special cases) and the
//! change to a pricing measure with market price of volatility risk `γ`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{condition, domain, Result};
use crate::quad;
use crate::timefn::TimeFn;

/// Drift and diffusion coefficients of the variance equation and the price
/// volatility, defined on the whole real line in `v`.
pub trait VolCoefficients: Send + Sync + fmt::Debug {
    /// ζ(t, v)
    fn variance_drift(&self, t: f64, v: f64) -> f64;
    /// η(t, v)
    fn variance_vol(&self, t: f64, v: f64) -> f64;
    /// θ(t, v)
    fn price_vol(&self, t: f64, v: f64) -> f64;

    /// Linear-growth data for the moment estimates, if known.
    fn growth_bounds(&self) -> Option<GrowthBounds> {
        None
    }

    /// Whether `η(t, v)·θ(t, v) ≥ 0` for all `v ≥ 0`.
    fn vol_product_non_negative(&self) -> bool {
        false
    }
}

/// `sgn(v) ζ(·, v) ≤ k_ζ + l_ζ |v|` and `|θ(·, v)| ≤ k_θ + λ_θ |v|^{1/2}`.
#[derive(Debug, Clone)]
pub struct GrowthBounds {
    pub k_zeta: TimeFn,
    pub l_zeta: TimeFn,
    pub k_theta: TimeFn,
    pub lambda_theta: TimeFn,
}

/// Declared regularity of `θ`, needed before a measure change with `γ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegularityFlags {
    /// θ is continuous.
    pub price_vol_continuous: bool,
    /// θ(·, 0) = 0.
    pub price_vol_vanishes_at_zero: bool,
    /// θ and η are non-negative and increasing on `v ≥ 0` with η(·, 0) = 0,
    /// which suffices for the ordering inequalities on `η·θ`.
    pub vol_product_monotone: bool,
}

/// Coefficient bundle of the simulated pair `(X, V) = (log S, V)`.
#[derive(Clone)]
pub struct VolModel {
    pub drift_b: TimeFn,
    pub correlation: TimeFn,
    coefficients: Arc<dyn VolCoefficients>,
    risk_premium: f64,
    flags: RegularityFlags,
}

impl fmt::Debug for VolModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VolModel")
            .field("drift_b", &self.drift_b)
            .field("correlation", &self.correlation)
            .field("coefficients", &self.coefficients)
            .field("risk_premium", &self.risk_premium)
            .field("flags", &self.flags)
            .finish()
    }
}

impl VolModel {
    /// Wraps user coefficients. `flags` are taken on trust.
    pub fn new(
        drift_b: TimeFn,
        correlation: TimeFn,
        coefficients: Arc<dyn VolCoefficients>,
        flags: RegularityFlags,
    ) -> Result<Self> {
        if let Err(e) = drift_b.validate() {
            return domain(format!("drift b: {e}"));
        }
        if let Err(e) = correlation.validate() {
            return domain(format!("correlation: {e}"));
        }
        Ok(VolModel {
            drift_b,
            correlation,
            coefficients,
            risk_premium: 0.0,
            flags,
        })
    }

    /// Checks `|ρ| < 1` on `[t0, t1]` and that `∫ (1 − ρ²)^{-1}` is finite.
    pub fn validate_on(&self, t0: f64, t1: f64) -> Result<f64> {
        let (lo, hi) = self.correlation.range_on(t0, t1);
        if !(lo > -1.0 && hi < 1.0) {
            return condition(
                "correlation",
                format!("correlation must lie in (-1, 1) on [{t0}, {t1}], found range [{lo}, {hi}]"),
            );
        }
        let rho = self.correlation.clone();
        let integral = quad::integrate(|t| 1.0 / (1.0 - rho.eval(t).powi(2)), t0, t1, 1e-12, 1e-10).value;
        if !integral.is_finite() {
            return condition("correlation", "∫(1-ρ²)^{-1} diverges");
        }
        Ok(integral)
    }

    pub fn flags(&self) -> RegularityFlags {
        self.flags
    }

    /// Accumulated market price of volatility risk γ.
    pub fn risk_premium(&self) -> f64 {
        self.risk_premium
    }

    pub fn coefficients(&self) -> &Arc<dyn VolCoefficients> {
        &self.coefficients
    }

    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        self.correlation.eval(t)
    }

    #[inline]
    pub fn price_vol(&self, t: f64, v: f64) -> f64 {
        self.coefficients.price_vol(t, v)
    }

    #[inline]
    pub fn variance_vol(&self, t: f64, v: f64) -> f64 {
        self.coefficients.variance_vol(t, v)
    }

    /// Drift of the variance after the measure change: `ζ − γ η̂ θ̂` with
    /// `η̂(t, v) = η(t, v⁺)`, `θ̂(t, v) = θ(t, v⁺)`.
    #[inline]
    pub fn variance_drift(&self, t: f64, v: f64) -> f64 {
        let zeta = self.coefficients.variance_drift(t, v);
        if self.risk_premium == 0.0 {
            zeta
        } else {
            let vp = v.max(0.0);
            zeta - self.risk_premium * self.coefficients.variance_vol(t, vp) * self.coefficients.price_vol(t, vp)
        }
    }

    /// Drift of the log-price `b − θ²/2`, given `b(t)` already evaluated.
    #[inline]
    pub fn log_drift_with(&self, b: f64, t: f64, v: f64) -> f64 {
        let th = self.price_vol(t, v);
        b - 0.5 * th * th
    }

    /// Growth data of the current coefficients (after any measure change).
    pub fn growth_bounds(&self) -> Option<GrowthBounds> {
        if self.risk_premium > 0.0 && !self.coefficients.vol_product_non_negative() {
            return None;
        }
        self.coefficients.growth_bounds()
    }
}

/// Replaces the drift pair `(b, ζ)` by `(r̂, ζ − γ η̂ θ̂)`; diffusion
/// coefficients are unchanged.
pub fn measure_change(model: &VolModel, rate: &TimeFn, gamma: f64) -> Result<VolModel> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return domain(format!("market price of risk γ must be a non-negative real, got {gamma}"));
    }
    if gamma > 0.0 && !(model.flags.price_vol_continuous && model.flags.price_vol_vanishes_at_zero) {
        return condition(
            "measure change regularity",
            "γ > 0 requires θ continuous with θ(·, 0) = 0",
        );
    }
    if let Err(e) = rate.validate() {
        return domain(format!("rate: {e}"));
    }
    let mut out = model.clone();
    out.drift_b = rate.clone();
    out.risk_premium = model.risk_premium + gamma;
    Ok(out)
}

/// Parameters of the power-function family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    pub k: TimeFn,
    pub l0: TimeFn,
    /// Loadings `lᵢ ≤ 0` of `(v⁺)^{αᵢ}` in the drift.
    #[serde(default)]
    pub l: Vec<TimeFn>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Loadings `λᵢ` of `|v|^{βᵢ}` in the variance diffusion.
    #[serde(default)]
    pub lambda: Vec<TimeFn>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub theta0: TimeFn,
    pub theta1: TimeFn,
}

impl PowerModel {
    /// `θ̂₀ = k = l₀ = λ = 0`, `θ̂ = 1`: the variance stays at `v₀`.
    pub fn black_scholes() -> Self {
        PowerModel {
            k: TimeFn::zero(),
            l0: TimeFn::zero(),
            l: vec![TimeFn::zero()],
            alpha: vec![1.0],
            lambda: vec![TimeFn::zero()],
            beta: vec![0.5],
            theta0: TimeFn::zero(),
            theta1: TimeFn::constant(1.0),
        }
    }

    /// Square-root variance `dV = (k − l₀V) dt + λ √V dW̃`.
    pub fn heston(k: f64, l0: f64, lambda: f64) -> Self {
        PowerModel {
            k: TimeFn::constant(k),
            l0: TimeFn::constant(l0),
            l: vec![TimeFn::zero()],
            alpha: vec![1.0],
            lambda: vec![TimeFn::constant(lambda)],
            beta: vec![0.5],
            theta0: TimeFn::zero(),
            theta1: TimeFn::constant(1.0),
        }
    }

    /// Garch diffusion `dV = (k − l₀V) dt + λ V dW̃`.
    pub fn garch(k: f64, l0: f64, lambda: f64) -> Self {
        PowerModel {
            beta: vec![1.0],
            ..PowerModel::heston(k, l0, lambda)
        }
    }

    fn time_fns(&self) -> impl Iterator<Item = (&'static str, &TimeFn)> {
        [("k", &self.k), ("l0", &self.l0), ("theta0", &self.theta0), ("theta1", &self.theta1)]
            .into_iter()
            .chain(self.l.iter().map(|f| ("l", f)))
            .chain(self.lambda.iter().map(|f| ("lambda", f)))
    }

    /// Sign and range conditions other than the positivity (Feller-type)
    /// inequality.
    pub fn validate_structure(&self, t0: f64, horizon: f64) -> Result<()> {
        for (name, f) in self.time_fns() {
            if let Err(e) = f.validate() {
                return domain(format!("{name}: {e}"));
            }
        }
        if self.l.len() != self.alpha.len() {
            return domain(format!("l has {} entries but alpha has {}", self.l.len(), self.alpha.len()));
        }
        if self.lambda.len() != self.beta.len() {
            return domain(format!(
                "lambda has {} entries but beta has {}",
                self.lambda.len(),
                self.beta.len()
            ));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a >= 1.0 && a.is_finite())) {
            return condition("drift exponents", format!("every alpha must lie in [1, ∞), got {a}"));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b >= 0.5 && b.is_finite())) {
            return condition("diffusion exponents", format!("every beta must lie in [1/2, ∞), got {b}"));
        }
        let (k_min, _) = self.k.range_on(t0, horizon);
        if k_min < 0.0 {
            return condition("drift level", format!("k must be non-negative, inf k = {k_min}"));
        }
        for (i, li) in self.l.iter().enumerate() {
            let (_, hi) = li.range_on(t0, horizon);
            if hi > 0.0 {
                return condition("one-sided drift", format!("l[{i}] must be non-positive, sup = {hi}"));
            }
        }
        Ok(())
    }

    /// Feller-type positivity test of the variance.
    pub fn check_positivity(&self, t0: f64, horizon: f64) -> PositivityReport {
        let lambda_sum: f64 = self.lambda.iter().map(|f| f.sup_abs_on(t0, horizon)).sum();
        let (k_inf, _) = self.k.range_on(t0, horizon);
        let gamma_star = self.beta.iter().copied().fold(f64::INFINITY, f64::min);
        let lhs_base = lambda_sum * lambda_sum;
        if lambda_sum == 0.0 || gamma_star >= 1.0 {
            return PositivityReport {
                holds: k_inf >= 0.0,
                gamma_star,
                witness: if lambda_sum == 0.0 {
                    "no variance diffusion: k ≥ 0 suffices".into()
                } else {
                    "γ* ≥ 1: k ≥ 0 suffices".into()
                },
                lhs: 0.0,
                rhs: k_inf,
                delta: None,
            };
        }
        if gamma_star == 0.5 {
            let lhs = 0.5 * lhs_base;
            return PositivityReport {
                holds: lhs <= k_inf,
                gamma_star,
                witness: "γ* = 1/2: (Σ sup|λᵢ|)²/2 ≤ inf k".into(),
                lhs,
                rhs: k_inf,
                delta: None,
            };
        }
        let found = (-3..=3).map(|j| 10f64.powi(j)).find(|d| lhs_base * d <= k_inf);
        let delta = found.unwrap_or(1e-3);
        PositivityReport {
            holds: found.is_some(),
            gamma_star,
            witness: "γ* ∈ (1/2, 1): (Σ sup|λᵢ|)²·δ ≤ inf k for some δ ∈ {1e-3, …, 1e3}".into(),
            lhs: lhs_base * delta,
            rhs: k_inf,
            delta: Some(delta),
        }
    }

    fn flags(&self) -> RegularityFlags {
        let continuous = [&self.theta0, &self.theta1]
            .iter()
            .all(|f| matches!(f, TimeFn::Constant(_)) || f.is_constant() || matches!(f, TimeFn::Shaped(crate::timefn::Shape::Linear { .. })));
        let theta0_zero = matches!(self.theta0, TimeFn::Constant(c) if c == 0.0);
        RegularityFlags {
            price_vol_continuous: continuous,
            price_vol_vanishes_at_zero: theta0_zero,
            vol_product_monotone: self.is_non_negative_family(),
        }
    }

    fn is_non_negative_family(&self) -> bool {
        let nonneg = |f: &TimeFn| match f {
            TimeFn::Custom(_) => false,
            _ => f.range_on(-1e300, 1e300).0 >= 0.0 || f.range_on(0.0, 1e6).0 >= 0.0,
        };
        nonneg(&self.theta0) && nonneg(&self.theta1) && self.lambda.iter().all(nonneg)
    }
}

/// Outcome of [`check_positivity`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub holds: bool,
    /// `min βᵢ`
    pub gamma_star: f64,
    /// The inequality that was tested.
    pub witness: String,
    pub lhs: f64,
    pub rhs: f64,
    pub delta: Option<f64>,
}

/// See [`PowerModel::check_positivity`].
pub fn check_positivity(params: &PowerModel, t0: f64, horizon: f64) -> PositivityReport {
    params.check_positivity(t0, horizon)
}

/// Builds the coefficient bundle of the power family after validating the
/// sign, exponent and positivity conditions on `[t0, horizon]`.
pub fn build_power_model(
    params: &PowerModel,
    drift_b: TimeFn,
    correlation: TimeFn,
    t0: f64,
    horizon: f64,
) -> Result<VolModel> {
    params.validate_structure(t0, horizon)?;
    let report = params.check_positivity(t0, horizon);
    if !report.holds {
        return condition(
            "variance positivity",
            format!("{} fails: {} > {}", report.witness, report.lhs, report.rhs),
        );
    }
    build_power_model_unchecked(params, drift_b, correlation)
}

/// Like [`build_power_model`] but skips the positivity inequality (sign and
/// exponent conditions are still enforced by the caller's choice).
pub fn build_power_model_unchecked(params: &PowerModel, drift_b: TimeFn, correlation: TimeFn) -> Result<VolModel> {
    let flags = params.flags();
    VolModel::new(drift_b, correlation, Arc::new(PowerCoefficients(params.clone())), flags)
}

#[derive(Debug)]
struct PowerCoefficients(PowerModel);

impl VolCoefficients for PowerCoefficients {
    #[inline]
    fn variance_drift(&self, t: f64, v: f64) -> f64 {
        let p = &self.0;
        let vp = v.max(0.0);
        let mut z = p.k.eval(t) - p.l0.eval(t) * vp;
        for (li, ai) in p.l.iter().zip(&p.alpha) {
            let c = li.eval(t);
            if c != 0.0 {
                z += c * if *ai == 1.0 { vp } else { vp.powf(*ai) };
            }
        }
        z
    }

    #[inline]
    fn variance_vol(&self, t: f64, v: f64) -> f64 {
        let p = &self.0;
        let av = v.abs();
        let mut e = 0.0;
        for (li, bi) in p.lambda.iter().zip(&p.beta) {
            let c = li.eval(t);
            if c != 0.0 {
                e += c * if *bi == 0.5 {
                    av.sqrt()
                } else if *bi == 1.0 {
                    av
                } else {
                    av.powf(*bi)
                };
            }
        }
        e
    }

    #[inline]
    fn price_vol(&self, t: f64, v: f64) -> f64 {
        self.0.theta0.eval(t) + self.0.theta1.eval(t) * v.abs().sqrt()
    }

    fn growth_bounds(&self) -> Option<GrowthBounds> {
        let p = &self.0;
        if p.l0.is_constant() && p.theta0.is_constant() && p.theta1.is_constant() {
            let l0 = p.l0.eval(0.0);
            Some(GrowthBounds {
                k_zeta: p.k.clone(),
                l_zeta: TimeFn::constant(-l0),
                k_theta: TimeFn::constant(p.theta0.eval(0.0).abs()),
                lambda_theta: TimeFn::constant(p.theta1.eval(0.0).abs()),
            })
        } else {
            let l0 = p.l0.clone();
            let t0 = p.theta0.clone();
            let t1 = p.theta1.clone();
            Some(GrowthBounds {
                k_zeta: p.k.clone(),
                l_zeta: TimeFn::custom(move |t| -l0.eval(t)),
                k_theta: TimeFn::custom(move |t| t0.eval(t).abs()),
                lambda_theta: TimeFn::custom(move |t| t1.eval(t).abs()),
            })
        }
    }

    fn vol_product_non_negative(&self) -> bool {
        self.0.is_non_negative_family()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn heston_model(k: f64, l0: f64, lambda: f64) -> VolModel {
        build_power_model(&PowerModel::heston(k, l0, lambda), TimeFn::zero(), TimeFn::constant(-0.5), 0.0, 1.0)
            .unwrap()
    }

    #[test]
    fn black_scholes_preset_freezes_variance() {
        let m = build_power_model(&PowerModel::black_scholes(), TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
        for v in [0.01, 0.04, 1.0] {
            assert_eq!(m.variance_drift(0.3, v), 0.0);
            assert_eq!(m.variance_vol(0.3, v), 0.0);
            assert!((m.price_vol(0.3, v) - v.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn heston_and_garch_coefficients() {
        let h = heston_model(0.08, 2.0, 0.3);
        for v in [0.01, 0.04, 0.3] {
            assert!((h.variance_drift(0.0, v) - (0.08 - 2.0 * v)).abs() < 1e-15);
            assert!((h.variance_vol(0.0, v) - 0.3 * v.sqrt()).abs() < 1e-15);
        }
        // below zero the drift is frozen at its value in zero and η uses |v|
        assert_eq!(h.variance_drift(0.0, -0.5), 0.08);
        assert!((h.variance_vol(0.0, -0.04) - 0.06).abs() < 1e-15);

        let g = build_power_model(&PowerModel::garch(0.08, 2.0, 0.5), TimeFn::zero(), TimeFn::zero(), 0.0, 1.0)
            .unwrap();
        assert!((g.variance_vol(0.0, 0.2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn positivity_cases() {
        let ok = PowerModel::heston(0.08, 2.0, 0.3);
        assert!(ok.check_positivity(0.0, 1.0).holds);
        let bad = PowerModel::heston(0.02, 2.0, 0.3);
        let r = bad.check_positivity(0.0, 1.0);
        assert!(!r.holds);
        assert!((r.lhs - 0.045).abs() < 1e-15);
        assert!(build_power_model(&bad, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).is_err());

        let garch = PowerModel::garch(0.0, 1.0, 5.0);
        assert!(garch.check_positivity(0.0, 1.0).holds);

        let mut mid = PowerModel::heston(0.01, 1.0, 1.0);
        mid.beta = vec![0.75];
        let r = mid.check_positivity(0.0, 1.0);
        assert!(r.holds);
        assert_eq!(r.delta, Some(1e-3));
        mid.k = TimeFn::constant(1e-4);
        assert!(!mid.check_positivity(0.0, 1.0).holds);
    }

    #[test]
    fn structural_violations_are_named() {
        let mut p = PowerModel::heston(0.08, 2.0, 0.3);
        p.l = vec![TimeFn::constant(0.1)];
        let err = build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("one-sided drift"), "{err}");

        let mut p = PowerModel::heston(-0.1, 2.0, 0.0);
        p.lambda = vec![TimeFn::zero()];
        assert!(build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0)
            .unwrap_err()
            .to_string()
            .contains("drift level"));

        let mut p = PowerModel::heston(0.08, 2.0, 0.3);
        p.beta = vec![0.4];
        assert!(build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).is_err());
    }

    #[test]
    fn correlation_bounds() {
        let m = heston_model(0.08, 2.0, 0.3);
        let integral = m.validate_on(0.0, 1.0).unwrap();
        assert!((integral - 1.0 / 0.75).abs() < 1e-10);
        let mut bad = m.clone();
        bad.correlation = TimeFn::constant(1.0);
        assert!(bad.validate_on(0.0, 1.0).is_err());
    }

    #[test]
    fn measure_change_on_heston() {
        let h = heston_model(0.08, 2.0, 0.3);
        let q = measure_change(&h, &TimeFn::constant(0.05), 0.5).unwrap();
        assert_eq!(q.drift_b, TimeFn::constant(0.05));
        for t in [0.0, 0.5, 1.0] {
            for v in [0.001, 0.04, 0.2, 1.3] {
                // k − (l₀ + γ λ θ̂) v
                let hand = 0.08 - (2.0 + 0.5 * 0.3 * 1.0) * v;
                assert!((q.variance_drift(t, v) - hand).abs() < 1e-14);
                assert_eq!(q.variance_vol(t, v), h.variance_vol(t, v));
                assert_eq!(q.price_vol(t, v), h.price_vol(t, v));
            }
        }
        let zero = measure_change(&h, &TimeFn::constant(0.05), 0.0).unwrap();
        assert_eq!(zero.variance_drift(0.3, 0.1), h.variance_drift(0.3, 0.1));

        let twice = measure_change(&q, &TimeFn::constant(0.05), 0.0).unwrap();
        for v in [0.01, 0.5] {
            assert_eq!(twice.variance_drift(0.2, v), q.variance_drift(0.2, v));
        }
        assert_eq!(twice.drift_b, q.drift_b);
    }

    #[test]
    fn measure_change_requires_regular_theta() {
        let mut p = PowerModel::heston(0.08, 2.0, 0.3);
        p.theta0 = TimeFn::constant(0.1);
        let m = build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
        assert!(measure_change(&m, &TimeFn::constant(0.05), 0.0).is_ok());
        assert!(measure_change(&m, &TimeFn::constant(0.05), 0.2).is_err());
        assert!(measure_change(&m, &TimeFn::constant(0.05), -0.2).is_err());
    }

    proptest! {
        #[test]
        fn one_sided_lipschitz_drift(v in 1e-6f64..5.0, w in 1e-6f64..5.0, l1 in -3.0f64..0.0, a1 in 1.0f64..3.0) {
            let mut p = PowerModel::heston(0.1, 1.5, 0.2);
            p.l = vec![TimeFn::constant(l1)];
            p.alpha = vec![a1];
            let m = build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
            let lhs = (v - w).signum() * (m.variance_drift(0.0, v) - m.variance_drift(0.0, w));
            prop_assert!(lhs <= -1.5 * (v - w).abs() + 1e-12);
        }

        #[test]
        fn price_vol_sublinear(v in 0.0f64..10.0, th0 in 0.0f64..0.5, th1 in 0.0f64..2.0) {
            let mut p = PowerModel::heston(0.1, 1.5, 0.2);
            p.theta0 = TimeFn::constant(th0);
            p.theta1 = TimeFn::constant(th1);
            let m = build_power_model(&p, TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
            let b = m.growth_bounds().unwrap();
            prop_assert!(m.price_vol(0.0, v).abs() <= b.k_theta.eval(0.0) + b.lambda_theta.eval(0.0) * v.sqrt() + 1e-12);
        }

        #[test]
        fn measure_change_idempotent_in_b(r in -0.1f64..0.2, g in 0.0f64..2.0, v in 0.0f64..3.0) {
            let h = heston_model(0.08, 2.0, 0.3);
            let rate = TimeFn::constant(r);
            let once = measure_change(&h, &rate, g).unwrap();
            let again = measure_change(&once, &rate, 0.0).unwrap();
            prop_assert_eq!(once.drift_b.eval(0.3), again.drift_b.eval(0.3));
            prop_assert_eq!(once.variance_drift(0.3, v), again.variance_drift(0.3, v));
        }
    }
}
