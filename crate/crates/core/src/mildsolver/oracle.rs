//! Closed-form and semi-closed-form reference values.

use serde::Serialize;

use crate::error::{domain, Result};
use crate::quad::integrate;
use crate::simulate::{map_paths, StartPoint, TimeGrid};
use crate::valuation::MarketSpec;
use crate::volmodel::VolModel;

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black–Scholes price of a European call.
pub fn bs_call(spot: f64, strike: f64, rate: f64, sigma: f64, tau: f64) -> f64 {
    let df = (-rate * tau).exp();
    if tau <= 0.0 || sigma <= 0.0 {
        return (spot - strike * df).max(0.0);
    }
    if strike <= 0.0 {
        return spot - strike * df;
    }
    let sd = sigma * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * tau) / sd;
    spot * norm_cdf(d1) - strike * df * norm_cdf(d1 - sd)
}

/// `e^{−rτ} E[(S_τ − L)⁺]` under the lognormal law, by quadrature over the
/// standard normal density.
pub fn lognormal_excess(spot: f64, level: f64, rate: f64, sigma: f64, tau: f64) -> f64 {
    let sd = sigma * tau.sqrt();
    let mu = spot.ln() + (rate - 0.5 * sigma * sigma) * tau;
    let z_lo = ((level.ln() - mu) / sd).max(-40.0);
    let z_hi = z_lo.max(0.0) + 40.0;
    let q = integrate(
        |z| ((mu + sd * z).exp() - level).max(0.0) * norm_pdf(z),
        z_lo,
        z_hi,
        1e-300,
        1e-13,
    );
    (-rate * tau).exp() * q.value
}

/// Price of `min((S_τ − K)⁺, cap)`: the call minus the quadrature value of
/// the excess above `K + cap`.
pub fn capped_call(spot: f64, strike: f64, cap: f64, rate: f64, sigma: f64, tau: f64) -> f64 {
    bs_call(spot, strike, rate, sigma, tau) - lognormal_excess(spot, strike + cap, rate, sigma, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleValue {
    pub value: f64,
    pub stderr: f64,
}

/// Reference value for an affine driver `B̂ = a(t) + m(t) y`:
/// `e^{∫_s^T m} E[φ] + ∫_s^T e^{∫_s^t m} a(t) dt`, with `E[φ]` by direct
/// simulation from `point` and the time integrals by quadrature.
pub fn linear_oracle(
    spec: &MarketSpec,
    model: &VolModel,
    point: StartPoint,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<OracleValue> {
    let s = point.t0;
    let coef = |t: f64| -> Result<(f64, f64)> {
        spec.affine_at(t)?
            .ok_or_else(|| crate::error::XvaError::Domain(format!("driver is not affine at t={t}")))
    };
    for i in 0..=200 {
        coef(s + (horizon - s) * i as f64 / 200.0)?;
    }
    let a = |t: f64| coef(t).map(|c| c.0).unwrap_or(f64::NAN);
    let m = |t: f64| coef(t).map(|c| c.1).unwrap_or(f64::NAN);
    let growth = |t: f64| integrate(m, s, t, 1e-15, 1e-13).value.exp();
    let source = integrate(|t| growth(t) * a(t), s, horizon, 1e-14, 1e-12).value;
    if !source.is_finite() {
        return domain("affine driver coefficients are not finite");
    }
    let grid = TimeGrid::new(s, horizon, n_steps)?;
    let out = map_paths(model, point, grid, n_paths, seed, |_, x, v, _| {
        spec.payoff.eval(x[n_steps].exp(), v[n_steps])
    })?;
    let vals: Vec<f64> = out.valid().copied().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let g = growth(horizon);
    Ok(OracleValue {
        value: g * mean + source,
        stderr: g * (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::TimeFn;
    use crate::valuation::{Dividend, Payoff};
    use crate::volmodel::{build_power_model, PowerModel};

    #[test]
    fn black_scholes_reference() {
        // independent closed-form evaluation
        assert!((bs_call(100.0, 100.0, 0.05, 0.2, 1.0) - 10.450583572185565).abs() < 1e-10);
    }

    #[test]
    fn excess_quadrature_matches_closed_form() {
        for level in [60.0, 100.0, 140.0, 250.0] {
            let q = lognormal_excess(100.0, level, 0.05, 0.2, 1.0);
            let c = bs_call(100.0, level, 0.05, 0.2, 1.0);
            assert!((q - c).abs() < 1e-10 * c.max(1e-3), "L={level}: {q} vs {c}");
        }
        // cap at 10 K is negligible
        let corr = lognormal_excess(100.0, 1100.0, 0.05, 0.2, 1.0);
        assert!(corr >= 0.0 && corr < 1e-25);
        assert!((capped_call(100.0, 100.0, 1000.0, 0.05, 0.2, 1.0) - 10.450583572185565).abs() < 1e-10);
        let tight = capped_call(100.0, 100.0, 20.0, 0.05, 0.2, 1.0);
        let spread = bs_call(100.0, 100.0, 0.05, 0.2, 1.0) - bs_call(100.0, 120.0, 0.05, 0.2, 1.0);
        assert!((tight - spread).abs() < 1e-10, "{tight} vs {spread}");
        // mpmath at 30 digits
        assert!((bs_call(100.0, 120.0, 0.05, 0.2, 1.0) - 3.247477416560814).abs() < 1e-12);
    }

    fn bs_model(r: f64) -> VolModel {
        build_power_model(&PowerModel::black_scholes(), TimeFn::constant(r), TimeFn::zero(), 0.0, 2.0).unwrap()
    }

    #[test]
    fn linear_oracle_trivial_cases() {
        let start = StartPoint { t0: 0.0, x0: 100f64.ln(), v0: 0.04 };
        let model = bs_model(0.0);
        let zero = MarketSpec::zero(Payoff::Constant { value: 3.0 });
        let o = linear_oracle(&zero, &model, start, 1.0, 10, 100, 1).unwrap();
        assert!((o.value - 3.0).abs() < 1e-14 && o.stderr == 0.0);

        let mut source = MarketSpec::zero(Payoff::Constant { value: 0.0 });
        source.dividend = Dividend::Deterministic(TimeFn::constant(1.0));
        let o = linear_oracle(&source, &model, StartPoint { t0: 0.25, ..start }, 1.0, 10, 100, 1).unwrap();
        assert!((o.value - 0.75).abs() < 1e-12);

        let bond = MarketSpec::risk_free(TimeFn::constant(0.05), Payoff::Constant { value: 1.0 });
        let o = linear_oracle(&bond, &bs_model(0.05), start, 1.0, 10, 100, 1).unwrap();
        assert!((o.value - (-0.05f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn linear_oracle_rejects_kinked_driver() {
        let mut spec = MarketSpec::zero(Payoff::Constant { value: 1.0 });
        spec.c_plus = TimeFn::constant(0.1);
        let start = StartPoint { t0: 0.0, x0: 0.0, v0: 0.04 };
        assert!(linear_oracle(&spec, &bs_model(0.0), start, 1.0, 10, 10, 1).is_err());
    }
}
