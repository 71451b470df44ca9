//! Finite-difference residual of the semilinear PDE
//!
//! ```text
//! u_t + (r̂ − θ²/2) u_x + ζ̂ u_v + ½θ² u_xx + θηρ u_xv + ½η² u_vv + B̂(t, e^x, v, u) = 0
//! ```
//!
//! evaluated at grid nodes with three-point stencils.

use crate::error::{Result, XvaError};
use crate::valuation::MarketSpec;
use crate::volmodel::VolModel;

use super::grid::GridFunction;

/// Nodes of margin required on each side of a probe.
pub const PROBE_MARGIN: usize = 2;

/// Weights `(w−, w0, w+)` of the first and second derivative on a
/// non-uniform three-point stencil.
fn stencil(h_minus: f64, h_plus: f64) -> ([f64; 3], [f64; 3]) {
    let s = h_minus + h_plus;
    let first = [-h_plus / (h_minus * s), (h_plus - h_minus) / (h_minus * h_plus), h_minus / (h_plus * s)];
    let second = [2.0 / (h_minus * s), -2.0 / (h_minus * h_plus), 2.0 / (h_plus * s)];
    (first, second)
}

/// Applies stencil weights through differences to the centre, so constants
/// give exactly zero.
fn apply(w: &[f64; 3], u: [f64; 3]) -> f64 {
    w[0] * (u[0] - u[1]) + w[2] * (u[2] - u[1])
}

fn check_margin(name: &str, i: usize, n: usize) -> Result<()> {
    if i < PROBE_MARGIN || i + PROBE_MARGIN >= n {
        return Err(XvaError::Margin(format!(
            "{name} index {i} needs {PROBE_MARGIN} nodes of margin on an axis of {n}"
        )));
    }
    Ok(())
}

/// Residual at each probe `(it, ix, iv)`. An axis with a single variance
/// node is accepted only where `ζ̂` and `η` vanish there.
pub fn pde_residual(
    u: &GridFunction,
    model: &VolModel,
    spec: &MarketSpec,
    probes: &[(usize, usize, usize)],
) -> Result<Vec<f64>> {
    let (nt, nx, nv) = (u.t.len(), u.x.len(), u.v.len());
    let (tn, xn, vn) = (u.t.nodes(), u.x.nodes(), u.v.nodes());
    probes
        .iter()
        .map(|&(it, ix, iv)| {
            check_margin("t", it, nt)?;
            check_margin("x", ix, nx)?;
            let (t, x, v) = (tn[it], xn[ix], vn[iv]);
            let theta = model.price_vol(t, v);
            let eta = model.variance_vol(t, v);
            let zeta = model.variance_drift(t, v);
            let rho = model.rho(t);
            let u0 = u.at(it, ix, iv);

            let (dt1, _) = stencil(t - tn[it - 1], tn[it + 1] - t);
            let u_t = apply(&dt1, [u.at(it - 1, ix, iv), u0, u.at(it + 1, ix, iv)]);
            let (hxm, hxp) = (x - xn[ix - 1], xn[ix + 1] - x);
            let (dx1, dx2) = stencil(hxm, hxp);
            let ux = [u.at(it, ix - 1, iv), u0, u.at(it, ix + 1, iv)];
            let u_x = apply(&dx1, ux);
            let u_xx = apply(&dx2, ux);

            let (u_v, u_vv, u_xv) = if nv == 1 {
                if zeta.abs() > 1e-14 || eta.abs() > 1e-14 {
                    return Err(XvaError::Margin(format!(
                        "single variance node needs vanishing variance coefficients, got ζ={zeta}, η={eta}"
                    )));
                }
                (0.0, 0.0, 0.0)
            } else {
                check_margin("v", iv, nv)?;
                let (hvm, hvp) = (v - vn[iv - 1], vn[iv + 1] - v);
                let (dv1, dv2) = stencil(hvm, hvp);
                let uv = [u.at(it, ix, iv - 1), u0, u.at(it, ix, iv + 1)];
                let u_v = apply(&dv1, uv);
                let u_vv = apply(&dv2, uv);
                let u_xv = (u.at(it, ix + 1, iv + 1) - u.at(it, ix + 1, iv - 1) - u.at(it, ix - 1, iv + 1)
                    + u.at(it, ix - 1, iv - 1))
                    / ((hxm + hxp) * (hvm + hvp));
                (u_v, u_vv, u_xv)
            };
            let drift = model.log_drift_with(model.drift_b.eval(t), t, v);
            let b = spec.coefficients_at(t)?.eval(spec, x.exp(), v, u0);
            Ok(u_t
                + drift * u_x
                + zeta * u_v
                + 0.5 * theta * theta * u_xx
                + theta * eta * rho * u_xv
                + 0.5 * eta * eta * u_vv
                + b)
        })
        .collect()
}

/// All nodes with full margin on every axis with more than one node.
pub fn interior_probes(u: &GridFunction) -> Vec<(usize, usize, usize)> {
    let range = |n: usize| {
        if n == 1 {
            0..1
        } else {
            PROBE_MARGIN..n.saturating_sub(PROBE_MARGIN)
        }
    };
    let mut out = Vec::new();
    for it in range(u.t.len()) {
        for ix in range(u.x.len()) {
            for iv in range(u.v.len()) {
                out.push((it, ix, iv));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mildsolver::grid::Axis;
    use crate::timefn::TimeFn;
    use crate::valuation::Payoff;
    use crate::volmodel::{build_power_model, PowerModel};

    fn axes(nv: usize) -> (Axis, Axis, Axis) {
        (
            Axis::uniform(0.0, 1.0, 11).unwrap(),
            Axis::uniform(3.0, 6.0, 13).unwrap(),
            if nv == 1 {
                Axis::new(vec![0.04]).unwrap()
            } else {
                Axis::uniform(0.01, 0.2, nv).unwrap()
            },
        )
    }

    #[test]
    fn bond_residual_vanishes() {
        let r = 0.05;
        let model =
            build_power_model(&PowerModel::heston(0.08, 2.0, 0.3), TimeFn::constant(r), TimeFn::constant(-0.4), 0.0, 1.0)
                .unwrap();
        let spec = MarketSpec::risk_free(TimeFn::constant(r), Payoff::Constant { value: 1.0 });
        let (t, x, v) = axes(9);
        // sample the exact exponential; the time stencil is exact up to O(h²)
        let u = GridFunction::from_fn(t, x, v, |s, _, _| (-r * (1.0 - s)).exp()).unwrap();
        let res = pde_residual(&u, &model, &spec, &interior_probes(&u)).unwrap();
        let worst = res.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        // central difference error r³h²/6 with h = 0.1
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn constant_in_zero_market_is_exact() {
        let model = build_power_model(&PowerModel::black_scholes(), TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
        let spec = MarketSpec::zero(Payoff::Constant { value: 2.0 });
        let (t, x, v) = axes(1);
        let u = GridFunction::constant(t, x, v, 2.0).unwrap();
        let res = pde_residual(&u, &model, &spec, &interior_probes(&u)).unwrap();
        assert!(res.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn margin_is_enforced() {
        let model = build_power_model(&PowerModel::black_scholes(), TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
        let spec = MarketSpec::zero(Payoff::Constant { value: 2.0 });
        let (t, x, v) = axes(1);
        let u = GridFunction::constant(t, x, v, 2.0).unwrap();
        assert!(matches!(pde_residual(&u, &model, &spec, &[(1, 5, 0)]), Err(XvaError::Margin(_))));
        assert!(matches!(pde_residual(&u, &model, &spec, &[(5, 11, 0)]), Err(XvaError::Margin(_))));
        let heston =
            build_power_model(&PowerModel::heston(0.08, 2.0, 0.3), TimeFn::zero(), TimeFn::zero(), 0.0, 1.0).unwrap();
        assert!(matches!(pde_residual(&u, &heston, &spec, &[(5, 5, 0)]), Err(XvaError::Margin(_))));
    }

    #[test]
    fn stencil_is_exact_on_quadratics() {
        let (f1, f2) = stencil(0.3, 0.7);
        let g = |x: f64| 2.0 + 3.0 * x + 5.0 * x * x;
        let vals = [g(-0.3), g(0.0), g(0.7)];
        let d1: f64 = f1.iter().zip(&vals).map(|(w, y)| w * y).sum();
        let d2: f64 = f2.iter().zip(&vals).map(|(w, y)| w * y).sum();
        assert!((d1 - 3.0).abs() < 1e-12 && (d2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn black_scholes_price_has_small_residual() {
        let (r, sigma) = (0.05, 0.2);
        let model = build_power_model(&PowerModel::black_scholes(), TimeFn::constant(r), TimeFn::zero(), 0.0, 1.0).unwrap();
        let spec = MarketSpec::risk_free(TimeFn::constant(r), Payoff::CappedCall { strike: 100.0, cap: 1000.0 });
        let res_at = |n: usize| {
            let t = Axis::uniform(0.0, 0.8, n).unwrap();
            let x = Axis::uniform(100f64.ln() - 0.5, 100f64.ln() + 0.5, 2 * n - 1).unwrap();
            let v = Axis::new(vec![sigma * sigma]).unwrap();
            let u = GridFunction::from_fn(t, x, v, |s, x, _| super::super::oracle::bs_call(x.exp(), 100.0, r, sigma, 1.0 - s))
                .unwrap();
            let mid = (u.t.len() / 2, u.x.len() / 2, 0);
            pde_residual(&u, &model, &spec, &[mid]).unwrap()[0].abs()
        };
        let (coarse, fine) = (res_at(9), res_at(17));
        assert!(fine < coarse / 3.0, "{coarse} -> {fine}");
    }
}
