use xva_core::mildsolver::{compare_grids, picard_solve, GridSpec, McConfig, SolverConfig};
use xva_core::timefn::TimeFn;
use xva_core::valuation::{Dividend, MarketSpec, Payoff};
use xva_core::volmodel::{build_power_model, PowerModel, VolModel};

const R: f64 = 0.05;

fn black_scholes() -> VolModel {
    build_power_model(&PowerModel::black_scholes(), TimeFn::constant(R), TimeFn::zero(), 0.0, 1.0).unwrap()
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

fn put() -> Payoff {
    Payoff::Put { strike: 100.0 }
}

#[test]
fn shifted_payoff_raises_value_by_discounted_shift() {
    let lo = MarketSpec::risk_free(TimeFn::constant(R), put());
    let hi = MarketSpec::risk_free(
        TimeFn::constant(R),
        Payoff::Shifted {
            base: Box::new(put()),
            shift: 0.1,
        },
    );
    let mc = McConfig::new(2000, 3);
    let solver = SolverConfig::default();
    let (u_lo, _) = picard_solve(&black_scholes(), &lo, &grid(), mc, solver).unwrap();
    let (u_hi, _) = picard_solve(&black_scholes(), &hi, &grid(), mc, solver).unwrap();
    let rep = compare_grids(&u_lo, &u_hi).unwrap();
    assert!(rep.pass);
    for i in 0..u_lo.len() {
        let (it, _, _) = u_lo.coords(i);
        let expected = 0.1 * (-R * (1.0 - u_lo.t.nodes()[it])).exp();
        let gap = u_hi.values[i] - u_lo.values[i];
        assert!((gap - expected).abs() < 1e-4, "node {i}: {gap} vs {expected}");
    }
}

#[test]
fn identical_specs_give_identical_grids() {
    let spec = MarketSpec::risk_free(TimeFn::constant(R), put());
    let mc = McConfig::new(500, 4);
    let (a, _) = picard_solve(&black_scholes(), &spec, &grid(), mc, SolverConfig::default()).unwrap();
    let (b, _) = picard_solve(&black_scholes(), &spec, &grid(), mc, SolverConfig::default()).unwrap();
    assert_eq!(a.values, b.values);
    let rep = compare_grids(&a, &b).unwrap();
    assert!(rep.pass);
    assert_eq!((rep.min_gap, rep.max_gap), (0.0, 0.0));
}

#[test]
fn higher_dividend_raises_value() {
    let lo = MarketSpec::risk_free(TimeFn::constant(R), put());
    let mut hi = lo.clone();
    hi.dividend = Dividend::Deterministic(TimeFn::constant(0.01));
    let mc = McConfig::new(1000, 5);
    let (u_lo, _) = picard_solve(&black_scholes(), &lo, &grid(), mc, SolverConfig::default()).unwrap();
    let (u_hi, _) = picard_solve(&black_scholes(), &hi, &grid(), mc, SolverConfig::default()).unwrap();
    let rep = compare_grids(&u_lo, &u_hi).unwrap();
    assert!(rep.pass && rep.min_gap >= 0.0);
    assert!(rep.max_gap > 0.0);
}
