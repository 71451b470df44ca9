//! Deterministic functions of time: rates, fractions, intensities and
//! coefficient loadings.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::quad;

/// A real function of time.
///
/// JSON form: a bare number is a constant; `{"piecewise": {...}}` is a
/// right-continuous step function; `{"linear": {...}}` is `intercept + slope*t`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFn {
    Constant(f64),
    Shaped(Shape),
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `values[i]` on `[breaks[i-1], breaks[i])`, with `values.len() == breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
    Linear { intercept: f64, slope: f64 },
}

impl fmt::Debug for TimeFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeFn::Constant(c) => write!(f, "Constant({c})"),
            TimeFn::Shaped(s) => write!(f, "{s:?}"),
            TimeFn::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl PartialEq for TimeFn {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TimeFn::Constant(a), TimeFn::Constant(b)) => a == b,
            (TimeFn::Shaped(a), TimeFn::Shaped(b)) => a == b,
            (TimeFn::Custom(a), TimeFn::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Default for TimeFn {
    fn default() -> Self {
        TimeFn::Constant(0.0)
    }
}

impl From<f64> for TimeFn {
    fn from(c: f64) -> Self {
        TimeFn::Constant(c)
    }
}

impl TimeFn {
    pub fn constant(c: f64) -> Self {
        TimeFn::Constant(c)
    }

    pub fn zero() -> Self {
        TimeFn::Constant(0.0)
    }

    pub fn linear(intercept: f64, slope: f64) -> Self {
        TimeFn::Shaped(Shape::Linear { intercept, slope })
    }

    pub fn piecewise(breaks: Vec<f64>, values: Vec<f64>) -> Self {
        TimeFn::Shaped(Shape::Piecewise { breaks, values })
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TimeFn::Custom(Arc::new(f))
    }

    /// Structural check: piecewise data must be consistent and finite.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TimeFn::Constant(c) if !c.is_finite() => Err(format!("non-finite constant {c}")),
            TimeFn::Shaped(Shape::Piecewise { breaks, values }) => {
                if values.len() != breaks.len() + 1 {
                    return Err(format!(
                        "piecewise function needs {} values for {} breaks, got {}",
                        breaks.len() + 1,
                        breaks.len(),
                        values.len()
                    ));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err("piecewise breaks must be strictly increasing".into());
                }
                if breaks.iter().chain(values).any(|x| !x.is_finite()) {
                    return Err("piecewise data must be finite".into());
                }
                Ok(())
            }
            TimeFn::Shaped(Shape::Linear { intercept, slope }) if !(intercept.is_finite() && slope.is_finite()) => {
                Err("linear coefficients must be finite".into())
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Constant(c) => *c,
            TimeFn::Shaped(Shape::Linear { intercept, slope }) => intercept + slope * t,
            TimeFn::Shaped(Shape::Piecewise { breaks, values }) => values[breaks.partition_point(|b| *b <= t)],
            TimeFn::Custom(f) => f(t),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            TimeFn::Constant(_) => true,
            TimeFn::Shaped(Shape::Linear { slope, .. }) => *slope == 0.0,
            TimeFn::Shaped(Shape::Piecewise { values, .. }) => values.windows(2).all(|w| w[0] == w[1]),
            TimeFn::Custom(_) => false,
        }
    }

    /// `∫_a^b f(t) dt`; exact for constant, linear and piecewise shapes.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        match self {
            TimeFn::Constant(c) => c * (b - a),
            TimeFn::Shaped(Shape::Linear { intercept, slope }) => intercept * (b - a) + 0.5 * slope * (b * b - a * a),
            TimeFn::Shaped(Shape::Piecewise { breaks, values }) => {
                let mut acc = 0.0;
                let mut lo = a;
                let mut i = breaks.partition_point(|x| *x <= a);
                while lo < b {
                    let hi = if i < breaks.len() { breaks[i].min(b) } else { b };
                    acc += values[i] * (hi - lo);
                    lo = hi;
                    i += 1;
                }
                acc
            }
            TimeFn::Custom(f) => quad::integrate(|t| f(t), a, b, 1e-13, 1e-12).value,
        }
    }

    /// `(inf, sup)` over `[a, b]`; custom functions are sampled on 1001 points.
    pub fn range_on(&self, a: f64, b: f64) -> (f64, f64) {
        match self {
            TimeFn::Constant(c) => (*c, *c),
            TimeFn::Shaped(Shape::Linear { .. }) => {
                let (fa, fb) = (self.eval(a), self.eval(b));
                (fa.min(fb), fb.max(fa))
            }
            TimeFn::Shaped(Shape::Piecewise { breaks, values }) => {
                let first = breaks.partition_point(|x| *x <= a);
                let last = breaks.partition_point(|x| *x < b);
                values[first..=last.max(first)]
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
            }
            TimeFn::Custom(f) => (0..=1000)
                .map(|i| f(a + (b - a) * i as f64 / 1000.0))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))),
        }
    }

    pub fn sup_abs_on(&self, a: f64, b: f64) -> f64 {
        let (lo, hi) = self.range_on(a, b);
        lo.abs().max(hi.abs())
    }

    /// Pointwise sum `self + c`.
    pub fn shifted(&self, c: f64) -> TimeFn {
        match self {
            TimeFn::Constant(v) => TimeFn::Constant(v + c),
            TimeFn::Shaped(Shape::Linear { intercept, slope }) => TimeFn::linear(intercept + c, *slope),
            TimeFn::Shaped(Shape::Piecewise { breaks, values }) => {
                TimeFn::piecewise(breaks.clone(), values.iter().map(|v| v + c).collect())
            }
            TimeFn::Custom(f) => {
                let f = Arc::clone(f);
                TimeFn::custom(move |t| f(t) + c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_is_right_continuous() {
        let f = TimeFn::piecewise(vec![1.0, 2.0], vec![0.1, 0.2, 0.3]);
        assert_eq!(f.eval(0.5), 0.1);
        assert_eq!(f.eval(1.0), 0.2);
        assert_eq!(f.eval(1.99), 0.2);
        assert_eq!(f.eval(2.5), 0.3);
        assert!((f.integral(0.5, 2.5) - (0.05 + 0.2 + 0.15)).abs() < 1e-15);
        assert_eq!(f.range_on(0.0, 1.5), (0.1, 0.2));
        assert_eq!(f.range_on(1.2, 1.8), (0.2, 0.2));
    }

    #[test]
    fn integrals_agree_with_quadrature() {
        let fns = [
            TimeFn::constant(0.3),
            TimeFn::linear(0.1, -0.4),
            TimeFn::piecewise(vec![0.25, 0.7], vec![1.0, -2.0, 0.5]),
        ];
        for f in &fns {
            let g = f.clone();
            let custom = TimeFn::custom(move |t| g.eval(t));
            let exact = f.integral(0.1, 0.9);
            let numeric = custom.integral(0.1, 0.9);
            assert!((exact - numeric).abs() < 1e-9, "{f:?}: {exact} vs {numeric}");
        }
    }

    #[test]
    fn json_forms() {
        let c: TimeFn = serde_json::from_str("0.05").unwrap();
        assert_eq!(c, TimeFn::constant(0.05));
        let l: TimeFn = serde_json::from_str(r#"{"linear": {"intercept": 0.0, "slope": 1.0}}"#).unwrap();
        assert_eq!(l.eval(2.0), 2.0);
        let p: TimeFn = serde_json::from_str(r#"{"piecewise": {"breaks": [0.5], "values": [1, 2]}}"#).unwrap();
        assert_eq!(p.eval(0.75), 2.0);
        assert!(serde_json::from_str::<TimeFn>(r#"{"linear": {"intercept": 0.0, "slope": 1.0, "x": 2}}"#).is_err());
        let round: TimeFn = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(round, p);
    }

    #[test]
    fn validation_catches_shape_errors() {
        assert!(TimeFn::piecewise(vec![1.0], vec![1.0]).validate().is_err());
        assert!(TimeFn::piecewise(vec![1.0, 0.5], vec![1.0, 2.0, 3.0]).validate().is_err());
        assert!(TimeFn::constant(f64::NAN).validate().is_err());
        assert!(TimeFn::linear(0.0, 1.0).validate().is_ok());
    }
}
