//! Test functions on the network with exact partial derivatives.
//!
//! A test function is a finite sum of terms
//! `coef_i * x^p * l^q * tau(t)`, where only the coefficient depends on the
//! edge. Terms with `p = 0` must use the same coefficient on every edge so
//! that `f_i(t, 0, l)` is single-valued at the junction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiderError};
use crate::network::EdgeIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TimeFactor {
    One,
    /// `sin(freq * t + phase)`
    Sin { freq: f64, phase: f64 },
    /// `exp(rate * t)`
    Exp { rate: f64 },
}

impl TimeFactor {
    fn value(self, t: f64) -> f64 {
        match self {
            TimeFactor::One => 1.0,
            TimeFactor::Sin { freq, phase } => (freq * t + phase).sin(),
            TimeFactor::Exp { rate } => (rate * t).exp(),
        }
    }

    fn derivative(self, t: f64) -> f64 {
        match self {
            TimeFactor::One => 0.0,
            TimeFactor::Sin { freq, phase } => freq * (freq * t + phase).cos(),
            TimeFactor::Exp { rate } => rate * (rate * t).exp(),
        }
    }
}

impl Default for TimeFactor {
    fn default() -> Self {
        TimeFactor::One
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    /// One coefficient per edge.
    pub coef: Vec<f64>,
    #[serde(default)]
    pub x_pow: u32,
    #[serde(default)]
    pub l_pow: u32,
    #[serde(default)]
    pub time: TimeFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTestFunction", into = "RawTestFunction")]
pub struct TestFunction {
    edges: usize,
    terms: Vec<Term>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTestFunction {
    terms: Vec<Term>,
}

impl TryFrom<RawTestFunction> for TestFunction {
    type Error = SpiderError;

    fn try_from(raw: RawTestFunction) -> Result<Self> {
        let edges = raw.terms.first().map(|t| t.coef.len()).unwrap_or(0);
        TestFunction::new(edges, raw.terms)
    }
}

impl From<TestFunction> for RawTestFunction {
    fn from(f: TestFunction) -> Self {
        RawTestFunction { terms: f.terms }
    }
}

fn powi(base: f64, p: u32) -> f64 {
    base.powi(p as i32)
}

/// Value and first/second derivative of `x^p`.
fn monomial(x: f64, p: u32) -> (f64, f64, f64) {
    let v = powi(x, p);
    let d1 = if p >= 1 { p as f64 * powi(x, p - 1) } else { 0.0 };
    let d2 = if p >= 2 { (p * (p - 1)) as f64 * powi(x, p - 2) } else { 0.0 };
    (v, d1, d2)
}

impl TestFunction {
    pub fn new(edges: usize, terms: Vec<Term>) -> Result<Self> {
        if edges < 2 {
            return Err(SpiderError::Config(format!("test function needs >= 2 edges, got {edges}")));
        }
        for (k, term) in terms.iter().enumerate() {
            if term.coef.len() != edges {
                return Err(SpiderError::Config(format!(
                    "term {k} has {} coefficients for {edges} edges",
                    term.coef.len()
                )));
            }
            if term.coef.iter().any(|c| !c.is_finite()) {
                return Err(SpiderError::Config(format!("term {k} has a non-finite coefficient")));
            }
            if term.x_pow == 0 && term.coef.iter().any(|&c| c != term.coef[0]) {
                return Err(SpiderError::Config(format!(
                    "term {k} does not vanish at the vertex and has edge-dependent coefficients; \
                     the function would be discontinuous at the junction"
                )));
            }
        }
        Ok(TestFunction { edges, terms })
    }

    pub fn constant(edges: usize, value: f64) -> Self {
        TestFunction::new(edges, vec![Term { coef: vec![value; edges], x_pow: 0, l_pow: 0, time: TimeFactor::One }])
            .expect("constant is continuous")
    }

    /// `(x, i) -> x`.
    pub fn identity(edges: usize) -> Self {
        TestFunction::new(edges, vec![Term { coef: vec![1.0; edges], x_pow: 1, l_pow: 0, time: TimeFactor::One }])
            .expect("identity is continuous")
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn sum(&self, edge: EdgeIndex, t: f64, x: f64, l: f64, part: impl Fn(&Term, f64, f64, f64) -> f64) -> f64 {
        let i = edge.slot();
        self.terms.iter().map(|term| term.coef[i] * part(term, t, x, l)).sum()
    }

    pub fn value(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> f64 {
        self.sum(edge, t, x, l, |term, t, x, l| {
            monomial(x, term.x_pow).0 * powi(l, term.l_pow) * term.time.value(t)
        })
    }

    pub fn dt(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> f64 {
        self.sum(edge, t, x, l, |term, t, x, l| {
            monomial(x, term.x_pow).0 * powi(l, term.l_pow) * term.time.derivative(t)
        })
    }

    pub fn dx(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> f64 {
        self.sum(edge, t, x, l, |term, t, x, l| {
            monomial(x, term.x_pow).1 * powi(l, term.l_pow) * term.time.value(t)
        })
    }

    pub fn dxx(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> f64 {
        self.sum(edge, t, x, l, |term, t, x, l| {
            monomial(x, term.x_pow).2 * powi(l, term.l_pow) * term.time.value(t)
        })
    }

    pub fn dl(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> f64 {
        self.sum(edge, t, x, l, |term, t, x, l| {
            let q = term.l_pow;
            let dl = if q >= 1 { q as f64 * powi(l, q - 1) } else { 0.0 };
            monomial(x, term.x_pow).0 * dl * term.time.value(t)
        })
    }

    /// `d/dl f(t, 0, l)`, the junction value's local-time derivative.
    pub fn vertex_dl(&self, t: f64, l: f64) -> f64 {
        self.dl(EdgeIndex::from_one_based(1), t, 0.0, l)
    }

    /// `d/dx f_i(t, 0, l)` for every edge.
    pub fn vertex_slopes(&self, t: f64, l: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend((1..=self.edges as u16).map(|i| self.dx(EdgeIndex::from_one_based(i), t, 0.0, l)));
    }

    /// Largest vertex-continuity defect over the supplied `(t, l)` samples.
    pub fn continuity_defect(&self, samples: &[(f64, f64)]) -> f64 {
        let mut worst = 0.0_f64;
        for &(t, l) in samples {
            let v1 = self.value(EdgeIndex::from_one_based(1), t, 0.0, l);
            for i in 2..=self.edges as u16 {
                worst = worst.max((self.value(EdgeIndex::from_one_based(i), t, 0.0, l) - v1).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rich(edges: usize) -> TestFunction {
        TestFunction::new(
            edges,
            vec![
                Term { coef: vec![0.3; edges], x_pow: 0, l_pow: 2, time: TimeFactor::Sin { freq: 1.5, phase: 0.2 } },
                Term { coef: (0..edges).map(|i| 1.0 + i as f64).collect(), x_pow: 1, l_pow: 1, time: TimeFactor::One },
                Term { coef: (0..edges).map(|i| 0.5 - 0.2 * i as f64).collect(), x_pow: 3, l_pow: 0, time: TimeFactor::Exp { rate: -0.7 } },
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_discontinuous_vertex_term() {
        let err = TestFunction::new(2, vec![Term { coef: vec![1.0, 2.0], x_pow: 0, l_pow: 0, time: TimeFactor::One }]);
        assert!(err.is_err());
    }

    #[test]
    fn continuity_holds_for_rich_family() {
        let f = rich(3);
        let samples: Vec<_> = (0..20).map(|k| (0.05 * k as f64, 0.3 * k as f64)).collect();
        assert!(f.continuity_defect(&samples) <= 1e-12);
    }

    #[test]
    fn serde_round_trip_validates() {
        let f = rich(2);
        let json = serde_json::to_string(&f).unwrap();
        let back: TestFunction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
        let bad = r#"{"terms":[{"coef":[1.0,2.0]}]}"#;
        assert!(serde_json::from_str::<TestFunction>(bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn derivatives_match_central_differences(
            t in 0.0..1.0f64, x in 0.01..2.0f64, l in 0.01..2.0f64, edge in 1u16..=3,
        ) {
            let f = rich(3);
            let e = EdgeIndex::from_one_based(edge);
            let step = 1e-4;
            let cd = |g: &dyn Fn(f64) -> f64| (g(step) - g(-step)) / (2.0 * step);
            let dx = cd(&|s| f.value(e, t, x + s, l));
            let dt = cd(&|s| f.value(e, t + s, x, l));
            let dl = cd(&|s| f.value(e, t, x, l + s));
            let dxx = (f.value(e, t, x + step, l) - 2.0 * f.value(e, t, x, l) + f.value(e, t, x - step, l)) / (step * step);
            prop_assert!((f.dx(e, t, x, l) - dx).abs() <= 1e-6);
            prop_assert!((f.dt(e, t, x, l) - dt).abs() <= 1e-6);
            prop_assert!((f.dl(e, t, x, l) - dl).abs() <= 1e-6);
            prop_assert!((f.dxx(e, t, x, l) - dxx).abs() <= 1e-4);
        }
    }
}
