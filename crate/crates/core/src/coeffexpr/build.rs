use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse, Expr, ParseError, Var};
use crate::error::{EvalError, SpiderError};
use crate::network::{
    validate_coefficients, Bounds, Clause, CoefficientSet, Field, SamplingPlan, SpinningMeasure,
    ValidationReport,
};

#[derive(Debug, Error)]
pub enum ExprError {
    /// `key` names the offending config entry, e.g. `network.drift[1]`.
    #[error("{key}: {source}")]
    Parse {
        key: String,
        #[source]
        source: ParseError,
    },
    #[error("{key}: variable '{var}' is not allowed here (allowed: {allowed})")]
    Variable { key: String, var: &'static str, allowed: String },
    #[error("{key}: {source}")]
    Eval {
        key: String,
        #[source]
        source: EvalError,
    },
    #[error("{0}")]
    Alpha(String),
    #[error(transparent)]
    Network(#[from] SpiderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// The expressions must already sum to one.
    Exact,
    /// Each weight is divided by the sum of all weights.
    Renormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    pub mode: Normalization,
    pub weights: Vec<String>,
}

/// Declarative network block: one drift and diffusion expression per edge,
/// the spinning measure and the assumption constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub edges: usize,
    pub drift: Vec<String>,
    pub diffusion: Vec<String>,
    pub alpha: AlphaConfig,
    pub bounds: Bounds,
}

/// Parsed spinning weights over `(t, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSpec {
    pub weights: Vec<Expr>,
    pub mode: Normalization,
}

impl AlphaSpec {
    pub fn parse(cfg: &AlphaConfig, key: &str) -> Result<Self, ExprError> {
        let weights = cfg
            .weights
            .iter()
            .enumerate()
            .map(|(k, src)| {
                let key = format!("{key}.weights[{k}]");
                let e = parse_expr(src, &key)?;
                check_vars(&e, &key, &[Var::T, Var::L])?;
                Ok(e)
            })
            .collect::<Result<Vec<_>, ExprError>>()?;
        Ok(AlphaSpec { weights, mode: cfg.mode })
    }

    pub fn evaluate_into(&self, t: f64, l: f64, out: &mut Vec<f64>) -> Result<(), EvalError> {
        out.clear();
        for e in &self.weights {
            out.push(e.evaluate(t, 0.0, l)?);
        }
        if self.mode == Normalization::Renormalize {
            if let Some(bad) = out.iter().find(|&&w| w <= 0.0) {
                return Err(EvalError::Other(format!(
                    "raw spinning weight {bad} is not positive at (t={t}, l={l})"
                )));
            }
            let sum: f64 = out.iter().sum();
            out.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(())
    }

    pub fn into_measure(self) -> SpinningMeasure {
        let spec = Arc::new(self);
        Arc::new(move |t, l, out| spec.evaluate_into(t, l, out))
    }
}

fn parse_expr(src: &str, key: &str) -> Result<Expr, ExprError> {
    parse(src).map_err(|source| ExprError::Parse { key: key.to_string(), source })
}

fn check_vars(e: &Expr, key: &str, allowed: &[Var]) -> Result<(), ExprError> {
    if let Some(v) = e.free_vars().into_iter().find(|v| !allowed.contains(v)) {
        return Err(ExprError::Variable {
            key: key.to_string(),
            var: v.name(),
            allowed: allowed.iter().map(|v| v.name()).collect::<Vec<_>>().join(", "),
        });
    }
    Ok(())
}

/// Parses an expression for `key` restricted to `allowed` variables and wraps
/// it as a field.
pub(crate) fn field_from_source(src: &str, key: &str, allowed: &[Var]) -> Result<Field, ExprError> {
    let e = parse_expr(src, key)?;
    check_vars(&e, key, allowed)?;
    e.into_field().map_err(|source| ExprError::Eval { key: key.to_string(), source })
}

pub struct BuiltCoefficients {
    pub coefficients: CoefficientSet,
    pub report: ValidationReport,
}

/// Builds a coefficient set from its declarative form and validates it on
/// the default sampling grid over `[0, horizon]`.
pub fn build_coefficient_set(cfg: &NetworkConfig, horizon: f64) -> Result<BuiltCoefficients, ExprError> {
    let edges = cfg.edges;
    for (name, len) in [
        ("network.drift", cfg.drift.len()),
        ("network.diffusion", cfg.diffusion.len()),
        ("network.alpha.weights", cfg.alpha.weights.len()),
    ] {
        if len != edges {
            return Err(SpiderError::Config(format!("{name} has {len} entries for {edges} edges")).into());
        }
    }
    let all = [Var::T, Var::X, Var::L];
    let drift = cfg
        .drift
        .iter()
        .enumerate()
        .map(|(k, s)| field_from_source(s, &format!("network.drift[{k}]"), &all))
        .collect::<Result<Vec<_>, _>>()?;
    let diffusion = cfg
        .diffusion
        .iter()
        .enumerate()
        .map(|(k, s)| field_from_source(s, &format!("network.diffusion[{k}]"), &all))
        .collect::<Result<Vec<_>, _>>()?;
    let alpha = AlphaSpec::parse(&cfg.alpha, "network.alpha")?;
    let coefficients = CoefficientSet::new(drift, diffusion, alpha.into_measure(), cfg.bounds)?;
    let report = validate_coefficients(&coefficients, &SamplingPlan::default_for(horizon))?;
    let clause_a = report.clause(Clause::SpinningLowerBound);
    if !clause_a.pass {
        return Err(ExprError::Alpha(format!(
            "network.alpha: spinning weights violate the lower bound a_lower={} \
             (min observed {:.6}; {})",
            cfg.bounds.a_lower, clause_a.observed, clause_a.detail
        )));
    }
    Ok(BuiltCoefficients { coefficients, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::EdgeIndex;

    fn bounds(a_lower: f64) -> Bounds {
        Bounds { a_lower, sigma_lower: 0.5, b_bound: 1.0, sigma_bound: 1.0, alpha_lip: 1.0 }
    }

    fn net(weights: &[&str], mode: Normalization, a_lower: f64) -> NetworkConfig {
        let n = weights.len();
        NetworkConfig {
            edges: n,
            drift: vec!["0".into(); n],
            diffusion: vec!["1".into(); n],
            alpha: AlphaConfig { mode, weights: weights.iter().map(|s| s.to_string()).collect() },
            bounds: bounds(a_lower),
        }
    }

    #[test]
    fn exact_half_half_passes() {
        let built = build_coefficient_set(&net(&["0.5", "0.5"], Normalization::Exact, 0.4), 1.0).unwrap();
        assert!(built.report.passed());
    }

    #[test]
    fn renormalized_weights() {
        let built =
            build_coefficient_set(&net(&["1+l", "1", "1"], Normalization::Renormalize, 0.1), 1.0).unwrap();
        let c = &built.coefficients;
        let a0 = c.alpha(0.0, 0.0).unwrap();
        for w in &a0 {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let a1 = c.alpha(0.3, 1.0).unwrap();
        assert_eq!(a1, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn renormalized_violation_is_rejected() {
        // At l = 4 the weights are (5,1,1)/7, so the last weight drops to 1/7 < 0.2.
        let err = build_coefficient_set(&net(&["1+l", "1", "1"], Normalization::Renormalize, 0.2 + 1e-9), 1.0);
        assert!(matches!(err, Err(ExprError::Alpha(_))));
    }

    #[test]
    fn alpha_may_not_read_position() {
        let err = build_coefficient_set(&net(&["0.5 + 0*x", "0.5"], Normalization::Exact, 0.4), 1.0);
        match err {
            Err(ExprError::Variable { key, var, .. }) => {
                assert_eq!(key, "network.alpha.weights[0]");
                assert_eq!(var, "x");
            }
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn parse_errors_name_the_key() {
        let mut cfg = net(&["0.5", "0.5"], Normalization::Exact, 0.4);
        cfg.drift[1] = "1 +".into();
        let err = build_coefficient_set(&cfg, 1.0).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("network.drift[1]"), "{msg}");
        assert!(msg.contains("offset 3"), "{msg}");
    }

    #[test]
    fn expression_coefficients_evaluate() {
        let mut cfg = net(&["0.5", "0.5"], Normalization::Exact, 0.4);
        cfg.drift[0] = "0.1*sin(t) - 0.2*tanh(x)".into();
        cfg.bounds.b_bound = 1.0;
        let built = build_coefficient_set(&cfg, 1.0).unwrap();
        let e1 = EdgeIndex::new(1, 2).unwrap();
        let v = built.coefficients.drift(e1, 0.5, 2.0, 0.0).unwrap();
        assert!((v - (0.1 * 0.5f64.sin() - 0.2 * 2.0f64.tanh())).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn renormalized_alpha_sums_to_one(t in 0.0..5.0f64, l in 0.0..50.0f64, a in 0.1..3.0f64, b in 0.1..3.0f64) {
                let spec = AlphaSpec::parse(&AlphaConfig {
                    mode: Normalization::Renormalize,
                    weights: vec![format!("{a} + l"), format!("{b}*exp(-t)"), "1 + 0.5*sin(l)".into()],
                }, "alpha").unwrap();
                let mut out = Vec::new();
                spec.evaluate_into(t, l, &mut out).unwrap();
                prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
