//! Star-shaped network geometry and the coefficient families living on it.
//!
//! A network has `I >= 2` half-lines glued at a single junction. Points are
//! `(x, i)` pairs; every `(0, i)` denotes the same junction point, and the
//! comparison operators below honour that identification so callers never
//! need to special-case "which edge the vertex is on".

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{EvalError, Result, SpiderError};

/// 1-based edge label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EdgeIndex(u16);

impl EdgeIndex {
    pub fn new(value: usize, edges: usize) -> Result<Self> {
        if value == 0 || value > edges {
            return Err(SpiderError::Network(format!(
                "edge index {value} outside 1..={edges}"
            )));
        }
        Ok(EdgeIndex(value as u16))
    }

    /// Builds an index without a range check; `value` must be at least 1.
    pub const fn from_one_based(value: u16) -> Self {
        EdgeIndex(value)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based position for indexing per-edge arrays.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for EdgeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point `(x, i)` of the star graph.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NetworkPoint {
    pub x: f64,
    pub edge: EdgeIndex,
}

impl NetworkPoint {
    pub fn new(x: f64, edge: EdgeIndex) -> Result<Self> {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(SpiderError::Network(format!("position {x} is not a finite x >= 0")));
        }
        Ok(NetworkPoint { x, edge })
    }

    pub fn is_vertex(&self) -> bool {
        self.x == 0.0
    }
}

impl PartialEq for NetworkPoint {
    fn eq(&self, other: &Self) -> bool {
        if self.is_vertex() && other.is_vertex() {
            return true;
        }
        self.x == other.x && self.edge == other.edge
    }
}

/// Geodesic distance on the star: along the ray when both points share an
/// edge, through the junction otherwise.
pub fn distance(p: &NetworkPoint, q: &NetworkPoint) -> f64 {
    if p.edge == q.edge {
        (p.x - q.x).abs()
    } else {
        p.x + q.x
    }
}

/// Scalar field `(t, x, l) -> value` attached to an edge (drift, diffusion,
/// running cost, payoff, ...). Fields that ignore some arguments simply do
/// not read them.
pub type Field = Arc<dyn Fn(f64, f64, f64) -> Result<f64, EvalError> + Send + Sync>;

/// Spinning measure `(t, l) -> alpha(t, l)`, written into the supplied buffer.
pub type SpinningMeasure =
    Arc<dyn Fn(f64, f64, &mut Vec<f64>) -> Result<(), EvalError> + Send + Sync>;

pub fn field<F>(f: F) -> Field
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(move |t, x, l| Ok(f(t, x, l)))
}

pub fn constant_field(value: f64) -> Field {
    Arc::new(move |_, _, _| Ok(value))
}

pub fn constant_alpha(weights: Vec<f64>) -> SpinningMeasure {
    Arc::new(move |_, _, out| {
        out.clear();
        out.extend_from_slice(&weights);
        Ok(())
    })
}

pub fn alpha_fn<F>(f: F) -> SpinningMeasure
where
    F: Fn(f64, f64) -> Vec<f64> + Send + Sync + 'static,
{
    Arc::new(move |t, l, out| {
        out.clear();
        out.extend(f(t, l));
        Ok(())
    })
}

/// Constants of the ellipticity/regularity assumption on the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// Lower bound on every spinning weight.
    pub a_lower: f64,
    /// Lower bound on every diffusion coefficient.
    pub sigma_lower: f64,
    /// Bound on sup|b| plus its Lipschitz constants in x, l and t.
    pub b_bound: f64,
    /// Same for sigma.
    pub sigma_bound: f64,
    /// Bound on the Lipschitz constants of alpha in l and t.
    pub alpha_lip: f64,
}

/// Drift, diffusion and spinning measure of a spider diffusion.
#[derive(Clone)]
pub struct CoefficientSet {
    drift: Vec<Field>,
    diffusion: Vec<Field>,
    alpha: SpinningMeasure,
    pub bounds: Bounds,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("edges", &self.edges())
            .field("bounds", &self.bounds)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new(
        drift: Vec<Field>,
        diffusion: Vec<Field>,
        alpha: SpinningMeasure,
        bounds: Bounds,
    ) -> Result<Self> {
        let edges = drift.len();
        if edges < 2 {
            return Err(SpiderError::Network(format!(
                "a star network needs at least 2 edges, got {edges}"
            )));
        }
        if diffusion.len() != edges {
            return Err(SpiderError::Network(format!(
                "{} drift fields but {} diffusion fields",
                edges,
                diffusion.len()
            )));
        }
        if edges > u16::MAX as usize {
            return Err(SpiderError::Network(format!("too many edges ({edges})")));
        }
        Ok(CoefficientSet { drift, diffusion, alpha, bounds })
    }

    /// Constant drift/diffusion per edge and constant spinning weights.
    pub fn constant(drift: &[f64], diffusion: &[f64], alpha: &[f64], bounds: Bounds) -> Result<Self> {
        CoefficientSet::new(
            drift.iter().map(|&b| constant_field(b)).collect(),
            diffusion.iter().map(|&s| constant_field(s)).collect(),
            constant_alpha(alpha.to_vec()),
            bounds,
        )
    }

    pub fn edges(&self) -> usize {
        self.drift.len()
    }

    #[inline]
    pub fn drift(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> Result<f64, EvalError> {
        (self.drift[edge.slot()])(t, x, l)
    }

    #[inline]
    pub fn diffusion(&self, edge: EdgeIndex, t: f64, x: f64, l: f64) -> Result<f64, EvalError> {
        (self.diffusion[edge.slot()])(t, x, l)
    }

    /// Evaluates alpha(t, l) into `out`, rejecting wrong-length results.
    pub fn alpha_into(&self, t: f64, l: f64, out: &mut Vec<f64>) -> Result<(), EvalError> {
        (self.alpha)(t, l, out)?;
        if out.len() != self.edges() {
            return Err(EvalError::AlphaLength { expected: self.edges(), got: out.len() });
        }
        Ok(())
    }

    pub fn alpha(&self, t: f64, l: f64) -> Result<Vec<f64>, EvalError> {
        let mut out = Vec::with_capacity(self.edges());
        self.alpha_into(t, l, &mut out)?;
        Ok(out)
    }

    pub fn drift_field(&self, edge: EdgeIndex) -> &Field {
        &self.drift[edge.slot()]
    }

    pub fn diffusion_field(&self, edge: EdgeIndex) -> &Field {
        &self.diffusion[edge.slot()]
    }

    pub fn edge_indices(&self) -> impl Iterator<Item = EdgeIndex> {
        (1..=self.edges() as u16).map(EdgeIndex::from_one_based)
    }
}

/// Cartesian sampling grid over `(t, x, l)` used to check the assumption
/// clauses numerically.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SamplingPlan {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub l: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(mut t: Vec<f64>, mut x: Vec<f64>, mut l: Vec<f64>) -> Self {
        for axis in [&mut t, &mut x, &mut l] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        SamplingPlan { t, x, l }
    }

    /// `n` evenly spaced nodes per axis on `[0, horizon] x [0, x_max] x [0, l_max]`.
    pub fn uniform(horizon: f64, x_max: f64, l_max: f64, n: usize) -> Self {
        let axis = |hi: f64| -> Vec<f64> {
            if n <= 1 {
                return vec![0.0];
            }
            (0..n).map(|k| hi * k as f64 / (n - 1) as f64).collect()
        };
        SamplingPlan::new(axis(horizon), axis(x_max), axis(l_max))
    }

    pub fn default_for(horizon: f64) -> Self {
        SamplingPlan::uniform(horizon, 4.0, 4.0, 9)
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty() || self.x.is_empty() || self.l.is_empty()
    }

    /// Union of two plans (used to check monotonicity under refinement).
    pub fn merged(&self, other: &SamplingPlan) -> SamplingPlan {
        let cat = |a: &[f64], b: &[f64]| a.iter().chain(b).copied().collect::<Vec<_>>();
        SamplingPlan::new(cat(&self.t, &other.t), cat(&self.x, &other.x), cat(&self.l, &other.l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub edge: Option<usize>,
    pub t: f64,
    pub x: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Clause {
    #[serde(rename = "A")]
    SpinningLowerBound,
    #[serde(rename = "E")]
    Ellipticity,
    #[serde(rename = "R-i")]
    DriftRegularity,
    #[serde(rename = "R-ii")]
    DiffusionRegularity,
    #[serde(rename = "R-iii")]
    SpinningRegularity,
}

impl Clause {
    pub fn label(self) -> &'static str {
        match self {
            Clause::SpinningLowerBound => "A",
            Clause::Ellipticity => "E",
            Clause::DriftRegularity => "R-i",
            Clause::DiffusionRegularity => "R-ii",
            Clause::SpinningRegularity => "R-iii",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseReport {
    pub clause: Clause,
    pub pass: bool,
    /// Worst observed quantity: min weight for A, min sigma for E, the
    /// sampled sup+Lipschitz sum for the R clauses.
    pub observed: f64,
    pub bound: f64,
    pub worst: Option<Sample>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub edges: usize,
    pub clauses: Vec<ClauseReport>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn clause(&self, clause: Clause) -> &ClauseReport {
        self.clauses.iter().find(|c| c.clause == clause).expect("all clauses reported")
    }
}

const SIMPLEX_TOL: f64 = 1e-12;

/// Per-axis sup of difference quotients of a field tabulated on the plan,
/// plus the location where each is attained.
pub(crate) struct FieldStats {
    pub(crate) sup_abs: (f64, Sample),
    pub(crate) lip: [(f64, Sample); 3],
}

pub(crate) fn field_stats(
    plan: &SamplingPlan,
    edge: usize,
    mut eval: impl FnMut(f64, f64, f64) -> Result<f64, EvalError>,
) -> Result<FieldStats, EvalError> {
    let (nt, nx, nl) = (plan.t.len(), plan.x.len(), plan.l.len());
    let idx = |a: usize, b: usize, c: usize| (a * nx + b) * nl + c;
    let mut values = Vec::with_capacity(nt * nx * nl);
    for &t in &plan.t {
        for &x in &plan.x {
            for &l in &plan.l {
                values.push(eval(t, x, l)?);
            }
        }
    }
    let sample = |a: usize, b: usize, c: usize| Sample {
        edge: Some(edge),
        t: plan.t[a],
        x: plan.x[b],
        l: plan.l[c],
    };
    let mut sup_abs = (0.0_f64, sample(0, 0, 0));
    let mut lip = [(0.0_f64, sample(0, 0, 0)); 3];
    for a in 0..nt {
        for b in 0..nx {
            for c in 0..nl {
                let v = values[idx(a, b, c)];
                if v.abs() > sup_abs.0 {
                    sup_abs = (v.abs(), sample(a, b, c));
                }
                let mut bump = |axis: usize, other: usize, step: f64| {
                    let q = (values[other] - v).abs() / step;
                    if q > lip[axis].0 {
                        lip[axis] = (q, sample(a, b, c));
                    }
                };
                if a + 1 < nt {
                    bump(0, idx(a + 1, b, c), plan.t[a + 1] - plan.t[a]);
                }
                if b + 1 < nx {
                    bump(1, idx(a, b + 1, c), plan.x[b + 1] - plan.x[b]);
                }
                if c + 1 < nl {
                    bump(2, idx(a, b, c + 1), plan.l[c + 1] - plan.l[c]);
                }
            }
        }
    }
    Ok(FieldStats { sup_abs, lip })
}

fn regularity_clause(
    clause: Clause,
    bound: f64,
    stats: &[FieldStats],
) -> ClauseReport {
    let mut worst_total = 0.0;
    let mut worst = None;
    let mut detail = String::new();
    for s in stats {
        let total = s.sup_abs.0 + s.lip.iter().map(|q| q.0).sum::<f64>();
        if total >= worst_total {
            worst_total = total;
            let dominant = std::iter::once(&s.sup_abs)
                .chain(s.lip.iter())
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            worst = Some(dominant.1);
            detail = format!(
                "sup={:.6e} lip_t={:.6e} lip_x={:.6e} lip_l={:.6e}",
                s.sup_abs.0, s.lip[0].0, s.lip[1].0, s.lip[2].0
            );
        }
    }
    ClauseReport {
        clause,
        pass: bound > 0.0 && worst_total <= bound,
        observed: worst_total,
        bound,
        worst,
        detail,
    }
}

/// Checks the coefficient families against the ellipticity and regularity
/// assumption on a sampling grid. Lipschitz constants are estimated from
/// difference quotients between neighbouring grid nodes.
pub fn validate_coefficients(c: &CoefficientSet, plan: &SamplingPlan) -> Result<ValidationReport> {
    let edges = c.edges();
    if edges < 2 {
        return Err(SpiderError::Network(format!("need at least 2 edges, got {edges}")));
    }
    if plan.is_empty() {
        return Err(SpiderError::Config("sampling plan is empty".into()));
    }
    let b = c.bounds;

    // (A): simplex and lower bound, on the (t, l) grid.
    let mut alpha = Vec::with_capacity(edges);
    let mut min_weight = f64::INFINITY;
    let mut min_at = None;
    let mut max_sum_dev = 0.0_f64;
    let mut alpha_tab = Vec::with_capacity(plan.t.len() * plan.l.len());
    for &t in &plan.t {
        for &l in &plan.l {
            c.alpha_into(t, l, &mut alpha)?;
            let sum: f64 = alpha.iter().sum();
            max_sum_dev = max_sum_dev.max((sum - 1.0).abs());
            for (i, &w) in alpha.iter().enumerate() {
                if w < min_weight {
                    min_weight = w;
                    min_at = Some(Sample { edge: Some(i + 1), t, x: 0.0, l });
                }
            }
            alpha_tab.push(alpha.clone());
        }
    }
    let a_range_ok = b.a_lower > 0.0 && b.a_lower <= 1.0 / edges as f64 + 1e-15;
    let clause_a = ClauseReport {
        clause: Clause::SpinningLowerBound,
        pass: a_range_ok && max_sum_dev <= SIMPLEX_TOL && min_weight >= b.a_lower,
        observed: min_weight,
        bound: b.a_lower,
        worst: min_at,
        detail: format!(
            "max |sum(alpha) - 1| = {max_sum_dev:.3e}; a_lower in (0, 1/I]: {a_range_ok}"
        ),
    };

    // (E) and the sup/Lipschitz tables of b and sigma.
    let mut min_sigma = f64::INFINITY;
    let mut min_sigma_at = None;
    let mut drift_stats = Vec::with_capacity(edges);
    let mut sigma_stats = Vec::with_capacity(edges);
    for edge in c.edge_indices() {
        drift_stats.push(field_stats(plan, edge.get(), |t, x, l| c.drift(edge, t, x, l))?);
        sigma_stats.push(field_stats(plan, edge.get(), |t, x, l| {
            let s = c.diffusion(edge, t, x, l)?;
            if s < min_sigma {
                min_sigma = s;
                min_sigma_at = Some(Sample { edge: Some(edge.get()), t, x, l });
            }
            Ok(s)
        })?);
    }
    let clause_e = ClauseReport {
        clause: Clause::Ellipticity,
        pass: b.sigma_lower > 0.0 && min_sigma >= b.sigma_lower,
        observed: min_sigma,
        bound: b.sigma_lower,
        worst: min_sigma_at,
        detail: String::new(),
    };
    let clause_ri = regularity_clause(Clause::DriftRegularity, b.b_bound, &drift_stats);
    let clause_rii = regularity_clause(Clause::DiffusionRegularity, b.sigma_bound, &sigma_stats);

    // (R-iii): Lipschitz in t and l of each alpha_i.
    let (nt, nl) = (plan.t.len(), plan.l.len());
    let mut worst_alpha = 0.0_f64;
    let mut worst_alpha_at = None;
    for i in 0..edges {
        let mut lip_t = (0.0_f64, None);
        let mut lip_l = (0.0_f64, None);
        for a in 0..nt {
            for c_ in 0..nl {
                let v = alpha_tab[a * nl + c_][i];
                let here = Sample { edge: Some(i + 1), t: plan.t[a], x: 0.0, l: plan.l[c_] };
                if a + 1 < nt {
                    let q = (alpha_tab[(a + 1) * nl + c_][i] - v).abs() / (plan.t[a + 1] - plan.t[a]);
                    if q > lip_t.0 {
                        lip_t = (q, Some(here));
                    }
                }
                if c_ + 1 < nl {
                    let q = (alpha_tab[a * nl + c_ + 1][i] - v).abs() / (plan.l[c_ + 1] - plan.l[c_]);
                    if q > lip_l.0 {
                        lip_l = (q, Some(here));
                    }
                }
            }
        }
        let total = lip_t.0 + lip_l.0;
        if total >= worst_alpha {
            worst_alpha = total;
            worst_alpha_at = if lip_t.0 >= lip_l.0 { lip_t.1 } else { lip_l.1 };
        }
    }
    let clause_riii = ClauseReport {
        clause: Clause::SpinningRegularity,
        pass: b.alpha_lip > 0.0 && worst_alpha <= b.alpha_lip,
        observed: worst_alpha,
        bound: b.alpha_lip,
        worst: worst_alpha_at,
        detail: String::new(),
    };

    Ok(ValidationReport {
        edges,
        clauses: vec![clause_a, clause_e, clause_ri, clause_rii, clause_riii],
    })
}
