//! Monte Carlo Feynman-Kac estimates and their comparison with the PDE solver.

use serde::Serialize;

use crate::error::{Result, SpiderError};
use crate::network::{field_stats, CoefficientSet, EdgeIndex, Field, SamplingPlan};
use crate::pde::{solve, Direction, PdeData, PdeGrid, PdeProblem};
use crate::simulator::{map_paths, SimConfig, SpiderPath, SpiderState};
use crate::stats::Moments;
use crate::verify::config_hash;

/// Running costs `h_i(t,x,l)`, vertex cost `h_0(t,l)` (read at `x = 0`) and
/// payoff `g_i(x,l)` (read at `t = T`).
#[derive(Clone)]
pub struct FkProblem {
    pub running: Vec<Field>,
    pub vertex: Field,
    pub terminal: Vec<Field>,
    /// Declared bound on sup and Lipschitz quotients of the costs.
    pub h_bound: f64,
    /// Dirichlet data at `l = K` for the PDE comparison; `g(x, K)` when absent.
    pub ceiling: Option<Vec<Field>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FkDataCheck {
    /// Largest `|g_i(0,l) - g_1(0,l)|` over the sampled `l`.
    pub payoff_continuity: f64,
    /// Largest sampled `sup|h| + Lip_t + Lip_x + Lip_l` over the costs.
    pub cost_regularity: f64,
    pub pass: bool,
}

impl FkProblem {
    pub fn new(running: Vec<Field>, vertex: Field, terminal: Vec<Field>, h_bound: f64) -> Result<Self> {
        if running.len() != terminal.len() || running.len() < 2 {
            return Err(SpiderError::Config(format!(
                "fk problem needs matching per-edge costs and payoffs ({} vs {})",
                running.len(),
                terminal.len()
            )));
        }
        Ok(FkProblem { running, vertex, terminal, h_bound, ceiling: None })
    }

    pub fn edges(&self) -> usize {
        self.running.len()
    }

    /// Sampled checks of payoff continuity at the vertex and of the cost bound.
    pub fn check(&self, plan: &SamplingPlan, horizon: f64) -> Result<FkDataCheck> {
        let mut continuity = 0.0_f64;
        for &l in &plan.l {
            let g1 = (self.terminal[0])(horizon, 0.0, l)?;
            for g in &self.terminal[1..] {
                continuity = continuity.max((g(horizon, 0.0, l)? - g1).abs());
            }
        }
        let mut regularity = 0.0_f64;
        let total = |s: &crate::network::FieldStats| s.sup_abs.0 + s.lip.iter().map(|q| q.0).sum::<f64>();
        for (k, h) in self.running.iter().enumerate() {
            regularity = regularity.max(total(&field_stats(plan, k + 1, |t, x, l| h(t, x, l))?));
        }
        let vertex_plan = SamplingPlan::new(plan.t.clone(), vec![0.0], plan.l.clone());
        regularity = regularity.max(total(&field_stats(&vertex_plan, 0, |t, _, l| (self.vertex)(t, 0.0, l))?));
        Ok(FkDataCheck {
            payoff_continuity: continuity,
            cost_regularity: regularity,
            pass: continuity <= 1e-12 && regularity <= self.h_bound,
        })
    }

    fn pde_problem(&self, c: &CoefficientSet) -> Result<PdeProblem> {
        PdeProblem::new(
            c.clone(),
            PdeData {
                running: self.running.clone(),
                vertex: self.vertex.clone(),
                terminal: self.terminal.clone(),
                ceiling: self.ceiling.clone(),
                killing: None,
            },
            Direction::Backward,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Query {
    pub t: f64,
    pub x: f64,
    pub edge: EdgeIndex,
    pub l: f64,
}

impl Query {
    pub fn state(&self) -> SpiderState {
        SpiderState::new(self.t, self.x, self.edge, self.l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FkEstimate {
    pub query: Query,
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub config_hash: String,
}

/// `sum_k h(t_k, x_k, l_k) h + sum_k h_0(t_k, l_k) (l_{k+1} - l_k) + g(x_K, l_K)`.
pub fn path_functional(prob: &FkProblem, p: &SpiderPath, horizon: f64) -> Result<f64> {
    let h = p.meta.h;
    let mut acc = 0.0;
    for k in 0..p.len() - 1 {
        let (t, x, l, e) = (p.time(k), p.x[k], p.l[k], p.edge[k]);
        acc += (prob.running[e.slot()])(t, x, l)? * h;
        let dl = p.l[k + 1] - l;
        if dl != 0.0 {
            acc += (prob.vertex)(t, 0.0, l)? * dl;
        }
    }
    let end = p.last();
    Ok(acc + (prob.terminal[end.edge.slot()])(horizon, end.x, end.l)?)
}

/// Per-path values of the Feynman-Kac functional, in path order.
pub fn fk_samples(prob: &FkProblem, c: &CoefficientSet, query: &Query, cfg: &SimConfig) -> Result<Vec<f64>> {
    if query.t >= cfg.horizon {
        return Err(SpiderError::Config(format!("query time {} is not before the horizon {}", query.t, cfg.horizon)));
    }
    if prob.edges() != c.edges() {
        return Err(SpiderError::Config(format!("fk problem has {} edges, network has {}", prob.edges(), c.edges())));
    }
    map_paths(c, &query.state(), cfg, |p| path_functional(prob, p, cfg.horizon))
}

pub fn fk_estimate(prob: &FkProblem, c: &CoefficientSet, query: &Query, cfg: &SimConfig) -> Result<FkEstimate> {
    let m = Moments::from_slice(&fk_samples(prob, c, query, cfg)?);
    Ok(FkEstimate { query: *query, mean: m.mean, stderr: m.std_err(), n_paths: cfg.n_paths, config_hash: config_hash(cfg) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub query: Query,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    /// Solution on the refined grid.
    pub pde_value: f64,
    pub pde_coarse: f64,
    /// `|u_fine - u_coarse|`, the first-order Richardson error estimate of `u_fine`.
    pub grid_budget: f64,
    pub diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FkComparison {
    pub rows: Vec<ComparisonRow>,
    pub coarse: PdeGrid,
    pub fine: PdeGrid,
    pub pde_warnings: Vec<String>,
}

impl FkComparison {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Compares MC estimates against PDE values from `grid` and its refinement.
pub fn fk_vs_pde(
    prob: &FkProblem,
    c: &CoefficientSet,
    queries: &[Query],
    cfg: &SimConfig,
    grid: &PdeGrid,
) -> Result<FkComparison> {
    if (grid.horizon - cfg.horizon).abs() > 1e-12 {
        return Err(SpiderError::Config(format!("grid horizon {} differs from sim horizon {}", grid.horizon, cfg.horizon)));
    }
    for q in queries {
        if q.x > 0.9 * grid.r || q.l > 0.9 * grid.k || q.t >= grid.horizon || q.t < 0.0 {
            return Err(SpiderError::Config(format!(
                "query {q:?} is not inside the truncated domain with a 10% margin (R = {}, K = {})",
                grid.r, grid.k
            )));
        }
    }
    let pde = prob.pde_problem(c)?;
    let fine_grid = grid.refined();
    let (coarse, fine) = rayon::join(|| solve(&pde, grid), || solve(&pde, &fine_grid));
    let (coarse, fine) = (coarse?, fine?);
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let est = fk_estimate(prob, c, q, cfg)?;
        let pde_value = fine.value_at(q.t, q.x, q.edge, q.l);
        let pde_coarse = coarse.value_at(q.t, q.x, q.edge, q.l);
        let grid_budget = (pde_value - pde_coarse).abs();
        let diff = (est.mean - pde_value).abs();
        // Roundoff floor: summing many inexact steps h drifts by ~1e-12.
        let tolerance = 3.0 * est.stderr + grid_budget + 1e-10 * pde_value.abs().max(1.0);
        rows.push(ComparisonRow {
            query: *q,
            mc_mean: est.mean,
            mc_stderr: est.stderr,
            pde_value,
            pde_coarse,
            grid_budget,
            diff,
            tolerance,
            pass: diff <= tolerance,
        });
    }
    let mut pde_warnings = coarse.warnings;
    pde_warnings.extend(fine.warnings);
    pde_warnings.dedup();
    Ok(FkComparison { rows, coarse: *grid, fine: fine_grid, pde_warnings })
}
