//! Local time at the vertex: downcrossing counts, the excursion-sum
//! functional, the occupation-time estimator and the exact Skorokhod map.

use serde::Serialize;

use crate::error::{Result, SpiderError};
use crate::network::{CoefficientSet, EdgeIndex};
use crate::simulator::{SchemeMeta, SpiderPath, VertexPolicy};
use crate::testfn::TestFunction;

/// Alternating grid indices `theta[n]` (first `x >= eps` after the previous
/// return) and `tau[n]` (first vertex contact after `theta[n]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcursionDecomposition {
    pub eps: f64,
    pub theta: Vec<usize>,
    pub tau: Vec<usize>,
    t0: f64,
    h: f64,
}

impl ExcursionDecomposition {
    /// Number of completed excursions `[theta, tau]` inside `[t0, t]`.
    pub fn count(&self, t: f64) -> usize {
        let last = grid_index(self.t0, self.h, t);
        self.tau.partition_point(|&k| k <= last)
    }
}

fn grid_index(t0: f64, h: f64, t: f64) -> usize {
    if t <= t0 {
        0
    } else {
        ((t - t0) / h + 1e-9).floor() as usize
    }
}

pub fn excursion_decompose(p: &SpiderPath, eps: f64) -> Result<ExcursionDecomposition> {
    let activity = p.meta.delta_activity();
    if !(eps > activity) {
        return Err(SpiderError::LevelTooSmall { eps, activity });
    }
    let mut theta = Vec::new();
    let mut tau = Vec::new();
    let mut k = 0;
    let n = p.len();
    loop {
        match (k..n).find(|&j| p.x[j] >= eps) {
            Some(up) => theta.push(up),
            None => break,
        }
        let up = theta[theta.len() - 1];
        match (up + 1..n).find(|&j| p.contact[j]) {
            Some(down) => {
                tau.push(down);
                k = down + 1;
            }
            None => break,
        }
    }
    Ok(ExcursionDecomposition { eps, theta, tau, t0: p.t0, h: p.meta.h })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Downcrossing,
    Occupation,
    ExcursionFunctional,
    SkorokhodOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalTimeEstimate {
    pub method: Method,
    pub eps: f64,
    /// `(query time, estimate)` in the order the times were given.
    pub values: Vec<(f64, f64)>,
}

/// `eps * N^eps(t)` at each query time.
pub fn downcrossing_estimate(p: &SpiderPath, eps: f64, times: &[f64]) -> Result<LocalTimeEstimate> {
    let dec = excursion_decompose(p, eps)?;
    Ok(LocalTimeEstimate {
        method: Method::Downcrossing,
        eps,
        values: times.iter().map(|&t| (t, eps * dec.count(t) as f64)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExcursionSum {
    pub value: f64,
    /// Number of increments summed; smaller than `N^eps(t)` when the path
    /// ends before the excursion after the last return reaches `eps`.
    pub terms: usize,
}

/// Sum over completed excursions of `f` at the next up-crossing of `eps`
/// minus `f` at the return to the vertex. Both ends are evaluated at their
/// level values (`eps` and `0`) with the grid time, edge and local time.
pub fn excursion_functional(p: &SpiderPath, f: &TestFunction, eps: f64, t: f64) -> Result<ExcursionSum> {
    let dec = excursion_decompose(p, eps)?;
    let n = dec.count(t);
    let mut value = 0.0;
    let mut terms = 0;
    for k in 0..n {
        let Some(&up) = dec.theta.get(k + 1) else { break };
        let down = dec.tau[k];
        value += f.value(p.edge[up], p.time(up), eps, p.l[up]) - f.value(p.edge[down], p.time(down), 0.0, p.l[down]);
        terms += 1;
    }
    Ok(ExcursionSum { value, terms })
}

/// On-path Stieltjes integral of `d_l f(s,0,l) + sum_i alpha_i d_x f_i(s,0,l)`
/// against `dl` up to `t`, with left-endpoint integrands.
pub fn excursion_reference(p: &SpiderPath, f: &TestFunction, c: &CoefficientSet, t: f64) -> Result<f64> {
    let last = p.index_at(t);
    let mut alpha = Vec::with_capacity(c.edges());
    let mut slopes = Vec::with_capacity(c.edges());
    let mut total = 0.0;
    for k in 0..last {
        let dl = p.l[k + 1] - p.l[k];
        if dl == 0.0 {
            continue;
        }
        let (tk, lk) = (p.time(k), p.l[k]);
        c.alpha_into(tk, lk, &mut alpha)?;
        f.vertex_slopes(tk, lk, &mut slopes);
        let flux: f64 = alpha.iter().zip(&slopes).map(|(a, s)| a * s).sum();
        total += (f.vertex_dl(tk, lk) + flux) * dl;
    }
    Ok(total)
}

/// `(1/2eps) sum_{j in subset} sum_k sigma_j^2(t_k, 0, l_k) 1{x_k <= eps, i_k = j} h`
/// over grid steps before each query time.
pub fn occupation_estimate(
    p: &SpiderPath,
    c: &CoefficientSet,
    eps: f64,
    times: &[f64],
    subset: &[EdgeIndex],
) -> Result<LocalTimeEstimate> {
    if !(eps > 0.0) {
        return Err(SpiderError::Config(format!("occupation level must be positive, got {eps}")));
    }
    if subset.is_empty() {
        return Err(SpiderError::Config("occupation estimate needs a nonempty edge subset".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut values = vec![(0.0, 0.0); times.len()];
    let h = p.meta.h;
    let mut acc = 0.0;
    let mut k = 0;
    for q in order {
        let last = p.index_at(times[q]);
        while k < last {
            if p.x[k] <= eps && subset.contains(&p.edge[k]) {
                let s = c.diffusion(p.edge[k], p.time(k), 0.0, p.l[k])?;
                acc += s * s * h;
            }
            k += 1;
        }
        values[q] = (times[q], acc / (2.0 * eps));
    }
    Ok(LocalTimeEstimate { method: Method::Occupation, eps, values })
}

/// Reflected random walk and its exact local time from the Skorokhod map.
#[derive(Debug, Clone, PartialEq)]
pub struct SkorokhodPath {
    pub h: f64,
    pub x: Vec<f64>,
    pub l: Vec<f64>,
    pub gaussians: Vec<f64>,
}

/// Skorokhod reflection of the skeleton `y_k = sqrt(h) (g_0 + ... + g_{k-1})`:
/// `l_k = -min(0, min_{j<=k} y_j)` and `x_k = y_k + l_k`.
pub fn skorokhod_oracle(gaussians: &[f64], h: f64, horizon: f64) -> Result<SkorokhodPath> {
    let steps = (horizon / h).round() as usize;
    if gaussians.len() != steps {
        return Err(SpiderError::Config(format!(
            "{} increments for horizon {horizon} at h = {h} ({steps} steps)",
            gaussians.len()
        )));
    }
    let sh = h.sqrt();
    let mut x = Vec::with_capacity(steps + 1);
    let mut l = Vec::with_capacity(steps + 1);
    let (mut y, mut running_min) = (0.0_f64, 0.0_f64);
    x.push(0.0);
    l.push(0.0);
    for g in gaussians {
        y += sh * g;
        running_min = running_min.min(y);
        x.push(y - running_min);
        l.push(-running_min);
    }
    Ok(SkorokhodPath { h, x, l, gaussians: gaussians.to_vec() })
}

impl SkorokhodPath {
    /// Views the reflected walk as a path on edge 1; contacts are the grid
    /// points where the walk sits at the vertex.
    pub fn to_spider_path(&self, seed: u64, path_index: usize) -> SpiderPath {
        let n = self.x.len();
        SpiderPath {
            t0: 0.0,
            x: self.x.clone(),
            edge: vec![EdgeIndex::from_one_based(1); n],
            l: self.l.clone(),
            contact: self.x.iter().map(|&v| v == 0.0).collect(),
            gaussians: self.gaussians.clone(),
            meta: SchemeMeta {
                h: self.h,
                delta_shell: 0.0,
                policy: VertexPolicy::Reflection,
                seed,
                path_index,
                sigma_bound: 1.0,
            },
        }
    }

    pub fn local_time_at(&self, t: f64) -> f64 {
        self.l[grid_index(0.0, self.h, t).min(self.l.len() - 1)]
    }
}
