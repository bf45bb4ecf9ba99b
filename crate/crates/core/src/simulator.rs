//! Euler path generation for the spider diffusion.
//!
//! Inside an edge the radial coordinate follows an explicit Euler step with
//! coefficients frozen at the left endpoint. A proposal at or below zero is a
//! vertex contact, resolved by a [`VertexPolicy`]. Every step satisfies the
//! discrete semimartingale identity
//!
//! ```text
//! x[k+1] = x[k] + b h + sigma sqrt(h) g[k] + (l[k+1] - l[k])
//! ```
//!
//! because a contact places the proposal `y` at `x' >= 0` on the new edge and
//! books `x' - y` as local time. Plain reflection uses `x' = -y`, a local
//! time increment of `-2y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result, SpiderError};
use crate::network::{CoefficientSet, EdgeIndex};
use crate::rng::PathRng;
use crate::stats::Moments;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpiderState {
    pub t: f64,
    pub x: f64,
    pub edge: EdgeIndex,
    pub l: f64,
}

impl SpiderState {
    pub fn new(t: f64, x: f64, edge: EdgeIndex, l: f64) -> Self {
        SpiderState { t, x, edge, l }
    }

    /// Start at the junction; the edge is drawn from alpha when simulation begins.
    pub fn vertex(t: f64, l: f64) -> Self {
        SpiderState { t, x: 0.0, edge: EdgeIndex::from_one_based(1), l }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexPolicy {
    /// Reflect every negative proposal and redraw the edge at every contact.
    Reflection,
    /// Draw the edge once per vertex visit, then run the reflected excursion
    /// on that edge until the radius reaches `delta_shell`.
    Shell,
    /// Reflection in the scaled radius `x / sigma`. Coincides with
    /// `Reflection` when the diffusions agree at the vertex; otherwise it
    /// keeps the exit law equal to `alpha`, which plain reflection does not.
    ScaledReflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub h: f64,
    /// Absolute final time of every path.
    pub horizon: f64,
    pub delta_shell: f64,
    pub policy: VertexPolicy,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub store_paths: bool,
}

impl SimConfig {
    pub fn validate(&self, c: &CoefficientSet) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SpiderError::Config(format!("sim.{name} must be positive and finite, got {v}")))
            }
        };
        positive("h", self.h)?;
        positive("horizon", self.horizon)?;
        positive("delta_shell", self.delta_shell)?;
        let sb = c.bounds.sigma_bound;
        if self.policy == VertexPolicy::Shell && self.h > self.delta_shell.powi(2) / (10.0 * sb * sb) {
            return Err(SpiderError::Config(format!(
                "shell policy needs h <= delta_shell^2 / (10 sigma_bound^2) = {:.3e}, got h = {:.3e}",
                self.delta_shell.powi(2) / (10.0 * sb * sb),
                self.h
            )));
        }
        Ok(())
    }

    pub fn delta_activity(&self, sigma_bound: f64) -> f64 {
        self.delta_shell.max(3.0 * sigma_bound * self.h.sqrt())
    }

    fn steps_from(&self, t0: f64) -> usize {
        if t0 >= self.horizon {
            0
        } else {
            ((self.horizon - t0) / self.h).round() as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeMeta {
    pub h: f64,
    pub delta_shell: f64,
    pub policy: VertexPolicy,
    pub seed: u64,
    pub path_index: usize,
    pub sigma_bound: f64,
}

impl SchemeMeta {
    /// Radius within which the scheme may move local time or switch edges.
    pub fn delta_activity(&self) -> f64 {
        self.delta_shell.max(3.0 * self.sigma_bound * self.h.sqrt())
    }
}

/// A path on the uniform grid `t[k] = t0 + k h`.
///
/// `contact[k]` marks grid points reached through a vertex contact (and the
/// start when it lies on the vertex). `gaussians[k]` drove the step `k -> k+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiderPath {
    pub t0: f64,
    pub x: Vec<f64>,
    pub edge: Vec<EdgeIndex>,
    pub l: Vec<f64>,
    pub contact: Vec<bool>,
    pub gaussians: Vec<f64>,
    pub meta: SchemeMeta,
}

impl SpiderPath {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.meta.h
    }

    pub fn state(&self, k: usize) -> SpiderState {
        SpiderState { t: self.time(k), x: self.x[k], edge: self.edge[k], l: self.l[k] }
    }

    pub fn last(&self) -> SpiderState {
        self.state(self.len() - 1)
    }

    /// Last grid index with `t[k] <= t` (clamped to the path).
    pub fn index_at(&self, t: f64) -> usize {
        if t <= self.t0 {
            return 0;
        }
        let k = ((t - self.t0) / self.meta.h + 1e-9).floor() as usize;
        k.min(self.len() - 1)
    }
}

/// A proposal that crossed the vertex, awaiting a [`VertexPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    /// State at the start of the step.
    pub from: SpiderState,
    /// Non-positive Euler proposal.
    pub y: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Interior(SpiderState),
    Contact(Contact),
}

/// One explicit Euler step inside the current edge.
pub fn step_interior(
    s: &SpiderState,
    c: &CoefficientSet,
    h: f64,
    gaussian: f64,
) -> Result<StepOutcome, EvalError> {
    if !gaussian.is_finite() {
        return Err(EvalError::NonFinite(format!("gaussian increment {gaussian}")));
    }
    let b = c.drift(s.edge, s.t, s.x, s.l)?;
    let sigma = c.diffusion(s.edge, s.t, s.x, s.l)?;
    let y = s.x + b * h + sigma * h.sqrt() * gaussian;
    if !y.is_finite() {
        return Err(EvalError::NonFinite(format!("Euler proposal at t={}", s.t)));
    }
    if y > 0.0 {
        Ok(StepOutcome::Interior(SpiderState { t: s.t + h, x: y, edge: s.edge, l: s.l }))
    } else {
        Ok(StepOutcome::Contact(Contact { from: *s, y, h }))
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_edge(weights: &[f64], u: f64) -> EdgeIndex {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return EdgeIndex::from_one_based(k as u16 + 1);
        }
    }
    EdgeIndex::from_one_based(weights.len() as u16)
}

/// Resolves a vertex contact. Reflection returns the reflected state after
/// one step; Shell keeps reflecting on the drawn edge until the radius
/// reaches `delta_shell` and returns that exit state.
pub fn resolve_vertex(
    contact: &Contact,
    c: &CoefficientSet,
    policy: VertexPolicy,
    delta_shell: f64,
    rng: &mut PathRng,
) -> Result<SpiderState, EvalError> {
    let mut stepper = Stepper::new(c, policy, contact.h, delta_shell);
    let mut s = stepper.reflect(contact, rng)?.state;
    if policy == VertexPolicy::Shell {
        while stepper.in_shell.is_some() {
            s = stepper.advance(&s, rng.gaussian(), rng)?.state;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
struct Advance {
    state: SpiderState,
    contact: bool,
}

/// Step engine shared by the path, batch and first-hit drivers.
struct Stepper<'a> {
    c: &'a CoefficientSet,
    policy: VertexPolicy,
    h: f64,
    delta_shell: f64,
    /// Edge locked by the Shell policy while inside the shell.
    in_shell: Option<EdgeIndex>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(c: &'a CoefficientSet, policy: VertexPolicy, h: f64, delta_shell: f64) -> Self {
        Stepper { c, policy, h, delta_shell, in_shell: None, alpha: Vec::with_capacity(c.edges()), sigma: Vec::with_capacity(c.edges()) }
    }

    fn draw_edge(&mut self, t: f64, l: f64, rng: &mut PathRng) -> Result<EdgeIndex, EvalError> {
        self.c.alpha_into(t, l, &mut self.alpha)?;
        Ok(sample_edge(&self.alpha, rng.uniform()))
    }

    /// Prepares the initial state: a vertex start draws its edge.
    fn start(&mut self, init: &SpiderState, rng: &mut PathRng) -> Result<SpiderState, EvalError> {
        let mut s = *init;
        if s.x <= 0.0 {
            s.x = 0.0;
            s.edge = self.draw_edge(s.t, s.l, rng)?;
            if self.policy == VertexPolicy::Shell {
                self.in_shell = Some(s.edge);
            }
        }
        Ok(s)
    }

    /// Draws the edge with weights `alpha_j / sigma_j` at the vertex and returns
    /// the overshoot factor `sigma_j / sigma_old`. In the scaled radius every
    /// edge then carries the same walk, so no edge gains escape probability
    /// from a larger diffusion.
    fn draw_scaled(&mut self, from: &SpiderState, rng: &mut PathRng) -> Result<(EdgeIndex, f64), EvalError> {
        let (t, l) = (from.t, from.l);
        self.c.alpha_into(t, l, &mut self.alpha)?;
        let sig = &mut self.sigma;
        sig.clear();
        for k in 0..self.alpha.len() {
            sig.push(self.c.diffusion(EdgeIndex::from_one_based(k as u16 + 1), t, 0.0, l)?);
        }
        let total: f64 = self.alpha.iter().zip(sig.iter()).map(|(a, s)| a / s).sum();
        for (a, s) in self.alpha.iter_mut().zip(sig.iter()) {
            *a /= s * total;
        }
        let edge = sample_edge(&self.alpha, rng.uniform());
        let ratio = sig[edge.get() - 1] / sig[from.edge.get() - 1];
        Ok((edge, ratio))
    }

    fn reflect(&mut self, contact: &Contact, rng: &mut PathRng) -> Result<Advance, EvalError> {
        let from = contact.from;
        let (edge, ratio) = match (self.in_shell, self.policy) {
            (Some(locked), _) => (locked, 1.0),
            (None, VertexPolicy::ScaledReflection) => self.draw_scaled(&from, rng)?,
            (None, _) => (self.draw_edge(from.t, from.l, rng)?, 1.0),
        };
        let x = -contact.y * ratio;
        let state = SpiderState { t: from.t + contact.h, x, edge, l: from.l + x - contact.y };
        self.in_shell = match self.policy {
            VertexPolicy::Shell if x < self.delta_shell => Some(edge),
            _ => None,
        };
        Ok(Advance { state, contact: true })
    }

    fn advance(&mut self, s: &SpiderState, g: f64, rng: &mut PathRng) -> Result<Advance, EvalError> {
        match step_interior(s, self.c, self.h, g)? {
            StepOutcome::Interior(next) => {
                if self.in_shell.is_some() && next.x >= self.delta_shell {
                    self.in_shell = None;
                }
                Ok(Advance { state: next, contact: false })
            }
            StepOutcome::Contact(contact) => self.reflect(&contact, rng),
        }
    }
}

fn meta(c: &CoefficientSet, cfg: &SimConfig, path_index: usize) -> SchemeMeta {
    SchemeMeta {
        h: cfg.h,
        delta_shell: cfg.delta_shell,
        policy: cfg.policy,
        seed: cfg.seed,
        path_index,
        sigma_bound: c.bounds.sigma_bound,
    }
}

fn check_init(init: &SpiderState, c: &CoefficientSet) -> Result<()> {
    if !(init.x >= 0.0 && init.l >= 0.0 && init.t.is_finite() && init.x.is_finite() && init.l.is_finite()) {
        return Err(SpiderError::Config(format!("invalid initial state {init:?}")));
    }
    EdgeIndex::new(init.edge.get(), c.edges())?;
    Ok(())
}

/// Simulates path `path_index` of the batch keyed by `cfg.seed`.
pub fn simulate_path(c: &CoefficientSet, init: &SpiderState, cfg: &SimConfig, path_index: usize) -> Result<SpiderPath> {
    let mut rng = PathRng::for_path(cfg.seed, path_index);
    let steps = cfg.steps_from(init.t);
    let mut gaussians = Vec::with_capacity(steps);
    for _ in 0..steps {
        gaussians.push(rng.gaussian());
    }
    drive(c, init, cfg, path_index, &gaussians, &mut rng)
}

/// Simulates with externally supplied gaussian increments, one per step.
/// Edge draws still come from the path's own stream.
pub fn simulate_path_with_gaussians(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    path_index: usize,
    gaussians: &[f64],
) -> Result<SpiderPath> {
    let steps = cfg.steps_from(init.t);
    if gaussians.len() != steps {
        return Err(SpiderError::Config(format!(
            "{} gaussian increments supplied for {steps} steps",
            gaussians.len()
        )));
    }
    if let Some(&g) = gaussians.iter().find(|g| !g.is_finite()) {
        return Err(SpiderError::BadGaussian(g));
    }
    let mut rng = PathRng::new(cfg.seed, crate::rng::Purpose::Skeleton, path_index as u64);
    drive(c, init, cfg, path_index, gaussians, &mut rng)
}

fn drive(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    path_index: usize,
    gaussians: &[f64],
    rng: &mut PathRng,
) -> Result<SpiderPath> {
    check_init(init, c)?;
    let n = gaussians.len() + 1;
    let mut path = SpiderPath {
        t0: init.t,
        x: Vec::with_capacity(n),
        edge: Vec::with_capacity(n),
        l: Vec::with_capacity(n),
        contact: Vec::with_capacity(n),
        gaussians: gaussians.to_vec(),
        meta: meta(c, cfg, path_index),
    };
    let mut stepper = Stepper::new(c, cfg.policy, cfg.h, cfg.delta_shell);
    let mut s = stepper.start(init, rng).map_err(SpiderError::at(path_index, 0))?;
    path.x.push(s.x);
    path.edge.push(s.edge);
    path.l.push(s.l);
    path.contact.push(s.x == 0.0);
    for (k, &g) in gaussians.iter().enumerate() {
        let adv = stepper.advance(&s, g, rng).map_err(SpiderError::at(path_index, k))?;
        s = adv.state;
        s.t = init.t + (k + 1) as f64 * cfg.h;
        path.x.push(s.x);
        path.edge.push(s.edge);
        path.l.push(s.l);
        path.contact.push(adv.contact);
    }
    Ok(path)
}

/// Runs `f` on a pool with `workers` threads (or the global pool).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| SpiderError::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Evaluates `f(0..n)` in parallel and returns the results in index order.
pub fn par_map<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Simulates every path of the batch and maps it through `reduce` without
/// keeping the path.
pub fn map_paths<R, F>(c: &CoefficientSet, init: &SpiderState, cfg: &SimConfig, reduce: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&SpiderPath) -> Result<R> + Sync + Send,
{
    cfg.validate(c)?;
    par_map(cfg.n_paths, |k| reduce(&simulate_path(c, init, cfg, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchSummary {
    pub n_paths: usize,
    pub terminal_x: Moments,
    pub terminal_l: Moments,
    pub contacts: Moments,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub summary: BatchSummary,
    /// Filled only when `store_paths` is set.
    pub paths: Vec<SpiderPath>,
}

pub fn simulate_batch(c: &CoefficientSet, init: &SpiderState, cfg: &SimConfig) -> Result<Batch> {
    let store = cfg.store_paths;
    let per_path = map_paths(c, init, cfg, |p| {
        let s = p.last();
        let contacts = p.contact.iter().filter(|&&b| b).count() as f64;
        Ok((s.x, s.l, contacts, if store { Some(p.clone()) } else { None }))
    })?;
    let mut summary = BatchSummary { n_paths: per_path.len(), ..Default::default() };
    let mut paths = Vec::new();
    for (x, l, contacts, p) in per_path {
        summary.terminal_x.push(x);
        summary.terminal_l.push(l);
        summary.contacts.push(contacts);
        paths.extend(p);
    }
    Ok(Batch { summary, paths })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitResult {
    /// Absolute time of the first grid point with `x >= level`, or the horizon.
    pub theta: f64,
    pub edge: EdgeIndex,
    pub x: f64,
    pub l: f64,
    pub censored: bool,
}

/// First grid time at which the radius reaches `level`, censored at the horizon.
pub fn first_hit(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    level: f64,
    path_index: usize,
) -> Result<HitResult> {
    check_init(init, c)?;
    if !(level > 0.0) {
        return Err(SpiderError::Config(format!("hitting level must be positive, got {level}")));
    }
    let mut rng = PathRng::for_path(cfg.seed, path_index);
    let mut stepper = Stepper::new(c, cfg.policy, cfg.h, cfg.delta_shell);
    let mut s = stepper.start(init, &mut rng).map_err(SpiderError::at(path_index, 0))?;
    let steps = cfg.steps_from(init.t);
    for k in 0..steps {
        if s.x >= level {
            return Ok(HitResult { theta: s.t, edge: s.edge, x: s.x, l: s.l, censored: false });
        }
        s = stepper.advance(&s, rng.gaussian(), &mut rng).map_err(SpiderError::at(path_index, k))?.state;
        s.t = init.t + (k + 1) as f64 * cfg.h;
    }
    Ok(HitResult { theta: s.t, edge: s.edge, x: s.x, l: s.l, censored: s.x < level })
}

pub fn first_hit_batch(c: &CoefficientSet, init: &SpiderState, cfg: &SimConfig, level: f64) -> Result<Vec<HitResult>> {
    cfg.validate(c)?;
    par_map(cfg.n_paths, |k| first_hit(c, init, cfg, level, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bounds, CoefficientSet};

    fn bounds() -> Bounds {
        Bounds { a_lower: 0.1, sigma_lower: 0.5, b_bound: 3.0, sigma_bound: 1.0, alpha_lip: 1.0 }
    }

    fn coeffs(b: f64, alpha: &[f64]) -> CoefficientSet {
        let n = alpha.len();
        CoefficientSet::constant(&vec![b; n], &vec![1.0; n], alpha, bounds()).unwrap()
    }

    fn e(i: u16) -> EdgeIndex {
        EdgeIndex::from_one_based(i)
    }

    fn cfg(policy: VertexPolicy, h: f64, horizon: f64, n_paths: usize) -> SimConfig {
        SimConfig { h, horizon, delta_shell: 0.01, policy, n_paths, seed: 11, store_paths: false }
    }

    #[test]
    fn interior_step_examples() {
        let s = SpiderState::new(0.0, 1.0, e(1), 0.3);
        match step_interior(&s, &coeffs(0.0, &[0.5, 0.5]), 0.01, 0.0).unwrap() {
            StepOutcome::Interior(n) => assert_eq!((n.x, n.l), (1.0, 0.3)),
            other => panic!("{other:?}"),
        }
        match step_interior(&s, &coeffs(2.0, &[0.5, 0.5]), 0.01, 0.0).unwrap() {
            StepOutcome::Interior(n) => assert!((n.x - 1.02).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        let s = SpiderState::new(0.0, 0.001, e(1), 0.0);
        match step_interior(&s, &coeffs(0.0, &[0.5, 0.5]), 0.01, -3.0).unwrap() {
            StepOutcome::Contact(c) => assert!((c.y + 0.299).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert!(step_interior(&s, &coeffs(0.0, &[0.5, 0.5]), 0.01, f64::NAN).is_err());
    }

    #[test]
    fn reflection_books_twice_the_overshoot() {
        let c = coeffs(0.0, &[0.5, 0.5]);
        let contact = Contact { from: SpiderState::new(0.0, 0.01, e(1), 0.2), y: -0.05, h: 0.01 };
        let mut seen = [0usize; 2];
        for k in 0..2000 {
            let mut rng = PathRng::for_path(3, k);
            let s = resolve_vertex(&contact, &c, VertexPolicy::Reflection, 0.01, &mut rng).unwrap();
            assert_eq!(s.x, 0.05);
            assert!((s.l - 0.30).abs() < 1e-15);
            assert!((s.t - 0.01).abs() < 1e-15);
            seen[s.edge.slot()] += 1;
        }
        let p = seen[0] as f64 / 2000.0;
        assert!((p - 0.5).abs() < 3.0 * (0.25f64 / 2000.0).sqrt(), "{seen:?}");
    }

    #[test]
    fn shell_exit_local_time_tracks_radius() {
        let c = coeffs(0.0, &[0.5, 0.5]);
        let delta = 0.01;
        let ratio = |h: f64| {
            let contact = Contact { from: SpiderState::new(0.0, 0.0, e(1), 0.0), y: 0.0, h };
            let mut m = Moments::default();
            for k in 0..20_000 {
                let mut rng = PathRng::for_path(5, k);
                let s = resolve_vertex(&contact, &c, VertexPolicy::Shell, delta, &mut rng).unwrap();
                assert!(s.x >= delta);
                m.push(s.l / delta);
            }
            m
        };
        let coarse = ratio(1e-6);
        let fine = ratio(1e-7);
        assert!(fine.mean < coarse.mean);
        assert!((fine.mean - 1.0).abs() < 0.03 + 3.0 * fine.std_err(), "{fine:?}");
    }

    #[test]
    fn shell_config_requires_fine_steps() {
        let c = coeffs(0.0, &[0.5, 0.5]);
        assert!(cfg(VertexPolicy::Shell, 1e-5, 1.0, 1).validate(&c).is_ok());
        assert!(cfg(VertexPolicy::Shell, 1e-4, 1.0, 1).validate(&c).is_err());
        assert!(cfg(VertexPolicy::Reflection, 1e-4, 1.0, 1).validate(&c).is_ok());
    }

    #[test]
    fn path_invariants_hold() {
        let c = CoefficientSet::new(
            vec![crate::network::field(|_, x, _| 0.5 - x), crate::network::constant_field(-0.3), crate::network::constant_field(0.2)],
            vec![crate::network::constant_field(1.0), crate::network::field(|t, _, _| 0.8 + 0.1 * t), crate::network::constant_field(0.7)],
            crate::network::alpha_fn(|_, l| {
                let w = [1.0 + l, 1.0, 2.0];
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            }),
            bounds(),
        )
        .unwrap();
        for policy in [VertexPolicy::Reflection, VertexPolicy::Shell, VertexPolicy::ScaledReflection] {
            let cfg = cfg(policy, 1e-5, 0.2, 8);
            for k in 0..cfg.n_paths {
                let p = simulate_path(&c, &SpiderState::vertex(0.0, 0.0), &cfg, k).unwrap();
                let act = p.meta.delta_activity();
                assert_eq!(p.len(), 20_001);
                for j in 0..p.len() - 1 {
                    assert!(p.x[j + 1] >= 0.0);
                    assert!(p.l[j + 1] >= p.l[j]);
                    let near = p.x[j].min(p.x[j + 1]) <= act;
                    if p.l[j + 1] > p.l[j] || p.edge[j + 1] != p.edge[j] {
                        assert!(near, "step {j}: {} -> {}", p.x[j], p.x[j + 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn scheme_identity_is_exact_per_step() {
        let c = coeffs(0.4, &[0.3, 0.7]);
        let cfg = cfg(VertexPolicy::Reflection, 1e-3, 1.0, 1);
        let p = simulate_path(&c, &SpiderState::new(0.0, 0.05, e(2), 0.0), &cfg, 0).unwrap();
        for k in 0..p.len() - 1 {
            let rhs = p.x[k] + 0.4 * cfg.h + cfg.h.sqrt() * p.gaussians[k] + (p.l[k + 1] - p.l[k]);
            assert!((p.x[k + 1] - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_is_deterministic_across_workers() {
        let c = coeffs(0.1, &[0.5, 0.3, 0.2]);
        let cfg = cfg(VertexPolicy::Reflection, 1e-3, 1.0, 64);
        let init = SpiderState::vertex(0.0, 0.0);
        let one = with_workers(Some(1), || simulate_batch(&c, &init, &cfg)).unwrap().unwrap();
        let many = with_workers(Some(8), || simulate_batch(&c, &init, &cfg)).unwrap().unwrap();
        assert_eq!(one.summary, many.summary);
        let other = simulate_batch(&c, &init, &SimConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(other.summary, one.summary);
        let empty = simulate_batch(&c, &init, &SimConfig { n_paths: 0, ..cfg }).unwrap();
        assert_eq!(empty.summary.n_paths, 0);
        assert!(empty.paths.is_empty());
    }

    #[test]
    fn stored_paths_round_trip() {
        let c = coeffs(0.0, &[0.5, 0.5]);
        let cfg = SimConfig { store_paths: true, ..cfg(VertexPolicy::Reflection, 1e-2, 1.0, 3) };
        let batch = simulate_batch(&c, &SpiderState::new(0.0, 1.0, e(1), 0.0), &cfg).unwrap();
        assert_eq!(batch.paths.len(), 3);
        let again = simulate_path(&c, &SpiderState::new(0.0, 1.0, e(1), 0.0), &cfg, 1).unwrap();
        assert_eq!(batch.paths[1], again);
    }

    #[test]
    fn first_hit_already_at_level() {
        let c = coeffs(0.0, &[0.5, 0.5]);
        let cfg = cfg(VertexPolicy::Reflection, 1e-3, 1.0, 1);
        let hit = first_hit(&c, &SpiderState::new(0.2, 0.5, e(2), 0.1), &cfg, 0.5, 0).unwrap();
        assert_eq!((hit.theta, hit.edge, hit.l, hit.censored), (0.2, e(2), 0.1, false));
        let far = first_hit(&c, &SpiderState::new(0.0, 0.0, e(1), 0.0), &cfg, 50.0, 0).unwrap();
        assert!(far.censored);
    }

    #[test]
    fn edge_sampling_inverts_cdf() {
        let w = [0.5, 0.3, 0.2];
        assert_eq!(sample_edge(&w, 0.0), e(1));
        assert_eq!(sample_edge(&w, 0.49), e(1));
        assert_eq!(sample_edge(&w, 0.5), e(2));
        assert_eq!(sample_edge(&w, 0.81), e(3));
        assert_eq!(sample_edge(&w, 0.999_999_999_999), e(3));
    }
}
