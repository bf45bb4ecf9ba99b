//! Statistical checks of the process: martingale and Ito residuals, the
//! scattering law at the vertex, exit asymptotics, absence of an atom at the
//! vertex and the strong Markov property.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SpiderError};
use crate::network::CoefficientSet;
use crate::rng::{derive_seed, PathRng};
use crate::simulator::{
    first_hit_batch, map_paths, par_map, simulate_path, simulate_path_with_gaussians, SimConfig, SpiderPath, SpiderState,
};
use crate::stats::{ks_two_sample, slope_through_origin, KsResult, Moments};
use crate::testfn::TestFunction;

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

/// A bounded check `lower <= value <= upper`; a missing bound is open.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub label: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Check {
    pub fn new(label: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite() && lower.is_none_or(|lo| value >= lo) && upper.is_none_or(|hi| value <= hi);
        Check { label: label.into(), value, lower, upper, pass }
    }

    pub fn within(label: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Check::new(label, value, Some(target - tol), Some(target + tol))
    }

    pub fn recompute(&self) -> bool {
        Check::new(self.label.clone(), self.value, self.lower, self.upper).pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub name: String,
    pub params: serde_json::Value,
    pub estimates: BTreeMap<String, f64>,
    pub stderr: BTreeMap<String, f64>,
    pub n: usize,
    pub pass: bool,
    pub seed: u64,
    pub config_hash: String,
    pub checks: Vec<Check>,
}

impl EstimatorReport {
    pub fn new(name: &str, params: serde_json::Value, n: usize, cfg: &SimConfig) -> Self {
        EstimatorReport {
            name: name.to_string(),
            params,
            estimates: BTreeMap::new(),
            stderr: BTreeMap::new(),
            n,
            pass: true,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            checks: Vec::new(),
        }
    }

    pub fn estimate(&mut self, label: impl Into<String>, value: f64, stderr: Option<f64>) {
        let label = label.into();
        if let Some(se) = stderr {
            self.stderr.insert(label.clone(), se);
        }
        self.estimates.insert(label, value);
    }

    pub fn check(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    /// Pass flag recomputed from the stored checks.
    pub fn recompute_pass(&self) -> bool {
        self.checks.iter().all(Check::recompute)
    }
}

// ---------------------------------------------------------------- martingale

/// Increment over `[s, s_end]` of
/// `f(t, x, i, l) - int (d_t + 1/2 sigma^2 d_xx + b d_x) f du
///  - int (d_l f(u,0,l) + sum_j alpha_j d_x f_j(u,0,l)) dl`,
/// with left-endpoint quadrature.
pub fn martingale_increment(p: &SpiderPath, c: &CoefficientSet, f: &TestFunction, s: f64, s_end: f64) -> Result<f64> {
    let (k0, k1) = (p.index_at(s), p.index_at(s_end));
    let h = p.meta.h;
    let mut alpha = Vec::with_capacity(c.edges());
    let mut slopes = Vec::with_capacity(c.edges());
    let mut comp = 0.0;
    for k in k0..k1 {
        let st = p.state(k);
        comp += generator(c, f, &st)? * h;
        let dl = p.l[k + 1] - p.l[k];
        if dl != 0.0 {
            comp += vertex_term(c, f, st.t, st.l, &mut alpha, &mut slopes)? * dl;
        }
    }
    let (a, b) = (p.state(k0), p.state(k1));
    Ok(f.value(b.edge, b.t, b.x, b.l) - f.value(a.edge, a.t, a.x, a.l) - comp)
}

fn generator(c: &CoefficientSet, f: &TestFunction, s: &SpiderState) -> Result<f64> {
    let sigma = c.diffusion(s.edge, s.t, s.x, s.l)?;
    let b = c.drift(s.edge, s.t, s.x, s.l)?;
    Ok(f.dt(s.edge, s.t, s.x, s.l) + 0.5 * sigma * sigma * f.dxx(s.edge, s.t, s.x, s.l) + b * f.dx(s.edge, s.t, s.x, s.l))
}

fn vertex_term(c: &CoefficientSet, f: &TestFunction, t: f64, l: f64, alpha: &mut Vec<f64>, slopes: &mut Vec<f64>) -> Result<f64> {
    c.alpha_into(t, l, alpha)?;
    f.vertex_slopes(t, l, slopes);
    Ok(f.vertex_dl(t, l) + alpha.iter().zip(slopes.iter()).map(|(a, s)| a * s).sum::<f64>())
}

/// Ensemble mean of the compensated increment; passes when
/// `|mean| <= 3 stderr + bias_c sqrt(h)`.
pub fn martingale_residual(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    f: &TestFunction,
    window: (f64, f64),
    bias_c: f64,
) -> Result<EstimatorReport> {
    let (s, s_end) = window;
    if !(s < s_end && s_end <= cfg.horizon) {
        return Err(SpiderError::Config(format!("martingale window [{s}, {s_end}] must satisfy s < s' <= T")));
    }
    let incs = map_paths(c, init, cfg, |p| martingale_increment(p, c, f, s, s_end))?;
    let m = Moments::from_slice(&incs);
    let budget = bias_c * cfg.h.sqrt();
    let mut rep = EstimatorReport::new(
        "martingale_residual",
        serde_json::json!({ "s": s, "s_end": s_end, "bias_c": bias_c, "h": cfg.h, "test_function": f }),
        incs.len(),
        cfg,
    );
    rep.estimate("mean", m.mean, Some(m.std_err()));
    rep.check(Check::within("|mean| <= 3 se + C sqrt(h)", m.mean, 0.0, 3.0 * m.std_err() + budget));
    Ok(rep)
}

/// `C_bias = max_f |mean_f| / sqrt(h)` over a battery of test functions on a
/// reference (driftless) model.
pub fn calibrate_bias(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    battery: &[TestFunction],
    window: (f64, f64),
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for f in battery {
        let rep = martingale_residual(c, init, cfg, f, window, 0.0)?;
        worst = worst.max(rep.estimates["mean"].abs());
    }
    Ok(worst / cfg.h.sqrt())
}

// ----------------------------------------------------------------------- Ito

/// Largest pathwise gap in the discretised Ito formula
/// `f(t_k) - f(t_0) = sum [ (d_t + L) f h + sigma d_x f sqrt(h) g + (d_l f + sum alpha d_x f)(0) dl ]`.
pub fn ito_residual(p: &SpiderPath, c: &CoefficientSet, f: &TestFunction) -> Result<f64> {
    if p.gaussians.len() + 1 != p.len() {
        return Err(SpiderError::MissingIncrements);
    }
    let h = p.meta.h;
    let sh = h.sqrt();
    let mut alpha = Vec::with_capacity(c.edges());
    let mut slopes = Vec::with_capacity(c.edges());
    let mut gap = 0.0_f64;
    let mut worst = 0.0_f64;
    for k in 0..p.len() - 1 {
        let s = p.state(k);
        let next = p.state(k + 1);
        let sigma = c.diffusion(s.edge, s.t, s.x, s.l)?;
        let mut rhs = generator(c, f, &s)? * h + sigma * f.dx(s.edge, s.t, s.x, s.l) * sh * p.gaussians[k];
        let dl = next.l - s.l;
        if dl != 0.0 {
            rhs += vertex_term(c, f, s.t, s.l, &mut alpha, &mut slopes)? * dl;
        }
        let lhs = f.value(next.edge, next.t, next.x, next.l) - f.value(s.edge, s.t, s.x, s.l);
        gap += lhs - rhs;
        worst = worst.max(gap.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoRow {
    pub h: f64,
    /// Ensemble mean of the per-path maximal residual.
    pub mean: f64,
    pub stderr: f64,
    pub worst: f64,
}

/// Ito residuals on matched skeletons: each path draws gaussians at the
/// finest step and coarser runs use normalised block sums of the same draws.
/// Every step in `hs` must be an integer multiple of the smallest one.
pub fn ito_convergence(
    c: &CoefficientSet,
    init: &SpiderState,
    cfg: &SimConfig,
    f: &TestFunction,
    hs: &[f64],
) -> Result<Vec<ItoRow>> {
    let fine = hs.iter().copied().fold(f64::INFINITY, f64::min);
    if hs.is_empty() || !(fine > 0.0) {
        return Err(SpiderError::Config("ito step list must be nonempty and positive".into()));
    }
    let blocks: Vec<usize> = hs
        .iter()
        .map(|&h| {
            let b = (h / fine).round();
            if (b * fine - h).abs() > 1e-9 * h {
                Err(SpiderError::Config(format!("ito step {h} is not a multiple of {fine}")))
            } else {
                Ok(b as usize)
            }
        })
        .collect::<Result<_>>()?;
    let n_fine = ((cfg.horizon - init.t) / fine).round() as usize;
    let per_path = par_map(cfg.n_paths, |k| {
        let mut rng = PathRng::for_path(cfg.seed, k);
        let g: Vec<f64> = (0..n_fine).map(|_| rng.gaussian()).collect();
        blocks
            .iter()
            .zip(hs)
            .map(|(&b, &h)| {
                let coarse: Vec<f64> = g.chunks_exact(b).map(|ch| ch.iter().sum::<f64>() / (b as f64).sqrt()).collect();
                let run = SimConfig { h, ..*cfg };
                run.validate(c)?;
                let p = simulate_path_with_gaussians(c, init, &run, k, &coarse)?;
                ito_residual(&p, c, f)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(hs
        .iter()
        .enumerate()
        .map(|(j, &h)| {
            let vals: Vec<f64> = per_path.iter().map(|r| r[j]).collect();
            let m = Moments::from_slice(&vals);
            ItoRow { h, mean: m.mean, stderr: m.std_err(), worst: vals.iter().copied().fold(0.0, f64::max) }
        })
        .collect())
}

// ---------------------------------------------------------------- scattering

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub edge: usize,
    pub freq: f64,
    pub stderr: f64,
    pub alpha_target: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scattering {
    pub rows: Vec<ScatterRow>,
    pub counts: Vec<usize>,
    pub censored: usize,
    pub report: EstimatorReport,
}

/// Empirical law of the exit edge at the first hit of `delta` from the
/// vertex at `(t, ell)`, compared against `alpha(t, ell)`.
pub fn scattering_distribution(c: &CoefficientSet, t: f64, ell: f64, delta: f64, cfg: &SimConfig) -> Result<Scattering> {
    if delta < 2.0 * cfg.delta_shell {
        return Err(SpiderError::Config(format!("scatter level {delta} must be at least 2 delta_shell = {}", 2.0 * cfg.delta_shell)));
    }
    if cfg.n_paths < 10_000 {
        return Err(SpiderError::Config(format!("scattering needs n >= 10^4 paths, got {}", cfg.n_paths)));
    }
    let hits = first_hit_batch(c, &SpiderState::vertex(t, ell), cfg, delta)?;
    let mut counts = vec![0usize; c.edges()];
    let mut censored = 0;
    for hit in &hits {
        if hit.censored {
            censored += 1;
        } else {
            counts[hit.edge.slot()] += 1;
        }
    }
    let used = (hits.len() - censored).max(1) as f64;
    let target = c.alpha(t, ell)?;
    let mut report = EstimatorReport::new(
        "scattering_distribution",
        serde_json::json!({ "t": t, "ell": ell, "delta": delta }),
        hits.len(),
        cfg,
    );
    report.estimate("censored", censored as f64, None);
    let mut rows = Vec::with_capacity(c.edges());
    for (k, &n) in counts.iter().enumerate() {
        let freq = n as f64 / used;
        let se = (freq * (1.0 - freq) / used).sqrt();
        let check = Check::within(format!("freq[{}] within 3 se of alpha", k + 1), freq, target[k], 3.0 * se);
        rows.push(ScatterRow { edge: k + 1, freq, stderr: se, alpha_target: target[k], pass: check.pass });
        report.estimate(format!("freq[{}]", k + 1), freq, Some(se));
        report.check(check);
    }
    Ok(Scattering { rows, counts, censored, report })
}

// ---------------------------------------------------------------- exit stats

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitRow {
    pub delta: f64,
    /// `E[l(theta) - ell] / delta`.
    pub local_time_ratio: f64,
    pub local_time_se: f64,
    /// `E[theta - t] / delta^2`.
    pub time_ratio: f64,
    pub time_se: f64,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitStats {
    pub rows: Vec<ExitRow>,
    pub report: EstimatorReport,
}

/// Exit-time and local-time ratios per level. The report checks that the
/// local-time ratio at the smallest level lies in `[0.9, 1.1]` and that the
/// time ratio of successive levels stays in `[0.5, 2]`.
pub fn mean_exit_stats(c: &CoefficientSet, t: f64, ell: f64, deltas: &[f64], cfg: &SimConfig) -> Result<ExitStats> {
    let mut rows = Vec::with_capacity(deltas.len());
    let mut report = EstimatorReport::new("mean_exit_stats", serde_json::json!({ "t": t, "ell": ell, "deltas": deltas }), cfg.n_paths, cfg);
    for &delta in deltas {
        let hits = first_hit_batch(c, &SpiderState::vertex(t, ell), cfg, delta)?;
        let (mut lm, mut tm) = (Moments::default(), Moments::default());
        let mut censored = 0;
        for hit in &hits {
            if hit.censored {
                censored += 1;
                continue;
            }
            lm.push((hit.l - ell) / delta);
            tm.push((hit.theta - t) / (delta * delta));
        }
        report.estimate(format!("l_ratio[{delta}]"), lm.mean, Some(lm.std_err()));
        report.estimate(format!("theta_ratio[{delta}]"), tm.mean, Some(tm.std_err()));
        rows.push(ExitRow { delta, local_time_ratio: lm.mean, local_time_se: lm.std_err(), time_ratio: tm.mean, time_se: tm.std_err(), censored });
    }
    if let Some(smallest) = rows.iter().min_by(|a, b| a.delta.total_cmp(&b.delta)) {
        report.check(Check::new(format!("l_ratio[{}] in [0.9, 1.1]", smallest.delta), smallest.local_time_ratio, Some(0.9), Some(1.1)));
    }
    for w in rows.windows(2) {
        report.check(Check::new(
            format!("theta_ratio[{}] / theta_ratio[{}] in [0.5, 2]", w[1].delta, w[0].delta),
            w[1].time_ratio / w[0].time_ratio,
            Some(0.5),
            Some(2.0),
        ));
    }
    Ok(ExitStats { rows, report })
}

// ---------------------------------------------------------------------- atom

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomRow {
    pub delta: f64,
    pub prob: f64,
    pub stderr: f64,
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomTest {
    pub rows: Vec<AtomRow>,
    pub fitted_c: f64,
    pub report: EstimatorReport,
}

/// Empirical `P(x(t) <= delta)` from terminal radii, with the least-squares
/// slope `C` through the origin. Checks: estimates nonincreasing as `delta`
/// shrinks, each within `C delta + 3 se`, each ratio `P / delta` within a
/// factor 2 of `C`, and agreement with `oracle` when given.
pub fn atom_test(
    radii: &[f64],
    t: f64,
    deltas: &[f64],
    oracle: Option<&dyn Fn(f64) -> f64>,
    cfg: &SimConfig,
) -> Result<AtomTest> {
    if !(t > 0.0) || deltas.is_empty() {
        return Err(SpiderError::Config("atom test needs t > 0 and a nonempty level grid".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SpiderError::Config("atom test levels must be strictly decreasing".into()));
    }
    let n = radii.len().max(1) as f64;
    let rows: Vec<AtomRow> = deltas
        .iter()
        .map(|&d| {
            let p = radii.iter().filter(|&&x| x <= d).count() as f64 / n;
            AtomRow { delta: d, prob: p, stderr: (p * (1.0 - p) / n).sqrt(), oracle: oracle.map(|o| o(d)) }
        })
        .collect();
    let probs: Vec<f64> = rows.iter().map(|r| r.prob).collect();
    let fitted_c = slope_through_origin(deltas, &probs);
    let mut report = EstimatorReport::new("atom_test", serde_json::json!({ "t": t, "deltas": deltas }), radii.len(), cfg);
    report.estimate("fitted_c", fitted_c, None);
    for w in rows.windows(2) {
        report.check(Check::new(format!("P[{}] <= P[{}]", w[1].delta, w[0].delta), w[1].prob - w[0].prob, None, Some(0.0)));
    }
    for r in &rows {
        report.estimate(format!("p[{}]", r.delta), r.prob, Some(r.stderr));
        report.check(Check::new(format!("P[{}] <= C delta + 3 se", r.delta), r.prob, None, Some(fitted_c * r.delta + 3.0 * r.stderr)));
        if fitted_c > 0.0 {
            report.check(Check::new(format!("P[{0}] / ({0} C) in [0.5, 2]", r.delta), r.prob / (r.delta * fitted_c), Some(0.5), Some(2.0)));
        }
        if let Some(o) = r.oracle {
            report.check(Check::within(format!("P[{}] within 3 se of oracle", r.delta), r.prob, o, 3.0 * r.stderr.max(1.0 / n)));
        }
    }
    Ok(AtomTest { rows, fitted_c, report })
}

// ------------------------------------------------------------ strong Markov

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingSpec {
    /// First grid time at which the radius crosses `delta` (from whichever
    /// side the path starts on).
    HitLevel { delta: f64 },
    FixedTime { s: f64 },
    /// First vertex contact at or after `s`.
    FirstVertexAfter { s: f64 },
}

impl StoppingSpec {
    /// Grid index of the stopping time, if it occurs on the path.
    pub fn index(&self, p: &SpiderPath) -> Option<usize> {
        match *self {
            StoppingSpec::HitLevel { delta } => {
                let above = p.x[0] >= delta;
                (0..p.len()).find(|&k| if above { p.x[k] <= delta } else { p.x[k] >= delta })
            }
            StoppingSpec::FixedTime { s } => {
                let k = ((s - p.t0) / p.meta.h).round();
                (k >= 0.0 && (k as usize) < p.len()).then_some(k as usize)
            }
            StoppingSpec::FirstVertexAfter { s } => (p.index_at(s)..p.len()).find(|&k| p.contact[k] && p.time(k) >= s - 1e-12),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    X,
    L,
    /// Radius signed by edge parity, which sees the edge label.
    SignedX,
}

impl Observable {
    pub fn eval(self, s: &SpiderState) -> f64 {
        match self {
            Observable::X => s.x,
            Observable::L => s.l,
            Observable::SignedX => {
                if s.edge.get() % 2 == 1 {
                    s.x
                } else {
                    -s.x
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovTest {
    pub ks: KsResult,
    pub censored: usize,
    pub report: EstimatorReport,
}

/// Compares `F(state(tau + lag))` on the original paths with the same
/// functional on fresh paths restarted at `state(tau)` under derived seeds.
pub fn strong_markov_test(
    c: &CoefficientSet,
    init: &SpiderState,
    spec: StoppingSpec,
    functional: Observable,
    lag: f64,
    cfg: &SimConfig,
) -> Result<MarkovTest> {
    cfg.validate(c)?;
    let lag_steps = (lag / cfg.h).round() as usize;
    let pairs = par_map(cfg.n_paths, |k| {
        let p = simulate_path(c, init, cfg, k)?;
        let Some(tau) = spec.index(&p) else { return Ok(None) };
        if tau + lag_steps >= p.len() {
            return Ok(None);
        }
        let continued = functional.eval(&p.state(tau + lag_steps));
        let start = p.state(tau);
        let restart_cfg = SimConfig { horizon: start.t + lag_steps as f64 * cfg.h, seed: derive_seed(cfg.seed, k as u64), ..*cfg };
        let fresh = simulate_path(c, &start, &restart_cfg, k)?;
        Ok(Some((continued, functional.eval(&fresh.last()))))
    })?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (x, y) in pairs.iter().flatten() {
        a.push(*x);
        b.push(*y);
    }
    let censored = cfg.n_paths - a.len();
    let ks = ks_two_sample(&a, &b);
    let censoring = censored as f64 / cfg.n_paths.max(1) as f64;
    let mut report = EstimatorReport::new(
        "strong_markov_test",
        serde_json::json!({ "stopping": spec, "functional": functional, "lag": lag }),
        cfg.n_paths,
        cfg,
    );
    report.estimate("ks_statistic", ks.statistic, None);
    report.estimate("p_value", ks.p_value, None);
    report.estimate("censored_fraction", censoring, None);
    report.check(Check::new("KS p-value > 0.01", ks.p_value, Some(0.01), None));
    report.check(Check::new("censoring <= 20%", censoring, None, Some(0.2)));
    Ok(MarkovTest { ks, censored, report })
}
