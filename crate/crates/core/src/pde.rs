//! Finite differences for the parabolic system on the truncated star
//! `[0, R]^I x [0, K]` with the local-time Kirchhoff condition at the vertex.
//!
//! Backward mode solves
//!
//! ```text
//! d_t u_i + 1/2 sigma_i^2 d_xx u_i + b_i d_x u_i - c_i u_i + h_i = 0     (interior)
//! d_l u(t,0,l) + sum_i alpha_i(t,l) d_x u_i(t,0,l) + h_0(t,l) = 0       (vertex)
//! u_i(T,x,l) = g_i(x,l),  d_x u_i(t,R,l) = 0,  u_i(t,x,K) = psi_i(t,x)
//! ```
//!
//! Forward mode solves the time reversal
//! `d_t u - 1/2 sigma^2 d_xx u - b d_x u + c u = f` with
//! `d_l u + sum alpha_i d_x u_i = phi` and initial data `g` at `t = 0`.
//!
//! Local-time slices are marched downward from the Dirichlet slice `l = K`;
//! each slice is an implicit Euler march in time. Every time step solves one
//! tridiagonal system per edge and closes the vertex unknown through the
//! discrete Kirchhoff row (one-sided differences in `l` and `x`).

use serde::Serialize;

use crate::error::{EvalError, Result, SpiderError};
use crate::network::{CoefficientSet, EdgeIndex, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Backward,
    Forward,
}

/// Problem data; every field is evaluated as `(t, x, l)`.
///
/// * `running`: `h_i` (backward) or `f_i` (forward)
/// * `vertex`: `h_0(t, l)` (backward) or `phi(t, l)` (forward), read at `x = 0`
/// * `terminal`: `g_i(x, l)`, read at `t = T` (backward) or `t = 0` (forward)
/// * `ceiling`: `psi_i(t, x)` at `l = K`; defaults to `g_i(x, K)`
/// * `killing`: `c_i`, zero when absent
#[derive(Clone)]
pub struct PdeData {
    pub running: Vec<Field>,
    pub vertex: Field,
    pub terminal: Vec<Field>,
    pub ceiling: Option<Vec<Field>>,
    pub killing: Option<Vec<Field>>,
}

#[derive(Clone)]
pub struct PdeProblem {
    pub coefficients: CoefficientSet,
    pub data: PdeData,
    pub direction: Direction,
}

impl PdeProblem {
    pub fn new(coefficients: CoefficientSet, data: PdeData, direction: Direction) -> Result<Self> {
        let edges = coefficients.edges();
        let check = |name: &str, n: usize| {
            if n == edges {
                Ok(())
            } else {
                Err(SpiderError::Config(format!("pde.{name} has {n} entries for {edges} edges")))
            }
        };
        check("running", data.running.len())?;
        check("terminal", data.terminal.len())?;
        if let Some(c) = &data.ceiling {
            check("ceiling", c.len())?;
        }
        if let Some(c) = &data.killing {
            check("killing", c.len())?;
        }
        Ok(PdeProblem { coefficients, data, direction })
    }

    pub fn edges(&self) -> usize {
        self.coefficients.edges()
    }
}

/// Uniform grid: `m` time steps on `[0, T]`, `j` space steps on `[0, R]`
/// per edge and `p` local-time steps on `[0, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub horizon: f64,
    pub r: f64,
    pub k: f64,
    pub m: usize,
    pub j: usize,
    pub p: usize,
}

impl PdeGrid {
    pub fn new(horizon: f64, r: f64, k: f64, m: usize, j: usize, p: usize) -> Result<Self> {
        for (name, v) in [("horizon", horizon), ("r", r), ("k", k)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SpiderError::Config(format!("grid.{name} must be positive, got {v}")));
            }
        }
        if m == 0 || j < 2 || p == 0 {
            return Err(SpiderError::Config(format!("grid needs m >= 1, j >= 2, p >= 1 (got {m}, {j}, {p})")));
        }
        Ok(PdeGrid { horizon, r, k, m, j, p })
    }

    /// Truncation `R = x_query + 4 sigma_bound sqrt(T)` and `K = 4 sqrt(T)`.
    pub fn with_defaults(horizon: f64, x_query: f64, sigma_bound: f64, m: usize, j: usize, p: usize) -> Result<Self> {
        let root = horizon.sqrt();
        PdeGrid::new(horizon, x_query + 4.0 * sigma_bound * root, 4.0 * root, m, j, p)
    }

    /// Halves every spacing.
    pub fn refined(&self) -> Self {
        PdeGrid { m: 2 * self.m, j: 2 * self.j, p: 2 * self.p, ..*self }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.m as f64
    }

    pub fn dx(&self) -> f64 {
        self.r / self.j as f64
    }

    pub fn dl(&self) -> f64 {
        self.k / self.p as f64
    }

    pub fn t(&self, m: usize) -> f64 {
        self.horizon * m as f64 / self.m as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.r * j as f64 / self.j as f64
    }

    pub fn l(&self, p: usize) -> f64 {
        self.k * p as f64 / self.p as f64
    }
}

/// Grid function with a single vertex value per `(t, l)` node.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution {
    pub grid: PdeGrid,
    pub edges: usize,
    /// Layout `[m][p][node]`, node 0 the vertex and `1 + (i-1) J + (j-1)`
    /// the point `x_j` on edge `i`; `m` is the physical time index.
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PdeSolution {
    fn nodes(&self) -> usize {
        1 + self.edges * self.grid.j
    }

    fn offset(&self, m: usize, p: usize) -> usize {
        (m * (self.grid.p + 1) + p) * self.nodes()
    }

    fn node(&self, edge: usize, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            1 + edge * self.grid.j + (j - 1)
        }
    }

    /// Value at grid node `(t_m, x_j, l_p)` on zero-based edge `edge`.
    pub fn at(&self, m: usize, p: usize, edge: usize, j: usize) -> f64 {
        self.values[self.offset(m, p) + self.node(edge, j)]
    }

    fn at_mut(&mut self, m: usize, p: usize, edge: usize, j: usize) -> &mut f64 {
        let k = self.offset(m, p) + self.node(edge, j);
        &mut self.values[k]
    }

    /// Samples `u(t, x, edge, l)` on the grid, with the vertex read from edge 1.
    pub fn sample(grid: PdeGrid, edges: usize, u: impl Fn(f64, f64, EdgeIndex, f64) -> f64) -> Self {
        let mut s = PdeSolution { grid, edges, values: vec![0.0; (grid.m + 1) * (grid.p + 1) * (1 + edges * grid.j)], warnings: Vec::new() };
        for m in 0..=grid.m {
            for p in 0..=grid.p {
                let (t, l) = (grid.t(m), grid.l(p));
                *s.at_mut(m, p, 0, 0) = u(t, 0.0, EdgeIndex::from_one_based(1), l);
                for e in 0..edges {
                    for j in 1..=grid.j {
                        *s.at_mut(m, p, e, j) = u(t, grid.x(j), EdgeIndex::from_one_based(e as u16 + 1), l);
                    }
                }
            }
        }
        s
    }

    /// Multilinear interpolation in `(t, x, l)`, clamped to the grid.
    pub fn value_at(&self, t: f64, x: f64, edge: EdgeIndex, l: f64) -> f64 {
        let g = &self.grid;
        let locate = |v: f64, step: f64, n: usize| {
            let s = (v / step).clamp(0.0, n as f64);
            let k = (s.floor() as usize).min(n - 1);
            (k, s - k as f64)
        };
        let (m, wt) = locate(t, g.dt(), g.m);
        let (j, wx) = locate(x, g.dx(), g.j);
        let (p, wl) = locate(l, g.dl(), g.p);
        let e = edge.slot();
        let mut acc = 0.0;
        for (dm, ft) in [(0, 1.0 - wt), (1, wt)] {
            for (dj, fx) in [(0, 1.0 - wx), (1, wx)] {
                for (dp, fl) in [(0, 1.0 - wl), (1, wl)] {
                    let w = ft * fx * fl;
                    if w != 0.0 {
                        acc += w * self.at(m + dm, p + dp, e, j + dj);
                    }
                }
            }
        }
        acc
    }

    /// Largest difference against a solution on the twice-refined grid,
    /// taken at the nodes of this grid.
    pub fn max_diff_against_refined(&self, fine: &PdeSolution) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0_f64;
        for m in 0..=g.m {
            for p in 0..=g.p {
                for e in 0..self.edges {
                    for j in 0..=g.j {
                        worst = worst.max((self.at(m, p, e, j) - fine.at(2 * m, 2 * p, e, 2 * j)).abs());
                    }
                }
            }
        }
        worst
    }
}

struct Row {
    lower: f64,
    diag: f64,
    upper: f64,
    source: f64,
}

/// Shared stencil used by both the solver and the residual.
struct Stencil<'a> {
    prob: &'a PdeProblem,
    grid: PdeGrid,
    alpha: Vec<f64>,
}

impl<'a> Stencil<'a> {
    fn new(prob: &'a PdeProblem, grid: PdeGrid) -> Self {
        Stencil { prob, grid, alpha: Vec::with_capacity(prob.edges()) }
    }

    /// Physical time of solver level `n` (level `M` carries the data).
    fn phys_t(&self, n: usize) -> f64 {
        match self.prob.direction {
            Direction::Backward => self.grid.t(n),
            Direction::Forward => self.grid.horizon - self.grid.t(n),
        }
    }

    fn phys_index(&self, n: usize) -> usize {
        match self.prob.direction {
            Direction::Backward => n,
            Direction::Forward => self.grid.m - n,
        }
    }

    fn data_time(&self) -> f64 {
        self.phys_t(self.grid.m)
    }

    /// Row for `x_j` on `edge` at solver level `n`, slice `p`; the equation
    /// reads `lower u[j-1] + diag u[j] + upper u[j+1] = u_next[j] / dt + source`.
    fn edge_row(&self, n: usize, p: usize, e: usize, j: usize) -> Result<Row, EvalError> {
        let g = &self.grid;
        let c = &self.prob.coefficients;
        let edge = EdgeIndex::from_one_based(e as u16 + 1);
        let (t, x, l) = (self.phys_t(n), g.x(j), g.l(p));
        let sigma = c.diffusion(edge, t, x, l)?;
        let b = c.drift(edge, t, x, l)?;
        let kill = match &self.prob.data.killing {
            Some(k) => k[e](t, x, l)?,
            None => 0.0,
        };
        let source = (self.prob.data.running[e])(t, x, l)?;
        let (dx, dt) = (g.dx(), g.dt());
        let a = 0.5 * sigma * sigma / (dx * dx);
        let base = 1.0 / dt + 2.0 * a + kill;
        if j == g.j {
            return Ok(Row { lower: -2.0 * a, diag: base, upper: 0.0, source });
        }
        let row = if b.abs() * dx <= sigma * sigma {
            let adv = b / (2.0 * dx);
            Row { lower: -(a - adv), diag: base, upper: -(a + adv), source }
        } else if b > 0.0 {
            Row { lower: -a, diag: base + b / dx, upper: -(a + b / dx), source }
        } else {
            Row { lower: -(a - b / dx), diag: base - b / dx, upper: -a, source }
        };
        Ok(row)
    }

    /// Vertex row: `(u0_up - u0) / dl + sum_i alpha_i (u_i1 - u0) / dx + h0 = 0`.
    /// Returns `h0` in the backward sign convention and fills `self.alpha`.
    fn vertex_data(&mut self, n: usize, p: usize) -> Result<f64, EvalError> {
        let (t, l) = (self.phys_t(n), self.grid.l(p));
        self.prob.coefficients.alpha_into(t, l, &mut self.alpha)?;
        let v = (self.prob.data.vertex)(t, 0.0, l)?;
        Ok(match self.prob.direction {
            Direction::Backward => v,
            Direction::Forward => -v,
        })
    }

    fn terminal(&self, e: usize, x: f64, l: f64) -> Result<f64, EvalError> {
        (self.prob.data.terminal[e])(self.data_time(), x, l)
    }

    fn ceiling(&self, e: usize, t: f64, x: f64) -> Result<f64, EvalError> {
        match &self.prob.data.ceiling {
            Some(psi) => psi[e](t, x, self.grid.k),
            None => (self.prob.data.terminal[e])(self.data_time(), x, self.grid.k),
        }
    }
}

/// Thomas algorithm for `lower[k] u[k-1] + diag[k] u[k] + upper[k] u[k+1] = rhs[k]`
/// with two right-hand sides sharing one factorisation.
fn thomas2(lower: &[f64], diag: &[f64], upper: &[f64], r1: &mut [f64], r2: &mut [f64], scratch: &mut [f64]) -> bool {
    let n = diag.len();
    let mut d = diag[0];
    if d.abs() < 1e-300 {
        return false;
    }
    scratch[0] = upper[0] / d;
    r1[0] /= d;
    r2[0] /= d;
    for k in 1..n {
        d = diag[k] - lower[k] * scratch[k - 1];
        if d.abs() < 1e-300 || !d.is_finite() {
            return false;
        }
        scratch[k] = upper[k] / d;
        r1[k] = (r1[k] - lower[k] * r1[k - 1]) / d;
        r2[k] = (r2[k] - lower[k] * r2[k - 1]) / d;
    }
    for k in (0..n - 1).rev() {
        r1[k] -= scratch[k] * r1[k + 1];
        r2[k] -= scratch[k] * r2[k + 1];
    }
    true
}

fn eval_err(e: EvalError) -> SpiderError {
    SpiderError::Field(e)
}

/// Tolerance on the corner compatibility defect before a warning is raised.
pub const COMPATIBILITY_TOL: f64 = 1e-3;

fn compatibility_warning(st: &mut Stencil<'_>) -> Result<Option<String>> {
    let g = st.grid;
    let edges = st.prob.edges();
    let step = 1e-5;
    let mut worst = (0.0_f64, 0.0);
    for p in 0..=g.p {
        let l = g.l(p);
        let v = |l: f64| st.terminal(0, 0.0, l);
        let dl = if p == 0 { (v(l + step)? - v(l)?) / step } else { (v(l + step)? - v(l - step)?) / (2.0 * step) };
        let h0 = st.vertex_data(g.m, p).map_err(eval_err)?;
        let mut flux = 0.0;
        for e in 0..edges {
            let d = (-3.0 * st.terminal(e, 0.0, l)? + 4.0 * st.terminal(e, step, l)? - st.terminal(e, 2.0 * step, l)?) / (2.0 * step);
            flux += st.alpha[e] * d;
        }
        let defect = (dl + flux + h0).abs();
        if defect > worst.0 {
            worst = (defect, l);
        }
    }
    Ok((worst.0 > COMPATIBILITY_TOL).then(|| {
        format!("corner compatibility defect {:.3e} at l = {:.4} exceeds {COMPATIBILITY_TOL:.0e}", worst.0, worst.1)
    }))
}

/// Solves the problem on `grid` with implicit time stepping.
pub fn solve(prob: &PdeProblem, grid: &PdeGrid) -> Result<PdeSolution> {
    let g = *grid;
    let edges = prob.edges();
    let mut sol = PdeSolution {
        grid: g,
        edges,
        values: vec![0.0; (g.m + 1) * (g.p + 1) * (1 + edges * g.j)],
        warnings: Vec::new(),
    };
    let mut st = Stencil::new(prob, g);
    if let Some(w) = compatibility_warning(&mut st)? {
        sol.warnings.push(w);
    }

    // Dirichlet slice l = K.
    for n in 0..=g.m {
        let (m, t) = (st.phys_index(n), st.phys_t(n));
        *sol.at_mut(m, g.p, 0, 0) = st.ceiling(0, t, 0.0)?;
        for e in 0..edges {
            for j in 1..=g.j {
                *sol.at_mut(m, g.p, e, j) = st.ceiling(e, t, g.x(j))?;
            }
        }
    }

    let jn = g.j;
    let (mut lower, mut diag, mut upper) = (vec![0.0; jn], vec![0.0; jn], vec![0.0; jn]);
    let (mut v, mut w, mut scratch) = (vec![0.0; jn], vec![0.0; jn], vec![0.0; jn]);
    let mut vs = vec![vec![0.0; jn]; edges];
    let mut ws = vec![vec![0.0; jn]; edges];
    let (dt, dx, dl) = (g.dt(), g.dx(), g.dl());
    for p in (0..g.p).rev() {
        let mt = st.phys_index(g.m);
        *sol.at_mut(mt, p, 0, 0) = st.terminal(0, 0.0, g.l(p))?;
        for e in 0..edges {
            for j in 1..=jn {
                *sol.at_mut(mt, p, e, j) = st.terminal(e, g.x(j), g.l(p))?;
            }
        }
        for n in (0..g.m).rev() {
            let (m, m_next) = (st.phys_index(n), st.phys_index(n + 1));
            for e in 0..edges {
                let mut first_lower = 0.0;
                for j in 1..=jn {
                    let row = st.edge_row(n, p, e, j)?;
                    let k = j - 1;
                    if j == 1 {
                        first_lower = row.lower;
                        lower[k] = 0.0;
                    } else {
                        lower[k] = row.lower;
                    }
                    diag[k] = row.diag;
                    upper[k] = row.upper;
                    v[k] = sol.at(m_next, p, e, j) / dt + row.source;
                    w[k] = 0.0;
                }
                w[0] = -first_lower;
                if !thomas2(&lower, &diag, &upper, &mut v, &mut w, &mut scratch) {
                    return Err(SpiderError::SingularVertex { slice: p, time: m });
                }
                vs[e].copy_from_slice(&v);
                ws[e].copy_from_slice(&w);
            }
            let h0 = st.vertex_data(n, p).map_err(eval_err)?;
            let up = sol.at(m, p + 1, 0, 0);
            let mut den = 1.0 / dl;
            let mut num = up / dl + h0;
            for e in 0..edges {
                den += st.alpha[e] * (1.0 - ws[e][0]) / dx;
                num += st.alpha[e] * vs[e][0] / dx;
            }
            if !(den.abs() > 1e-12 / dl) || !num.is_finite() {
                return Err(SpiderError::SingularVertex { slice: p, time: m });
            }
            let u0 = num / den;
            *sol.at_mut(m, p, 0, 0) = u0;
            for e in 0..edges {
                for j in 1..=jn {
                    *sol.at_mut(m, p, e, j) = vs[e][j - 1] + u0 * ws[e][j - 1];
                }
            }
        }
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Norms {
    pub max: f64,
    /// Root mean square over the nodes where the condition is imposed.
    pub l2: f64,
}

impl Norms {
    fn from_acc(max: f64, sum_sq: f64, count: usize) -> Self {
        Norms { max, l2: if count == 0 { 0.0 } else { (sum_sq / count as f64).sqrt() } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualReport {
    pub interior: Norms,
    pub vertex: Norms,
    /// One-sided `(u_J - u_{J-1}) / dx` at `x = R`.
    pub neumann: Norms,
    /// Mismatch against the time data slice.
    pub terminal: Norms,
    /// Mismatch against the `l = K` slice.
    pub ceiling: Norms,
}

/// Per-node residuals of a grid function, in the layout of [`PdeSolution`]:
/// edge nodes carry the interior equation and vertex nodes the Kirchhoff row.
pub fn residual_field(u: &PdeSolution, prob: &PdeProblem) -> Result<PdeSolution> {
    let g = u.grid;
    let edges = prob.edges();
    let mut st = Stencil::new(prob, g);
    let mut out = PdeSolution { values: vec![0.0; u.values.len()], warnings: Vec::new(), ..u.clone() };
    let (dt, dx, dl) = (g.dt(), g.dx(), g.dl());
    for p in 0..g.p {
        for n in 0..g.m {
            let (m, m_next) = (st.phys_index(n), st.phys_index(n + 1));
            for e in 0..edges {
                for j in 1..=g.j {
                    let row = st.edge_row(n, p, e, j)?;
                    let right = if j < g.j { u.at(m, p, e, j + 1) } else { 0.0 };
                    let r = row.lower * u.at(m, p, e, j - 1) + row.diag * u.at(m, p, e, j) + row.upper * right
                        - u.at(m_next, p, e, j) / dt
                        - row.source;
                    *out.at_mut(m, p, e, j) = r;
                }
            }
            let h0 = st.vertex_data(n, p).map_err(eval_err)?;
            let u0 = u.at(m, p, 0, 0);
            let mut r = (u.at(m, p + 1, 0, 0) - u0) / dl + h0;
            for e in 0..edges {
                r += st.alpha[e] * (u.at(m, p, e, 1) - u0) / dx;
            }
            *out.at_mut(m, p, 0, 0) = r;
        }
    }
    Ok(out)
}

/// Discrete residuals of the interior equation, the Kirchhoff row and the
/// boundary/data conditions, in max and RMS norms.
pub fn residual(u: &PdeSolution, prob: &PdeProblem) -> Result<ResidualReport> {
    let g = u.grid;
    let edges = prob.edges();
    let field = residual_field(u, prob)?;
    let st = Stencil::new(prob, g);
    let (mut imax, mut isq, mut icount) = (0.0_f64, 0.0, 0usize);
    let (mut vmax, mut vsq, mut vcount) = (0.0_f64, 0.0, 0usize);
    for n in 0..g.m {
        let m = st.phys_index(n);
        for p in 0..g.p {
            let r = field.at(m, p, 0, 0).abs();
            vmax = vmax.max(r);
            vsq += r * r;
            vcount += 1;
            for e in 0..edges {
                for j in 1..=g.j {
                    let r = field.at(m, p, e, j).abs();
                    imax = imax.max(r);
                    isq += r * r;
                    icount += 1;
                }
            }
        }
    }
    let (mut nmax, mut nsq, mut ncount) = (0.0_f64, 0.0, 0usize);
    let (mut tmax, mut tsq, mut tcount) = (0.0_f64, 0.0, 0usize);
    let (mut cmax, mut csq, mut ccount) = (0.0_f64, 0.0, 0usize);
    let mt = st.phys_index(g.m);
    for m in 0..=g.m {
        for p in 0..=g.p {
            for e in 0..edges {
                let r = ((u.at(m, p, e, g.j) - u.at(m, p, e, g.j - 1)) / g.dx()).abs();
                nmax = nmax.max(r);
                nsq += r * r;
                ncount += 1;
            }
        }
    }
    for p in 0..=g.p {
        for e in 0..edges {
            for j in 0..=g.j {
                let r = (u.at(mt, p, e, j) - st.terminal(e, g.x(j), g.l(p))?).abs();
                tmax = tmax.max(r);
                tsq += r * r;
                tcount += 1;
            }
        }
    }
    for m in 0..=g.m {
        for e in 0..edges {
            for j in 0..=g.j {
                let r = (u.at(m, g.p, e, j) - st.ceiling(e, g.t(m), g.x(j))?).abs();
                cmax = cmax.max(r);
                csq += r * r;
                ccount += 1;
            }
        }
    }
    Ok(ResidualReport {
        interior: Norms::from_acc(imax, isq, icount),
        vertex: Norms::from_acc(vmax, vsq, vcount),
        neumann: Norms::from_acc(nmax, nsq, ncount),
        terminal: Norms::from_acc(tmax, tsq, tcount),
        ceiling: Norms::from_acc(cmax, csq, ccount),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{alpha_fn, constant_field, field, Bounds};
    use proptest::prelude::*;

    fn bounds() -> Bounds {
        Bounds { a_lower: 0.1, sigma_lower: 0.5, b_bound: 2.0, sigma_bound: 1.5, alpha_lip: 1.0 }
    }

    fn zero_data(edges: usize, g: f64) -> PdeData {
        PdeData {
            running: vec![constant_field(0.0); edges],
            vertex: constant_field(0.0),
            terminal: vec![constant_field(g); edges],
            ceiling: None,
            killing: None,
        }
    }

    fn e(i: u16) -> EdgeIndex {
        EdgeIndex::from_one_based(i)
    }

    #[test]
    fn constants_are_reproduced() {
        let c = CoefficientSet::new(
            vec![field(|_, x, _| 0.5 - 0.3 * x), constant_field(-0.4)],
            vec![constant_field(1.0), field(|t, _, _| 0.8 + 0.1 * t)],
            alpha_fn(|_, l| vec![(1.0 + l) / (2.0 + l), 1.0 / (2.0 + l)]),
            bounds(),
        )
        .unwrap();
        for dir in [Direction::Backward, Direction::Forward] {
            let prob = PdeProblem::new(c.clone(), zero_data(2, 5.0), dir).unwrap();
            let grid = PdeGrid::new(1.0, 3.0, 2.0, 10, 15, 8).unwrap();
            let sol = solve(&prob, &grid).unwrap();
            assert!(sol.values.iter().all(|v| (v - 5.0).abs() < 1e-12));
            let r = residual(&sol, &prob).unwrap();
            assert!(r.interior.max < 1e-9 && r.vertex.max < 1e-9 && r.neumann.max < 1e-12);
            assert!(sol.warnings.is_empty());
        }
    }

    #[test]
    fn unit_running_cost_gives_remaining_time() {
        let c = CoefficientSet::constant(&[0.3, -0.2, 0.0], &[1.0, 0.7, 1.2], &[0.5, 0.3, 0.2], bounds()).unwrap();
        let mut data = zero_data(3, 0.0);
        data.running = vec![constant_field(1.0); 3];
        data.ceiling = Some(vec![field(|t, _, _| 1.0 - t); 3]);
        let prob = PdeProblem::new(c, data, Direction::Backward).unwrap();
        let grid = PdeGrid::new(1.0, 4.0, 2.0, 20, 20, 10).unwrap();
        let sol = solve(&prob, &grid).unwrap();
        for m in 0..=grid.m {
            for p in 0..=grid.p {
                for j in 0..=grid.j {
                    assert!((sol.at(m, p, 1, j) - (1.0 - grid.t(m))).abs() < 1e-10);
                }
            }
        }
    }

    /// `u*_i = A(t,l) + beta_i (x - x^2 / 2R)`: the profile has zero slope at
    /// `R`, so the Neumann condition is exact and only the scheme errs.
    fn manufactured(dir: Direction, r: f64) -> (PdeProblem, impl Fn(f64, f64, EdgeIndex, f64) -> f64) {
        let beta = [1.0, -0.5];
        let sig = [1.0, 0.8];
        let drift = [0.3, -0.2];
        let a = |t: f64, l: f64| (0.5 * t).cos() * (1.0 + 0.4 * l.sin());
        let a_t = |t: f64, l: f64| -0.5 * (0.5 * t).sin() * (1.0 + 0.4 * l.sin());
        let a_l = |t: f64, l: f64| (0.5 * t).cos() * 0.4 * l.cos();
        let alpha = |l: f64| [(1.0 + l) / (2.0 + l), 1.0 / (2.0 + l)];
        let phi = move |x: f64| x - x * x / (2.0 * r);
        let dphi = move |x: f64| 1.0 - x / r;
        let ddphi = -1.0 / r;
        let u = move |t: f64, x: f64, e: EdgeIndex, l: f64| a(t, l) + beta[e.slot()] * phi(x);
        let c = CoefficientSet::new(
            drift.iter().map(|&b| constant_field(b)).collect(),
            sig.iter().map(|&s| constant_field(s)).collect(),
            alpha_fn(move |_, l| alpha(l).to_vec()),
            bounds(),
        )
        .unwrap();
        // Generator part: 1/2 s^2 u_xx + b u_x.
        let gen = move |i: usize, x: f64| 0.5 * sig[i] * sig[i] * beta[i] * ddphi + drift[i] * beta[i] * dphi(x);
        let flux = move |l: f64| alpha(l).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        let running: Vec<Field> = (0..2)
            .map(|i| match dir {
                Direction::Backward => field(move |t, x, l| -(a_t(t, l) + gen(i, x))),
                Direction::Forward => field(move |t, x, l| a_t(t, l) - gen(i, x)),
            })
            .collect();
        let vertex = match dir {
            Direction::Backward => field(move |t, _, l| -(a_l(t, l) + flux(l))),
            Direction::Forward => field(move |t, _, l| a_l(t, l) + flux(l)),
        };
        let t_data = if dir == Direction::Backward { 1.0 } else { 0.0 };
        let terminal = (0..2).map(|i| field(move |_, x, l| a(t_data, l) + beta[i] * phi(x))).collect();
        let ceiling = Some((0..2).map(|i| field(move |t, x, l| a(t, l) + beta[i] * phi(x))).collect());
        let data = PdeData { running, vertex, terminal, ceiling, killing: None };
        (PdeProblem::new(c, data, dir).unwrap(), u)
    }

    fn max_error(sol: &PdeSolution, u: &impl Fn(f64, f64, EdgeIndex, f64) -> f64) -> f64 {
        let g = sol.grid;
        let mut worst = 0.0_f64;
        for m in 0..=g.m {
            for p in 0..=g.p {
                for ei in 0..2 {
                    for j in 0..=g.j {
                        let exact = u(g.t(m), g.x(j), e(ei as u16 + 1), g.l(p));
                        worst = worst.max((sol.at(m, p, ei, j) - exact).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn manufactured_solution_converges_at_first_order() {
        for dir in [Direction::Backward, Direction::Forward] {
            let (prob, u) = manufactured(dir, 3.0);
            let base = PdeGrid::new(1.0, 3.0, 2.0, 10, 12, 8).unwrap();
            let grids = [base, base.refined(), base.refined().refined()];
            let errors: Vec<f64> = grids.iter().map(|g| max_error(&solve(&prob, g).unwrap(), &u)).collect();
            let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
            assert!(errors[2] < 0.02, "{dir:?} {errors:?}");
            assert!(orders.iter().all(|&o| o >= 0.9), "{dir:?} errors {errors:?} orders {orders:?}");
            assert!(solve(&prob, &base).unwrap().warnings.is_empty());
        }
    }

    #[test]
    fn manufactured_residual_orders() {
        let (prob, u) = manufactured(Direction::Backward, 3.0);
        let base = PdeGrid::new(1.0, 3.0, 2.0, 10, 12, 8).unwrap();
        let r1 = residual(&PdeSolution::sample(base, 2, &u), &prob).unwrap();
        let r2 = residual(&PdeSolution::sample(base.refined(), 2, &u), &prob).unwrap();
        // Interior O(dt + dx^2) and vertex O(dl + dx): both halve under refinement.
        let ri = r1.interior.max / r2.interior.max;
        let rv = r1.vertex.max / r2.vertex.max;
        assert!((1.7..2.3).contains(&ri), "{r1:?} {r2:?}");
        assert!((1.7..2.3).contains(&rv), "{r1:?} {r2:?}");
        assert!(r1.terminal.max < 1e-14 && r1.ceiling.max < 1e-14);
    }

    #[test]
    fn self_convergence_is_monotone() {
        let c = CoefficientSet::new(
            vec![field(|_, x, _| 0.4 * (1.0 - x).tanh()), constant_field(0.1)],
            vec![constant_field(1.0), constant_field(0.9)],
            alpha_fn(|_, l| vec![(1.0 + l) / (2.0 + l), 1.0 / (2.0 + l)]),
            bounds(),
        )
        .unwrap();
        let data = PdeData {
            running: vec![field(|_, x, _| (-x).exp()), constant_field(0.2)],
            vertex: constant_field(1.0),
            terminal: vec![constant_field(0.0); 2],
            ceiling: None,
            killing: None,
        };
        let prob = PdeProblem::new(c, data, Direction::Backward).unwrap();
        let g0 = PdeGrid::new(1.0, 4.0, 2.0, 8, 16, 8).unwrap();
        let s0 = solve(&prob, &g0).unwrap();
        let s1 = solve(&prob, &g0.refined()).unwrap();
        let s2 = solve(&prob, &g0.refined().refined()).unwrap();
        let d01 = s0.max_diff_against_refined(&s1);
        let d12 = s1.max_diff_against_refined(&s2);
        let ratio = d01 / d12;
        assert!(d12 < d01 && (1.5..3.0).contains(&ratio), "{d01} {d12}");
        // The data violate the corner compatibility (h0 = 1, g = 0).
        assert_eq!(s0.warnings.len(), 1);
    }

    #[test]
    fn perturbation_residual_stays_in_stencil() {
        let prob = PdeProblem::new(
            CoefficientSet::constant(&[0.2, 0.0], &[1.0, 1.0], &[0.5, 0.5], bounds()).unwrap(),
            zero_data(2, 1.0),
            Direction::Backward,
        )
        .unwrap();
        let grid = PdeGrid::new(1.0, 2.0, 1.0, 6, 8, 5).unwrap();
        let mut sol = solve(&prob, &grid).unwrap();
        let (m0, p0, e0, j0) = (3, 2, 1, 4);
        *sol.at_mut(m0, p0, e0, j0) += 1.0;
        let field = residual_field(&sol, &prob).unwrap();
        for m in 0..=grid.m {
            for p in 0..=grid.p {
                for e in 0..2 {
                    for j in 0..=grid.j {
                        let r = field.at(m, p, e, j).abs();
                        let in_stencil = p == p0
                            && ((j == 0 && m == m0 && j0 == 1)
                                || (e == e0 && m == m0 && j.abs_diff(j0) <= 1 && j > 0)
                                || (e == e0 && m + 1 == m0 && j == j0));
                        if in_stencil && j == j0 && e == e0 {
                            assert!(r > 1.0);
                        } else if !in_stencil {
                            assert!(r < 1e-9, "unexpected residual {r} at {m},{p},{e},{j}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn interpolation_is_exact_for_multilinear_data() {
        let grid = PdeGrid::new(1.0, 2.0, 1.0, 4, 8, 4).unwrap();
        let u = |t: f64, x: f64, e: EdgeIndex, l: f64| 1.0 + t + (e.get() as f64) * x + 2.0 * l + t * l;
        let s = PdeSolution::sample(grid, 2, |t, x, e, l| if x == 0.0 { 1.0 + t + 2.0 * l + t * l } else { u(t, x, e, l) });
        let v = s.value_at(0.33, 0.71, e(2), 0.42);
        assert!((v - u(0.33, 0.71, e(2), 0.42)).abs() < 1e-12);
        let v0 = s.value_at(0.6, 0.1, e(1), 0.9);
        assert!((v0 - u(0.6, 0.1, e(1), 0.9)).abs() < 1e-12);
    }

    #[test]
    fn grid_defaults() {
        let g = PdeGrid::with_defaults(4.0, 1.0, 0.5, 10, 10, 10).unwrap();
        assert_eq!((g.r, g.k), (5.0, 8.0));
        assert!(PdeGrid::new(1.0, 1.0, 1.0, 0, 10, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn forward_maximum_principle(
            b in prop::collection::vec(-1.5..1.5f64, 2),
            s in prop::collection::vec(0.5..1.5f64, 2),
            kill in 0.0..1.0f64,
            w in 0.1..0.9f64,
            g0 in -2.0..2.0f64, g1 in -2.0..2.0f64, gl in -1.0..1.0f64,
            psi in -2.0..2.0f64,
        ) {
            let c = CoefficientSet::constant(&b, &s, &[w, 1.0 - w], bounds()).unwrap();
            let data = PdeData {
                running: vec![constant_field(0.0); 2],
                vertex: constant_field(0.0),
                terminal: vec![
                    field(move |_, x, l| g0 * (-x).exp() + gl * l),
                    field(move |_, x, l| g0 * (-x).exp() + g1 * (1.0 - (-x).exp()) + gl * l),
                ],
                ceiling: Some(vec![field(move |_, x, _| psi * (-x).exp()); 2]),
                killing: Some(vec![constant_field(kill); 2]),
            };
            let prob = PdeProblem::new(c, data, Direction::Forward).unwrap();
            let grid = PdeGrid::new(1.0, 3.0, 1.0, 8, 12, 6).unwrap();
            let sol = solve(&prob, &grid).unwrap();
            let mut lo = 0.0_f64;
            let mut hi = 0.0_f64;
            for p in 0..=grid.p {
                for e in 0..2 {
                    for j in 0..=grid.j {
                        let v = sol.at(0, p, e, j);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            for m in 0..=grid.m {
                for e in 0..2 {
                    for j in 0..=grid.j {
                        let v = sol.at(m, grid.p, e, j);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            for v in &sol.values {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
            }
        }
    }
}
