//! Sequential approximation on the integral form of the system.
//!
//! For every grid node and component the backward characteristic is traced
//! down to the bottom of the current time slab, giving
//!
//! `u_i(x,t) = E_i(t_i) u_i(foot) + int_{t_i}^t E_i(tau) (g_i - sum_{j != i} a_ij u_j)(omega_i(tau), tau) dtau`
//!
//! where the foot value is either the boundary law `h_i(t_i, v(t_i))` or the
//! slab's bottom row. The integral is discretised once per slab (Simpson on
//! the curve nodes plus midpoints, bilinear interpolation of the iterate), so
//! each Jacobi sweep is a sparse linear map plus boundary evaluations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{trace_with, CharCurve, Direction, Side, TraceOpts};
use crate::error::{EvalError, SolveError};
use crate::problem::{check_compatibility, BoundaryLaw, CompatReport, CompatResidual, ProblemSpec, WaveTag, TOL_C};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Upper bound on the slab height.
pub const THETA_CAP: f64 = 0.125;
/// Upper bound on the number of grid rows per slab (bounds stencil memory).
pub const MAX_SLAB_ROWS: usize = 32;
/// Contraction ratio above which a slab is flagged as slow.
pub const SLOW_RATIO: f64 = 0.9;

/// A linear hyperbolic system in the form the engine consumes.
pub trait TransportProblem: Sync {
    fn n(&self) -> usize;
    fn k(&self) -> usize;
    fn t_max(&self) -> f64;
    fn speed(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError>;
    fn diag(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError>;
    fn coupling(&self, i: usize, j: usize, x: f64, t: f64) -> Result<f64, EvalError>;
    fn coupling_is_zero(&self, i: usize, j: usize) -> bool;
    fn forcing(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError>;
    fn forcing_is_zero(&self, _i: usize) -> bool {
        false
    }
    fn boundary(&self, i: usize, t: f64, v: &[f64]) -> Result<f64, EvalError>;
    /// Sampled bound on the row sums of `|d h / d v|`.
    fn boundary_lipschitz(&self) -> Result<f64, EvalError>;
    /// Additive contributions of concentrated sources met along `curve`.
    fn impulse(&self, _i: usize, _curve: &CharCurve) -> Result<f64, EvalError> {
        Ok(0.0)
    }

    fn bc_wall(&self, i: usize) -> f64 {
        if i < self.k() {
            1.0
        } else {
            0.0
        }
    }

    fn exit_wall(&self, i: usize) -> f64 {
        if i < self.k() {
            0.0
        } else {
            1.0
        }
    }
}

impl TransportProblem for ProblemSpec {
    fn n(&self) -> usize {
        self.n
    }
    fn k(&self) -> usize {
        self.k
    }
    fn t_max(&self) -> f64 {
        self.t_max
    }
    fn speed(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError> {
        self.lambda[i].eval_xt(x, t)
    }
    fn diag(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError> {
        self.a[i][i].eval_xt(x, t)
    }
    fn coupling(&self, i: usize, j: usize, x: f64, t: f64) -> Result<f64, EvalError> {
        self.a[i][j].eval_xt(x, t)
    }
    fn coupling_is_zero(&self, i: usize, j: usize) -> bool {
        self.a[i][j].is_zero()
    }
    fn forcing(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError> {
        self.g[i].eval_xt(x, t)
    }
    fn forcing_is_zero(&self, i: usize) -> bool {
        self.g[i].is_zero()
    }
    fn boundary(&self, i: usize, t: f64, v: &[f64]) -> Result<f64, EvalError> {
        self.boundary_value(i, t, v)
    }
    fn boundary_lipschitz(&self) -> Result<f64, EvalError> {
        if matches!(self.boundary, BoundaryLaw::Classical { .. }) {
            return Ok(0.0);
        }
        let v0 = self.initial_trace()?;
        let radius = 1.0 + v0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut best = 0.0f64;
        for q in 0..=8 {
            let t = self.t_max * q as f64 / 8.0;
            for m in 0..=8 {
                let z = -radius + 2.0 * radius * m as f64 / 8.0;
                let v: Vec<f64> = v0.iter().map(|a| a + z).collect();
                for i in 0..self.n {
                    let mut row = 0.0;
                    for j in 0..self.n {
                        if !self.boundary_grad_is_zero(i, j) {
                            row += self.boundary_grad(i, j, t, &v)?.abs();
                        }
                    }
                    best = best.max(row);
                }
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Number of intervals in `x`.
    pub nx: usize,
    /// Number of intervals in `t`.
    pub nt: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Overrides the automatic slab height.
    pub theta: Option<f64>,
}

impl SolveOptions {
    pub fn new(nx: usize, nt: usize) -> Self {
        SolveOptions { nx, nt, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, theta: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SlabLog {
    pub rows: (usize, usize),
    pub updates: Vec<f64>,
    pub converged: bool,
    /// Largest ratio of successive updates (0 when fewer than 3 sweeps).
    pub max_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub theta: f64,
    pub rows_per_slab: usize,
    pub slabs: Vec<SlabLog>,
    pub compat: Option<CompatReport>,
    pub warnings: Vec<String>,
}

impl SolveReport {
    pub fn max_contraction_ratio(&self) -> f64 {
        self.slabs.iter().fold(0.0, |m, s| m.max(s.max_ratio))
    }
}

/// Values of the solution on a uniform space-time grid.
#[derive(Clone, Debug)]
pub struct SolutionGrid {
    pub n: usize,
    pub k: usize,
    /// Number of columns (`N_x + 1`).
    pub cols: usize,
    /// Number of rows (`N_t + 1`).
    pub rows: usize,
    pub t0: f64,
    pub t1: f64,
    /// Row-major `values[(q * cols + p) * n + i]`.
    pub values: Vec<f64>,
    /// Row indices of the slab boundaries, from `0` to `rows - 1`.
    pub slab_rows: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Sup norm of the last sweep update.
    pub final_update: f64,
    pub tol: f64,
    pub wave: Option<WaveTag>,
    pub report: SolveReport,
}

impl SolutionGrid {
    /// Zero grid with a single slab, for residual evaluation of given data.
    pub fn zeros(n: usize, k: usize, nx: usize, nt: usize, t0: f64, t1: f64) -> SolutionGrid {
        SolutionGrid {
            n,
            k,
            cols: nx + 1,
            rows: nt + 1,
            t0,
            t1,
            values: vec![0.0; (nx + 1) * (nt + 1) * n],
            slab_rows: vec![0, nt],
            iterations: 0,
            converged: false,
            final_update: f64::NAN,
            tol: DEFAULT_TOL,
            wave: None,
            report: SolveReport::default(),
        }
    }

    pub fn nt_rows(&self) -> usize {
        self.rows
    }

    pub fn nx_cols(&self) -> usize {
        self.cols
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.cols - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / (self.rows - 1) as f64
    }

    pub fn x(&self, p: usize) -> f64 {
        if p + 1 == self.cols {
            1.0
        } else {
            p as f64 / (self.cols - 1) as f64
        }
    }

    pub fn t(&self, q: usize) -> f64 {
        if q + 1 == self.rows {
            self.t1
        } else {
            self.t0 + q as f64 * self.dt()
        }
    }

    #[inline]
    pub fn value(&self, q: usize, p: usize, i: usize) -> f64 {
        self.values[(q * self.cols + p) * self.n + i]
    }

    #[inline]
    pub fn set(&mut self, q: usize, p: usize, i: usize, v: f64) {
        let idx = (q * self.cols + p) * self.n + i;
        self.values[idx] = v;
    }

    /// Bilinear interpolation; arguments are clamped to the grid.
    pub fn interp(&self, i: usize, x: f64, t: f64) -> f64 {
        let (pa, fx) = cell(x, self.cols - 1);
        let r = ((t - self.t0) / self.dt()).clamp(0.0, (self.rows - 1) as f64);
        let (qa, ft) = cell(r / (self.rows - 1) as f64, self.rows - 1);
        let lerp_row = |q: usize| {
            let a = self.value(q, pa, i);
            if fx == 0.0 {
                a
            } else {
                a + fx * (self.value(q, pa + 1, i) - a)
            }
        };
        let a = lerp_row(qa);
        if ft == 0.0 {
            a
        } else {
            a + ft * (lerp_row(qa + 1) - a)
        }
    }

    /// Boundary trace read from the edge columns.
    pub fn trace(&self) -> BoundaryTrace {
        let last = self.cols - 1;
        let t = (0..self.rows).map(|q| self.t(q)).collect();
        let v = (0..self.rows)
            .map(|q| {
                (0..self.n)
                    .map(|j| self.value(q, if j < self.k { 0 } else { last }, j))
                    .collect()
            })
            .collect();
        BoundaryTrace { t, v }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,t");
        for i in 0..self.n {
            let _ = write!(s, ",u_{}", i + 1);
        }
        s.push('\n');
        for q in 0..self.rows {
            for p in 0..self.cols {
                let _ = write!(s, "{:?},{:?}", self.x(p), self.t(q));
                for i in 0..self.n {
                    let _ = write!(s, ",{:?}", self.value(q, p, i));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// `v(t)` sampled on the time grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryTrace {
    pub t: Vec<f64>,
    /// `v[q][j]`.
    pub v: Vec<Vec<f64>>,
}

impl BoundaryTrace {
    /// Linear interpolation in time, clamped to the sampled range.
    pub fn at(&self, tau: f64) -> Vec<f64> {
        let m = self.t.len();
        if m == 1 || tau <= self.t[0] {
            return self.v[0].clone();
        }
        if tau >= self.t[m - 1] {
            return self.v[m - 1].clone();
        }
        let q = self.t.partition_point(|t| *t <= tau).clamp(1, m - 1) - 1;
        let f = (tau - self.t[q]) / (self.t[q + 1] - self.t[q]);
        self.v[q].iter().zip(&self.v[q + 1]).map(|(a, b)| a + f * (b - a)).collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.v.first().map_or(0, |r| r.len());
        let mut s = String::from("t");
        for j in 0..n {
            let _ = write!(s, ",v_{}", j + 1);
        }
        s.push('\n');
        for (t, row) in self.t.iter().zip(&self.v) {
            let _ = write!(s, "{t:?}");
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }
}

/// Cell index and fraction of `y in [0, 1]` on `m` uniform intervals.
#[inline]
fn cell(y: f64, m: usize) -> (usize, f64) {
    let r = (y * m as f64).clamp(0.0, m as f64);
    let mut a = r.floor() as usize;
    if a >= m {
        a = m - 1;
    }
    let mut f = r - a as f64;
    if f < 1e-12 {
        f = 0.0;
    }
    (a, f)
}

/// Slab height from the sampled coupling and boundary Lipschitz bounds.
pub fn slab_theta<P: TransportProblem>(p: &P) -> Result<f64, EvalError> {
    let n = p.n();
    let t_max = p.t_max();
    let nxs = 17;
    let nts = (16.0 * t_max.max(1.0)).ceil() as usize + 1;
    let mut l_a = 0.0f64;
    let mut speed = 0.0f64;
    for a in 0..nxs {
        let x = a as f64 / (nxs - 1) as f64;
        for b in 0..nts {
            let t = t_max * b as f64 / (nts - 1) as f64;
            for i in 0..n {
                speed = speed.max(p.speed(i, x, t)?.abs());
                for j in 0..n {
                    if j != i && !p.coupling_is_zero(i, j) {
                        l_a = l_a.max(p.coupling(i, j, x, t)?.abs());
                    }
                }
            }
        }
    }
    let l_h = p.boundary_lipschitz()?;
    let mut theta = THETA_CAP;
    if l_a > 0.0 {
        theta = theta.min(0.5 / (n as f64 * l_a));
    }
    if speed > 0.0 {
        theta = theta.min(0.5 / speed / l_h.max(1.0));
    }
    Ok(theta)
}

fn slab_boundaries(rows: usize, per_slab: usize) -> Vec<usize> {
    let last = rows - 1;
    let mut b: Vec<usize> = (0..last).step_by(per_slab.max(1)).collect();
    b.push(last);
    b
}

struct Geom {
    cols: usize,
    rows: usize,
    n: usize,
    t0: f64,
    t1: f64,
    dt: f64,
}

impl Geom {
    fn of(sol: &SolutionGrid) -> Geom {
        Geom { cols: sol.cols, rows: sol.rows, n: sol.n, t0: sol.t0, t1: sol.t1, dt: sol.dt() }
    }

    fn x(&self, p: usize) -> f64 {
        if p + 1 == self.cols {
            1.0
        } else {
            p as f64 / (self.cols - 1) as f64
        }
    }

    fn t(&self, q: usize) -> f64 {
        if q + 1 == self.rows {
            self.t1
        } else {
            self.t0 + q as f64 * self.dt
        }
    }

    /// Row cell of `tau` restricted to rows `[lo, hi]`.
    fn row_cell(&self, tau: f64, lo: usize, hi: usize) -> (usize, f64) {
        let r = (tau - self.t0) / self.dt;
        let mut a = r.floor().max(lo as f64) as usize;
        if a >= hi {
            a = hi - 1;
        }
        let f = (r - a as f64).clamp(0.0, 1.0);
        (a, if f < 1e-12 { 0.0 } else if f > 1.0 - 1e-12 { 1.0 } else { f })
    }

    #[inline]
    fn at(&self, q: usize, p: usize, i: usize) -> usize {
        (q * self.cols + p) * self.n + i
    }
}

#[derive(Clone, Copy)]
struct Point {
    q: u32,
    p: u32,
    ft: f64,
    fx: f64,
}

impl Point {
    #[inline]
    fn sample(&self, g: &Geom, vals: &[f64], j: usize) -> f64 {
        let (q, p) = (self.q as usize, self.p as usize);
        let row = |q: usize| {
            let a = vals[g.at(q, p, j)];
            if self.fx == 0.0 {
                a
            } else {
                a + self.fx * (vals[g.at(q, p + 1, j)] - a)
            }
        };
        let a = row(q);
        if self.ft == 0.0 {
            a
        } else {
            a + self.ft * (row(q + 1) - a)
        }
    }
}

enum Foot {
    Line { p: u32, fx: f64, weight: f64 },
    Wall { tau: f64, q: u32, ft: f64, weight: f64 },
}

struct Stencil {
    i: usize,
    foot: Foot,
    gconst: f64,
    points: Vec<Point>,
    /// `coef[s * js.len() + m]` multiplies `u_{js[m]}` at point `s`.
    coef: Vec<f64>,
}

fn build_stencil<P: TransportProblem>(
    prob: &P,
    g: &Geom,
    q0: usize,
    q: usize,
    p: usize,
    i: usize,
    js: &[usize],
) -> Result<Stencil, SolveError> {
    let (x, t) = (g.x(p), g.t(q));
    let opts = TraceOpts::with_step(g.dt);
    let curve = trace_with(
        |x, t| prob.speed(i, x, t),
        |x, t| prob.diag(i, x, t),
        i,
        (x, t),
        Direction::Backward,
        g.t(q0),
        &opts,
    )?;
    let last = curve.nodes.last().unwrap();
    let foot = match curve.exit_side {
        Side::X0 | Side::X1 => {
            let (qa, ft) = g.row_cell(last.tau, q0, q);
            Foot::Wall { tau: last.tau, q: qa as u32, ft, weight: last.log_e.exp() }
        }
        _ => {
            let (pa, fx) = cell(last.xi, g.cols - 1);
            Foot::Line { p: pa as u32, fx, weight: last.log_e.exp() }
        }
    };
    let need_g = !prob.forcing_is_zero(i);
    let mut points = Vec::new();
    let mut coef = Vec::new();
    let mut gconst = prob.impulse(i, &curve)?;
    if need_g || !js.is_empty() {
        let mut push = |xi: f64, tau: f64, w: f64| -> Result<(), SolveError> {
            if w == 0.0 {
                return Ok(());
            }
            if need_g {
                gconst += w * prob.forcing(i, xi, tau)?;
            }
            if !js.is_empty() {
                let (pa, fx) = cell(xi, g.cols - 1);
                let (qa, ft) = g.row_cell(tau, q0, q);
                points.push(Point { q: qa as u32, p: pa as u32, ft, fx });
                for &j in js {
                    coef.push(w * prob.coupling(i, j, xi, tau)?);
                }
            }
            Ok(())
        };
        let nodes = &curve.nodes;
        for m in 0..nodes.len() {
            let mut w = 0.0;
            if m > 0 {
                w += (nodes[m - 1].tau - nodes[m].tau).abs() / 6.0;
            }
            if m + 1 < nodes.len() {
                w += (nodes[m].tau - nodes[m + 1].tau).abs() / 6.0;
            }
            let nd = nodes[m];
            push(nd.xi, nd.tau, w * nd.log_e.exp())?;
            if m + 1 < nodes.len() {
                let h = (nodes[m].tau - nodes[m + 1].tau).abs();
                let mid = 0.5 * (nodes[m].tau + nodes[m + 1].tau);
                let xi = curve.position(mid)?;
                let le = curve.log_weight(mid)?;
                push(xi, mid, 4.0 * h / 6.0 * le.exp())?;
            }
        }
    }
    Ok(Stencil { i, foot, gconst, points, coef })
}

fn eval_stencil<P: TransportProblem>(
    prob: &P,
    g: &Geom,
    q0: usize,
    st: &Stencil,
    js: &[usize],
    vals: &[f64],
    vbuf: &mut Vec<f64>,
) -> Result<f64, EvalError> {
    let mut acc = st.gconst;
    let nj = js.len();
    for (s, pt) in st.points.iter().enumerate() {
        for (m, &j) in js.iter().enumerate() {
            acc -= st.coef[s * nj + m] * pt.sample(g, vals, j);
        }
    }
    match st.foot {
        Foot::Line { p, fx, weight } => {
            let pt = Point { q: q0 as u32, p, ft: 0.0, fx };
            acc += weight * pt.sample(g, vals, st.i);
        }
        Foot::Wall { tau, q, ft, weight } => {
            vbuf.clear();
            for j in 0..g.n {
                let col = if j < prob.k() { 0 } else { g.cols - 1 };
                let pt = Point { q, p: col as u32, ft, fx: 0.0 };
                vbuf.push(pt.sample(g, vals, j));
            }
            acc += weight * prob.boundary(st.i, tau, vbuf)?;
        }
    }
    Ok(acc)
}

fn coupled(prob: &impl TransportProblem, i: usize) -> Vec<usize> {
    (0..prob.n()).filter(|&j| j != i && !prob.coupling_is_zero(i, j)).collect()
}

fn build_slab<P: TransportProblem>(
    prob: &P,
    g: &Geom,
    q0: usize,
    q1: usize,
    js: &[Vec<usize>],
) -> Result<Vec<Stencil>, SolveError> {
    let n = g.n;
    let per_row = g.cols * n;
    (0..(q1 - q0) * per_row)
        .into_par_iter()
        .map(|idx| {
            let q = q0 + 1 + idx / per_row;
            let r = idx % per_row;
            let (p, i) = (r / n, r % n);
            build_stencil(prob, g, q0, q, p, i, &js[i])
        })
        .collect()
}

fn sweep<P: TransportProblem>(
    prob: &P,
    g: &Geom,
    q0: usize,
    stencils: &[Stencil],
    js: &[Vec<usize>],
    vals: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let out: Result<Vec<f64>, EvalError> = stencils
        .par_iter()
        .map_init(Vec::new, |buf, st| eval_stencil(prob, g, q0, st, &js[st.i], vals, buf))
        .collect();
    let out = out?;
    let base = (q0 + 1) * g.cols * g.n;
    for (idx, v) in out.iter().enumerate() {
        if !v.is_finite() {
            let node = (base + idx) / g.n;
            return Err(SolveError::NonFinite {
                x: g.x(node % g.cols),
                t: g.t(node / g.cols),
                component: (base + idx) % g.n,
            });
        }
    }
    Ok(out)
}

/// Generic slab-by-slab Picard solve from the line `t = t0` up to `t_max`.
pub fn solve_problem<P: TransportProblem>(
    prob: &P,
    init: &(dyn Fn(usize, f64) -> Result<f64, EvalError> + Sync),
    t0: f64,
    opts: &SolveOptions,
) -> Result<SolutionGrid, SolveError> {
    let t1 = prob.t_max();
    if opts.nx < 2 || opts.nt < 1 {
        return Err(SolveError::Grid(format!("grid {}x{} is too small", opts.nx, opts.nt)));
    }
    if !(t1 > t0) {
        return Err(SolveError::Grid(format!("start time {t0} is not below the horizon {t1}")));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(SolveError::Grid("tolerance and iteration limit must be positive".into()));
    }
    let n = prob.n();
    let mut sol = SolutionGrid::zeros(n, prob.k(), opts.nx, opts.nt, t0, t1);
    sol.tol = opts.tol;
    let g = Geom::of(&sol);
    for p in 0..sol.cols {
        let x = sol.x(p);
        for i in 0..n {
            let v = init(i, x)?;
            if !v.is_finite() {
                return Err(SolveError::NonFinite { x, t: t0, component: i });
            }
            sol.set(0, p, i, v);
        }
    }
    let theta = match opts.theta {
        Some(th) if th > 0.0 => th,
        Some(_) => return Err(SolveError::Grid("slab height must be positive".into())),
        None => slab_theta(prob)?,
    };
    let per_slab = ((theta / g.dt + 1e-9).floor() as usize).clamp(1, MAX_SLAB_ROWS);
    sol.slab_rows = slab_boundaries(sol.rows, per_slab);
    sol.report.theta = theta;
    sol.report.rows_per_slab = per_slab;
    let js: Vec<Vec<usize>> = (0..n).map(|i| coupled(prob, i)).collect();
    let mut converged = true;
    let mut last_update = 0.0f64;
    let per_row = sol.cols * n;
    let bounds = sol.slab_rows.clone();
    for w in bounds.windows(2) {
        let (q0, q1) = (w[0], w[1]);
        let stencils = build_slab(prob, &g, q0, q1, &js)?;
        // initial guess: copy of the bottom row
        let bottom: Vec<f64> = sol.values[q0 * per_row..(q0 + 1) * per_row].to_vec();
        for q in q0 + 1..=q1 {
            sol.values[q * per_row..(q + 1) * per_row].copy_from_slice(&bottom);
        }
        let mut log = SlabLog { rows: (q0, q1), ..Default::default() };
        for _ in 0..opts.max_iter {
            let new = sweep(prob, &g, q0, &stencils, &js, &sol.values)?;
            let dst = &mut sol.values[(q0 + 1) * per_row..(q1 + 1) * per_row];
            let mut upd = 0.0f64;
            for (d, v) in dst.iter_mut().zip(&new) {
                upd = upd.max((*d - v).abs());
                *d = *v;
            }
            sol.iterations += 1;
            log.updates.push(upd);
            last_update = upd;
            if upd <= opts.tol {
                log.converged = true;
                break;
            }
        }
        log.max_ratio = log
            .updates
            .windows(2)
            .skip(1)
            .filter(|u| u[0] > 1e3 * f64::EPSILON)
            .fold(0.0, |m, u| m.max(u[1] / u[0]));
        if log.max_ratio > SLOW_RATIO {
            sol.report.warnings.push(format!(
                "slow contraction on slab t in [{:.4}, {:.4}] (ratio {:.3})",
                g.t(q0),
                g.t(q1),
                log.max_ratio
            ));
        }
        if !log.converged {
            converged = false;
            sol.report.warnings.push(format!(
                "no convergence on slab t in [{:.4}, {:.4}] after {} sweeps (update {:.3e})",
                g.t(q0),
                g.t(q1),
                opts.max_iter,
                last_update
            ));
        }
        sol.report.slabs.push(log);
    }
    sol.converged = converged;
    sol.final_update = last_update;
    Ok(sol)
}

/// Solve the spec on `[0, t_max]`.
pub fn picard_solve(
    spec: &ProblemSpec,
    grid: (usize, usize),
    tol: f64,
    max_iter: usize,
) -> Result<(SolutionGrid, BoundaryTrace), SolveError> {
    let opts = SolveOptions { tol, max_iter, ..SolveOptions::new(grid.0, grid.1) };
    picard_solve_opts(spec, &opts)
}

pub fn picard_solve_opts(spec: &ProblemSpec, opts: &SolveOptions) -> Result<(SolutionGrid, BoundaryTrace), SolveError> {
    if !spec.is_validated() {
        return Err(SolveError::NotValidated);
    }
    let compat = check_compatibility(spec);
    let mut sol = solve_problem(spec, &|i, x| spec.initial_value(i, x), 0.0, opts)?;
    if !compat.ok {
        sol.report.warnings.push("initial and boundary data are not compatible at a corner".into());
    }
    sol.report.compat = Some(compat);
    sol.wave = spec.wave;
    let tr = sol.trace();
    Ok((sol, tr))
}

/// Solve on `[t_start, t_max]` from `u(x, t_start) = psi(x)`.
pub fn solve_from_line(
    spec: &ProblemSpec,
    psi: &(dyn Fn(usize, f64) -> Result<f64, EvalError> + Sync),
    t_start: f64,
    opts: &SolveOptions,
) -> Result<(SolutionGrid, BoundaryTrace), SolveError> {
    if !spec.is_validated() {
        return Err(SolveError::NotValidated);
    }
    let compat = line_compatibility(spec, psi, t_start)?;
    let mut sol = solve_problem(spec, psi, t_start, opts)?;
    if !compat.ok {
        sol.report.warnings.push(format!("data on t = {t_start} are not compatible with the boundary law"));
    }
    sol.report.compat = Some(compat);
    sol.wave = spec.wave;
    let tr = sol.trace();
    Ok((sol, tr))
}

fn line_compatibility(
    spec: &ProblemSpec,
    psi: &dyn Fn(usize, f64) -> Result<f64, EvalError>,
    t: f64,
) -> Result<CompatReport, SolveError> {
    let v: Vec<f64> = (0..spec.n).map(|j| psi(j, spec.exit_wall(j))).collect::<Result<_, _>>()?;
    let mut residuals = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let wall = spec.bc_wall(i);
        let r = (psi(i, wall)? - spec.boundary_value(i, t, &v)?).abs();
        residuals.push(CompatResidual { component: i + 1, wall, residual: r });
    }
    Ok(CompatReport { ok: residuals.iter().all(|r| r.residual <= TOL_C), tol: TOL_C, residuals, error: None })
}

/// Per-component sup norm of `u - (right side of the integral form evaluated at u)`,
/// with characteristics cut at the slab boundaries recorded in `sol`.
pub fn residual(spec: &ProblemSpec, sol: &SolutionGrid) -> Result<Vec<f64>, SolveError> {
    residual_generic(spec, sol)
}

pub fn residual_generic<P: TransportProblem>(prob: &P, sol: &SolutionGrid) -> Result<Vec<f64>, SolveError> {
    if sol.n != prob.n() || sol.k != prob.k() {
        return Err(SolveError::Grid("solution does not match the problem dimensions".into()));
    }
    let g = Geom::of(sol);
    let n = g.n;
    let js: Vec<Vec<usize>> = (0..n).map(|i| coupled(prob, i)).collect();
    let per_row = g.cols * n;
    let mut res = vec![0.0f64; n];
    for w in sol.slab_rows.windows(2) {
        let (q0, q1) = (w[0], w[1]);
        let stencils = build_slab(prob, &g, q0, q1, &js)?;
        let rhs = sweep(prob, &g, q0, &stencils, &js, &sol.values)?;
        let lhs = &sol.values[(q0 + 1) * per_row..(q1 + 1) * per_row];
        for (idx, (a, b)) in lhs.iter().zip(&rhs).enumerate() {
            let i = idx % n;
            res[i] = res[i].max((a - b).abs());
        }
    }
    Ok(res)
}
