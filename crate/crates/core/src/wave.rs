//! Reduction of the one-dimensional wave equation to a first-order system.
//!
//! `u_tt - a^2 u_xx = f` with `w = u_t + a u_x` becomes
//! `(d_t + a d_x) u = w`, `(d_t - a d_x) w = f`. In the speed ordering `w`
//! (speed `-a`) is component 1 and `u` (speed `+a`) is component 2, so `k = 1`
//! and the boundary trace is `v = (w(0,t), u(1,t))`.
//!
//! In a `[wave]` table the boundary functions `h1`, `h2` take the variables
//! `t`, `v1 = u(1,t)` and `v2 = (u_t + a u_x)(0,t)`, in the order of the
//! wave-equation boundary conditions `u(0,t) = h1`, `(u_t + a u_x)(1,t) = h2`.

use std::ops::Range;

use crate::error::{ProblemError, WaveError};
use crate::expr::{Expr, Var, VarPolicy};
use crate::problem::{
    BoundaryLaw, InitialData, Locator, ProblemSpec, RawWave, SpecParts, WaveTag,
};
use crate::solver::SolutionGrid;

#[derive(Clone, Debug)]
pub struct WaveProblem {
    pub name: String,
    pub a: f64,
    pub f: Expr,
    pub phi: Expr,
    pub psi: Expr,
    pub h1: Expr,
    pub h2: Expr,
    pub t_max: f64,
}

impl WaveProblem {
    pub fn new(
        a: f64,
        f: &str,
        phi: &str,
        psi: &str,
        h1: &str,
        h2: &str,
        t_max: f64,
    ) -> Result<WaveProblem, WaveError> {
        let p = |s: &str, pol| {
            Expr::parse_with(s, pol).map_err(|e| WaveError::Problem(ProblemError::Structure(e.to_string())))
        };
        Ok(WaveProblem {
            name: "wave".into(),
            a,
            f: p(f, VarPolicy::XT)?,
            phi: p(phi, VarPolicy::X)?,
            psi: p(psi, VarPolicy::X)?,
            h1: p(h1, VarPolicy::tv(2))?,
            h2: p(h2, VarPolicy::tv(2))?,
            t_max,
        })
    }

    pub(crate) fn from_raw(raw: RawWave, loc: &Locator, span: &Range<usize>) -> Result<WaveProblem, ProblemError> {
        let (line, col) = loc.line_col(span.start);
        let p = |s: &str, pol: VarPolicy, key: &str| {
            Expr::parse_with(s, pol).map_err(|e| ProblemError::Invalid {
                line,
                col,
                msg: format!("wave.{key}: {e}"),
            })
        };
        Ok(WaveProblem {
            name: raw.name.unwrap_or_else(|| "wave".into()),
            a: raw.a,
            f: p(&raw.f, VarPolicy::XT, "f")?,
            phi: p(&raw.phi, VarPolicy::X, "phi")?,
            psi: p(&raw.psi, VarPolicy::X, "psi")?,
            h1: p(&raw.h1, VarPolicy::tv(2), "h1")?,
            h2: p(&raw.h2, VarPolicy::tv(2), "h2")?,
            t_max: raw.t_max,
        })
    }
}

/// Component index of `w` and `u` in the reduced system.
pub const W_COMPONENT: usize = 0;
pub const U_COMPONENT: usize = 1;

pub fn reduce_wave(wp: &WaveProblem) -> Result<ProblemSpec, WaveError> {
    if !(wp.a > 0.0 && wp.a.is_finite()) {
        return Err(WaveError::BadSpeed(wp.a));
    }
    let dphi = wp.phi.diff(Var::X);
    for i in 0..=64 {
        let x = i as f64 / 64.0;
        dphi.eval_x(x).map_err(|e| WaveError::NotDifferentiable(format!("phi' at x={x}: {e}")))?;
    }
    // wave variables (v1 = u(1,t), v2 = w(0,t)) -> system trace (w(0,t), u(1,t))
    let swap = |e: &Expr| {
        e.substitute(&|v| match v {
            Var::V(0) => Some(Expr::var(Var::V(1))),
            Var::V(1) => Some(Expr::var(Var::V(0))),
            _ => None,
        })
    };
    let h_u = swap(&wp.h1);
    let h_w = swap(&wp.h2);
    let classical = !h_u.vars().iter().chain(h_w.vars().iter()).any(|v| matches!(v, Var::V(_)));
    let mut h = vec![Expr::num(0.0); 2];
    h[W_COMPONENT] = h_w;
    h[U_COMPONENT] = h_u;
    let boundary = if classical {
        BoundaryLaw::Classical { h }
    } else {
        BoundaryLaw::GeneralNonlinear { h, growth_bound: None }
    };
    let a = Expr::num(wp.a);
    let mut lambda = vec![Expr::num(0.0); 2];
    lambda[W_COMPONENT] = a.neg();
    lambda[U_COMPONENT] = a.clone();
    let mut coef = vec![vec![Expr::num(0.0); 2]; 2];
    coef[U_COMPONENT][W_COMPONENT] = Expr::num(-1.0);
    let mut g = vec![Expr::num(0.0); 2];
    g[W_COMPONENT] = wp.f.clone();
    let mut regular = vec![Expr::num(0.0); 2];
    regular[W_COMPONENT] = wp.psi.add(&a.mul(&dphi));
    regular[U_COMPONENT] = wp.phi.clone();
    ProblemSpec::new(SpecParts {
        name: wp.name.clone(),
        n: 2,
        k: 1,
        t_max: wp.t_max,
        lambda,
        a: coef,
        g,
        boundary,
        initial: InitialData { regular, atoms: vec![] },
        wave: Some(WaveTag { a: wp.a, u_component: U_COMPONENT }),
    })
    .map_err(WaveError::Problem)
}

/// Displacement values `u(x_p, t_q)` as rows over `t`.
pub fn lift_wave_solution(sol: &SolutionGrid) -> Result<Vec<Vec<f64>>, WaveError> {
    let tag = sol.wave.ok_or(WaveError::NotWave)?;
    Ok((0..sol.nt_rows())
        .map(|q| (0..sol.nx_cols()).map(|p| sol.value(q, p, tag.u_component)).collect())
        .collect())
}
