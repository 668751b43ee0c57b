//! Characteristic curves `xi = omega_i(tau; x, t)` of `d xi / d tau = lambda_i(xi, tau)`.
//!
//! Curves are integrated with fixed-step RK4 together with
//! `log E_i(tau) = int_t^tau a_ii`, and the wall crossing is located by
//! bisection on the length of the last step.

use std::fmt::Write as _;
use std::sync::Arc;

use dashmap::DashMap;
use serde::Serialize;

use crate::error::{EvalError, TraceError};
use crate::problem::ProblemSpec;

pub const TOL_B: f64 = 1e-10;
pub const DEFAULT_STEP: f64 = 1.0 / 1024.0;
pub const DEFAULT_MAX_STEPS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Backward,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Left wall `x = 0`.
    X0,
    /// Right wall `x = 1`.
    X1,
    /// Backward curve reached its stop line (`t = 0` unless restarted).
    TimeLine,
    /// Forward curve reached the horizon.
    Horizon,
}

impl Side {
    pub fn is_wall(self) -> bool {
        matches!(self, Side::X0 | Side::X1)
    }

    pub fn wall_x(self) -> Option<f64> {
        match self {
            Side::X0 => Some(0.0),
            Side::X1 => Some(1.0),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveNode {
    pub tau: f64,
    pub xi: f64,
    /// `int_t^tau a_ii` along the curve.
    pub log_e: f64,
    /// `lambda_i` at the node.
    pub speed: f64,
    /// `a_ii` at the node.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CharCurve {
    pub component: usize,
    pub anchor: (f64, f64),
    pub direction: Direction,
    /// Ordered from the anchor outwards; `tau` is monotone.
    pub nodes: Vec<CurveNode>,
    /// `t_i(x, t)` for backward curves, the exit time for forward ones.
    pub exit_time: f64,
    pub exit_side: Side,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOpts {
    pub step: f64,
    pub tol_b: f64,
    pub max_steps: usize,
}

impl Default for TraceOpts {
    fn default() -> Self {
        TraceOpts { step: DEFAULT_STEP, tol_b: TOL_B, max_steps: DEFAULT_MAX_STEPS }
    }
}

impl TraceOpts {
    pub fn with_step(step: f64) -> Self {
        TraceOpts { step, ..Default::default() }
    }
}

/// Integrate a characteristic for arbitrary speed and rate functions.
///
/// `stop` is the lower time limit for backward curves and the upper one for
/// forward curves.
pub fn trace_with<F, G>(
    speed: F,
    rate: G,
    component: usize,
    anchor: (f64, f64),
    direction: Direction,
    stop: f64,
    opts: &TraceOpts,
) -> Result<CharCurve, TraceError>
where
    F: Fn(f64, f64) -> Result<f64, EvalError>,
    G: Fn(f64, f64) -> Result<f64, EvalError>,
{
    let (x0, t0) = anchor;
    if !(0.0..=1.0).contains(&x0) || !t0.is_finite() {
        return Err(TraceError::BadAnchor { x: x0, t: t0 });
    }
    if !(opts.step > 0.0) {
        return Err(TraceError::BadStep);
    }
    let sgn = match direction {
        Direction::Backward => -1.0,
        Direction::Forward => 1.0,
    };
    let rhs = |tau: f64, xi: f64| -> Result<(f64, f64), EvalError> { Ok((speed(xi, tau)?, rate(xi, tau)?)) };
    let rk4 = |tau: f64, xi: f64, le: f64, h: f64| -> Result<(f64, f64), EvalError> {
        let (k1, l1) = rhs(tau, xi)?;
        let (k2, l2) = rhs(tau + 0.5 * h, xi + 0.5 * h * k1)?;
        let (k3, l3) = rhs(tau + 0.5 * h, xi + 0.5 * h * k2)?;
        let (k4, l4) = rhs(tau + h, xi + h * k3)?;
        Ok((
            xi + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
            le + h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4),
        ))
    };

    let (s0, r0) = rhs(t0, x0)?;
    if s0 == 0.0 {
        return Err(TraceError::Tangency { component, t: t0 });
    }
    // direction of motion of xi along the chosen time direction
    let moving_right = sgn * s0 > 0.0;
    let target_wall = if moving_right { 1.0 } else { 0.0 };
    let wall_side = if moving_right { Side::X1 } else { Side::X0 };
    let line_side = match direction {
        Direction::Backward => Side::TimeLine,
        Direction::Forward => Side::Horizon,
    };
    let mut nodes = vec![CurveNode { tau: t0, xi: x0, log_e: 0.0, speed: s0, rate: r0 }];
    let done = |nodes: Vec<CurveNode>, side: Side| {
        let exit_time = nodes.last().unwrap().tau;
        Ok(CharCurve { component, anchor, direction, nodes, exit_time, exit_side: side })
    };
    if x0 == target_wall {
        return done(nodes, wall_side);
    }
    if (stop - t0) * sgn <= 0.0 {
        return done(nodes, line_side);
    }
    let (mut tau, mut xi, mut le) = (t0, x0, 0.0);
    for _ in 0..opts.max_steps {
        let remaining = (stop - tau) * sgn;
        let h_len = if remaining <= opts.step * (1.0 + 1e-9) { remaining } else { opts.step };
        let h = sgn * h_len;
        let (xn, ln) = rk4(tau, xi, le, h)?;
        let crossed = if moving_right { xn > target_wall } else { xn < target_wall };
        if crossed || xn == target_wall {
            let (s_star, l_star) = if xn == target_wall {
                (h_len, ln)
            } else {
                // bisection on the sub-step length
                let (mut lo, mut hi) = (0.0f64, h_len);
                let mut hit = (0.5 * h_len, le);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let (xm, lm) = rk4(tau, xi, le, sgn * mid)?;
                    let gap = xm - target_wall;
                    hit = (mid, lm);
                    if gap.abs() <= opts.tol_b * 1e-2 || hi - lo <= 1e-15 * (1.0 + tau.abs()) {
                        break;
                    }
                    let inside = if moving_right { gap < 0.0 } else { gap > 0.0 };
                    if inside {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hit
            };
            let t_hit = tau + sgn * s_star;
            let (sp, rt) = rhs(t_hit, target_wall)?;
            if sp.abs() < 1e-12 {
                return Err(TraceError::Tangency { component, t: t_hit });
            }
            nodes.push(CurveNode { tau: t_hit, xi: target_wall, log_e: l_star, speed: sp, rate: rt });
            return done(nodes, wall_side);
        }
        tau = if h_len == remaining { stop } else { tau + h };
        xi = xn;
        le = ln;
        let (sp, rt) = rhs(tau, xi)?;
        if sp.abs() < 1e-12 {
            return Err(TraceError::Tangency { component, t: tau });
        }
        nodes.push(CurveNode { tau, xi, log_e: le, speed: sp, rate: rt });
        if tau == stop {
            return done(nodes, line_side);
        }
    }
    Err(TraceError::MaxSteps { component, steps: opts.max_steps })
}

/// Trace `omega_i` for a validated spec. Backward curves stop at `t = 0`,
/// forward curves at `t_max` of the spec.
pub fn trace_characteristic(
    spec: &ProblemSpec,
    i: usize,
    anchor: (f64, f64),
    direction: Direction,
    step: f64,
) -> Result<CharCurve, TraceError> {
    let stop = match direction {
        Direction::Backward => 0.0,
        Direction::Forward => spec.t_max,
    };
    trace_until(spec, i, anchor, direction, stop, &TraceOpts::with_step(step))
}

pub fn trace_until(
    spec: &ProblemSpec,
    i: usize,
    anchor: (f64, f64),
    direction: Direction,
    stop: f64,
    opts: &TraceOpts,
) -> Result<CharCurve, TraceError> {
    let lam = &spec.lambda[i];
    let aii = &spec.a[i][i];
    trace_with(|x, t| lam.eval_xt(x, t), |x, t| aii.eval_xt(x, t), i, anchor, direction, stop, opts)
}

impl CharCurve {
    pub fn tau_range(&self) -> (f64, f64) {
        let a = self.nodes[0].tau;
        let b = self.nodes.last().unwrap().tau;
        (a.min(b), a.max(b))
    }

    pub fn exit_point(&self) -> (f64, f64) {
        let n = self.nodes.last().unwrap();
        (n.xi, n.tau)
    }

    /// Index `m` of the node interval `[m, m+1]` containing `tau`.
    fn interval(&self, tau: f64) -> Result<usize, TraceError> {
        let (lo, hi) = self.tau_range();
        let slack = 1e-12 * (1.0 + hi.abs());
        if tau < lo - slack || tau > hi + slack || !tau.is_finite() {
            return Err(TraceError::OutOfRange { tau, lo, hi });
        }
        let n = self.nodes.len();
        if n == 1 {
            return Ok(0);
        }
        let decreasing = self.nodes[1].tau < self.nodes[0].tau;
        // first index whose tau is beyond `tau` along the curve
        let pos = self.nodes.partition_point(|nd| if decreasing { nd.tau > tau } else { nd.tau < tau });
        Ok(pos.clamp(1, n - 1) - 1)
    }

    fn hermite(t0: f64, t1: f64, y0: f64, y1: f64, d0: f64, d1: f64, tau: f64) -> f64 {
        let h = t1 - t0;
        if h == 0.0 {
            return y0;
        }
        let s = (tau - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * h * d0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * h * d1
    }

    /// Position `omega_i(tau)` by cubic Hermite interpolation.
    pub fn position(&self, tau: f64) -> Result<f64, TraceError> {
        let m = self.interval(tau)?;
        if self.nodes.len() == 1 {
            return Ok(self.nodes[0].xi);
        }
        let (a, b) = (&self.nodes[m], &self.nodes[m + 1]);
        if tau == a.tau {
            return Ok(a.xi);
        }
        if tau == b.tau {
            return Ok(b.xi);
        }
        Ok(Self::hermite(a.tau, b.tau, a.xi, b.xi, a.speed, b.speed, tau).clamp(0.0, 1.0))
    }

    pub fn log_weight(&self, tau: f64) -> Result<f64, TraceError> {
        let m = self.interval(tau)?;
        if self.nodes.len() == 1 {
            return Ok(0.0);
        }
        let (a, b) = (&self.nodes[m], &self.nodes[m + 1]);
        if tau == a.tau {
            return Ok(a.log_e);
        }
        if tau == b.tau {
            return Ok(b.log_e);
        }
        Ok(Self::hermite(a.tau, b.tau, a.log_e, b.log_e, a.rate, b.rate, tau))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,xi,log_e\n");
        for n in &self.nodes {
            let _ = writeln!(s, "{:?},{:?},{:?}", n.tau, n.xi, n.log_e);
        }
        s
    }
}

/// `E_i(tau; x, t) = exp int_t^tau a_ii` along the curve.
pub fn exp_weight(curve: &CharCurve, tau: f64) -> Result<f64, TraceError> {
    Ok(curve.log_weight(tau)?.exp())
}

/// Crossing point of two curves of different components, if any.
pub fn intersect(a: &CharCurve, b: &CharCurve, tol_b: f64) -> Option<(f64, f64)> {
    if a.component == b.component {
        return None;
    }
    let (alo, ahi) = a.tau_range();
    let (blo, bhi) = b.tau_range();
    let lo = alo.max(blo);
    let hi = ahi.min(bhi);
    if lo > hi {
        return None;
    }
    let gap = |tau: f64| -> Option<f64> { Some(a.position(tau).ok()? - b.position(tau).ok()?) };
    let mut taus: Vec<f64> = a
        .nodes
        .iter()
        .chain(b.nodes.iter())
        .map(|n| n.tau)
        .filter(|t| *t >= lo && *t <= hi)
        .collect();
    taus.push(lo);
    taus.push(hi);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut prev: Option<(f64, f64)> = None;
    for &t in &taus {
        let g = gap(t)?;
        if g == 0.0 {
            return Some((a.position(t).ok()?, t));
        }
        if let Some((tp, gp)) = prev {
            if gp * g < 0.0 {
                let (mut l, mut r, mut gl) = (tp, t, gp);
                for _ in 0..200 {
                    let m = 0.5 * (l + r);
                    let gm = gap(m)?;
                    if gm.abs() <= tol_b * 1e-2 || r - l <= 1e-15 * (1.0 + m.abs()) {
                        return Some((a.position(m).ok()?, m));
                    }
                    if gm * gl < 0.0 {
                        r = m;
                    } else {
                        l = m;
                        gl = gm;
                    }
                }
                let m = 0.5 * (l + r);
                return Some((a.position(m).ok()?, m));
            }
        }
        prev = Some((t, g));
    }
    None
}

type CacheKey = (usize, i64, i64, bool, i64, u64);

/// Concurrent curve cache keyed by component and anchor quantized to 1e-12.
#[derive(Default)]
pub struct CurveCache {
    map: DashMap<CacheKey, Arc<CharCurve>>,
}

fn quantize(v: f64) -> i64 {
    (v * 1e12).round() as i64
}

impl CurveCache {
    pub fn new() -> Self {
        CurveCache { map: DashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_or_trace(
        &self,
        spec: &ProblemSpec,
        i: usize,
        anchor: (f64, f64),
        direction: Direction,
        stop: f64,
        opts: &TraceOpts,
    ) -> Result<Arc<CharCurve>, TraceError> {
        let key = (
            i,
            quantize(anchor.0),
            quantize(anchor.1),
            direction == Direction::Forward,
            quantize(stop),
            opts.step.to_bits(),
        );
        if let Some(c) = self.map.get(&key) {
            return Ok(c.clone());
        }
        let c = Arc::new(trace_until(spec, i, anchor, direction, stop, opts)?);
        self.map.insert(key, c.clone());
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{BoundaryLaw, InitialData, SpecParts};
    use crate::expr::Expr;

    fn spec(lams: &[&str], k: usize, diag: &str, tmax: f64) -> ProblemSpec {
        let n = lams.len();
        let mut a = vec![vec![Expr::num(0.0); n]; n];
        for i in 0..n {
            a[i][i] = Expr::parse(diag).unwrap();
        }
        ProblemSpec::new(SpecParts {
            name: "c".into(),
            n,
            k,
            t_max: tmax,
            lambda: lams.iter().map(|s| Expr::parse(s).unwrap()).collect(),
            a,
            g: vec![Expr::num(0.0); n],
            boundary: BoundaryLaw::Classical { h: vec![Expr::num(0.0); n] },
            initial: InitialData { regular: vec![Expr::num(0.0); n], atoms: vec![] },
            wave: None,
        })
        .unwrap()
    }

    #[test]
    fn straight_lines() {
        let s = spec(&["1"], 0, "0", 2.0);
        let c = trace_characteristic(&s, 0, (0.5, 1.0), Direction::Backward, DEFAULT_STEP).unwrap();
        assert_eq!(c.exit_side, Side::X0);
        assert!((c.exit_time - 0.5).abs() < 1e-12);
        let s = spec(&["-1"], 1, "0", 2.0);
        let c = trace_characteristic(&s, 0, (0.5, 1.0), Direction::Backward, DEFAULT_STEP).unwrap();
        assert_eq!(c.exit_side, Side::X1);
        assert!((c.exit_time - 0.5).abs() < 1e-12);
        let c = trace_characteristic(&s, 0, (0.5, 0.25), Direction::Backward, DEFAULT_STEP).unwrap();
        assert_eq!(c.exit_side, Side::TimeLine);
        assert!((c.position(0.0).unwrap() - 0.75).abs() < 1e-14);
    }

    #[test]
    fn wall_hit_at_half_step() {
        let s = spec(&["-2"], 1, "0.5", 2.0);
        let c = trace_characteristic(&s, 0, (1.0 - 1.0 / 128.0, 1.0), Direction::Backward, 1.0 / 128.0).unwrap();
        assert_eq!(c.exit_side, Side::X1);
        assert!((c.exit_time - (1.0 - 1.0 / 256.0)).abs() < 1e-14, "{}", c.exit_time);
        let le = c.nodes.last().unwrap().log_e;
        assert!((le.abs() - 0.5 / 256.0).abs() < 1e-14, "{le}");
    }

    #[test]
    fn affine_speed_closed_form() {
        // xi(tau) = (1 + x0) e^(tau - t0) - 1 reaches 0 at tau = t0 - ln(1 + x0)
        let s = spec(&["1 + x"], 0, "0", 3.0);
        let c = trace_characteristic(&s, 0, (0.5, 1.0), Direction::Backward, DEFAULT_STEP).unwrap();
        assert_eq!(c.exit_side, Side::X0);
        let oracle = 1.0 - 1.5f64.ln();
        assert!((c.exit_time - oracle).abs() < 1e-10, "{}", c.exit_time);
    }

    #[test]
    fn weights() {
        let s = spec(&["1"], 0, "0", 2.0);
        let c = trace_characteristic(&s, 0, (0.9, 0.8), Direction::Backward, DEFAULT_STEP).unwrap();
        assert_eq!(exp_weight(&c, 0.3).unwrap(), 1.0);
        let s = spec(&["1"], 0, "0.7", 2.0);
        let c = trace_characteristic(&s, 0, (0.9, 0.8), Direction::Backward, DEFAULT_STEP).unwrap();
        for tau in [0.1, 0.37, 0.8] {
            assert!((exp_weight(&c, tau).unwrap() - (0.7f64 * (tau - 0.8)).exp()).abs() < 1e-12);
        }
        // a_ii = t from anchor time 0 forward: E = exp(tau^2 / 2)
        let s = spec(&["1"], 0, "t", 2.0);
        let c = trace_characteristic(&s, 0, (0.0, 0.0), Direction::Forward, DEFAULT_STEP).unwrap();
        for tau in [0.2, 0.55, 0.9] {
            let oracle = simpson(|s| s, 0.0, tau, 2000).exp();
            assert!((exp_weight(&c, tau).unwrap() - oracle).abs() < 1e-12);
        }
        assert!(matches!(exp_weight(&c, 1.5), Err(TraceError::OutOfRange { .. })));
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn intersections() {
        let s = spec(&["-1", "1"], 1, "0", 2.0);
        let a = trace_characteristic(&s, 1, (0.0, 0.0), Direction::Forward, DEFAULT_STEP).unwrap();
        let b = trace_characteristic(&s, 0, (1.0, 0.0), Direction::Forward, DEFAULT_STEP).unwrap();
        let (x, t) = intersect(&a, &b, TOL_B).unwrap();
        assert!((x - 0.5).abs() < 1e-10 && (t - 0.5).abs() < 1e-10);
        let s = spec(&["-2", "1"], 1, "0", 2.0);
        let a = trace_characteristic(&s, 0, (1.0, 0.0), Direction::Forward, DEFAULT_STEP).unwrap();
        let b = trace_characteristic(&s, 1, (0.0, 0.0), Direction::Forward, DEFAULT_STEP).unwrap();
        let (x, t) = intersect(&a, &b, TOL_B).unwrap();
        assert!((x - 1.0 / 3.0).abs() < 1e-10 && (t - 1.0 / 3.0).abs() < 1e-10);
        // disjoint time ranges
        let c = trace_until(&s, 1, (0.0, 1.5), Direction::Forward, 2.0, &TraceOpts::default()).unwrap();
        assert!(intersect(&a, &c, TOL_B).is_none());
    }

    #[test]
    fn anchor_semigroup_monotone() {
        let s = spec(&["-1.5 - 0.3*sin(x + t)", "1 + 0.5*x*x"], 1, "0.2*x", 3.0);
        for i in 0..2 {
            for &(x, t) in &[(0.3, 2.0), (0.9, 0.7), (0.05, 1.3)] {
                let c = trace_characteristic(&s, i, (x, t), Direction::Backward, DEFAULT_STEP).unwrap();
                assert_eq!(c.position(t).unwrap(), x);
                match c.exit_side {
                    Side::X1 => assert_eq!(i, 0),
                    Side::X0 => assert_eq!(i, 1),
                    Side::TimeLine => assert!(c.exit_time == 0.0),
                    Side::Horizon => panic!(),
                }
                for w in c.nodes.windows(2) {
                    if i == 0 {
                        assert!(w[1].xi > w[0].xi);
                    } else {
                        assert!(w[1].xi < w[0].xi);
                    }
                }
                let tau1 = 0.5 * (t + c.exit_time);
                let x1 = c.position(tau1).unwrap();
                let c2 = trace_characteristic(&s, i, (x1, tau1), Direction::Backward, DEFAULT_STEP).unwrap();
                for m in 0..=20 {
                    let tau2 = c2.exit_time + (tau1 - c2.exit_time) * m as f64 / 20.0;
                    let d = (c2.position(tau2).unwrap() - c.position(tau2).unwrap()).abs();
                    assert!(d <= 10.0 * TOL_B, "{d}");
                }
            }
        }
    }

    #[test]
    fn rk4_order() {
        // lambda = 1 + x: xi(tau) = (1 + x0) e^(tau - t0) - 1
        let s = spec(&["1 + x"], 0, "0", 2.0);
        let exact = |tau: f64| 1.3 * (tau - 0.4f64).exp() - 1.0;
        let err = |h: f64| {
            let c = trace_until(&s, 0, (0.3, 0.4), Direction::Forward, 0.7, &TraceOpts::with_step(h)).unwrap();
            c.nodes.iter().map(|n| (n.xi - exact(n.tau)).abs()).fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        assert!((e1 / e2).log2() >= 3.0 && (e2 / e3).log2() >= 3.0, "{e1} {e2} {e3}");
    }

    #[test]
    fn cache_reuses_curves() {
        let s = spec(&["1"], 0, "0", 2.0);
        let cache = CurveCache::new();
        let a = cache.get_or_trace(&s, 0, (0.5, 1.0), Direction::Backward, 0.0, &TraceOpts::default()).unwrap();
        let b = cache.get_or_trace(&s, 0, (0.5 + 1e-14, 1.0), Direction::Backward, 0.0, &TraceOpts::default()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
        assert!(a.to_csv().starts_with("tau,xi,log_e\n1.0,0.5,0.0\n"));
    }
}
