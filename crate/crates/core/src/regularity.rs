//! Empirical smoothness on time slabs from finite-difference seminorms on a
//! ladder of grids.
//!
//! `s_m(h)` is the largest `m`-th central difference quotient, in `x` and in
//! `t`, over slab nodes whose stencil stays inside the slab. A bounded ladder
//! is read as `C^m`-consistent, a ladder growing by a factor 2 or more per
//! halving as not consistent. These are heuristics, not membership proofs.

use serde::Serialize;

use crate::error::{PathError, RegularityError};
use crate::paths::{check_iota, compute_tj, IotaVerdict, PathOptions};
use crate::problem::ProblemSpec;
use crate::report::{svg_lines, Series};
use crate::solver::{picard_solve_opts, SolutionGrid, SolveOptions};

/// Seminorms at or below this are treated as zero.
pub const FLOOR: f64 = 1e-12;
pub const DEFAULT_LADDER: [usize; 3] = [128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Consistent,
    NotConsistent,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct Indicator {
    pub order: usize,
    pub slab: (f64, f64),
    /// Grid spacings, coarse to fine.
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    /// `s(h_{k+1}) / s(h_k)`; `None` when a value is at the floor.
    pub ratios: Vec<Option<f64>>,
    pub class: Classification,
}

/// Central difference weights and offsets (in units of the spacing) with the
/// power of the spacing to divide by.
fn stencil(m: usize) -> (Vec<(i64, f64)>, f64) {
    let binom = |n: usize, k: usize| (0..k).fold(1.0, |a, j| a * (n - j) as f64 / (j + 1) as f64);
    let sign = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
    if m % 2 == 0 {
        let w = (0..=m).map(|k| ((m / 2) as i64 - k as i64, sign(k) * binom(m, k))).collect();
        (w, 1.0)
    } else {
        let w = (0..=m).map(|k| (m as i64 - 2 * k as i64, sign(k) * binom(m, k))).collect();
        (w, 2.0)
    }
}

/// Largest `m`-th difference quotient over nodes of `[t_lo, t_hi]`.
pub fn seminorm(sol: &SolutionGrid, m: usize, t_lo: f64, t_hi: f64) -> Result<f64, RegularityError> {
    let slack = 1e-9 * (1.0 + t_hi.abs());
    if t_lo < sol.t0 - slack || t_hi > sol.t1 + slack || t_hi <= t_lo {
        return Err(RegularityError::SlabOutside { lo: t_lo, hi: t_hi, t0: sol.t0, t1: sol.t1 });
    }
    if m == 0 {
        return Err(RegularityError::BadLadder);
    }
    let (w, scale) = stencil(m);
    let reach = w.iter().map(|(o, _)| o.unsigned_abs() as usize).max().unwrap_or(0);
    let (dx, dt) = (sol.dx(), sol.dt());
    let q_lo = ((t_lo - sol.t0) / dt - 1e-9).ceil().max(0.0) as usize;
    let q_hi = (((t_hi - sol.t0) / dt + 1e-9).floor() as usize).min(sol.rows - 1);
    let (cols, n) = (sol.cols, sol.n);
    let hx = (scale * dx).powi(m as i32);
    let ht = (scale * dt).powi(m as i32);
    let mut best = 0.0f64;
    for q in q_lo..=q_hi {
        for p in 0..cols {
            for i in 0..n {
                if p >= reach && p + reach < cols {
                    let d: f64 = w.iter().map(|&(o, c)| c * sol.value(q, (p as i64 + o) as usize, i)).sum();
                    best = best.max(d.abs() / hx);
                }
                if q >= q_lo + reach && q + reach <= q_hi {
                    let d: f64 = w.iter().map(|&(o, c)| c * sol.value((q as i64 + o) as usize, p, i)).sum();
                    best = best.max(d.abs() / ht);
                }
            }
        }
    }
    Ok(best)
}

/// The ratio rule on a ladder ordered coarse to fine.
pub fn classify(s: &[f64]) -> (Vec<Option<f64>>, Classification) {
    let ratios: Vec<Option<f64>> = s
        .windows(2)
        .map(|w| if w[0] <= FLOOR || w[1] <= FLOOR { None } else { Some(w[1] / w[0]) })
        .collect();
    if s.iter().all(|v| *v <= FLOOR) {
        return (ratios, Classification::Consistent);
    }
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.iter().cloned().fold(0.0, f64::max);
    if lo > FLOOR && hi / lo < 2.0 {
        return (ratios, Classification::Consistent);
    }
    if ratios.iter().all(|r| matches!(r, Some(v) if *v >= 2.0)) {
        return (ratios, Classification::NotConsistent);
    }
    (ratios, Classification::Inconclusive)
}

/// Indicator of order `m` on `[t_lo, t_hi]` from solutions on a ladder of grids.
pub fn smoothness_indicator(ladder: &[SolutionGrid], slab: (f64, f64), m: usize) -> Result<Indicator, RegularityError> {
    if ladder.len() < 2 || ladder.windows(2).any(|w| !(w[1].dx() < w[0].dx())) {
        return Err(RegularityError::BadLadder);
    }
    let h: Vec<f64> = ladder.iter().map(|g| g.dx()).collect();
    let s: Vec<f64> = ladder.iter().map(|g| seminorm(g, m, slab.0, slab.1)).collect::<Result<_, _>>()?;
    let (ratios, class) = classify(&s);
    Ok(Indicator { order: m, slab, h, s, ratios, class })
}

/// Solves `spec` on `[0, t_end]` at each `n` of the ladder with square cells.
pub fn solve_ladder(spec: &ProblemSpec, t_end: f64, ladder: &[usize], tol: f64) -> Result<Vec<SolutionGrid>, RegularityError> {
    let mut s = spec.clone();
    s.t_max = t_end;
    ladder
        .iter()
        .map(|&n| {
            let mut o = SolveOptions::new(n, ((n as f64) * t_end).round().max(1.0) as usize);
            o.tol = tol;
            Ok(picard_solve_opts(&s, &o)?.0)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SlabVerdict {
    /// `below`, `above` or `tile`.
    pub position: String,
    pub j: usize,
    pub indicator: Indicator,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub iota: IotaVerdict,
    pub t_j: Vec<f64>,
    pub ladder: Vec<usize>,
    pub slabs: Vec<SlabVerdict>,
    /// Whether the order-`j` ladder is bounded on every slab above `T_j`.
    pub bounded_above: Option<bool>,
    pub claim: String,
}

impl RegularityReport {
    pub fn to_svg(&self) -> String {
        let series: Vec<Series> = self
            .slabs
            .iter()
            .map(|v| Series {
                label: format!(
                    "s_{} {} [{:.2},{:.2}]",
                    v.indicator.order, v.position, v.indicator.slab.0, v.indicator.slab.1
                ),
                points: v.indicator.h.iter().zip(&v.indicator.s).map(|(a, b)| (*a, *b)).collect(),
            })
            .collect();
        svg_lines("finite-difference seminorms", "h", "s_m(h)", &series, true)
    }
}

#[derive(Clone, Debug)]
pub struct RegularityOptions {
    pub ladder: Vec<usize>,
    /// Slab height above `T_j` (and below it, clipped at the previous one).
    pub delta: f64,
    pub tol: f64,
    pub path: PathOptions,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        RegularityOptions { ladder: DEFAULT_LADDER.to_vec(), delta: 0.5, tol: 1e-10, path: PathOptions::default() }
    }
}

/// Order-`j` indicators just below and just above each `T_j`, or on tiles
/// of `[0, t_max]` when the path condition fails.
pub fn smoothing_report(spec: &ProblemSpec, j_max: usize, opts: &RegularityOptions) -> Result<RegularityReport, RegularityError> {
    let iota = check_iota(spec, 0.0, &opts.path)?;
    let gap = 4.0 / *opts.ladder.first().unwrap_or(&128) as f64;
    match iota {
        IotaVerdict::Inconclusive { .. } => Err(PathError::Inconclusive(0.0).into()),
        IotaVerdict::Violated { .. } => {
            let grids = solve_ladder(spec, spec.t_max, &opts.ladder, opts.tol)?;
            let mut slabs = Vec::new();
            let tiles = (spec.t_max / opts.delta).floor().max(1.0) as usize;
            for j in 1..=j_max {
                for s in 0..tiles {
                    let lo = s as f64 * opts.delta;
                    let hi = (lo + opts.delta).min(spec.t_max);
                    let indicator = smoothness_indicator(&grids, (lo, hi), j)?;
                    slabs.push(SlabVerdict { position: "tile".into(), j, indicator });
                }
            }
            Ok(RegularityReport {
                iota,
                t_j: vec![],
                ladder: opts.ladder.clone(),
                slabs,
                bounded_above: None,
                claim: "path condition fails; no smoothing time is predicted".into(),
            })
        }
        IotaVerdict::Holds { .. } => {
            let tj = compute_tj(spec, j_max, &opts.path)?;
            let t_end = tj.last().copied().unwrap_or(0.0) + opts.delta;
            let grids = solve_ladder(spec, t_end, &opts.ladder, opts.tol)?;
            let mut slabs = Vec::new();
            let mut prev = 0.0;
            for (idx, &t) in tj.iter().enumerate() {
                let j = idx + 1;
                if t - gap > prev {
                    let indicator = smoothness_indicator(&grids, (prev.max(t - opts.delta), t - gap), j)?;
                    slabs.push(SlabVerdict { position: "below".into(), j, indicator });
                }
                let indicator = smoothness_indicator(&grids, (t + gap, t + opts.delta), j)?;
                slabs.push(SlabVerdict { position: "above".into(), j, indicator });
                prev = t;
            }
            let bounded = slabs
                .iter()
                .filter(|s| s.position == "above")
                .all(|s| s.indicator.class == Classification::Consistent);
            Ok(RegularityReport {
                iota,
                t_j: tj,
                ladder: opts.ladder.clone(),
                slabs,
                bounded_above: Some(bounded),
                claim: "order-j seminorm ladder is bounded above T_j".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled(n: usize, t1: f64, f: impl Fn(f64, f64) -> f64) -> SolutionGrid {
        let nt = (n as f64 * t1).round() as usize;
        let mut g = SolutionGrid::zeros(1, 0, n, nt, 0.0, t1);
        for q in 0..g.rows {
            for p in 0..g.cols {
                let v = f(g.x(p), g.t(q));
                g.set(q, p, 0, v);
            }
        }
        g
    }

    fn ladder(f: impl Fn(f64, f64) -> f64 + Copy) -> Vec<SolutionGrid> {
        [64, 128, 256].iter().map(|&n| sampled(n, 1.0, f)).collect()
    }

    #[test]
    fn smooth_wave_is_consistent() {
        let pi = std::f64::consts::PI;
        let l = ladder(|x, t| (pi * (x - t)).sin());
        let ind = smoothness_indicator(&l, (0.0, 1.0), 2).unwrap();
        assert_eq!(ind.class, Classification::Consistent);
        assert!((ind.s[2] - pi * pi).abs() < 0.01 * pi * pi, "{:?}", ind.s);
    }

    #[test]
    fn kink_is_not_consistent() {
        let l = ladder(|x, t| (x - 0.5 - t).abs());
        let ind = smoothness_indicator(&l, (0.0, 0.4), 2).unwrap();
        assert_eq!(ind.class, Classification::NotConsistent, "{:?}", ind.s);
    }

    #[test]
    fn polynomials_below_the_order_vanish() {
        let l = ladder(|x, t| 1.0 + 2.0 * x - 3.0 * t + x * t);
        for m in [3, 4] {
            let ind = smoothness_indicator(&l, (0.0, 1.0), m).unwrap();
            assert!(ind.s.iter().all(|v| *v < 1e-6), "{m} {:?}", ind.s);
        }
        let ind = smoothness_indicator(&ladder(|_, _| 0.0), (0.2, 0.8), 1).unwrap();
        assert_eq!(ind.class, Classification::Consistent);
    }

    #[test]
    fn classify_rule() {
        assert_eq!(classify(&[1.0, 1.5, 1.9]).1, Classification::Consistent);
        assert_eq!(classify(&[1.0, 2.0, 4.5]).1, Classification::NotConsistent);
        assert_eq!(classify(&[1.0, 1.8, 3.0]).1, Classification::Inconclusive);
        assert_eq!(classify(&[0.0, 0.0]).1, Classification::Consistent);
    }

    #[test]
    fn locality_and_domain() {
        let l = ladder(|x, t| if t < 0.5 { (x - 0.3).abs() } else { 0.0 });
        // values below the slab are never read
        let ind = smoothness_indicator(&l, (0.5, 1.0), 1).unwrap();
        assert!(ind.s.iter().all(|v| *v == 0.0));
        assert!(matches!(smoothness_indicator(&l, (0.5, 1.5), 1), Err(RegularityError::SlabOutside { .. })));
    }

    #[test]
    fn smooth_classical_report() {
        let s = crate::solver::tests::manufactured(1.0);
        let o = RegularityOptions { ladder: vec![32, 64, 128], delta: 0.4, tol: 1e-11, path: PathOptions::default() };
        let r = smoothing_report(&s, 1, &o).unwrap();
        assert!(r.iota.holds());
        assert_eq!(r.bounded_above, Some(true), "{:#?}", r.slabs);
        assert!(r.to_svg().starts_with("<svg"));
    }
}
