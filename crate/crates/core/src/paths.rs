//! Reflections, Expansion Paths (EPs), Influence Paths (IPs), influence
//! domains and the smoothing conditions built on them.
//!
//! A characteristic of component `i` leaves the strip through its exit wall
//! (where `v_i` is read). It reflects into component `j` when `h_j` depends on
//! `v_i`; the reflected curve starts on the wall carrying the condition of
//! `j`. That is the same wall for a same-side reflection and the opposite one
//! for a jumping reflection.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{trace_until, trace_with, CharCurve, Direction, Side, TraceOpts};
use crate::error::{PathError, ProblemError};
use crate::expr::Expr;
use crate::problem::{BoundaryLaw, InitialData, ProblemSpec, SpecParts};
use crate::solver::BoundaryTrace;

pub const TOL_R: f64 = 1e-9;
pub const DEFAULT_DEPTH: usize = 64;
pub const RASTER_PER_UNIT: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct PathOptions {
    pub depth_max: usize,
    /// Time at which an EP counts as unbounded; see [`default_horizon`].
    pub horizon: Option<f64>,
    /// Seeds per component on the line `t = T`.
    pub x_samples: usize,
    pub step: f64,
    /// Cap on enumerated EP states; exceeding it gives an inconclusive verdict.
    pub state_budget: usize,
    pub z_samples: usize,
    pub z_range: f64,
    pub tol_r: f64,
    pub raster_per_unit: usize,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            depth_max: DEFAULT_DEPTH,
            horizon: None,
            x_samples: 257,
            step: 1.0 / 1024.0,
            state_budget: 200_000,
            z_samples: 33,
            z_range: 10.0,
            tol_r: TOL_R,
            raster_per_unit: RASTER_PER_UNIT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionKind {
    SameSide,
    Jumping,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReflectionEvent {
    pub source: usize,
    pub target: usize,
    /// Point where the source characteristic leaves the strip.
    pub x: f64,
    pub t: f64,
    pub kind: ReflectionKind,
}

pub fn reflection_kind(spec: &ProblemSpec, source: usize, target: usize) -> ReflectionKind {
    if spec.bc_wall(target) == spec.exit_wall(source) {
        ReflectionKind::SameSide
    } else {
        ReflectionKind::Jumping
    }
}

fn z_grid(opts: &PathOptions) -> Vec<f64> {
    let m = opts.z_samples.max(2);
    (0..m).map(|a| -opts.z_range + 2.0 * opts.z_range * a as f64 / (m - 1) as f64).collect()
}

/// Components `j` into which a characteristic of `i` reflects at time `t`.
///
/// With a trace, the other entries of `v` are taken from it; without one,
/// they are sampled together with `v_i` (all equal to `z`, or zero).
pub fn detect_reflections(
    spec: &ProblemSpec,
    i: usize,
    t: f64,
    trace: Option<&BoundaryTrace>,
    opts: &PathOptions,
) -> Vec<(usize, ReflectionKind)> {
    let zs = z_grid(opts);
    let n = spec.n;
    let mut probes: Vec<Vec<f64>> = Vec::new();
    match trace {
        Some(tr) => {
            let base = tr.at(t);
            for &z in &zs {
                let mut v = base.clone();
                v[i] = z;
                probes.push(v);
            }
        }
        None => {
            for &z in &zs {
                probes.push(vec![z; n]);
                let mut v = vec![0.0; n];
                v[i] = z;
                probes.push(v);
            }
        }
    }
    let mut out = Vec::new();
    for j in 0..n {
        if spec.boundary_grad_is_zero(j, i) {
            continue;
        }
        let hit = probes
            .iter()
            .any(|v| matches!(spec.boundary_grad(j, i, t, v), Ok(d) if d.abs() > opts.tol_r));
        if hit {
            out.push((j, reflection_kind(spec, i, j)));
        }
    }
    out
}

/// Reflection matrix `m[source][target]` at time `t` (trace-free test).
fn reflection_matrix(spec: &ProblemSpec, t: f64, opts: &PathOptions) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; spec.n]; spec.n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, _) in detect_reflections(spec, i, t, None, opts) {
            row[j] = true;
        }
    }
    m
}

fn has_any_reflection(spec: &ProblemSpec) -> bool {
    (0..spec.n).any(|i| (0..spec.n).any(|j| !spec.boundary_grad_is_zero(j, i)))
}

// ---------------------------------------------------------------------------
// Expansion paths

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Seed {
    /// `None` seeds every component.
    pub component: Option<usize>,
    pub x: f64,
    pub t: f64,
}

impl Seed {
    pub fn atoms(spec: &ProblemSpec) -> Vec<Seed> {
        spec.initial.atoms.iter().map(|a| Seed { component: Some(a.i), x: a.xstar, t: 0.0 }).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpSegment {
    pub component: usize,
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub exit_side: Side,
    #[serde(skip)]
    pub curve: Option<Arc<CharCurve>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpStatus {
    /// Last curve leaves the strip with no reflection.
    Bounded,
    /// Last curve reaches the horizon.
    Unbounded,
    /// Depth cap reached while reflections still exist.
    DepthCapped,
    /// Continues as an EP already enumerated from an identical state.
    Merged,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ep {
    pub segments: Vec<EpSegment>,
    pub events: Vec<ReflectionEvent>,
    pub status: EpStatus,
    pub bounded: bool,
    pub top_time: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpEnumeration {
    pub eps: Vec<Ep>,
    pub horizon: f64,
    pub max_top: f64,
    /// Index into `eps` of an unbounded EP.
    pub violated: Option<usize>,
    pub depth_capped: bool,
    pub budget_exhausted: bool,
    pub states: usize,
}

struct Rec {
    parent: Option<usize>,
    comp: usize,
    start: (f64, f64),
    event: Option<ReflectionEvent>,
    depth: usize,
    curve: Option<Arc<CharCurve>>,
}

fn qkey(v: f64) -> i64 {
    (v * 1e9).round() as i64
}

struct Engine<'a> {
    spec: &'a ProblemSpec,
    opts: &'a PathOptions,
    horizon: f64,
    dedupe: bool,
    early_exit: bool,
}

impl<'a> Engine<'a> {
    fn run(&self, seeds: &[(usize, f64, f64)]) -> Result<EpEnumeration, PathError> {
        let topts = TraceOpts::with_step(self.opts.step);
        let mut arena: Vec<Rec> = Vec::new();
        let mut seen: HashSet<(usize, i64, i64)> = HashSet::new();
        let mut level: Vec<usize> = Vec::new();
        for &(c, x, t) in seeds {
            arena.push(Rec { parent: None, comp: c, start: (x, t), event: None, depth: 0, curve: None });
            level.push(arena.len() - 1);
        }
        let mut leaves: Vec<(usize, EpStatus, f64)> = Vec::new();
        let mut budget_exhausted = false;
        let mut violated = None;
        'outer: while !level.is_empty() {
            let curves: Vec<Result<CharCurve, PathError>> = level
                .par_iter()
                .map(|&id| {
                    let r = &arena[id];
                    trace_until(self.spec, r.comp, r.start, Direction::Forward, self.horizon, &topts).map_err(PathError::from)
                })
                .collect();
            let mut next = Vec::new();
            for (&id, c) in level.iter().zip(curves) {
                let c = Arc::new(c?);
                let (xe, te) = c.exit_point();
                let side = c.exit_side;
                arena[id].curve = Some(c);
                if side == Side::Horizon {
                    leaves.push((id, EpStatus::Unbounded, te));
                    if violated.is_none() {
                        violated = Some(leaves.len() - 1);
                    }
                    if self.early_exit {
                        break 'outer;
                    }
                    continue;
                }
                let comp = arena[id].comp;
                let refl = detect_reflections(self.spec, comp, te, None, self.opts);
                if refl.is_empty() {
                    leaves.push((id, EpStatus::Bounded, te));
                    continue;
                }
                if arena[id].depth >= self.opts.depth_max {
                    leaves.push((id, EpStatus::DepthCapped, te));
                    continue;
                }
                for (j, kind) in refl {
                    let xs = self.spec.bc_wall(j);
                    if self.dedupe && !seen.insert((j, qkey(xs), qkey(te))) {
                        leaves.push((id, EpStatus::Merged, te));
                        continue;
                    }
                    if arena.len() >= self.opts.state_budget {
                        budget_exhausted = true;
                        leaves.push((id, EpStatus::DepthCapped, te));
                        continue;
                    }
                    let ev = ReflectionEvent { source: comp, target: j, x: xe, t: te, kind };
                    let depth = arena[id].depth + 1;
                    arena.push(Rec { parent: Some(id), comp: j, start: (xs, te), event: Some(ev), depth, curve: None });
                    next.push(arena.len() - 1);
                }
            }
            level = next;
        }
        let eps: Vec<Ep> = leaves
            .iter()
            .map(|&(id, status, top)| {
                let mut chain = vec![id];
                while let Some(p) = arena[*chain.last().unwrap()].parent {
                    chain.push(p);
                }
                chain.reverse();
                let segments = chain
                    .iter()
                    .map(|&r| {
                        let rec = &arena[r];
                        let c = rec.curve.clone().unwrap();
                        EpSegment {
                            component: rec.comp,
                            start: rec.start,
                            end: c.exit_point(),
                            exit_side: c.exit_side,
                            curve: Some(c),
                        }
                    })
                    .collect();
                let events = chain.iter().filter_map(|&r| arena[r].event).collect();
                Ep { segments, events, status, bounded: status == EpStatus::Bounded, top_time: top }
            })
            .collect();
        let max_top = eps.iter().fold(f64::NEG_INFINITY, |m, e| m.max(e.top_time));
        Ok(EpEnumeration {
            depth_capped: eps.iter().any(|e| e.status == EpStatus::DepthCapped),
            eps,
            horizon: self.horizon,
            max_top,
            violated,
            budget_exhausted,
            states: arena.len(),
        })
    }
}

fn expand_seeds(spec: &ProblemSpec, seeds: &[Seed]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for s in seeds {
        match s.component {
            Some(c) => out.push((c, s.x, s.t)),
            None => out.extend((0..spec.n).map(|c| (c, s.x, s.t))),
        }
    }
    out
}

fn check_spec(spec: &ProblemSpec) -> Result<(), PathError> {
    if !spec.is_validated() {
        return Err(PathError::Dimension("spec has not passed validation".into()));
    }
    Ok(())
}

/// Breadth-first enumeration of all EPs from the seeds, up to `opts.horizon`
/// (default `t_max` of the spec). No merging of identical states.
pub fn trace_eps(spec: &ProblemSpec, seeds: &[Seed], opts: &PathOptions) -> Result<EpEnumeration, PathError> {
    check_spec(spec)?;
    let horizon = opts.horizon.unwrap_or(spec.t_max);
    let eng = Engine { spec, opts, horizon, dedupe: false, early_exit: false };
    eng.run(&expand_seeds(spec, seeds))
}

/// Longest sampled crossing time `1 / min |lambda|` over `[0,1] x [0, t_end]`.
pub fn max_travel_time(spec: &ProblemSpec, t_end: f64) -> Result<f64, PathError> {
    let mut slow = f64::INFINITY;
    let nts = (16.0 * t_end.max(1.0)).ceil() as usize + 1;
    for a in 0..=16 {
        let x = a as f64 / 16.0;
        for b in 0..nts {
            let t = t_end * b as f64 / (nts - 1) as f64;
            for i in 0..spec.n {
                slow = slow.min(spec.lambda_at(i, x, t)?.abs());
            }
        }
    }
    Ok(1.0 / slow)
}

/// `max(t_max, T + (n + 1) * max travel time)`: a bounded EP of a
/// constant-coefficient reflection problem uses each component at most once,
/// so anything reaching this line is treated as unbounded.
pub fn default_horizon(spec: &ProblemSpec, t: f64) -> Result<f64, PathError> {
    let travel = max_travel_time(spec, spec.t_max.max(t))?;
    Ok(spec.t_max.max(t + (spec.n + 1) as f64 * travel))
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum IotaVerdict {
    Holds { t: f64, t_prime: f64, seeds: usize, states: usize },
    Violated { t: f64, horizon: f64, witness: Box<Ep> },
    Inconclusive { t: f64, reason: String, states: usize },
}

impl IotaVerdict {
    pub fn holds(&self) -> bool {
        matches!(self, IotaVerdict::Holds { .. })
    }

    pub fn violated(&self) -> bool {
        matches!(self, IotaVerdict::Violated { .. })
    }

    pub fn t_prime(&self) -> Option<f64> {
        match self {
            IotaVerdict::Holds { t_prime, .. } => Some(*t_prime),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            IotaVerdict::Holds { .. } => "holds",
            IotaVerdict::Violated { .. } => "violated",
            IotaVerdict::Inconclusive { .. } => "inconclusive",
        }
    }
}

fn verdict_from(t: f64, seeds: usize, e: EpEnumeration) -> IotaVerdict {
    if let Some(ix) = e.violated {
        return IotaVerdict::Violated { t, horizon: e.horizon, witness: Box::new(e.eps[ix].clone()) };
    }
    if e.depth_capped || e.budget_exhausted {
        let reason = if e.budget_exhausted {
            format!("state budget exhausted after {} states", e.states)
        } else {
            "depth cap reached with reflections still possible".to_string()
        };
        return IotaVerdict::Inconclusive { t, reason, states: e.states };
    }
    let t_prime = if seeds == 0 { t } else { e.max_top };
    IotaVerdict::Holds { t, t_prime, seeds, states: e.states }
}

fn line_seeds(opts: &PathOptions, t: f64) -> Vec<Seed> {
    let m = opts.x_samples.max(2);
    (0..m).map(|a| Seed { component: None, x: a as f64 / (m - 1) as f64, t }).collect()
}

/// Condition (iota) at `T`: every EP through a point of `t = T` stays below
/// some `T'`.
pub fn check_iota(spec: &ProblemSpec, t: f64, opts: &PathOptions) -> Result<IotaVerdict, PathError> {
    check_spec(spec)?;
    let horizon = match opts.horizon {
        Some(h) => h,
        None => default_horizon(spec, t)?,
    };
    let seeds = expand_seeds(spec, &line_seeds(opts, t));
    let eng = Engine { spec, opts, horizon, dedupe: true, early_exit: true };
    let e = eng.run(&seeds)?;
    Ok(verdict_from(t, seeds.len(), e))
}

/// Condition (iota-iota) at `T`: seeds restricted to `(x, T)` in the strict
/// influence set of component `i`, following the characteristic of `i`.
pub fn check_iota2(spec: &ProblemSpec, t: f64, opts: &PathOptions) -> Result<IotaVerdict, PathError> {
    check_spec(spec)?;
    let sets = influence_sets(spec, t, opts)?;
    check_iota2_with(spec, t, &sets, opts)
}

pub fn check_iota2_with(
    spec: &ProblemSpec,
    t: f64,
    sets: &InfluenceSets,
    opts: &PathOptions,
) -> Result<IotaVerdict, PathError> {
    let horizon = match opts.horizon {
        Some(h) => h,
        None => default_horizon(spec, t)?,
    };
    let mut seeds = Vec::new();
    for i in 0..spec.n {
        for p in 0..sets.cols {
            let x = p as f64 / (sets.cols - 1) as f64;
            if sets.strict_contains(i, x, t) {
                seeds.push((i, x, t));
            }
        }
    }
    let eng = Engine { spec, opts, horizon, dedupe: true, early_exit: true };
    let e = eng.run(&seeds)?;
    Ok(verdict_from(t, seeds.len(), e))
}

/// Slab times `T_1 <= T_2 <= ..`: `T_j` is the largest EP top time seeded on
/// `t = T_{j-1}`, with `T_0 = 0`.
pub fn compute_tj(spec: &ProblemSpec, j_max: usize, opts: &PathOptions) -> Result<Vec<f64>, PathError> {
    let mut out = Vec::with_capacity(j_max);
    let mut t = 0.0;
    for _ in 0..j_max {
        match check_iota(spec, t, opts)? {
            IotaVerdict::Holds { t_prime, .. } => {
                out.push(t_prime);
                t = t_prime;
            }
            IotaVerdict::Violated { .. } => return Err(PathError::NotHolds(t)),
            IotaVerdict::Inconclusive { .. } => return Err(PathError::Inconclusive(t)),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Influence paths

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Coupling,
    Reflection,
    JumpingReflection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IpSegment {
    pub component: usize,
    pub start: (f64, f64),
    pub end: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ip {
    pub segments: Vec<IpSegment>,
    pub transitions: Vec<Transition>,
    /// Pointwise transition rules (the strict influence set) instead of
    /// neighbourhood rules.
    pub strict: bool,
}

impl Ep {
    pub fn to_ip(&self) -> Ip {
        Ip {
            segments: self
                .segments
                .iter()
                .map(|s| IpSegment { component: s.component, start: s.start, end: s.end })
                .collect(),
            transitions: self
                .events
                .iter()
                .map(|e| match e.kind {
                    ReflectionKind::SameSide => Transition::Reflection,
                    ReflectionKind::Jumping => Transition::JumpingReflection,
                })
                .collect(),
            strict: true,
        }
    }
}

fn coupling_near(spec: &ProblemSpec, i: usize, j: usize, x: f64, t: f64, strict: bool, tol: f64) -> bool {
    if spec.a[i][j].is_zero() {
        return false;
    }
    let ok = |x: f64, t: f64| matches!(spec.a[i][j].eval_xt(x.clamp(0.0, 1.0), t.max(0.0)), Ok(v) if v.abs() > tol);
    if strict {
        return ok(x, t);
    }
    let h = 1.0 / RASTER_PER_UNIT as f64;
    (-1..=1).any(|a| (-1..=1).any(|b| ok(x + a as f64 * h, t + b as f64 * h)))
}

/// Checks the IP rules: monotone time, segments on characteristics, and the
/// three admissible transition types.
pub fn validate_ip(spec: &ProblemSpec, ip: &Ip, opts: &PathOptions) -> Result<(), String> {
    if ip.segments.is_empty() {
        return Err("empty path".into());
    }
    if ip.transitions.len() + 1 != ip.segments.len() {
        return Err("transition count must be one less than segment count".into());
    }
    let topts = TraceOpts::with_step(opts.step);
    for (l, s) in ip.segments.iter().enumerate() {
        if s.end.1 < s.start.1 {
            return Err(format!("segment {l} runs backwards in time"));
        }
        let c = trace_until(spec, s.component, s.start, Direction::Forward, s.end.1, &topts)
            .map_err(|e| format!("segment {l}: {e}"))?;
        let (xe, te) = c.exit_point();
        if (te - s.end.1).abs() > 1e-8 || (xe - s.end.0).abs() > 1e-6 {
            return Err(format!(
                "segment {l} does not follow a characteristic of component {} (ends at ({xe}, {te}), expected ({}, {}))",
                s.component + 1,
                s.end.0,
                s.end.1
            ));
        }
    }
    for (l, tr) in ip.transitions.iter().enumerate() {
        let (a, b) = (&ip.segments[l], &ip.segments[l + 1]);
        if (a.end.1 - b.start.1).abs() > 1e-9 {
            return Err(format!("time jumps between segments {l} and {}", l + 1));
        }
        let t = a.end.1;
        match tr {
            Transition::Coupling => {
                if (a.end.0 - b.start.0).abs() > 1e-9 {
                    return Err(format!("segments {l} and {} do not meet", l + 1));
                }
                if !coupling_near(spec, b.component, a.component, a.end.0, t, ip.strict, opts.tol_r) {
                    return Err(format!("no coupling a_{}{} at transition {l}", b.component + 1, a.component + 1));
                }
            }
            Transition::Reflection | Transition::JumpingReflection => {
                let wall = a.end.0;
                if wall != 0.0 && wall != 1.0 {
                    return Err(format!("reflection {l} is not on the boundary"));
                }
                let want = if *tr == Transition::Reflection { wall } else { 1.0 - wall };
                if (b.start.0 - want).abs() > 1e-12 {
                    return Err(format!("reflected segment {} starts at the wrong wall", l + 1));
                }
                let kind = if *tr == Transition::Reflection { ReflectionKind::SameSide } else { ReflectionKind::Jumping };
                let times: Vec<f64> = if ip.strict {
                    vec![t]
                } else {
                    let h = 1.0 / RASTER_PER_UNIT as f64;
                    vec![t, (t - h).max(0.0), t + h]
                };
                let ok = times.iter().any(|&tt| {
                    detect_reflections(spec, a.component, tt, None, opts).contains(&(b.component, kind))
                });
                if !ok {
                    return Err(format!(
                        "component {} does not reflect into {} at t={t}",
                        a.component + 1,
                        b.component + 1
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Influence domains on a raster

#[derive(Clone, Debug)]
pub struct InfluenceSets {
    pub n: usize,
    pub cols: usize,
    pub rows: usize,
    pub t_end: f64,
    /// `reach[i][q * cols + p]` marks `X_i`.
    pub reach: Vec<Vec<u8>>,
    /// Same for `X_i` with pointwise transitions.
    pub strict: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct Mask {
    pub cols: usize,
    pub rows: usize,
    pub t_end: f64,
    pub data: Vec<u8>,
}

fn node_of(cols: usize, rows: usize, t_end: f64, x: f64, t: f64) -> (usize, usize) {
    let p = (x.clamp(0.0, 1.0) * (cols - 1) as f64).round() as usize;
    let q = if rows <= 1 || t_end <= 0.0 {
        0
    } else {
        ((t / t_end).clamp(0.0, 1.0) * (rows - 1) as f64).round() as usize
    };
    (p, q)
}

impl Mask {
    pub fn contains(&self, x: f64, t: f64) -> bool {
        let (p, q) = node_of(self.cols, self.rows, self.t_end, x, t);
        self.data[q * self.cols + p] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        crate::report::pgm(&self.data, self.cols, self.rows)
    }
}

impl InfluenceSets {
    pub fn mask(&self, i: usize, strict: bool) -> Mask {
        Mask {
            cols: self.cols,
            rows: self.rows,
            t_end: self.t_end,
            data: if strict { self.strict[i].clone() } else { self.reach[i].clone() },
        }
    }

    pub fn contains(&self, i: usize, x: f64, t: f64) -> bool {
        let (p, q) = node_of(self.cols, self.rows, self.t_end, x, t);
        self.reach[i][q * self.cols + p] != 0
    }

    pub fn strict_contains(&self, i: usize, x: f64, t: f64) -> bool {
        let (p, q) = node_of(self.cols, self.rows, self.t_end, x, t);
        self.strict[i][q * self.cols + p] != 0
    }

    /// `X_i` strict subset check and closure check at one-cell resolution.
    pub fn consistency(&self) -> (bool, bool) {
        let mut subset = true;
        let mut closure = true;
        for i in 0..self.n {
            for q in 0..self.rows {
                for p in 0..self.cols {
                    let idx = q * self.cols + p;
                    if self.strict[i][idx] != 0 && self.reach[i][idx] == 0 {
                        subset = false;
                    }
                    if self.reach[i][idx] != 0 && self.strict[i][idx] == 0 {
                        let near = (q.saturating_sub(1)..=(q + 1).min(self.rows - 1)).any(|qq| {
                            (p.saturating_sub(1)..=(p + 1).min(self.cols - 1))
                                .any(|pp| self.strict[i][qq * self.cols + pp] != 0)
                        });
                        closure &= near;
                    }
                }
            }
        }
        (subset, closure)
    }
}

type Intervals = Vec<(f64, f64)>;

const IV_TOL: f64 = 1e-12;

fn normalize(mut v: Intervals) -> Intervals {
    v.retain(|(a, b)| b >= a);
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Intervals = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 + IV_TOL => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect_iv(a: &Intervals, b: &Intervals) -> Intervals {
    let mut out = Vec::new();
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if hi >= lo {
                out.push((lo, hi));
            }
        }
    }
    out
}

fn covers(v: &Intervals, x: f64) -> bool {
    v.iter().any(|&(a, b)| x >= a - IV_TOL && x <= b + IV_TOL)
}

/// Cells `[x_p - dx/2, x_p + dx/2]` of the marked nodes, as intervals.
fn cells(mark: impl Fn(usize) -> bool, cols: usize) -> Intervals {
    let dx = 1.0 / (cols - 1) as f64;
    let v = (0..cols)
        .filter(|&p| mark(p))
        .map(|p| (((p as f64 - 0.5) * dx).max(0.0), ((p as f64 + 0.5) * dx).min(1.0)))
        .collect();
    normalize(v)
}

/// Reached sets are carried row by row as unions of intervals whose
/// endpoints move along the characteristics, so the front does not drift
/// with the raster.
fn propagate(spec: &ProblemSpec, t_end: f64, strict: bool, opts: &PathOptions) -> Result<(usize, usize, Vec<Vec<u8>>), PathError> {
    let n = spec.n;
    let per = opts.raster_per_unit.max(4);
    let cols = per + 1;
    let m = (per as f64 * t_end).ceil().max(0.0) as usize;
    let rows = m + 1;
    let dt = if m > 0 { t_end / m as f64 } else { 0.0 };
    let tq = |q: usize| if q == m { t_end } else { q as f64 * dt };
    let xp = |p: usize| p as f64 / per as f64;
    let mut reach = vec![vec![0u8; rows * cols]; n];
    for r in reach.iter_mut() {
        r[..cols].fill(1);
    }
    if m == 0 {
        return Ok((cols, rows, reach));
    }
    let nz_at = |i: usize, j: usize, x: f64, t: f64| matches!(spec.a[i][j].eval_xt(x, t), Ok(v) if v.abs() > opts.tol_r);
    let coupled: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !spec.a[i][j].is_zero())
        .collect();
    let any_refl = has_any_reflection(spec);
    let topts = TraceOpts::with_step(dt);
    let step = |i: usize, x: f64, q: usize| -> Result<(f64, Side), PathError> {
        let c = trace_with(
            |x, t| spec.lambda[i].eval_xt(x, t),
            |_, _| Ok(0.0),
            i,
            (x, tq(q - 1)),
            Direction::Forward,
            tq(q),
            &topts,
        )?;
        Ok((c.exit_point().0, c.exit_side))
    };
    let mut cur: Vec<Intervals> = vec![vec![(0.0, 1.0)]; n];
    for q in 1..rows {
        let prev = cur.clone();
        let mut base = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = Vec::new();
            for &(a, b) in &prev[i] {
                let (ya, sa) = step(i, a, q)?;
                let (yb, sb) = step(i, b, q)?;
                if sa.is_wall() && sb.is_wall() && sa == sb {
                    continue;
                }
                v.push((ya.min(yb), ya.max(yb)));
            }
            base.push(normalize(v));
        }
        // reflection entries: region between the condition wall and the
        // image of the wall point at t_{q-1}
        let mut entry: Vec<Option<(Intervals, Vec<usize>)>> = vec![None; n];
        if any_refl {
            let times: Vec<f64> = if strict {
                vec![0.5 * (tq(q - 1) + tq(q))]
            } else {
                vec![tq(q - 1), 0.5 * (tq(q - 1) + tq(q)), tq(q)]
            };
            let mats: Vec<Vec<Vec<bool>>> = times.iter().map(|&t| reflection_matrix(spec, t, opts)).collect();
            for (i, e) in entry.iter_mut().enumerate() {
                let srcs: Vec<usize> = (0..n).filter(|&j| mats.iter().any(|mm| mm[j][i])).collect();
                if srcs.is_empty() {
                    continue;
                }
                let w = spec.bc_wall(i);
                let (y, _) = step(i, w, q)?;
                *e = Some((vec![(w.min(y), w.max(y))], srcs));
            }
        }
        let nzc: Vec<Intervals> = coupled
            .iter()
            .map(|&(i, j)| {
                if strict {
                    cells(|p| nz_at(i, j, xp(p), tq(q)), cols)
                } else {
                    let qs = [tq(q - 1), tq(q), tq((q + 1).min(m))];
                    cells(
                        |p| {
                            (p.saturating_sub(1)..=(p + 1).min(per))
                                .any(|pp| qs.iter().any(|&t| nz_at(i, j, xp(pp), t)))
                        },
                        cols,
                    )
                }
            })
            .collect();
        let mut now = base.clone();
        loop {
            let mut next = base.clone();
            for i in 0..n {
                if let Some((iv, srcs)) = &entry[i] {
                    let hit = srcs.iter().any(|&j| {
                        let x = spec.exit_wall(j);
                        covers(&prev[j], x) || covers(&now[j], x)
                    });
                    if hit {
                        next[i].extend(iv.iter().copied());
                    }
                }
            }
            for (&(i, j), nzv) in coupled.iter().zip(&nzc) {
                let add = intersect_iv(&now[j], nzv);
                next[i].extend(add);
            }
            let next: Vec<Intervals> = next.into_iter().map(normalize).collect();
            let done = next == now;
            now = next;
            if done {
                break;
            }
        }
        cur = now;
        for i in 0..n {
            for p in 0..cols {
                if covers(&cur[i], xp(p)) {
                    reach[i][q * cols + p] = 1;
                }
            }
        }
    }
    Ok((cols, rows, reach))
}

/// Both influence sets of every component up to `t_end`.
pub fn influence_sets(spec: &ProblemSpec, t_end: f64, opts: &PathOptions) -> Result<InfluenceSets, PathError> {
    check_spec(spec)?;
    let (cols, rows, reach) = propagate(spec, t_end, false, opts)?;
    let (_, _, strict) = propagate(spec, t_end, true, opts)?;
    Ok(InfluenceSets { n: spec.n, cols, rows, t_end, reach, strict })
}

pub fn influence_domain(spec: &ProblemSpec, i: usize, t_end: f64, strict: bool, opts: &PathOptions) -> Result<Mask, PathError> {
    check_spec(spec)?;
    if i >= spec.n {
        return Err(PathError::Dimension(format!("component {} out of range", i + 1)));
    }
    let (cols, rows, reach) = propagate(spec, t_end, strict, opts)?;
    Ok(Mask { cols, rows, t_end, data: reach[i].clone() })
}

// ---------------------------------------------------------------------------
// Path graph

#[derive(Clone, Debug, Serialize)]
pub struct GraphNode {
    pub id: String,
    pub component: Option<usize>,
    pub label: String,
    pub on_reflection_cycle: bool,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EdgeKind {
    Reflection { kind: ReflectionKind },
    Coupling,
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub witness: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct PathGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

fn comp_id(i: usize) -> String {
    format!("u{}", i + 1)
}

pub fn build_path_graph(spec: &ProblemSpec, opts: &PathOptions) -> PathGraph {
    let n = spec.n;
    let mut edges = Vec::new();
    let mut refl = vec![vec![false; n]; n];
    for s in 0..=16 {
        let t = spec.t_max * s as f64 / 16.0;
        for i in 0..n {
            for (j, kind) in detect_reflections(spec, i, t, None, opts) {
                if !refl[i][j] {
                    refl[i][j] = true;
                    edges.push(GraphEdge {
                        from: comp_id(i),
                        to: comp_id(j),
                        kind: EdgeKind::Reflection { kind },
                        witness: (spec.exit_wall(i), t),
                    });
                }
            }
        }
    }
    let mut nodes: Vec<GraphNode> = (0..n)
        .map(|i| GraphNode {
            id: comp_id(i),
            component: Some(i),
            label: format!(
                "u{} (condition at x={}, exits at x={})",
                i + 1,
                spec.bc_wall(i),
                spec.exit_wall(i)
            ),
            on_reflection_cycle: false,
        })
        .collect();
    // reflexive-transitive closure to find cycles
    let mut reach = refl.clone();
    for m in 0..n {
        for a in 0..n {
            for b in 0..n {
                if reach[a][m] && reach[m][b] {
                    reach[a][b] = true;
                }
            }
        }
    }
    for (i, node) in nodes.iter_mut().enumerate() {
        node.on_reflection_cycle = reach[i][i];
    }
    for i in 0..n {
        for j in 0..n {
            if i == j || spec.a[i][j].is_zero() {
                continue;
            }
            'found: for a in 0..=16 {
                for b in 0..=16 {
                    let (x, t) = (a as f64 / 16.0, spec.t_max * b as f64 / 16.0);
                    if matches!(spec.a[i][j].eval_xt(x, t), Ok(v) if v.abs() > opts.tol_r) {
                        let site = format!("a_{}_{}", i + 1, j + 1);
                        nodes.push(GraphNode {
                            id: site.clone(),
                            component: None,
                            label: format!("coupling a_{}{}", i + 1, j + 1),
                            on_reflection_cycle: false,
                        });
                        edges.push(GraphEdge { from: comp_id(j), to: site.clone(), kind: EdgeKind::Coupling, witness: (x, t) });
                        edges.push(GraphEdge { from: site, to: comp_id(i), kind: EdgeKind::Coupling, witness: (x, t) });
                        break 'found;
                    }
                }
            }
        }
    }
    PathGraph { nodes, edges }
}

impl PathGraph {
    /// Whether consecutive EP components follow reflection edges.
    pub fn is_walk(&self, ep: &Ep) -> bool {
        ep.segments.windows(2).all(|w| {
            let (a, b) = (comp_id(w[0].component), comp_id(w[1].component));
            self.edges
                .iter()
                .any(|e| e.from == a && e.to == b && matches!(e.kind, EdgeKind::Reflection { .. }))
        })
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph paths {\n  rankdir=LR;\n");
        for nd in &self.nodes {
            let shape = if nd.component.is_some() { "ellipse" } else { "box" };
            let color = if nd.on_reflection_cycle { ", color=red" } else { "" };
            let _ = writeln!(s, "  \"{}\" [label=\"{}\", shape={shape}{color}];", nd.id, nd.label);
        }
        for e in &self.edges {
            let (style, label) = match &e.kind {
                EdgeKind::Reflection { kind: ReflectionKind::SameSide } => ("solid", "reflection"),
                EdgeKind::Reflection { kind: ReflectionKind::Jumping } => ("dashed", "jumping"),
                EdgeKind::Coupling => ("dotted", "coupling"),
            };
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [style={style}, label=\"{label} @ ({:.3}, {:.3})\"];",
                e.from, e.to, e.witness.0, e.witness.1
            );
        }
        s.push_str("}\n");
        s
    }
}

// ---------------------------------------------------------------------------
// Constant reflection matrices

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Factor {
    /// `'b'` or `'c'`.
    pub matrix: char,
    /// One-based indices as in `b_ij`, `c_ij`.
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProductWitness {
    pub factors: Vec<Factor>,
    pub product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaplaceSummand {
    /// One-based column set of the leading minor.
    pub columns: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetRVerdict {
    /// From the alternating products.
    pub smoothing: bool,
    pub witness: Option<ProductWitness>,
    pub products_checked: usize,
    /// From the Laplace expansion of `det R` along the first `n - k` rows.
    pub expansion_smoothing: bool,
    pub nonleading_summands: Vec<LaplaceSummand>,
    pub det_r: f64,
    /// `|sum of summands - det R|`.
    pub expansion_error: f64,
    pub routes_agree: bool,
}

fn det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut d = 1.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        if m[piv][c] == 0.0 {
            return 0.0;
        }
        if piv != c {
            m.swap(piv, c);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                for cc in c..n {
                    m[r][cc] -= f * m[c][cc];
                }
            }
        }
    }
    d
}

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(m);
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for s in start..n {
            cur.push(s);
            rec(s + 1, n, m, cur, out);
            cur.pop();
        }
    }
    rec(0, n, m, &mut cur, &mut out);
    out
}

/// Smoothing test for constant reflection matrices `B` (`(n-k) x k`) and `C`
/// (`k x (n-k)`), computed from the alternating products and from the Laplace
/// expansion of `det R`, `R = [[I, B], [C, I]]`.
pub fn det_r_criterion(b: &[Vec<f64>], c: &[Vec<f64>]) -> Result<DetRVerdict, PathError> {
    let m = b.len();
    let k = c.len();
    if b.iter().any(|r| r.len() != k) {
        return Err(PathError::Dimension(format!("B must be {m} x {k}")));
    }
    if c.iter().any(|r| r.len() != m) {
        return Err(PathError::Dimension(format!("C must be {k} x {m}")));
    }
    let n = m + k;
    let scale = b.iter().chain(c.iter()).flatten().fold(1.0f64, |s, v| s.max(v.abs()));
    let tol = 1e-12 * scale.powi(n as i32);

    // Alternating products: components 1..k (negative speeds) and k+1..n.
    // b_ij (i > k, j <= k) links j -> i, c_ij (i <= k, j > k) links j -> i.
    let entry = |from: usize, to: usize| -> Factor {
        if to >= k {
            Factor { matrix: 'b', i: to + 1, j: from + 1, value: b[to - k][from] }
        } else {
            Factor { matrix: 'c', i: to + 1, j: from + 1, value: c[to][from - k] }
        }
    };
    let side = |v: usize| v >= k;
    let mut products = 0usize;
    let mut witness: Option<ProductWitness> = None;
    fn dfs(
        start: usize,
        v: usize,
        n: usize,
        side: &dyn Fn(usize) -> bool,
        entry: &dyn Fn(usize, usize) -> Factor,
        used: &mut Vec<bool>,
        path: &mut Vec<Factor>,
        products: &mut usize,
        witness: &mut Option<ProductWitness>,
        tol: f64,
    ) {
        for w in start..n {
            if side(w) == side(v) {
                continue;
            }
            let f = entry(v, w);
            if w == start {
                path.push(f);
                *products += 1;
                let p: f64 = path.iter().map(|f| f.value).product();
                if p.abs() > tol && witness.is_none() {
                    *witness = Some(ProductWitness { factors: path.clone(), product: p });
                }
                path.pop();
                continue;
            }
            if used[w] {
                continue;
            }
            used[w] = true;
            path.push(f);
            dfs(start, w, n, side, entry, used, path, products, witness, tol);
            path.pop();
            used[w] = false;
        }
    }
    for s in 0..n {
        let mut used = vec![false; n];
        used[s] = true;
        let mut path = Vec::new();
        dfs(s, s, n, &side, &entry, &mut used, &mut path, &mut products, &mut witness, tol);
    }
    let smoothing = witness.is_none();

    // Laplace expansion along the first m rows of R.
    let mut r = vec![vec![0.0; n]; n];
    for a in 0..m {
        r[a][a] = 1.0;
        for j in 0..k {
            r[a][m + j] = b[a][j];
        }
    }
    for a in 0..k {
        r[m + a][m + a] = 1.0;
        for j in 0..m {
            r[m + a][j] = c[a][j];
        }
    }
    let det_r = det(r.clone());
    let row_sign: usize = (1..=m).sum();
    let mut total = 0.0;
    let mut nonleading = Vec::new();
    for s in combinations(n, m) {
        let rest: Vec<usize> = (0..n).filter(|c| !s.contains(c)).collect();
        let dmat: Vec<Vec<f64>> = (0..m).map(|a| s.iter().map(|&cc| r[a][cc]).collect()).collect();
        let fmat: Vec<Vec<f64>> = (m..n).map(|a| rest.iter().map(|&cc| r[a][cc]).collect()).collect();
        let col_sign: usize = s.iter().map(|cc| cc + 1).sum();
        let sign = if (row_sign + col_sign) % 2 == 0 { 1.0 } else { -1.0 };
        let d = if m == 0 { 1.0 } else { det(dmat) };
        let f = if k == 0 { 1.0 } else { det(fmat) };
        let val = sign * d * f;
        total += val;
        if s.iter().enumerate().any(|(a, &cc)| a != cc) {
            nonleading.push(LaplaceSummand { columns: s.iter().map(|c| c + 1).collect(), value: val });
        }
    }
    let expansion_smoothing = nonleading.iter().all(|s| s.value.abs() <= tol);
    Ok(DetRVerdict {
        smoothing,
        witness,
        products_checked: products,
        expansion_smoothing,
        nonleading_summands: nonleading,
        det_r,
        expansion_error: (total - det_r).abs(),
        routes_agree: smoothing == expansion_smoothing,
    })
}

/// Reflection problem with constant speeds `-1 - (k-1-i)/4` and `1 + (i-k)/4`,
/// no coupling and zero data.
pub fn linear_reflection_spec(b: &[Vec<f64>], c: &[Vec<f64>], t_max: f64) -> Result<ProblemSpec, ProblemError> {
    let k = c.len();
    let n = b.len() + k;
    let lambda = (0..n)
        .map(|i| {
            Expr::num(if i < k { -1.0 - 0.25 * (k - 1 - i) as f64 } else { 1.0 + 0.25 * (i - k) as f64 })
        })
        .collect();
    ProblemSpec::new(SpecParts {
        name: "reflection".into(),
        n,
        k,
        t_max,
        lambda,
        a: vec![vec![Expr::num(0.0); n]; n],
        g: vec![Expr::num(0.0); n],
        boundary: BoundaryLaw::LinearReflection { b: b.to_vec(), c: c.to_vec() },
        initial: InitialData { regular: vec![Expr::num(0.0); n], atoms: vec![] },
        wave: None,
    })
}

/// Random reflection pattern: each entry is zero with probability
/// `1 - density`, otherwise of magnitude in `[0.5, 2)` with a random sign.
pub fn random_pattern<R: Rng>(rng: &mut R, n: usize, k: usize, density: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let draw = |rng: &mut R| {
        if rng.gen_bool(density) {
            let v = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        } else {
            0.0
        }
    };
    let b = (0..n - k).map(|_| (0..k).map(|_| draw(rng)).collect()).collect();
    let c = (0..k).map(|_| (0..n - k).map(|_| draw(rng)).collect()).collect();
    (b, c)
}

/// Options tuned for constant-speed reflection problems, where the verdict
/// does not depend on the seed position.
pub fn coarse_options() -> PathOptions {
    PathOptions { x_samples: 3, step: 1.0 / 16.0, ..Default::default() }
}

/// Groups reflection events by kind, for reports.
pub fn event_counts(ep: &Ep) -> HashMap<&'static str, usize> {
    let mut m = HashMap::new();
    for e in &ep.events {
        *m.entry(match e.kind {
            ReflectionKind::SameSide => "same_side",
            ReflectionKind::Jumping => "jumping",
        })
        .or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::parse_problem;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two(boundary: &str, lam: [&str; 2], t_max: f64) -> ProblemSpec {
        parse_problem(&format!(
            "n = 2\nk = 1\nt_max = {t_max:?}\nlambda = [\"{}\", \"{}\"]\nA = [[\"0\",\"0\"],[\"0\",\"0\"]]\ng = [\"0\",\"0\"]\n[boundary]\n{boundary}\n[initial]\nregular = [\"0\",\"0\"]\n",
            lam[0], lam[1]
        ))
        .unwrap()
    }

    fn classical() -> ProblemSpec {
        two("kind = \"classical\"\nh = [\"0\", \"0\"]", ["-2", "1"], 3.0)
    }

    fn periodic() -> ProblemSpec {
        parse_problem("n = 1\nk = 0\nt_max = 5.0\nlambda = [\"1\"]\nA = [[\"0\"]]\ng = [\"0\"]\n[boundary]\nkind = \"nonlinear\"\nh = [\"v1\"]\n[initial]\nregular = [\"0\"]\n").unwrap()
    }

    fn reflect(b: f64, c: f64) -> ProblemSpec {
        two(&format!("kind = \"linear_reflection\"\nB = [[{b:?}]]\nC = [[{c:?}]]"), ["-1", "1"], 6.0)
    }

    #[test]
    fn reflection_detection() {
        let o = PathOptions::default();
        assert!(detect_reflections(&classical(), 0, 0.5, None, &o).is_empty());
        assert_eq!(detect_reflections(&periodic(), 0, 0.5, None, &o), vec![(0, ReflectionKind::Jumping)]);
        let s = reflect(0.5, 0.0);
        assert_eq!(detect_reflections(&s, 0, 0.5, None, &o), vec![(1, ReflectionKind::SameSide)]);
        assert!(detect_reflections(&s, 1, 0.5, None, &o).is_empty());
        // dependence only for large |v|: found by the z sampling
        let s = parse_problem("n = 1\nk = 0\nt_max = 1.0\nlambda = [\"1\"]\nA = [[\"0\"]]\ng = [\"0\"]\n[boundary]\nkind = \"nonlinear\"\nh = [\"0.5*(1 + tanh(10*(v1 - 5)))\"]\n[initial]\nregular = [\"0\"]\n").unwrap();
        assert_eq!(detect_reflections(&s, 0, 0.0, None, &o).len(), 1);
        let tr = BoundaryTrace { t: vec![0.0, 1.0], v: vec![vec![0.0], vec![0.0]] };
        assert_eq!(detect_reflections(&s, 0, 0.0, Some(&tr), &o).len(), 1);
    }

    #[test]
    fn ep_examples() {
        let o = PathOptions::default();
        let e = trace_eps(&classical(), &[Seed { component: None, x: 0.5, t: 0.0 }], &o).unwrap();
        assert_eq!(e.eps.len(), 2);
        assert!(e.eps.iter().all(|p| p.bounded && p.segments.len() == 1));
        let e = trace_eps(&periodic(), &[Seed { component: None, x: 0.5, t: 0.0 }], &o).unwrap();
        assert_eq!(e.eps.len(), 1);
        assert_eq!(e.eps[0].status, EpStatus::Unbounded);
        assert_eq!(e.eps[0].segments.len(), 6);
        let e = trace_eps(&reflect(0.5, 0.0), &[Seed { component: None, x: 0.5, t: 0.0 }], &o).unwrap();
        assert!(e.eps.iter().all(|p| p.bounded && p.segments.len() <= 2));
        assert!(e.eps.iter().any(|p| p.segments.len() == 2));
    }

    #[test]
    fn every_ep_is_an_ip_and_a_walk() {
        let o = PathOptions::default();
        for s in [classical(), periodic(), reflect(0.5, 0.0), reflect(0.5, -0.7)] {
            let g = build_path_graph(&s, &o);
            let e = trace_eps(&s, &[Seed { component: None, x: 0.3, t: 0.2 }], &o).unwrap();
            for ep in &e.eps {
                validate_ip(&s, &ep.to_ip(), &o).unwrap();
                assert!(g.is_walk(ep));
                assert!(ep.segments.windows(2).all(|w| w[1].start.1 >= w[0].start.1));
            }
        }
    }

    #[test]
    fn ip_rejections() {
        let o = PathOptions::default();
        let s = classical();
        let seg = |c: usize, a: (f64, f64), b: (f64, f64)| IpSegment { component: c, start: a, end: b };
        // component 2 (speed 1) from (0, 0) reaches (1, 1); not a reflection in a classical problem
        let ip = Ip {
            segments: vec![seg(1, (0.0, 0.0), (1.0, 1.0)), seg(0, (1.0, 1.0), (0.0, 1.5))],
            transitions: vec![Transition::Reflection],
            strict: true,
        };
        assert!(validate_ip(&s, &ip, &o).is_err());
        let off = Ip { segments: vec![seg(1, (0.0, 0.0), (0.9, 1.0))], transitions: vec![], strict: true };
        assert!(validate_ip(&s, &off, &o).is_err());
    }

    #[test]
    fn iota_examples() {
        let o = PathOptions::default();
        let v = check_iota(&classical(), 0.0, &o).unwrap();
        assert!((v.t_prime().unwrap() - 1.0).abs() < 1e-9, "{v:?}");
        let v = check_iota(&periodic(), 0.0, &o).unwrap();
        assert!(v.violated());
        let v = check_iota(&reflect(0.5, 0.0), 1.0, &o).unwrap();
        let tp = v.t_prime().unwrap();
        assert!(tp <= 1.0 + 2.0 + 1e-9 && tp > 2.9, "{tp}");
        assert!(check_iota(&reflect(0.5, 0.5), 0.0, &o).unwrap().violated());
        let low = PathOptions { depth_max: 2, ..o };
        assert!(matches!(check_iota(&reflect(0.5, 0.5), 0.0, &low).unwrap(), IotaVerdict::Inconclusive { .. }));
        for t in [0.0, 0.7, 2.0] {
            assert!(check_iota(&classical(), t, &o).unwrap().holds());
        }
    }

    #[test]
    fn tj_sequences() {
        let o = PathOptions::default();
        let tj = compute_tj(&classical(), 3, &o).unwrap();
        for (j, t) in tj.iter().enumerate() {
            assert!((t - (j + 1) as f64).abs() < 1e-9, "{tj:?}");
        }
        let one = parse_problem("n = 1\nk = 0\nt_max = 3.0\nlambda = [\"1\"]\nA = [[\"0\"]]\ng = [\"0\"]\n[boundary]\nkind = \"classical\"\nh = [\"0\"]\n[initial]\nregular = [\"0\"]\n").unwrap();
        let tj = compute_tj(&one, 3, &o).unwrap();
        assert!(tj.iter().enumerate().all(|(j, t)| (t - (j + 1) as f64).abs() < 1e-9));
        let tj = compute_tj(&reflect(0.5, 0.0), 3, &o).unwrap();
        assert!(tj.iter().enumerate().all(|(j, t)| (t - 2.0 * (j + 1) as f64).abs() < 1e-9), "{tj:?}");
        assert!(matches!(compute_tj(&periodic(), 2, &o), Err(PathError::NotHolds(_))));
    }

    /// Reflections switch on only after t ~ 2.79, when no initial data remain
    /// in the strip.
    pub(crate) fn late_switch() -> ProblemSpec {
        two(
            "kind = \"linear_nonlocal\"\np = [[\"0\", \"0.5*(1 + tanh(50*(t - 3)))\"], [\"0.5*(1 + tanh(50*(t - 3)))\", \"0\"]]\nr = [\"0\", \"0\"]",
            ["-1", "1"],
            8.0,
        )
    }

    #[test]
    fn iota2_holds_where_iota_fails() {
        let o = PathOptions { raster_per_unit: 64, ..Default::default() };
        let s = late_switch();
        assert!(check_iota(&s, 4.0, &o).unwrap().violated());
        match check_iota2(&s, 4.0, &o).unwrap() {
            IotaVerdict::Holds { seeds, .. } => assert_eq!(seeds, 0),
            v => panic!("{v:?}"),
        }
        assert!(check_iota2(&classical(), 0.5, &o).unwrap().holds());
        assert!(check_iota2(&periodic(), 0.0, &o).unwrap().violated());
    }

    #[test]
    fn influence_examples() {
        let o = PathOptions { raster_per_unit: 64, ..Default::default() };
        let s = classical();
        let sets = influence_sets(&s, 2.0, &o).unwrap();
        // u_2 (speed 1) from t = 0 covers x > t
        assert!(sets.contains(1, 0.8, 0.5) && !sets.contains(1, 0.3, 0.5));
        assert!(!sets.contains(0, 0.5, 1.5) && !sets.contains(1, 0.5, 1.5));
        assert_eq!(sets.consistency(), (true, true));
        let p = periodic();
        let m = influence_domain(&p, 0, 3.0, true, &o).unwrap();
        assert_eq!(m.count(), m.cols * m.rows);
        let full = parse_problem("n = 2\nk = 1\nt_max = 2.0\nlambda = [\"-1\", \"1\"]\nA = [[\"0\",\"1\"],[\"1\",\"0\"]]\ng = [\"0\",\"0\"]\n[boundary]\nkind = \"linear_reflection\"\nB = [[0.5]]\nC = [[0.5]]\n[initial]\nregular = [\"0\",\"0\"]\n").unwrap();
        let sets = influence_sets(&full, 2.0, &o).unwrap();
        for i in 0..2 {
            assert!(sets.strict[i].iter().all(|v| *v == 1));
        }
        // coupling that vanishes on the line x = 1/2 only
        let line = parse_problem("n = 2\nk = 1\nt_max = 2.0\nlambda = [\"-1\", \"1\"]\nA = [[\"0\",\"x - 0.5\"],[\"x - 0.5\",\"0\"]]\ng = [\"0\",\"0\"]\n[boundary]\nkind = \"classical\"\nh = [\"0\",\"0\"]\n[initial]\nregular = [\"0\",\"0\"]\n").unwrap();
        let sets = influence_sets(&line, 2.0, &o).unwrap();
        assert_eq!(sets.consistency(), (true, true));
        assert!(sets.mask(0, false).to_pgm().starts_with(b"P5\n65 129\n255\n"));
    }

    #[test]
    fn det_r_examples() {
        let v = det_r_criterion(&[vec![0.5]], &[vec![0.0]]).unwrap();
        assert!(v.smoothing && v.routes_agree);
        let v = det_r_criterion(&[vec![0.5]], &[vec![0.5]]).unwrap();
        assert!(!v.smoothing && v.routes_agree);
        let w = v.witness.unwrap();
        assert!((w.product - 0.25).abs() < 1e-15);
        let names: Vec<(char, usize, usize)> = w.factors.iter().map(|f| (f.matrix, f.i, f.j)).collect();
        assert_eq!(names, vec![('b', 2, 1), ('c', 1, 2)]);
        let v = det_r_criterion(&vec![vec![0.0; 2]; 3], &vec![vec![1.3, -0.7, 2.0]; 2]).unwrap();
        assert!(v.smoothing && v.routes_agree);
        assert!(det_r_criterion(&[vec![0.5, 1.0]], &[vec![0.5]]).is_err());
    }

    #[test]
    fn det_r_random_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let n = rng.gen_range(2..=5);
            let k = rng.gen_range(1..n);
            let density = rng.gen_range(0.15..0.7);
            let (b, c) = random_pattern(&mut rng, n, k, density);
            let v = det_r_criterion(&b, &c).unwrap();
            assert!(v.routes_agree, "{b:?} {c:?}");
            assert!(v.expansion_error <= 1e-9 * (1.0 + v.det_r.abs()));
            let spec = linear_reflection_spec(&b, &c, 1.0).unwrap();
            let iota = check_iota(&spec, 0.0, &coarse_options()).unwrap();
            assert_eq!(iota.holds(), v.smoothing, "{b:?} {c:?} {iota:?}");
        }
    }

    #[test]
    fn dot_export() {
        let g = build_path_graph(&reflect(0.5, 0.5), &PathOptions::default());
        let d = g.to_dot();
        assert!(d.contains("\"u1\" -> \"u2\"") && d.contains("color=red"));
    }
}
