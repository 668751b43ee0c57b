//! Problem model: the IBVP description, its file format and validation.
//!
//! Components are zero-based in code and one-based in files. Component `i`
//! with `i < k` has a negative speed; its boundary condition sits at `x = 1`
//! and its trace `v_i` is read at `x = 0`. Components `i >= k` are the mirror
//! image.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{EvalError, ExprError, ProblemError};
use crate::expr::{Expr, Var, VarPolicy};

pub const TOL_C: f64 = 1e-10;
pub const HYPERBOLICITY_SAMPLES: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub enum BoundaryLaw {
    /// `h_i(t)` only.
    Classical { h: Vec<Expr> },
    /// Constant reflection matrices; `b` is `(n-k) x k`, `c` is `k x (n-k)`.
    LinearReflection { b: Vec<Vec<f64>>, c: Vec<Vec<f64>> },
    /// `sum_j p_ij(t) v_j + r_i(t, v)`.
    LinearNonlocal { p: Vec<Vec<Expr>>, r: Vec<Expr>, r_bounded: bool, growth_bound: Option<f64> },
    /// Arbitrary `h_i(t, v)`.
    GeneralNonlinear { h: Vec<Expr>, growth_bound: Option<f64> },
}

impl BoundaryLaw {
    pub fn kind(&self) -> &'static str {
        match self {
            BoundaryLaw::Classical { .. } => "classical",
            BoundaryLaw::LinearReflection { .. } => "linear_reflection",
            BoundaryLaw::LinearNonlocal { .. } => "linear_nonlocal",
            BoundaryLaw::GeneralNonlinear { .. } => "nonlinear",
        }
    }

    /// Whether the law has the affine-plus-bounded form needed for singular data.
    pub fn is_linear_form(&self) -> bool {
        !matches!(self, BoundaryLaw::GeneralNonlinear { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Zero-based component.
    pub i: usize,
    pub c: f64,
    pub l: usize,
    pub xstar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialData {
    pub regular: Vec<Expr>,
    pub atoms: Vec<Atom>,
}

/// Marks a spec produced by the wave reduction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveTag {
    pub a: f64,
    /// Zero-based index of the displacement component.
    pub u_component: usize,
}

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub t_max: f64,
    pub lambda: Vec<Expr>,
    pub a: Vec<Vec<Expr>>,
    pub g: Vec<Expr>,
    pub boundary: BoundaryLaw,
    pub initial: InitialData,
    pub wave: Option<WaveTag>,
    /// `dh[i][j] = d h_i / d v_j`.
    dh: Vec<Vec<Expr>>,
    validated: bool,
}

pub struct SpecParts {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub t_max: f64,
    pub lambda: Vec<Expr>,
    pub a: Vec<Vec<Expr>>,
    pub g: Vec<Expr>,
    pub boundary: BoundaryLaw,
    pub initial: InitialData,
    pub wave: Option<WaveTag>,
}

fn structure(msg: impl Into<String>) -> ProblemError {
    ProblemError::Structure(msg.into())
}

impl ProblemSpec {
    /// Structural checks plus strict hyperbolicity at the default resolution.
    pub fn new(parts: SpecParts) -> Result<ProblemSpec, ProblemError> {
        let mut spec = ProblemSpec::unchecked(parts)?;
        if let HyperbolicityVerdict::Violation { x, t, detail } =
            validate_hyperbolicity(&spec, HYPERBOLICITY_SAMPLES)?
        {
            return Err(ProblemError::Hyperbolicity { x, t, detail });
        }
        spec.validated = true;
        Ok(spec)
    }

    /// Structural checks only; solver and path operations refuse the result.
    pub fn unchecked(parts: SpecParts) -> Result<ProblemSpec, ProblemError> {
        let SpecParts { name, n, k, t_max, lambda, a, g, boundary, initial, wave } = parts;
        if n == 0 {
            return Err(structure("n must be at least 1"));
        }
        if k > n {
            return Err(structure(format!("k={k} exceeds n={n}")));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(structure("t_max must be positive"));
        }
        if lambda.len() != n || g.len() != n || a.len() != n || a.iter().any(|r| r.len() != n) {
            return Err(structure("lambda, g and A must have n entries (A n x n)"));
        }
        if initial.regular.len() != n {
            return Err(structure("initial.regular must have n entries"));
        }
        let dh = match &boundary {
            BoundaryLaw::Classical { h } => {
                if h.len() != n {
                    return Err(structure("boundary.h must have n entries"));
                }
                vec![vec![Expr::num(0.0); n]; n]
            }
            BoundaryLaw::LinearReflection { b, c } => {
                if b.len() != n - k || b.iter().any(|r| r.len() != k) {
                    return Err(structure(format!("B must be {} x {}", n - k, k)));
                }
                if c.len() != k || c.iter().any(|r| r.len() != n - k) {
                    return Err(structure(format!("C must be {} x {}", k, n - k)));
                }
                let mut dh = vec![vec![Expr::num(0.0); n]; n];
                for i in k..n {
                    for j in 0..k {
                        dh[i][j] = Expr::num(b[i - k][j]);
                    }
                }
                for i in 0..k {
                    for j in k..n {
                        dh[i][j] = Expr::num(c[i][j - k]);
                    }
                }
                dh
            }
            BoundaryLaw::LinearNonlocal { p, r, .. } => {
                if p.len() != n || p.iter().any(|row| row.len() != n) || r.len() != n {
                    return Err(structure("p must be n x n and r must have n entries"));
                }
                (0..n)
                    .map(|i| (0..n).map(|j| p[i][j].add(&r[i].diff(Var::V(j)))).collect())
                    .collect()
            }
            BoundaryLaw::GeneralNonlinear { h, .. } => {
                if h.len() != n {
                    return Err(structure("boundary.h must have n entries"));
                }
                (0..n).map(|i| (0..n).map(|j| h[i].diff(Var::V(j))).collect()).collect()
            }
        };
        for (idx, at) in initial.atoms.iter().enumerate() {
            if at.i >= n {
                return Err(structure(format!("atom {} refers to component {}", idx + 1, at.i + 1)));
            }
            if !(at.xstar > 0.0 && at.xstar < 1.0) {
                return Err(structure(format!("atom {} location must lie in (0,1)", idx + 1)));
            }
            if !at.c.is_finite() {
                return Err(structure(format!("atom {} amplitude is not finite", idx + 1)));
            }
        }
        for i in 0..n {
            let mut xs: Vec<f64> =
                initial.atoms.iter().filter(|a| a.i == i).map(|a| a.xstar).collect();
            xs.sort_by(f64::total_cmp);
            if xs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(structure(format!(
                    "atom locations of component {} must be strictly ordered",
                    i + 1
                )));
            }
            for x in [0.0, 1.0] {
                initial.regular[i]
                    .eval_x(x)
                    .map_err(|source| ProblemError::Eval { x, t: 0.0, source })?;
            }
        }
        Ok(ProblemSpec {
            name,
            n,
            k,
            t_max,
            lambda,
            a,
            g,
            boundary,
            initial,
            wave,
            dh,
            validated: false,
        })
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    pub fn parts(&self) -> SpecParts {
        SpecParts {
            name: self.name.clone(),
            n: self.n,
            k: self.k,
            t_max: self.t_max,
            lambda: self.lambda.clone(),
            a: self.a.clone(),
            g: self.g.clone(),
            boundary: self.boundary.clone(),
            initial: self.initial.clone(),
            wave: self.wave,
        }
    }

    /// Wall carrying the boundary condition of component `i`.
    pub fn bc_wall(&self, i: usize) -> f64 {
        if i < self.k {
            1.0
        } else {
            0.0
        }
    }

    /// Wall where the forward characteristic of `i` leaves the strip, i.e.
    /// where `v_i` is read.
    pub fn exit_wall(&self, i: usize) -> f64 {
        if i < self.k {
            0.0
        } else {
            1.0
        }
    }

    pub fn lambda_at(&self, i: usize, x: f64, t: f64) -> Result<f64, EvalError> {
        self.lambda[i].eval_xt(x, t)
    }

    /// Right side of the boundary condition of component `i`.
    pub fn boundary_value(&self, i: usize, t: f64, v: &[f64]) -> Result<f64, EvalError> {
        match &self.boundary {
            BoundaryLaw::Classical { h } => h[i].eval_t(t),
            BoundaryLaw::LinearReflection { b, c } => {
                let k = self.k;
                Ok(if i >= k {
                    (0..k).map(|j| b[i - k][j] * v[j]).sum()
                } else {
                    (k..self.n).map(|j| c[i][j - k] * v[j]).sum()
                })
            }
            BoundaryLaw::LinearNonlocal { p, r, .. } => {
                let mut s = r[i].eval_tv(t, v)?;
                for j in 0..self.n {
                    if !p[i][j].is_zero() {
                        s += p[i][j].eval_t(t)? * v[j];
                    }
                }
                Ok(s)
            }
            BoundaryLaw::GeneralNonlinear { h, .. } => h[i].eval_tv(t, v),
        }
    }

    /// `d h_i / d v_j` at `(t, v)`.
    pub fn boundary_grad(&self, i: usize, j: usize, t: f64, v: &[f64]) -> Result<f64, EvalError> {
        let d = &self.dh[i][j];
        if let Some(c) = d.as_const() {
            return Ok(c);
        }
        d.eval_tv(t, v)
    }

    pub fn boundary_grad_is_zero(&self, i: usize, j: usize) -> bool {
        self.dh[i][j].is_zero()
    }

    /// Linear part `p_ij(t)` of an affine boundary law (zero for classical).
    pub fn linear_part(&self, i: usize, j: usize, t: f64) -> Result<f64, EvalError> {
        match &self.boundary {
            BoundaryLaw::Classical { .. } => Ok(0.0),
            BoundaryLaw::LinearReflection { b, c } => {
                let k = self.k;
                Ok(if i >= k && j < k {
                    b[i - k][j]
                } else if i < k && j >= k {
                    c[i][j - k]
                } else {
                    0.0
                })
            }
            BoundaryLaw::LinearNonlocal { p, .. } => p[i][j].eval_t(t),
            BoundaryLaw::GeneralNonlinear { .. } => Ok(0.0),
        }
    }

    /// Expression form of `p_ij(t)`, when the law is affine.
    pub fn linear_part_expr(&self, i: usize, j: usize) -> Option<Expr> {
        match &self.boundary {
            BoundaryLaw::Classical { .. } => Some(Expr::num(0.0)),
            BoundaryLaw::LinearReflection { .. } => {
                Some(Expr::num(self.linear_part(i, j, 0.0).unwrap_or(0.0)))
            }
            BoundaryLaw::LinearNonlocal { p, .. } => Some(p[i][j].clone()),
            BoundaryLaw::GeneralNonlinear { .. } => None,
        }
    }

    /// Nonlinear remainder `r_i(t, v)` of an affine law (classical data count here).
    pub fn remainder(&self, i: usize, t: f64, v: &[f64]) -> Result<f64, EvalError> {
        match &self.boundary {
            BoundaryLaw::Classical { h } => h[i].eval_t(t),
            BoundaryLaw::LinearReflection { .. } => Ok(0.0),
            BoundaryLaw::LinearNonlocal { r, .. } => r[i].eval_tv(t, v),
            BoundaryLaw::GeneralNonlinear { h, .. } => h[i].eval_tv(t, v),
        }
    }

    pub fn initial_value(&self, i: usize, x: f64) -> Result<f64, EvalError> {
        self.initial.regular[i].eval_x(x)
    }

    pub fn has_atoms(&self) -> bool {
        !self.initial.atoms.is_empty()
    }

    /// Trace vector at `t = 0` from the regular initial data.
    pub fn initial_trace(&self) -> Result<Vec<f64>, EvalError> {
        (0..self.n).map(|j| self.initial_value(j, self.exit_wall(j))).collect()
    }

    /// The same problem seen under `x -> 1 - x` with components reversed; this
    /// preserves the speed ordering.
    pub fn mirrored(&self) -> Result<ProblemSpec, ProblemError> {
        let n = self.n;
        let k2 = n - self.k;
        let rev = |i: usize| n - 1 - i;
        let flip_x = |e: &Expr| {
            e.substitute(&|v| match v {
                Var::X => Some(Expr::num(1.0).sub(&Expr::var(Var::X))),
                _ => None,
            })
        };
        let rev_v = |e: &Expr| {
            e.substitute(&|v| match v {
                Var::V(j) => Some(Expr::var(Var::V(rev(j)))),
                _ => None,
            })
        };
        let lambda = (0..n).map(|i| flip_x(&self.lambda[rev(i)]).neg()).collect();
        let a = (0..n)
            .map(|i| (0..n).map(|j| flip_x(&self.a[rev(i)][rev(j)])).collect())
            .collect();
        let g = (0..n).map(|i| flip_x(&self.g[rev(i)])).collect();
        let boundary = match &self.boundary {
            BoundaryLaw::Classical { h } => {
                BoundaryLaw::Classical { h: (0..n).map(|i| h[rev(i)].clone()).collect() }
            }
            BoundaryLaw::LinearReflection { b, c } => {
                let k = self.k;
                // new c'[i'][j'-k2] = b[i-k][j], new b'[i'-k2][j'] = c[i][j-k]
                let c2 = (0..k2)
                    .map(|ip| (k2..n).map(|jp| b[rev(ip) - k][rev(jp)]).collect())
                    .collect();
                let b2 = (k2..n)
                    .map(|ip| (0..k2).map(|jp| c[rev(ip)][rev(jp) - k]).collect())
                    .collect();
                BoundaryLaw::LinearReflection { b: b2, c: c2 }
            }
            BoundaryLaw::LinearNonlocal { p, r, r_bounded, growth_bound } => {
                BoundaryLaw::LinearNonlocal {
                    p: (0..n).map(|i| (0..n).map(|j| p[rev(i)][rev(j)].clone()).collect()).collect(),
                    r: (0..n).map(|i| rev_v(&r[rev(i)])).collect(),
                    r_bounded: *r_bounded,
                    growth_bound: *growth_bound,
                }
            }
            BoundaryLaw::GeneralNonlinear { h, growth_bound } => BoundaryLaw::GeneralNonlinear {
                h: (0..n).map(|i| rev_v(&h[rev(i)])).collect(),
                growth_bound: *growth_bound,
            },
        };
        let initial = InitialData {
            regular: (0..n).map(|i| flip_x(&self.initial.regular[rev(i)])).collect(),
            atoms: self
                .initial
                .atoms
                .iter()
                .map(|at| Atom { i: rev(at.i), c: at.c * if at.l % 2 == 1 { -1.0 } else { 1.0 }, l: at.l, xstar: 1.0 - at.xstar })
                .collect(),
        };
        let parts = SpecParts {
            name: format!("{}-mirrored", self.name),
            n,
            k: k2,
            t_max: self.t_max,
            lambda,
            a,
            g,
            boundary,
            initial,
            wave: None,
        };
        if self.validated {
            ProblemSpec::new(parts)
        } else {
            ProblemSpec::unchecked(parts)
        }
    }

    /// Serialize back to the problem-file format.
    pub fn to_toml(&self) -> String {
        let q = |e: &Expr| format!("\"{e}\"");
        let list = |v: &[Expr]| format!("[{}]", v.iter().map(q).collect::<Vec<_>>().join(", "));
        let fnum = |v: f64| format!("{v:?}");
        let mut s = String::new();
        s += &format!("name = {:?}\n", self.name);
        s += &format!("n = {}\nk = {}\nt_max = {}\n", self.n, self.k, fnum(self.t_max));
        s += &format!("lambda = {}\n", list(&self.lambda));
        s += &format!(
            "A = [{}]\n",
            self.a.iter().map(|r| list(r)).collect::<Vec<_>>().join(", ")
        );
        s += &format!("g = {}\n", list(&self.g));
        if let Some(w) = &self.wave {
            s += &format!("reduced_from_wave = {{ a = {}, u_component = {} }}\n", fnum(w.a), w.u_component + 1);
        }
        s += "\n[boundary]\n";
        s += &format!("kind = \"{}\"\n", self.boundary.kind());
        let mat = |m: &[Vec<f64>]| {
            format!(
                "[{}]",
                m.iter()
                    .map(|r| format!("[{}]", r.iter().map(|v| fnum(*v)).collect::<Vec<_>>().join(", ")))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        };
        match &self.boundary {
            BoundaryLaw::Classical { h } => s += &format!("h = {}\n", list(h)),
            BoundaryLaw::LinearReflection { b, c } => {
                s += &format!("B = {}\nC = {}\n", mat(b), mat(c));
            }
            BoundaryLaw::LinearNonlocal { p, r, r_bounded, growth_bound } => {
                s += &format!(
                    "p = [{}]\n",
                    p.iter().map(|r| list(r)).collect::<Vec<_>>().join(", ")
                );
                s += &format!("r = {}\nr_bounded = {}\n", list(r), r_bounded);
                if let Some(gb) = growth_bound {
                    s += &format!("growth_bound = {}\n", fnum(*gb));
                }
            }
            BoundaryLaw::GeneralNonlinear { h, growth_bound } => {
                s += &format!("h = {}\n", list(h));
                if let Some(gb) = growth_bound {
                    s += &format!("growth_bound = {}\n", fnum(*gb));
                }
            }
        }
        s += "\n[initial]\n";
        s += &format!("regular = {}\n", list(&self.initial.regular));
        if !self.initial.atoms.is_empty() {
            s += "atoms = [\n";
            for at in &self.initial.atoms {
                s += &format!(
                    "  {{ i = {}, c = {}, l = {}, xstar = {} }},\n",
                    at.i + 1,
                    fnum(at.c),
                    at.l,
                    fnum(at.xstar)
                );
            }
            s += "]\n";
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    name: Option<String>,
    n: Option<Spanned<i64>>,
    k: Option<Spanned<i64>>,
    t_max: Option<Spanned<f64>>,
    lambda: Option<Spanned<Vec<Spanned<String>>>>,
    #[serde(rename = "A")]
    a: Option<Spanned<Vec<Spanned<Vec<Spanned<String>>>>>>,
    g: Option<Spanned<Vec<Spanned<String>>>>,
    boundary: Option<Spanned<RawBoundary>>,
    initial: Option<Spanned<RawInitial>>,
    reduced_from_wave: Option<WaveTagRaw>,
    wave: Option<Spanned<RawWave>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaveTagRaw {
    a: f64,
    u_component: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundary {
    kind: Spanned<String>,
    h: Option<Spanned<Vec<Spanned<String>>>>,
    #[serde(rename = "B")]
    b: Option<Spanned<Vec<Vec<f64>>>>,
    #[serde(rename = "C")]
    c: Option<Spanned<Vec<Vec<f64>>>>,
    p: Option<Spanned<Vec<Spanned<Vec<Spanned<String>>>>>>,
    r: Option<Spanned<Vec<Spanned<String>>>>,
    r_bounded: Option<bool>,
    growth_bound: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    regular: Spanned<Vec<Spanned<String>>>,
    atoms: Option<Vec<Spanned<RawAtom>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAtom {
    i: i64,
    c: f64,
    l: i64,
    xstar: f64,
}

/// Wave-equation problem table, see [`crate::wave`].
#[derive(Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct RawWave {
    pub a: f64,
    pub f: String,
    pub phi: String,
    pub psi: String,
    pub h1: String,
    pub h2: String,
    pub t_max: f64,
    pub name: Option<String>,
}

pub(crate) struct Locator<'a> {
    text: &'a str,
}

impl<'a> Locator<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Locator { text }
    }

    pub(crate) fn line_col(&self, offset: usize) -> (usize, usize) {
        let offset = offset.min(self.text.len());
        let before = &self.text[..offset];
        let line = before.matches('\n').count() + 1;
        let col = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
        (line, col)
    }

    fn at(&self, span: &Range<usize>) -> (usize, usize) {
        self.line_col(span.start)
    }

    fn dim(&self, span: &Range<usize>, msg: impl Into<String>) -> ProblemError {
        let (line, col) = self.at(span);
        ProblemError::Dimension { line, col, msg: msg.into() }
    }

    fn invalid(&self, span: &Range<usize>, msg: impl Into<String>) -> ProblemError {
        let (line, col) = self.at(span);
        ProblemError::Invalid { line, col, msg: msg.into() }
    }

    pub(crate) fn expr(&self, s: &Spanned<String>, policy: VarPolicy) -> Result<Expr, ProblemError> {
        Expr::parse_with(s.get_ref(), policy).map_err(|e| {
            // span covers the opening quote
            let (line, col0) = self.line_col(s.span().start + 1);
            let col = col0 + e.col() - 1;
            match e {
                ExprError::UnknownFunction { name, .. } => ProblemError::UnknownFunction { line, col, name },
                ExprError::UnknownIdentifier { name, .. } => ProblemError::Invalid {
                    line,
                    col,
                    msg: format!("identifier `{name}` is not allowed here"),
                },
                ExprError::Syntax { msg, .. } => ProblemError::Syntax { line, col, msg },
            }
        })
    }

    fn exprs(
        &self,
        v: &Spanned<Vec<Spanned<String>>>,
        len: usize,
        what: &str,
        policy: VarPolicy,
    ) -> Result<Vec<Expr>, ProblemError> {
        if v.get_ref().len() != len {
            return Err(self.dim(&v.span(), format!("{what} has {} entries, expected {len}", v.get_ref().len())));
        }
        v.get_ref().iter().map(|s| self.expr(s, policy)).collect()
    }

    fn expr_matrix(
        &self,
        m: &Spanned<Vec<Spanned<Vec<Spanned<String>>>>>,
        n: usize,
        what: &str,
        policy: VarPolicy,
    ) -> Result<Vec<Vec<Expr>>, ProblemError> {
        if m.get_ref().len() != n {
            return Err(self.dim(&m.span(), format!("{what} has {} rows, expected {n}", m.get_ref().len())));
        }
        m.get_ref().iter().map(|row| self.exprs(row, n, what, policy)).collect()
    }

    fn num_matrix(
        &self,
        m: &Spanned<Vec<Vec<f64>>>,
        rows: usize,
        cols: usize,
        what: &str,
    ) -> Result<Vec<Vec<f64>>, ProblemError> {
        let v = m.get_ref();
        if v.len() != rows || v.iter().any(|r| r.len() != cols) {
            return Err(self.dim(&m.span(), format!("{what} must be {rows} x {cols}")));
        }
        Ok(v.clone())
    }
}

pub(crate) fn toml_error(text: &str, e: toml::de::Error) -> ProblemError {
    let loc = Locator::new(text);
    let (line, col) = e.span().map(|s| loc.line_col(s.start)).unwrap_or((1, 1));
    let msg = e.message().to_string();
    if msg.contains("duplicate") {
        ProblemError::Duplicate { line, col, msg }
    } else {
        ProblemError::Syntax { line, col, msg }
    }
}

/// Parse and fully validate a problem file (including `[wave]` files, which
/// are reduced to first-order form).
pub fn parse_problem(text: &str) -> Result<ProblemSpec, ProblemError> {
    let raw: RawFile = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    let loc = Locator::new(text);
    if let Some(w) = raw.wave {
        let others = raw.n.is_some()
            || raw.k.is_some()
            || raw.lambda.is_some()
            || raw.a.is_some()
            || raw.g.is_some()
            || raw.boundary.is_some()
            || raw.initial.is_some();
        if others {
            return Err(loc.invalid(&w.span(), "a [wave] file must not contain first-order system keys"));
        }
        let span = w.span();
        let wp = crate::wave::WaveProblem::from_raw(w.into_inner(), &loc, &span)?;
        return crate::wave::reduce_wave(&wp).map_err(|e| match e {
            crate::error::WaveError::Problem(p) => p,
            other => loc.invalid(&span, other.to_string()),
        });
    }
    let missing = |what: &str| ProblemError::Invalid { line: 1, col: 1, msg: format!("missing required key `{what}`") };
    let n_s = raw.n.ok_or_else(|| missing("n"))?;
    let k_s = raw.k.ok_or_else(|| missing("k"))?;
    let t_s = raw.t_max.ok_or_else(|| missing("t_max"))?;
    let n = *n_s.get_ref();
    let k = *k_s.get_ref();
    if n < 1 {
        return Err(loc.invalid(&n_s.span(), "n must be at least 1"));
    }
    if k < 0 || k > n {
        return Err(loc.invalid(&k_s.span(), format!("k must lie in 0..={n}")));
    }
    let (n, k) = (n as usize, k as usize);
    let t_max = *t_s.get_ref();
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(loc.invalid(&t_s.span(), "t_max must be positive"));
    }
    let lambda = loc.exprs(raw.lambda.as_ref().ok_or_else(|| missing("lambda"))?, n, "lambda", VarPolicy::XT)?;
    let a = loc.expr_matrix(raw.a.as_ref().ok_or_else(|| missing("A"))?, n, "A", VarPolicy::XT)?;
    let g = loc.exprs(raw.g.as_ref().ok_or_else(|| missing("g"))?, n, "g", VarPolicy::XT)?;

    let bs = raw.boundary.ok_or_else(|| missing("boundary"))?;
    let bspan = bs.span();
    let b = bs.into_inner();
    let kind = b.kind.get_ref().as_str();
    let extra = |present: &[(&str, bool)]| -> Result<(), ProblemError> {
        for (name, p) in present {
            if *p {
                return Err(loc.invalid(&bspan, format!("key `{name}` does not belong to boundary kind `{kind}`")));
            }
        }
        Ok(())
    };
    let boundary = match kind {
        "classical" => {
            extra(&[("B", b.b.is_some()), ("C", b.c.is_some()), ("p", b.p.is_some()), ("r", b.r.is_some()), ("growth_bound", b.growth_bound.is_some()), ("r_bounded", b.r_bounded.is_some())])?;
            let h = b.h.as_ref().ok_or_else(|| loc.invalid(&bspan, "classical boundary needs `h`"))?;
            BoundaryLaw::Classical { h: loc.exprs(h, n, "boundary.h", VarPolicy::T)? }
        }
        "linear_reflection" => {
            extra(&[("h", b.h.is_some()), ("p", b.p.is_some()), ("r", b.r.is_some()), ("growth_bound", b.growth_bound.is_some()), ("r_bounded", b.r_bounded.is_some())])?;
            let bm = b.b.as_ref().ok_or_else(|| loc.invalid(&bspan, "linear_reflection needs `B`"))?;
            let cm = b.c.as_ref().ok_or_else(|| loc.invalid(&bspan, "linear_reflection needs `C`"))?;
            BoundaryLaw::LinearReflection {
                b: loc.num_matrix(bm, n - k, k, "B")?,
                c: loc.num_matrix(cm, k, n - k, "C")?,
            }
        }
        "linear_nonlocal" => {
            extra(&[("h", b.h.is_some()), ("B", b.b.is_some()), ("C", b.c.is_some())])?;
            let p = b.p.as_ref().ok_or_else(|| loc.invalid(&bspan, "linear_nonlocal needs `p`"))?;
            let r = b.r.as_ref().ok_or_else(|| loc.invalid(&bspan, "linear_nonlocal needs `r`"))?;
            BoundaryLaw::LinearNonlocal {
                p: loc.expr_matrix(p, n, "p", VarPolicy::T)?,
                r: loc.exprs(r, n, "r", VarPolicy::tv(n))?,
                r_bounded: b.r_bounded.unwrap_or(false),
                growth_bound: b.growth_bound,
            }
        }
        "nonlinear" => {
            extra(&[("B", b.b.is_some()), ("C", b.c.is_some()), ("p", b.p.is_some()), ("r", b.r.is_some()), ("r_bounded", b.r_bounded.is_some())])?;
            let h = b.h.as_ref().ok_or_else(|| loc.invalid(&bspan, "nonlinear boundary needs `h`"))?;
            BoundaryLaw::GeneralNonlinear {
                h: loc.exprs(h, n, "boundary.h", VarPolicy::tv(n))?,
                growth_bound: b.growth_bound,
            }
        }
        other => {
            return Err(loc.invalid(
                &b.kind.span(),
                format!("unknown boundary kind `{other}` (classical, linear_reflection, linear_nonlocal, nonlinear)"),
            ))
        }
    };

    let is = raw.initial.ok_or_else(|| missing("initial"))?;
    let ispan = is.span();
    let ini = is.into_inner();
    let regular = loc.exprs(&ini.regular, n, "initial.regular", VarPolicy::X)?;
    let mut atoms = Vec::new();
    for a in ini.atoms.unwrap_or_default() {
        let sp = a.span();
        let a = a.into_inner();
        if a.i < 1 || a.i as usize > n {
            return Err(loc.invalid(&sp, format!("atom component {} outside 1..={n}", a.i)));
        }
        if a.l < 0 {
            return Err(loc.invalid(&sp, "atom derivative order must be >= 0"));
        }
        if !(a.xstar > 0.0 && a.xstar < 1.0) {
            return Err(loc.invalid(&sp, "atom location must lie strictly inside (0,1)"));
        }
        atoms.push(Atom { i: a.i as usize - 1, c: a.c, l: a.l as usize, xstar: a.xstar });
    }
    let _ = ispan;
    let wave = match raw.reduced_from_wave {
        Some(w) => {
            if w.u_component < 1 || w.u_component > n {
                return Err(ProblemError::Invalid { line: 1, col: 1, msg: "reduced_from_wave.u_component out of range".into() });
            }
            Some(WaveTag { a: w.a, u_component: w.u_component - 1 })
        }
        None => None,
    };
    ProblemSpec::new(SpecParts {
        name: raw.name.unwrap_or_else(|| "problem".into()),
        n,
        k,
        t_max,
        lambda,
        a,
        g,
        boundary,
        initial: InitialData { regular, atoms },
        wave,
    })
    .map_err(|e| match e {
        ProblemError::Structure(msg) => loc.invalid(&ispan, msg),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum HyperbolicityVerdict {
    Ok,
    Violation { x: f64, t: f64, detail: String },
}

/// Checks the strict speed ordering on a tensor grid with `per_unit` samples
/// per unit length in each direction.
pub fn validate_hyperbolicity(spec: &ProblemSpec, per_unit: usize) -> Result<HyperbolicityVerdict, ProblemError> {
    let nx = per_unit.max(2);
    let nt = ((per_unit as f64) * spec.t_max).ceil().max(1.0) as usize + 1;
    let mut lam = vec![0.0; spec.n];
    for q in 0..nt {
        let t = spec.t_max * q as f64 / (nt - 1) as f64;
        for p in 0..nx {
            let x = p as f64 / (nx - 1) as f64;
            for (i, l) in lam.iter_mut().enumerate() {
                *l = spec.lambda[i].eval_xt(x, t).map_err(|source| ProblemError::Eval { x, t, source })?;
            }
            for i in 0..spec.n {
                let sign_ok = if i < spec.k { lam[i] < 0.0 } else { lam[i] > 0.0 };
                if !sign_ok {
                    return Ok(HyperbolicityVerdict::Violation {
                        x,
                        t,
                        detail: format!(
                            "lambda_{} = {} must be {} zero",
                            i + 1,
                            lam[i],
                            if i < spec.k { "below" } else { "above" }
                        ),
                    });
                }
                if i + 1 < spec.n && lam[i] >= lam[i + 1] {
                    return Ok(HyperbolicityVerdict::Violation {
                        x,
                        t,
                        detail: format!("lambda_{} = {} is not below lambda_{} = {}", i + 1, lam[i], i + 2, lam[i + 1]),
                    });
                }
            }
        }
    }
    Ok(HyperbolicityVerdict::Ok)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompatResidual {
    /// One-based component.
    pub component: usize,
    pub wall: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompatReport {
    pub ok: bool,
    pub tol: f64,
    pub residuals: Vec<CompatResidual>,
    pub error: Option<String>,
}

/// Zero-order compatibility between the regular initial data and the
/// boundary law at the two corners.
pub fn check_compatibility(spec: &ProblemSpec) -> CompatReport {
    check_compatibility_tol(spec, TOL_C)
}

pub fn check_compatibility_tol(spec: &ProblemSpec, tol: f64) -> CompatReport {
    let fail = |e: EvalError| CompatReport { ok: false, tol, residuals: vec![], error: Some(e.to_string()) };
    let v0 = match spec.initial_trace() {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let mut residuals = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let wall = spec.bc_wall(i);
        let lhs = match spec.initial_value(i, wall) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let rhs = match spec.boundary_value(i, 0.0, &v0) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        residuals.push(CompatResidual { component: i + 1, wall, residual: (lhs - rhs).abs() });
    }
    CompatReport { ok: residuals.iter().all(|r| r.residual <= tol), tol, residuals, error: None }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthReport {
    /// Max over samples of the row-sum norm of the boundary Jacobian.
    pub max_grad_norm: f64,
    pub at_t: f64,
    pub at_v: Vec<f64>,
    /// Same maximum over the half-radius box.
    pub half_box_max: f64,
    pub declared_bound: Option<f64>,
    pub consistent: bool,
    pub warning: Option<String>,
    pub samples: usize,
}

/// Samples the boundary Jacobian over `[0, t_max] x [-radius, radius]^n`.
/// Advisory only: the global growth condition is not decidable from samples.
pub fn check_growth_certificate(
    spec: &ProblemSpec,
    t_max: f64,
    radius: f64,
    seed: u64,
) -> Result<GrowthReport, ProblemError> {
    let declared = match &spec.boundary {
        BoundaryLaw::GeneralNonlinear { growth_bound, .. } => *growth_bound,
        BoundaryLaw::LinearNonlocal { growth_bound, .. } => *growth_bound,
        _ => return Err(structure("growth certificate applies to nonlinear or nonlocal boundary laws")),
    };
    let n = spec.n;
    let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
    let ts: Vec<f64> = (0..9).map(|q| t_max * q as f64 / 8.0).collect();
    let zs: Vec<f64> = (0..33).map(|m| -radius + 2.0 * radius * m as f64 / 32.0).collect();
    for &t in &ts {
        for &z in &zs {
            pts.push((t, vec![z; n]));
            for j in 0..n {
                let mut v = vec![0.0; n];
                v[j] = z;
                pts.push((t, v));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..2000 {
        let t = rng.gen_range(0.0..=t_max);
        let v = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
        pts.push((t, v));
    }
    let mut best = (0.0f64, 0.0, vec![0.0; n]);
    let mut half = 0.0f64;
    for (t, v) in &pts {
        let mut norm = 0.0f64;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += spec
                    .boundary_grad(i, j, *t, v)
                    .map_err(|source| ProblemError::Eval { x: f64::NAN, t: *t, source })?
                    .abs();
            }
            norm = norm.max(row);
        }
        if norm > best.0 {
            best = (norm, *t, v.clone());
        }
        if v.iter().all(|z| z.abs() <= 0.5 * radius) {
            half = half.max(norm);
        }
    }
    let grows = best.0 > 1.5 * half && best.0 > 1e-12;
    let warning = grows.then(|| {
        format!(
            "boundary gradient grows with |v| (max {:.4} on radius {radius}, {:.4} on radius {}); a global growth bound is not supported by the samples",
            best.0,
            half,
            0.5 * radius
        )
    });
    let consistent = match declared {
        Some(b) => best.0 <= b * (1.0 + 1e-12),
        None => !grows,
    };
    Ok(GrowthReport {
        max_grad_norm: best.0,
        at_t: best.1,
        at_v: best.2,
        half_box_max: half,
        declared_bound: declared,
        consistent,
        warning,
        samples: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn transport_file(lambda: &str, phi: &str, h: &str) -> String {
        format!(
            "n = 1\nk = 0\nt_max = 2.0\nlambda = [\"{lambda}\"]\nA = [[\"0\"]]\ng = [\"0\"]\n\n[boundary]\nkind = \"classical\"\nh = [\"{h}\"]\n\n[initial]\nregular = [\"{phi}\"]\n"
        )
    }

    #[test]
    fn parses_identity_transport() {
        let spec = parse_problem(&transport_file("1", "0", "0")).unwrap();
        assert_eq!((spec.n, spec.k), (1, 0));
        assert!(spec.is_validated());
    }

    #[test]
    fn ordering_violation_is_reported() {
        let text = "n = 2\nk = 1\nt_max = 1\nlambda = [\"1\", \"-1\"]\nA = [[\"0\",\"0\"],[\"0\",\"0\"]]\ng = [\"0\",\"0\"]\n[boundary]\nkind = \"classical\"\nh = [\"0\",\"0\"]\n[initial]\nregular = [\"0\",\"0\"]\n";
        assert!(matches!(parse_problem(text), Err(ProblemError::Hyperbolicity { .. })));
        let ok = text.replace("[\"1\", \"-1\"]", "[\"-1\", \"1\"]");
        assert!(parse_problem(&ok).is_ok());
    }

    #[test]
    fn diagnostics_have_locations() {
        let bad = transport_file("1", "foo(x)", "0");
        match parse_problem(&bad) {
            Err(ProblemError::UnknownFunction { line, col, name }) => {
                assert_eq!(name, "foo");
                assert_eq!(line, 13);
                assert_eq!(col, 13);
            }
            e => panic!("{e:?}"),
        }
        let dup = format!("n = 1\n{}", transport_file("1", "0", "0"));
        assert!(matches!(parse_problem(&dup), Err(ProblemError::Duplicate { line: 2, .. })));
        let dim = transport_file("1", "0", "0").replace("lambda = [\"1\"]", "lambda = [\"1\", \"2\"]");
        assert!(matches!(parse_problem(&dim), Err(ProblemError::Dimension { line: 4, .. })));
        let syn = transport_file("1 +", "0", "0");
        assert!(matches!(parse_problem(&syn), Err(ProblemError::Syntax { line: 4, .. })));
        let var = transport_file("1", "t", "0");
        assert!(matches!(parse_problem(&var), Err(ProblemError::Invalid { .. })));
        assert!(matches!(parse_problem("n = [1"), Err(ProblemError::Syntax { .. })));
    }

    #[test]
    fn hyperbolicity_examples() {
        let mk = |lam: &[&str], k: usize, tmax: f64| {
            ProblemSpec::unchecked(SpecParts {
                name: "h".into(),
                n: lam.len(),
                k,
                t_max: tmax,
                lambda: lam.iter().map(|s| Expr::parse(s).unwrap()).collect(),
                a: vec![vec![Expr::num(0.0); lam.len()]; lam.len()],
                g: vec![Expr::num(0.0); lam.len()],
                boundary: BoundaryLaw::Classical { h: vec![Expr::num(0.0); lam.len()] },
                initial: InitialData { regular: vec![Expr::num(0.0); lam.len()], atoms: vec![] },
                wave: None,
            })
            .unwrap()
        };
        assert_eq!(validate_hyperbolicity(&mk(&["-2", "-1", "1"], 2, 1.0), 101).unwrap(), HyperbolicityVerdict::Ok);
        match validate_hyperbolicity(&mk(&["x - 0.5"], 1, 1.0), 101).unwrap() {
            HyperbolicityVerdict::Violation { x, .. } => assert!(x >= 0.5),
            v => panic!("{v:?}"),
        }
        match validate_hyperbolicity(&mk(&["-1", "t - 10"], 1, 20.0), 101).unwrap() {
            HyperbolicityVerdict::Violation { t, .. } => assert!(t <= 10.0),
            v => panic!("{v:?}"),
        }
    }

    fn reflection_spec(b: f64, c: f64, phi: [&str; 2]) -> ProblemSpec {
        let text = format!(
            "n = 2\nk = 1\nt_max = 1\nlambda = [\"-1\", \"1\"]\nA = [[\"0\",\"0\"],[\"0\",\"0\"]]\ng = [\"0\",\"0\"]\n[boundary]\nkind = \"linear_reflection\"\nB = [[{b}]]\nC = [[{c}]]\n[initial]\nregular = [\"{}\", \"{}\"]\n",
            phi[0], phi[1]
        );
        parse_problem(&text).unwrap()
    }

    #[test]
    fn compatibility_examples() {
        let ok = parse_problem(&transport_file("1", "0", "0")).unwrap();
        assert!(check_compatibility(&ok).ok);
        let bad = parse_problem(&transport_file("1", "1", "0")).unwrap();
        let r = check_compatibility(&bad);
        assert!(!r.ok);
        assert_eq!(r.residuals[0].component, 1);
        assert!((r.residuals[0].residual - 1.0).abs() < 1e-15);
        // phi_2(0) = b phi_1(0) would need 1 = 0
        let s = reflection_spec(0.5, 0.25, ["x", "1 - x"]);
        let r = check_compatibility(&s);
        assert!(!r.ok);
        assert!((r.residuals[1].residual - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compatibility_invariant_under_mirror() {
        for (b, c, phi) in [(0.5, 0.25, ["x", "1 - x"]), (2.0, 0.5, ["1 + x", "2"]), (0.0, 0.0, ["x*(1-x)", "sin(pi*x)"])] {
            let s = reflection_spec(b, c, phi);
            let m = s.mirrored().unwrap();
            let r1 = check_compatibility(&s);
            let r2 = check_compatibility(&m);
            assert_eq!(r1.ok, r2.ok);
            for i in 0..2 {
                assert!((r1.residuals[i].residual - r2.residuals[1 - i].residual).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn growth_examples() {
        let mk = |h: &str, gb: Option<f64>| {
            let text = format!(
                "n = 1\nk = 0\nt_max = 1\nlambda = [\"1\"]\nA = [[\"0\"]]\ng = [\"0\"]\n[boundary]\nkind = \"nonlinear\"\nh = [\"{h}\"]\n{}\n[initial]\nregular = [\"0\"]\n",
                gb.map(|b| format!("growth_bound = {b}")).unwrap_or_default()
            );
            parse_problem(&text).unwrap()
        };
        let lin = check_growth_certificate(&mk("0.7 * v1", Some(1.0)), 1.0, 10.0, 1).unwrap();
        assert!((lin.max_grad_norm - 0.7).abs() < 1e-15 && lin.consistent && lin.warning.is_none());
        let th = check_growth_certificate(&mk("tanh(v1)", None), 1.0, 10.0, 1).unwrap();
        assert!(th.max_grad_norm <= 1.0 && th.consistent);
        let sq = check_growth_certificate(&mk("v1^2", None), 1.0, 10.0, 1).unwrap();
        assert!((sq.max_grad_norm - 20.0).abs() < 1e-12);
        assert!(sq.warning.is_some() && !sq.consistent);
    }

    #[test]
    fn toml_roundtrip() {
        let text = "name = \"rt\"\nn = 2\nk = 1\nt_max = 1.5\nlambda = [\"-1 - 0.5*x\", \"1 + t/3\"]\nA = [[\"0.2*sin(x)\",\"1\"],[\"t\",\"0\"]]\ng = [\"exp(-t)\",\"x^2\"]\n[boundary]\nkind = \"linear_nonlocal\"\np = [[\"0\",\"0.5\"],[\"cos(t)\",\"0\"]]\nr = [\"0.1*tanh(v1 - v2)\",\"sin(t)\"]\nr_bounded = true\n[initial]\nregular = [\"x\",\"1 - x\"]\natoms = [{ i = 2, c = 1.5, l = 1, xstar = 0.25 }]\n";
        let s = parse_problem(text).unwrap();
        let back = parse_problem(&s.to_toml()).unwrap();
        assert_eq!(back.initial.atoms, s.initial.atoms);
        for i in 0..2 {
            assert_eq!(back.lambda[i], s.lambda[i]);
            for j in 0..2 {
                assert_eq!(back.a[i][j], s.a[i][j]);
            }
        }
    }
}
