//! Coefficient expressions: parser, printer, evaluator and differentiation.
//!
//! Grammar (usual precedence, `^` right associative and binding tighter than
//! unary minus):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | ident | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Identifiers are `x`, `t`, `z`, `v1`..`vn` and the constant `pi`; functions
//! are `sin cos exp log abs tanh`.

use std::fmt;
use std::sync::Arc;

use crate::error::{EvalError, ExprError};
use crate::jet::Jet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X,
    T,
    Z,
    /// Zero-based boundary-trace component; printed as `v{i+1}`.
    V(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Immutable, cheaply clonable expression tree.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

/// Which identifiers a context accepts.
#[derive(Clone, Copy, Debug)]
pub struct VarPolicy {
    pub x: bool,
    pub t: bool,
    pub z: bool,
    pub max_v: usize,
}

impl VarPolicy {
    pub const ANY: VarPolicy = VarPolicy { x: true, t: true, z: true, max_v: usize::MAX };
    pub const XT: VarPolicy = VarPolicy { x: true, t: true, z: false, max_v: 0 };
    pub const X: VarPolicy = VarPolicy { x: true, t: false, z: false, max_v: 0 };
    pub const T: VarPolicy = VarPolicy { x: false, t: true, z: false, max_v: 0 };

    pub fn tv(n: usize) -> VarPolicy {
        VarPolicy { x: false, t: true, z: false, max_v: n }
    }

    fn allows(&self, v: Var) -> bool {
        match v {
            Var::X => self.x,
            Var::T => self.t,
            Var::Z => self.z,
            Var::V(i) => i < self.max_v,
        }
    }
}

/// Values bound to the variables during evaluation.
pub struct Env<'a, S> {
    pub x: Option<S>,
    pub t: Option<S>,
    pub z: Option<S>,
    pub v: &'a [S],
}

/// Numeric types the evaluator can run on.
pub trait Scalar: Clone {
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn sadd(&self, o: &Self) -> Self;
    fn ssub(&self, o: &Self) -> Self;
    fn smul(&self, o: &Self) -> Self;
    fn sdiv(&self, o: &Self) -> Result<Self, EvalError>;
    fn sneg(&self) -> Self;
    fn spow(&self, o: &Self) -> Result<Self, EvalError>;
    fn sfunc(&self, f: Func) -> Result<Self, EvalError>;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sadd(&self, o: &Self) -> Self {
        self + o
    }
    fn ssub(&self, o: &Self) -> Self {
        self - o
    }
    fn smul(&self, o: &Self) -> Self {
        self * o
    }
    fn sdiv(&self, o: &Self) -> Result<Self, EvalError> {
        if *o == 0.0 {
            return Err(EvalError::Domain("division by zero".into()));
        }
        Ok(self / o)
    }
    fn sneg(&self) -> Self {
        -self
    }
    fn spow(&self, o: &Self) -> Result<Self, EvalError> {
        if *self < 0.0 && o.fract() != 0.0 {
            return Err(EvalError::Domain(format!(
                "non-integer power {o} of negative value {self}"
            )));
        }
        if *self == 0.0 && *o < 0.0 {
            return Err(EvalError::Domain("negative power of zero".into()));
        }
        if o.fract() == 0.0 && o.abs() <= 64.0 {
            return Ok(self.powi(*o as i32));
        }
        Ok(self.powf(*o))
    }
    fn sfunc(&self, f: Func) -> Result<Self, EvalError> {
        Ok(match f {
            Func::Sin => self.sin(),
            Func::Cos => self.cos(),
            Func::Exp => self.exp(),
            Func::Log => {
                if *self <= 0.0 {
                    return Err(EvalError::Domain(format!("log of non-positive value {self}")));
                }
                self.ln()
            }
            Func::Abs => self.abs(),
            Func::Tanh => self.tanh(),
        })
    }
}

impl Scalar for Jet {
    fn cst(v: f64) -> Self {
        Jet::constant(v)
    }
    fn val(&self) -> f64 {
        self.value()
    }
    fn sadd(&self, o: &Self) -> Self {
        self.add(o)
    }
    fn ssub(&self, o: &Self) -> Self {
        self.sub(o)
    }
    fn smul(&self, o: &Self) -> Self {
        self.mul(o)
    }
    fn sdiv(&self, o: &Self) -> Result<Self, EvalError> {
        self.div(o)
    }
    fn sneg(&self) -> Self {
        self.neg()
    }
    fn spow(&self, o: &Self) -> Result<Self, EvalError> {
        if o.0.iter().skip(1).all(|c| *c == 0.0) {
            self.powf(o.value())
        } else {
            Ok(o.mul(&self.ln()?).exp())
        }
    }
    fn sfunc(&self, f: Func) -> Result<Self, EvalError> {
        Ok(match f {
            Func::Sin => self.sin_cos().0,
            Func::Cos => self.sin_cos().1,
            Func::Exp => self.exp(),
            Func::Log => self.ln()?,
            Func::Abs => self.abs()?,
            Func::Tanh => self.tanh(),
        })
    }
}

fn eval_node<S: Scalar>(n: &Node, env: &Env<S>) -> Result<S, EvalError> {
    Ok(match n {
        Node::Num(v) => S::cst(*v),
        Node::Var(v) => {
            let b = match v {
                Var::X => env.x.as_ref(),
                Var::T => env.t.as_ref(),
                Var::Z => env.z.as_ref(),
                Var::V(i) => env.v.get(*i),
            };
            match b {
                Some(s) => s.clone(),
                None => return Err(EvalError::Unbound(var_name(*v))),
            }
        }
        Node::Neg(a) => eval_node(a, env)?.sneg(),
        Node::Bin(op, a, b) => {
            let a = eval_node(a, env)?;
            let b = eval_node(b, env)?;
            match op {
                BinOp::Add => a.sadd(&b),
                BinOp::Sub => a.ssub(&b),
                BinOp::Mul => a.smul(&b),
                BinOp::Div => a.sdiv(&b)?,
                BinOp::Pow => a.spow(&b)?,
            }
        }
        Node::Call(f, a) => eval_node(a, env)?.sfunc(*f)?,
    })
}

fn var_name(v: Var) -> String {
    match v {
        Var::X => "x".into(),
        Var::T => "t".into(),
        Var::Z => "z".into(),
        Var::V(i) => format!("v{}", i + 1),
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        Expr::parse_with(text, VarPolicy::ANY)
    }

    pub fn parse_with(text: &str, policy: VarPolicy) -> Result<Expr, ExprError> {
        let mut p = Parser { src: text, bytes: text.as_bytes(), pos: 0, policy };
        p.skip_ws();
        if p.pos >= p.bytes.len() {
            return Err(ExprError::Syntax { col: 1, msg: "empty expression".into() });
        }
        let n = p.expr()?;
        p.skip_ws();
        if p.pos < p.bytes.len() {
            return Err(p.err(format!("unexpected `{}`", &text[p.pos..p.pos + p.char_len()])));
        }
        Ok(Expr(Arc::new(fold(n))))
    }

    pub fn num(v: f64) -> Expr {
        Expr(Arc::new(Node::Num(v)))
    }

    pub fn var(v: Var) -> Expr {
        Expr(Arc::new(Node::Var(v)))
    }

    pub fn from_node(n: Node) -> Expr {
        Expr(Arc::new(fold(n)))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn depends_on(&self, v: Var) -> bool {
        depends(&self.0, v)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        collect_vars(&self.0, &mut out);
        out.sort();
        out.dedup();
        out
    }

    pub fn eval<S: Scalar>(&self, env: &Env<S>) -> Result<S, EvalError> {
        eval_node(&self.0, env)
    }

    fn finite(v: f64) -> Result<f64, EvalError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    pub fn eval_xt(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        if let Node::Num(v) = *self.0 {
            return Ok(v);
        }
        Self::finite(eval_node(&self.0, &Env { x: Some(x), t: Some(t), z: None, v: &[] })?)
    }

    pub fn eval_x(&self, x: f64) -> Result<f64, EvalError> {
        if let Node::Num(v) = *self.0 {
            return Ok(v);
        }
        Self::finite(eval_node(&self.0, &Env { x: Some(x), t: None, z: None, v: &[] })?)
    }

    pub fn eval_t(&self, t: f64) -> Result<f64, EvalError> {
        if let Node::Num(v) = *self.0 {
            return Ok(v);
        }
        Self::finite(eval_node(&self.0, &Env { x: None, t: Some(t), z: None, v: &[] })?)
    }

    pub fn eval_tv(&self, t: f64, v: &[f64]) -> Result<f64, EvalError> {
        if let Node::Num(c) = *self.0 {
            return Ok(c);
        }
        Self::finite(eval_node(&self.0, &Env { x: None, t: Some(t), z: None, v })?)
    }

    pub fn eval_all(&self, x: f64, t: f64, z: f64, v: &[f64]) -> Result<f64, EvalError> {
        Self::finite(eval_node(&self.0, &Env { x: Some(x), t: Some(t), z: Some(z), v })?)
    }

    /// Taylor jet in `x` of order `order` at fixed `t`.
    pub fn jet_x(&self, x: f64, t: f64, order: usize) -> Result<Jet, EvalError> {
        let env = Env { x: Some(Jet::variable(x, order)), t: Some(Jet::constant(t)), z: None, v: &[] };
        Ok(eval_node(&self.0, &env)?.truncate(order + 1))
    }

    /// Taylor jet in `t` of order `order` at fixed `x`.
    pub fn jet_t(&self, x: f64, t: f64, order: usize) -> Result<Jet, EvalError> {
        let env = Env { x: Some(Jet::constant(x)), t: Some(Jet::variable(t, order)), z: None, v: &[] };
        Ok(eval_node(&self.0, &env)?.truncate(order + 1))
    }

    /// Evaluate along a parameterized path `s -> (x(s), t(s))` given as jets.
    pub fn jet_along(&self, x: &Jet, t: &Jet) -> Result<Jet, EvalError> {
        let len = x.len().max(t.len());
        let env = Env { x: Some(x.clone()), t: Some(t.clone()), z: None, v: &[] };
        Ok(eval_node(&self.0, &env)?.truncate(len))
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, v: Var) -> Expr {
        Expr(Arc::new(fold(diff_node(&self.0, v))))
    }

    /// Replace variables by expressions.
    pub fn substitute(&self, f: &dyn Fn(Var) -> Option<Expr>) -> Expr {
        Expr(Arc::new(fold(subst(&self.0, f))))
    }

    pub fn add(&self, o: &Expr) -> Expr {
        Expr::from_node(Node::Bin(BinOp::Add, Box::new((*self.0).clone()), Box::new((*o.0).clone())))
    }

    pub fn mul(&self, o: &Expr) -> Expr {
        Expr::from_node(Node::Bin(BinOp::Mul, Box::new((*self.0).clone()), Box::new((*o.0).clone())))
    }

    pub fn sub(&self, o: &Expr) -> Expr {
        Expr::from_node(Node::Bin(BinOp::Sub, Box::new((*self.0).clone()), Box::new((*o.0).clone())))
    }

    pub fn neg(&self) -> Expr {
        Expr::from_node(Node::Neg(Box::new((*self.0).clone())))
    }
}

impl PartialEq for Expr {
    fn eq(&self, o: &Expr) -> bool {
        *self.0 == *o.0
    }
}

fn depends(n: &Node, v: Var) -> bool {
    match n {
        Node::Num(_) => false,
        Node::Var(w) => *w == v,
        Node::Neg(a) | Node::Call(_, a) => depends(a, v),
        Node::Bin(_, a, b) => depends(a, v) || depends(b, v),
    }
}

fn collect_vars(n: &Node, out: &mut Vec<Var>) {
    match n {
        Node::Num(_) => {}
        Node::Var(w) => out.push(*w),
        Node::Neg(a) | Node::Call(_, a) => collect_vars(a, out),
        Node::Bin(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
    }
}

fn subst(n: &Node, f: &dyn Fn(Var) -> Option<Expr>) -> Node {
    match n {
        Node::Num(v) => Node::Num(*v),
        Node::Var(w) => match f(*w) {
            Some(e) => (*e.0).clone(),
            None => Node::Var(*w),
        },
        Node::Neg(a) => Node::Neg(Box::new(subst(a, f))),
        Node::Call(g, a) => Node::Call(*g, Box::new(subst(a, f))),
        Node::Bin(op, a, b) => Node::Bin(*op, Box::new(subst(a, f)), Box::new(subst(b, f))),
    }
}

fn num(v: f64) -> Node {
    Node::Num(v)
}

fn bin(op: BinOp, a: Node, b: Node) -> Node {
    Node::Bin(op, Box::new(a), Box::new(b))
}

fn call(f: Func, a: Node) -> Node {
    Node::Call(f, Box::new(a))
}

fn diff_node(n: &Node, v: Var) -> Node {
    if !depends(n, v) {
        return num(0.0);
    }
    match n {
        Node::Num(_) => num(0.0),
        Node::Var(w) => num(if *w == v { 1.0 } else { 0.0 }),
        Node::Neg(a) => Node::Neg(Box::new(diff_node(a, v))),
        Node::Bin(op, a, b) => {
            let (a, b) = (a.as_ref(), b.as_ref());
            let (da, db) = (diff_node(a, v), diff_node(b, v));
            match op {
                BinOp::Add => bin(BinOp::Add, da, db),
                BinOp::Sub => bin(BinOp::Sub, da, db),
                BinOp::Mul => bin(
                    BinOp::Add,
                    bin(BinOp::Mul, da, b.clone()),
                    bin(BinOp::Mul, a.clone(), db),
                ),
                BinOp::Div => bin(
                    BinOp::Sub,
                    bin(BinOp::Div, da, b.clone()),
                    bin(
                        BinOp::Div,
                        bin(BinOp::Mul, a.clone(), db),
                        bin(BinOp::Pow, b.clone(), num(2.0)),
                    ),
                ),
                BinOp::Pow => {
                    if !depends(b, v) {
                        // b a^(b-1) a'
                        bin(
                            BinOp::Mul,
                            bin(
                                BinOp::Mul,
                                b.clone(),
                                bin(BinOp::Pow, a.clone(), bin(BinOp::Sub, b.clone(), num(1.0))),
                            ),
                            da,
                        )
                    } else {
                        // a^b (b' log a + b a'/a)
                        bin(
                            BinOp::Mul,
                            n.clone(),
                            bin(
                                BinOp::Add,
                                bin(BinOp::Mul, db, call(Func::Log, a.clone())),
                                bin(BinOp::Div, bin(BinOp::Mul, b.clone(), da), a.clone()),
                            ),
                        )
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let a = a.as_ref();
            let da = diff_node(a, v);
            let outer = match f {
                Func::Sin => call(Func::Cos, a.clone()),
                Func::Cos => Node::Neg(Box::new(call(Func::Sin, a.clone()))),
                Func::Exp => n.clone(),
                Func::Log => bin(BinOp::Div, num(1.0), a.clone()),
                Func::Abs => bin(BinOp::Div, a.clone(), n.clone()),
                Func::Tanh => bin(
                    BinOp::Sub,
                    num(1.0),
                    bin(BinOp::Pow, n.clone(), num(2.0)),
                ),
            };
            bin(BinOp::Mul, outer, da)
        }
    }
}

/// Constant folding plus the algebraic identities with 0 and 1.
fn fold(n: Node) -> Node {
    match n {
        Node::Num(_) | Node::Var(_) => n,
        Node::Neg(a) => match fold(*a) {
            Node::Num(v) => num(-v),
            Node::Neg(b) => *b,
            a => Node::Neg(Box::new(a)),
        },
        Node::Call(f, a) => {
            let a = fold(*a);
            if let Node::Num(v) = a {
                if let Ok(r) = v.sfunc(f) {
                    if r.is_finite() {
                        return num(r);
                    }
                }
            }
            call(f, a)
        }
        Node::Bin(op, a, b) => {
            let a = fold(*a);
            let b = fold(*b);
            if let (Node::Num(x), Node::Num(y)) = (&a, &b) {
                let r = match op {
                    BinOp::Add => Ok(x + y),
                    BinOp::Sub => Ok(x - y),
                    BinOp::Mul => Ok(x * y),
                    BinOp::Div => x.sdiv(y),
                    BinOp::Pow => x.spow(y),
                };
                if let Ok(r) = r {
                    if r.is_finite() {
                        return num(r);
                    }
                }
            }
            let is = |n: &Node, c: f64| matches!(n, Node::Num(v) if *v == c);
            match op {
                BinOp::Add if is(&a, 0.0) => b,
                BinOp::Add | BinOp::Sub if is(&b, 0.0) => a,
                BinOp::Sub if is(&a, 0.0) => fold(Node::Neg(Box::new(b))),
                BinOp::Mul if is(&a, 0.0) || is(&b, 0.0) => num(0.0),
                BinOp::Mul if is(&a, 1.0) => b,
                BinOp::Mul | BinOp::Div if is(&b, 1.0) => a,
                BinOp::Div if is(&a, 0.0) => num(0.0),
                BinOp::Pow if is(&b, 1.0) => a,
                BinOp::Pow if is(&b, 0.0) => num(1.0),
                _ => bin(op, a, b),
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    policy: VarPolicy,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: String) -> ExprError {
        ExprError::Syntax { col: self.col(self.pos), msg }
    }

    fn col(&self, pos: usize) -> usize {
        self.src[..pos.min(self.src.len())].chars().count() + 1
    }

    fn char_len(&self) -> usize {
        self.src[self.pos..].chars().next().map(|c| c.len_utf8()).unwrap_or(0)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let e = self.unary()?;
            return Ok(bin(BinOp::Pow, base, e));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let c = match self.peek() {
            Some(c) => c,
            None => return Err(self.err("unexpected end of expression".into())),
        };
        if c == b'(' {
            self.pos += 1;
            let e = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected `)`".into()));
            }
            self.pos += 1;
            return Ok(e);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < self.bytes.len()
                && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let name = &self.src[start..self.pos];
            if self.peek() == Some(b'(') {
                let f = Func::from_name(name).ok_or(ExprError::UnknownFunction {
                    col: self.col(start),
                    name: name.to_string(),
                })?;
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`".into()));
                }
                self.pos += 1;
                return Ok(call(f, arg));
            }
            let var = match name {
                "pi" => return Ok(num(std::f64::consts::PI)),
                "x" => Var::X,
                "t" => Var::T,
                "z" => Var::Z,
                _ => match name.strip_prefix('v').and_then(|d| d.parse::<usize>().ok()) {
                    Some(i) if i >= 1 && !name[1..].starts_with('0') => Var::V(i - 1),
                    _ => {
                        return Err(ExprError::UnknownIdentifier {
                            col: self.col(start),
                            name: name.to_string(),
                        })
                    }
                },
            };
            if !self.policy.allows(var) {
                return Err(ExprError::UnknownIdentifier {
                    col: self.col(start),
                    name: name.to_string(),
                });
            }
            return Ok(Node::Var(var));
        }
        Err(self.err(format!("unexpected `{}`", &self.src[self.pos..self.pos + self.char_len()])))
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos].is_ascii_digit() {
                while self.pos < b.len() && b[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let s = &self.src[start..self.pos];
        s.parse::<f64>()
            .map(num)
            .map_err(|_| ExprError::Syntax { col: self.col(start), msg: format!("bad number `{s}`") })
    }
}

fn prec(n: &Node) -> u8 {
    match n {
        Node::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Node::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Node::Neg(_) => 3,
        Node::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
        Node::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let wrap = |c: &Node, need: bool, f: &mut fmt::Formatter<'_>| -> fmt::Result {
        if need {
            write!(f, "(")?;
            write_node(c, f)?;
            write!(f, ")")
        } else {
            write_node(c, f)
        }
    };
    match n {
        Node::Num(v) => {
            if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                write!(f, "-{:?}", -v)
            } else {
                write!(f, "{v:?}")
            }
        }
        Node::Var(v) => write!(f, "{}", var_name(*v)),
        Node::Neg(a) => {
            write!(f, "-")?;
            wrap(a, prec(a) < 3, f)
        }
        Node::Call(g, a) => {
            write!(f, "{}(", g.name())?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Bin(op, a, b) => {
            let p = prec(n);
            let (sym, lneed, rneed) = match op {
                BinOp::Add => ("+", prec(a) < 1, prec(b) <= 1),
                BinOp::Sub => ("-", prec(a) < 1, prec(b) <= 1),
                BinOp::Mul => ("*", prec(a) < 2, prec(b) <= 2),
                BinOp::Div => ("/", prec(a) < 2, prec(b) <= 2),
                BinOp::Pow => ("^", prec(a) <= p, prec(b) < 3),
            };
            // a leading minus on a right operand must not merge with the operator
            let rneed = rneed || (prec(b) == 3 && *op != BinOp::Pow);
            wrap(a, lneed, f)?;
            write!(f, " {sym} ")?;
            wrap(b, rneed, f)
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, x: f64, t: f64) -> f64 {
        Expr::parse(s).unwrap().eval_xt(x, t).unwrap()
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("-x^2", 3.0, 0.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("(1 - x) / 2", 0.5, 0.0), 0.25);
        assert_eq!(ev("1e-3 * 2E2", 0.0, 0.0), 0.2);
        assert!((ev("sin(pi*x)", 0.5, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        match Expr::parse("1 + foo(x)") {
            Err(ExprError::UnknownFunction { col, name }) => {
                assert_eq!(col, 5);
                assert_eq!(name, "foo");
            }
            e => panic!("{e:?}"),
        }
        assert!(matches!(Expr::parse("1 + * 2"), Err(ExprError::Syntax { col: 5, .. })));
        assert!(matches!(Expr::parse_with("v3", VarPolicy::tv(2)), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(Expr::parse_with("x", VarPolicy::T), Err(ExprError::UnknownIdentifier { .. })));
        assert!(Expr::parse("(x").is_err());
        assert!(Expr::parse("").is_err());
    }

    #[test]
    fn domain_errors() {
        let e = Expr::parse("log(x)").unwrap();
        assert!(matches!(e.eval_xt(-1.0, 0.0), Err(EvalError::Domain(_))));
        let e = Expr::parse("1 / x").unwrap();
        assert!(matches!(e.eval_xt(0.0, 0.0), Err(EvalError::Domain(_))));
        let e = Expr::parse("exp(x)").unwrap();
        assert!(matches!(e.eval_xt(1e6, 0.0), Err(EvalError::NonFinite)));
        let e = Expr::parse("v1 + x").unwrap();
        assert!(matches!(e.eval_tv(0.0, &[1.0]), Err(EvalError::Unbound(_))));
    }

    #[test]
    fn folding() {
        assert_eq!(Expr::parse("2 * 3 + 0 * x").unwrap().as_const(), Some(6.0));
        assert!(Expr::parse("0").unwrap().is_zero());
        assert_eq!(Expr::parse("1 * x + 0").unwrap().to_string(), "x");
    }

    #[test]
    fn symbolic_derivative_matches_jets() {
        let srcs = [
            "sin(x * t) + x^3",
            "exp(-x) * cos(2 * x)",
            "tanh(x / (1 + t))",
            "log(1 + x^2) - abs(x - 3)",
            "x^t",
            "(1 + x)^2.5",
        ];
        for s in srcs {
            let e = Expr::parse(s).unwrap();
            let d = e.diff(Var::X);
            let dd = d.diff(Var::X);
            for &(x, t) in &[(0.3, 0.7), (1.2, 0.1), (0.9, 2.0)] {
                let j = e.jet_x(x, t, 3).unwrap();
                let a = d.eval_xt(x, t).unwrap();
                let b = dd.eval_xt(x, t).unwrap();
                assert!((j.derivative(1) - a).abs() < 1e-11 * (1.0 + a.abs()), "{s}");
                assert!((j.derivative(2) - b).abs() < 1e-10 * (1.0 + b.abs()), "{s}");
            }
        }
    }

    #[test]
    fn jet_against_finite_difference() {
        let e = Expr::parse("sin(3*x)*exp(x/2) + tanh(x)^2").unwrap();
        let j = e.jet_x(0.4, 0.0, 2).unwrap();
        let h = 1e-4;
        let f = |x: f64| e.eval_xt(x, 0.0).unwrap();
        let d2 = (f(0.4 + h) - 2.0 * f(0.4) + f(0.4 - h)) / (h * h);
        assert!((j.derivative(2) - d2).abs() < 1e-5);
    }

    fn arb_expr() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (-50i32..50).prop_map(|v| format!("{}", v as f64 / 7.0)),
            Just("x".to_string()),
            Just("t".to_string()),
            Just("v1".to_string()),
            Just("pi".to_string()),
        ];
        leaf.prop_recursive(5, 40, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) + ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) - ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) * ({b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) / ({b})")),
                (inner.clone(), 0u32..4).prop_map(|(a, p)| format!("({a})^{p}")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("cos({a})")),
                inner.clone().prop_map(|a| format!("tanh({a})")),
                inner.clone().prop_map(|a| format!("abs({a})")),
                inner.clone().prop_map(|a| format!("exp(({a}) / 10)")),
                inner.prop_map(|a| format!("log(1 + abs({a}))")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_roundtrip(src in arb_expr(), x in -2.0f64..2.0, t in 0.0f64..3.0, v in -5.0f64..5.0) {
            let e = Expr::parse(&src).unwrap();
            let printed = e.to_string();
            let back = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&back, &e, "printed: {}", printed);
            let a = e.eval_all(x, t, 0.0, &[v]);
            let b = back.eval_all(x, t, 0.0, &[v]);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert!(a == b || (a - b).abs() <= 1e-12 * a.abs()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }
    }
}
