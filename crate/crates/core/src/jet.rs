//! Truncated Taylor series arithmetic.
//!
//! A [`Jet`] stores normalized coefficients `c_k = f^(k)(s0) / k!` of a
//! function of one variable. Mixing jets of different lengths pads the shorter
//! one with zeros, so a constant can be a jet of length one.

use crate::error::EvalError;

#[derive(Clone, Debug, PartialEq)]
pub struct Jet(pub Vec<f64>);

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet(vec![v])
    }

    /// The identity jet `s0 + s` truncated at `order`.
    pub fn variable(s0: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = s0;
        if order > 0 {
            c[1] = 1.0;
        }
        Jet(c)
    }

    pub fn zeros(len: usize) -> Self {
        Jet(vec![0.0; len.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    pub fn coeff(&self, k: usize) -> f64 {
        self.0.get(k).copied().unwrap_or(0.0)
    }

    /// k-th derivative at the expansion point.
    pub fn derivative(&self, k: usize) -> f64 {
        let mut f = 1.0;
        for j in 2..=k {
            f *= j as f64;
        }
        self.coeff(k) * f
    }

    pub fn truncate(mut self, len: usize) -> Self {
        self.0.resize(len.max(1), 0.0);
        self
    }

    pub fn eval_at(&self, s: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    pub fn scale(&self, f: f64) -> Self {
        Jet(self.0.iter().map(|c| c * f).collect())
    }

    pub fn add(&self, o: &Jet) -> Jet {
        let n = self.len().max(o.len());
        Jet((0..n).map(|k| self.coeff(k) + o.coeff(k)).collect())
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        let n = self.len().max(o.len());
        Jet((0..n).map(|k| self.coeff(k) - o.coeff(k)).collect())
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let n = self.len().max(o.len());
        let mut c = vec![0.0; n];
        for (i, a) in self.0.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in o.0.iter().enumerate().take(n - i) {
                c[i + j] += a * b;
            }
        }
        Jet(c)
    }

    pub fn div(&self, o: &Jet) -> Result<Jet, EvalError> {
        let b0 = o.value();
        if b0 == 0.0 {
            return Err(EvalError::Domain("division by zero".into()));
        }
        let n = self.len().max(o.len());
        let mut q = vec![0.0; n];
        for k in 0..n {
            let mut s = self.coeff(k);
            for i in 0..k {
                s -= q[i] * o.coeff(k - i);
            }
            q[k] = s / b0;
        }
        Ok(Jet(q))
    }

    pub fn exp(&self) -> Jet {
        let n = self.len();
        let mut e = vec![0.0; n];
        e[0] = self.value().exp();
        for k in 1..n {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.coeff(j) * e[k - j];
            }
            e[k] = s / k as f64;
        }
        Jet(e)
    }

    pub fn ln(&self) -> Result<Jet, EvalError> {
        let a0 = self.value();
        if a0 <= 0.0 {
            return Err(EvalError::Domain(format!("log of non-positive value {a0}")));
        }
        let n = self.len();
        let mut l = vec![0.0; n];
        l[0] = a0.ln();
        for k in 1..n {
            let mut s = 0.0;
            for j in 1..k {
                s += j as f64 * l[j] * self.coeff(k - j);
            }
            l[k] = (self.coeff(k) - s / k as f64) / a0;
        }
        Ok(Jet(l))
    }

    pub fn sin_cos(&self) -> (Jet, Jet) {
        let n = self.len();
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        s[0] = self.value().sin();
        c[0] = self.value().cos();
        for k in 1..n {
            let (mut ss, mut cc) = (0.0, 0.0);
            for j in 1..=k {
                let ja = j as f64 * self.coeff(j);
                ss += ja * c[k - j];
                cc += ja * s[k - j];
            }
            s[k] = ss / k as f64;
            c[k] = -cc / k as f64;
        }
        (Jet(s), Jet(c))
    }

    pub fn tanh(&self) -> Jet {
        let n = self.len();
        let mut t = vec![0.0; n];
        let mut d = vec![0.0; n];
        t[0] = self.value().tanh();
        d[0] = 1.0 - t[0] * t[0];
        for k in 1..n {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.coeff(j) * d[k - j];
            }
            t[k] = s / k as f64;
            let mut sq = 0.0;
            for i in 0..=k {
                sq += t[i] * t[k - i];
            }
            d[k] = -sq;
        }
        Jet(t)
    }

    pub fn abs(&self) -> Result<Jet, EvalError> {
        let a0 = self.value();
        if a0 > 0.0 {
            Ok(self.clone())
        } else if a0 < 0.0 {
            Ok(self.neg())
        } else if self.0.iter().skip(1).all(|c| *c == 0.0) {
            Ok(Jet::constant(0.0).truncate(self.len()))
        } else {
            Err(EvalError::Domain("abs is not differentiable at 0".into()))
        }
    }

    pub fn powi(&self, e: i64) -> Result<Jet, EvalError> {
        if e < 0 {
            let p = self.powi(-e)?;
            return Jet::constant(1.0).truncate(self.len()).div(&p);
        }
        let mut result = Jet::constant(1.0).truncate(self.len());
        let mut base = self.clone();
        let mut e = e as u64;
        while e > 0 {
            if e & 1 == 1 {
                result = result.mul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base);
            }
        }
        Ok(result)
    }

    /// Real power with a constant exponent.
    pub fn powf(&self, r: f64) -> Result<Jet, EvalError> {
        if r.fract() == 0.0 && r.abs() < 64.0 {
            return self.powi(r as i64);
        }
        let a0 = self.value();
        if a0 <= 0.0 {
            if a0 == 0.0 && self.len() == 1 && r > 0.0 {
                return Ok(Jet::constant(0.0));
            }
            return Err(EvalError::Domain(format!(
                "non-integer power {r} of non-positive value {a0}"
            )));
        }
        let n = self.len();
        let mut p = vec![0.0; n];
        p[0] = a0.powf(r);
        for k in 1..n {
            let mut s = 0.0;
            for j in 1..=k {
                s += (r * j as f64 - (k - j) as f64) * self.coeff(j) * p[k - j];
            }
            p[k] = s / (k as f64 * a0);
        }
        Ok(Jet(p))
    }

    /// Composition `self(inner(s))` where `self` is expanded around
    /// `inner.value()`.
    pub fn compose(&self, inner: &Jet) -> Jet {
        let n = inner.len().max(1);
        let mut d = inner.clone();
        d.0[0] = 0.0;
        let mut acc = Jet::zeros(n);
        let mut pw = Jet::constant(1.0).truncate(n);
        for c in &self.0 {
            acc = acc.add(&pw.scale(*c));
            pw = pw.mul(&d);
        }
        acc.truncate(n)
    }

    /// Series reversion: given `y(s)` with `y(0)=0`, `y'(0)!=0`, return `s(y)`.
    pub fn revert(&self) -> Result<Jet, EvalError> {
        let n = self.len();
        let y1 = self.coeff(1);
        if y1 == 0.0 || self.value() != 0.0 {
            return Err(EvalError::Domain("series not invertible".into()));
        }
        let mut s = Jet::zeros(n);
        if n > 1 {
            s.0[1] = 1.0 / y1;
        }
        // fixed point s = (y - (f(s) - y1 s)) / y1 gains one order per pass
        let mut nonlin = self.clone();
        nonlin.0[1] = 0.0;
        let ident = Jet::variable(0.0, n - 1);
        for _ in 1..n {
            let h = nonlin.compose(&s);
            s = ident.sub(&h).scale(1.0 / y1);
        }
        Ok(s)
    }

    /// Antiderivative vanishing at the expansion point, length + 1.
    pub fn integrate(&self) -> Jet {
        let mut c = vec![0.0; self.len() + 1];
        for (k, a) in self.0.iter().enumerate() {
            c[k + 1] = a / (k + 1) as f64;
        }
        Jet(c)
    }

    /// Derivative series, length - 1.
    pub fn differentiate(&self) -> Jet {
        if self.len() <= 1 {
            return Jet::constant(0.0);
        }
        Jet((1..self.len())
            .map(|k| k as f64 * self.coeff(k))
            .collect())
    }
}
