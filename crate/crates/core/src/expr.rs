//! Arithmetic expression trees over space coordinates and time.
//!
//! Coefficients are written in a small infix language:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | 'e' | 'x' | 'x1' | 'x2' | 't'
//!        | func '(' expr ')' | '(' expr ')'
//! func  := 'sin' | 'cos' | 'exp' | 'log'
//! ```
//!
//! `x` is an alias of `x1`. Vector fields are written as a bracketed,
//! comma-separated list, `[-x2, x1]`. Trees are differentiated symbolically;
//! the smart constructors fold constants so that derivatives of simple
//! expressions stay small.

use std::fmt;
use std::sync::Arc;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
        }
    }
}

/// Differentiation variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Space coordinate, zero based.
    X(usize),
    T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Coord(usize),
    Time,
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    Pow(Arc<Expr>, Arc<Expr>),
    Call(Func, Arc<Expr>),
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn coord(i: usize) -> Self {
        Expr::Coord(i)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(v) => Expr::Const(-v),
            Expr::Neg(inner) => (*inner).clone(),
            other => Expr::Neg(Arc::new(other)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Add(Arc::new(a), Arc::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x - y),
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Sub(Arc::new(a), Arc::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => Expr::Const(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            _ => Expr::Mul(Arc::new(a), Arc::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x / y),
            (Some(x), _) if x == 0.0 => Expr::Const(0.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::Div(Arc::new(a), Arc::new(b)),
        }
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x.powf(y)),
            (_, Some(y)) if y == 0.0 => Expr::Const(1.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::Pow(Arc::new(a), Arc::new(b)),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        match a.as_const() {
            Some(v) => Expr::Const(f.apply(v)),
            None => Expr::Call(f, Arc::new(a)),
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Coord(i) => x[*i],
            Expr::Time => t,
            Expr::Neg(a) => -a.eval(x, t),
            Expr::Add(a, b) => a.eval(x, t) + b.eval(x, t),
            Expr::Sub(a, b) => a.eval(x, t) - b.eval(x, t),
            Expr::Mul(a, b) => a.eval(x, t) * b.eval(x, t),
            Expr::Div(a, b) => a.eval(x, t) / b.eval(x, t),
            Expr::Pow(a, b) => pow_eval(a.eval(x, t), b.eval(x, t)),
            Expr::Call(f, a) => f.apply(a.eval(x, t)),
        }
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, var: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Coord(i) => Expr::Const(if var == Var::X(*i) { 1.0 } else { 0.0 }),
            Expr::Time => Expr::Const(if var == Var::T { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.diff(var)),
            Expr::Add(a, b) => Expr::add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => Expr::sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(var), (**b).clone()),
                Expr::mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.is_zero() {
                    Expr::div(da, (**b).clone())
                } else {
                    Expr::div(
                        Expr::sub(
                            Expr::mul(da, (**b).clone()),
                            Expr::mul((**a).clone(), db),
                        ),
                        Expr::pow((**b).clone(), Expr::Const(2.0)),
                    )
                }
            }
            Expr::Pow(a, b) => {
                let da = a.diff(var);
                if let Some(n) = b.as_const() {
                    // d(a^n) = n a^(n-1) a'
                    Expr::mul(
                        Expr::mul(Expr::Const(n), Expr::pow((**a).clone(), Expr::Const(n - 1.0))),
                        da,
                    )
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    let db = b.diff(var);
                    Expr::mul(
                        self.clone(),
                        Expr::add(
                            Expr::mul(db, Expr::call(Func::Log, (**a).clone())),
                            Expr::div(Expr::mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
            Expr::Call(f, a) => {
                let da = a.diff(var);
                if da.is_zero() {
                    return Expr::Const(0.0);
                }
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, (**a).clone()),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, (**a).clone())),
                    Func::Exp => self.clone(),
                    Func::Log => Expr::div(Expr::Const(1.0), (**a).clone()),
                };
                Expr::mul(outer, da)
            }
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Coord(i) => var == Var::X(*i),
            Expr::Time => var == Var::T,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    /// Largest coordinate index referenced plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Time => 0,
            Expr::Coord(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.arity().max(b.arity()),
        }
    }

    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser::new(src);
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(LabError::parse(p.pos, "unexpected trailing input"));
        }
        Ok(e)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn pow_eval(base: f64, exp: f64) -> f64 {
    if exp.fract() == 0.0 && exp.abs() <= 64.0 {
        base.powi(exp as i32)
    } else {
        base.powf(exp)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(v) => {
                if *v == std::f64::consts::PI {
                    write!(f, "pi")
                } else if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Coord(i) => write!(f, "x{}", i + 1),
            Expr::Time => write!(f, "t"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 4)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "*")?;
                wrap(f, b, 3)
            }
            Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "/")?;
                wrap(f, b, 3)
            }
            Expr::Pow(a, b) => {
                wrap(f, a, 5)?;
                write!(f, "^")?;
                wrap(f, b, 4)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A d-component field of expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorExpr {
    pub components: Vec<Expr>,
}

impl VectorExpr {
    pub fn new(components: Vec<Expr>) -> Self {
        Self { components }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![Expr::Const(0.0); dim])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// Parses either `[e1, e2, ...]` or a bare scalar expression (single component).
    pub fn parse(src: &str) -> Result<VectorExpr> {
        let trimmed = src.trim();
        if let Some(inner) = trimmed.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| LabError::parse(src.len(), "unterminated '['"))?;
            let mut comps = Vec::new();
            let mut depth = 0usize;
            let mut start = 0;
            for (i, ch) in inner.char_indices() {
                match ch {
                    '(' => depth += 1,
                    ')' => depth = depth.saturating_sub(1),
                    ',' if depth == 0 => {
                        comps.push(Expr::parse(&inner[start..i])?);
                        start = i + 1;
                    }
                    _ => {}
                }
            }
            comps.push(Expr::parse(&inner[start..])?);
            Ok(VectorExpr::new(comps))
        } else {
            Ok(VectorExpr::new(vec![Expr::parse(trimmed)?]))
        }
    }

    pub fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x, t);
        }
    }

    pub fn divergence(&self) -> Expr {
        self.components
            .iter()
            .enumerate()
            .fold(Expr::Const(0.0), |acc, (i, c)| Expr::add(acc, c.diff(Var::X(i))))
    }

    pub fn depends_on(&self, var: Var) -> bool {
        self.components.iter().any(|c| c.depends_on(var))
    }

    pub fn arity(&self) -> usize {
        self.components.iter().map(Expr::arity).max().unwrap_or(0)
    }
}

impl fmt::Display for VectorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        }
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = Expr::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = Expr::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            Ok(Expr::neg(self.unary()?))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            Ok(Expr::pow(base, exp))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let c = self
            .peek()
            .ok_or_else(|| LabError::parse(self.pos, "unexpected end of expression"))?;
        if c == b'(' {
            self.pos += 1;
            let e = self.expr()?;
            if !self.eat(b')') {
                return Err(LabError::parse(self.pos, "expected ')'"));
            }
            return Ok(e);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.pos < self.bytes.len()
                && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let ident = &self.src[start..self.pos];
            let func = match ident {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "exp" => Some(Func::Exp),
                "log" | "ln" => Some(Func::Log),
                _ => None,
            };
            if let Some(func) = func {
                if !self.eat(b'(') {
                    return Err(LabError::parse(self.pos, format!("expected '(' after {ident}")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(LabError::parse(self.pos, "expected ')'"));
                }
                return Ok(Expr::call(func, arg));
            }
            return match ident {
                "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                "e" => Ok(Expr::Const(std::f64::consts::E)),
                "t" => Ok(Expr::Time),
                "x" => Ok(Expr::Coord(0)),
                _ => {
                    if let Some(idx) = ident.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                        if idx >= 1 {
                            return Ok(Expr::Coord(idx - 1));
                        }
                    }
                    Err(LabError::parse(start, format!("unknown identifier '{ident}'")))
                }
            };
        }
        Err(LabError::parse(self.pos, format!("unexpected character '{}'", c as char)))
    }

    fn number(&mut self) -> Result<Expr> {
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
                // `2e` followed by something else: not an exponent.
                self.pos = save;
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| LabError::parse(start, "malformed number"))
    }
}
