//! A small expression language for potentials, one-forms and whole
//! Lagrangians or Hamiltonians, with exact symbolic differentiation.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := ("-" | "+") unary | power
//! power   := primary ("^" unary)?          exponent must fold to an integer
//! primary := number | ident | func "(" expr ")" | "(" expr ")"
//! func    := sin | cos | exp
//! ident   := t | pi | q | qK | v | vK | p | pK      (K = 1..N, q means q1)
//! ```
//!
//! `v` and `p` both name the fiber coordinate; which one is accepted depends
//! on the context the expression is parsed in.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    T,
    Q(usize),
    W(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

/// Which variables an expression may mention.
#[derive(Clone, Copy, Debug)]
pub struct Scope {
    pub dim: usize,
    pub time: bool,
    /// Accepted fiber letter: `Some('v')`, `Some('p')` or `None`.
    pub fiber: Option<char>,
}

impl Scope {
    pub fn position(dim: usize) -> Self {
        Scope { dim, time: false, fiber: None }
    }
    pub fn time_position(dim: usize) -> Self {
        Scope { dim, time: true, fiber: None }
    }
    pub fn lagrangian(dim: usize) -> Self {
        Scope { dim, time: true, fiber: Some('v') }
    }
    pub fn hamiltonian(dim: usize) -> Self {
        Scope { dim, time: true, fiber: Some('p') }
    }
}

fn c(x: f64) -> Expr {
    Expr::Const(x)
}

fn as_const(e: &Expr) -> Option<f64> {
    if let Expr::Const(x) = e {
        Some(*x)
    } else {
        None
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => c(x + y),
        (Some(x), _) if x == 0.0 => b,
        (_, Some(y)) if y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => c(x - y),
        (Some(x), _) if x == 0.0 => neg(b),
        (_, Some(y)) if y == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => c(x * y),
        (Some(x), _) if x == 0.0 => c(0.0),
        (_, Some(y)) if y == 0.0 => c(0.0),
        (Some(x), _) if x == 1.0 => b,
        (_, Some(y)) if y == 1.0 => a,
        (Some(x), _) if x == -1.0 => neg(b),
        (_, Some(y)) if y == -1.0 => neg(a),
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => c(x / y),
        (Some(x), _) if x == 0.0 => c(0.0),
        (_, Some(y)) if y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => c(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn pow(a: Expr, n: i32) -> Expr {
    if n == 0 {
        return c(1.0);
    }
    if n == 1 {
        return a;
    }
    match as_const(&a) {
        Some(x) => c(x.powi(n)),
        None => Expr::Pow(Box::new(a), n),
    }
}

fn sin(a: Expr) -> Expr {
    match as_const(&a) {
        Some(x) => c(x.sin()),
        None => Expr::Sin(Box::new(a)),
    }
}

fn cos(a: Expr) -> Expr {
    match as_const(&a) {
        Some(x) => c(x.cos()),
        None => Expr::Cos(Box::new(a)),
    }
}

fn exp(a: Expr) -> Expr {
    match as_const(&a) {
        Some(x) => c(x.exp()),
        None => Expr::Exp(Box::new(a)),
    }
}

impl Expr {
    pub fn constant(x: f64) -> Expr {
        c(x)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(x) if *x == 0.0)
    }

    pub fn eval(&self, t: f64, q: &[f64], w: &[f64]) -> f64 {
        match self {
            Expr::Const(x) => *x,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::Q(i)) => q[*i],
            Expr::Var(Var::W(i)) => w[*i],
            Expr::Neg(a) => -a.eval(t, q, w),
            Expr::Add(a, b) => a.eval(t, q, w) + b.eval(t, q, w),
            Expr::Sub(a, b) => a.eval(t, q, w) - b.eval(t, q, w),
            Expr::Mul(a, b) => a.eval(t, q, w) * b.eval(t, q, w),
            Expr::Div(a, b) => a.eval(t, q, w) / b.eval(t, q, w),
            Expr::Pow(a, n) => a.eval(t, q, w).powi(*n),
            Expr::Sin(a) => a.eval(t, q, w).sin(),
            Expr::Cos(a) => a.eval(t, q, w).cos(),
            Expr::Exp(a) => a.eval(t, q, w).exp(),
        }
    }

    pub fn diff(&self, x: Var) -> Expr {
        match self {
            Expr::Const(_) => c(0.0),
            Expr::Var(v) => c(if *v == x { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(x)),
            Expr::Add(a, b) => add(a.diff(x), b.diff(x)),
            Expr::Sub(a, b) => sub(a.diff(x), b.diff(x)),
            Expr::Mul(a, b) => add(
                mul(a.diff(x), (**b).clone()),
                mul((**a).clone(), b.diff(x)),
            ),
            Expr::Div(a, b) => {
                let num = sub(
                    mul(a.diff(x), (**b).clone()),
                    mul((**a).clone(), b.diff(x)),
                );
                div(num, pow((**b).clone(), 2))
            }
            Expr::Pow(a, n) => mul(
                mul(c(*n as f64), pow((**a).clone(), n - 1)),
                a.diff(x),
            ),
            Expr::Sin(a) => mul(cos((**a).clone()), a.diff(x)),
            Expr::Cos(a) => neg(mul(sin((**a).clone()), a.diff(x))),
            Expr::Exp(a) => mul(exp((**a).clone()), a.diff(x)),
        }
    }

    pub fn mentions(&self, x: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == x,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => {
                a.mentions(x)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.mentions(x) || b.mentions(x)
            }
        }
    }

    pub fn parse(src: &str, scope: Scope) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, scope };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!("unexpected trailing input in '{src}'")));
        }
        Ok(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let x: f64 = text
                .parse()
                .map_err(|_| Error::Expr(format!("bad number '{text}'")))?;
            out.push(Tok::Num(x));
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(ch) {
            out.push(Tok::Op(ch));
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character '{ch}'")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
    scope: Scope,
}

impl Parser {
    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Tok::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.peek_op() == Some(op) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Expr(format!("expected '{op}'")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { add(lhs, rhs) } else { sub(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { mul(lhs, rhs) } else { div(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(neg(self.unary()?))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let e = self.unary()?;
            let n = as_const(&e)
                .ok_or_else(|| Error::Expr("exponent must be a constant".into()))?;
            if n.fract() != 0.0 || n.abs() > 64.0 {
                return Err(Error::Expr(format!("exponent {n} is not a small integer")));
            }
            return Ok(pow(base, n as i32));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::Expr("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(x) => Ok(c(x)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Op(o) => Err(Error::Expr(format!("unexpected '{o}'"))),
            Tok::Ident(name) => {
                if matches!(name.as_str(), "sin" | "cos" | "exp") {
                    self.expect('(')?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(match name.as_str() {
                        "sin" => sin(arg),
                        "cos" => cos(arg),
                        _ => exp(arg),
                    });
                }
                self.ident(&name)
            }
        }
    }

    fn ident(&self, name: &str) -> Result<Expr> {
        if name == "pi" {
            return Ok(c(std::f64::consts::PI));
        }
        if name == "t" {
            if !self.scope.time {
                return Err(Error::Expr("time variable 't' not allowed here".into()));
            }
            return Ok(Expr::Var(Var::T));
        }
        let mut chars = name.chars();
        let letter = chars.next().unwrap_or(' ');
        let rest: String = chars.collect();
        let index = if rest.is_empty() {
            1
        } else {
            rest.parse::<usize>()
                .map_err(|_| Error::Expr(format!("unknown identifier '{name}'")))?
        };
        if index == 0 || index > self.scope.dim {
            return Err(Error::Expr(format!(
                "'{name}' is out of range for dimension {}",
                self.scope.dim
            )));
        }
        match letter {
            'q' => Ok(Expr::Var(Var::Q(index - 1))),
            'v' | 'p' if self.scope.fiber == Some(letter) => Ok(Expr::Var(Var::W(index - 1))),
            _ => Err(Error::Expr(format!("identifier '{name}' not allowed here"))),
        }
    }
}
