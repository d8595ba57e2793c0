//! A small arithmetic language for coefficient fields and boundary traces.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?            right associative
//! primary := number | 'i' | 'pi' | 'x' | 'y' | 'z'
//!          | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | tanh | sqrt | abs
//! ```
//!
//! Values are complex; `i` is the imaginary unit.

use std::fmt;

use crate::error::{Error, Result};
use crate::field::{sym_len, ScalarField, SymTensorField, VectorField, C64};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
}

impl Func {
    const ALL: [(&'static str, Func); 6] = [
        ("sin", Func::Sin),
        ("cos", Func::Cos),
        ("exp", Func::Exp),
        ("tanh", Func::Tanh),
        ("sqrt", Func::Sqrt),
        ("abs", Func::Abs),
    ];

    fn name(self) -> &'static str {
        Self::ALL.iter().find(|e| e.1 == self).unwrap().0
    }

    fn apply(self, z: C64) -> C64 {
        match self {
            Func::Sin => z.sin(),
            Func::Cos => z.cos(),
            Func::Exp => z.exp(),
            Func::Tanh => z.tanh(),
            Func::Sqrt => {
                if z.im == 0.0 && z.re >= 0.0 {
                    C64::new(z.re.sqrt(), 0.0)
                } else if z.im == 0.0 {
                    C64::new(0.0, (-z.re).sqrt())
                } else {
                    z.sqrt()
                }
            }
            Func::Abs => C64::new(z.norm(), 0.0),
        }
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
pub enum Expr {
    Num(f64),
    Imag,
    Pi,
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

pub fn parse(text: &str) -> Result<Expr> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("expected a number, variable, function or '('")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_close()?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                match word {
                    "i" => Ok(Expr::Imag),
                    "pi" => Ok(Expr::Pi),
                    "x" => Ok(Expr::Var(0)),
                    "y" => Ok(Expr::Var(1)),
                    "z" => Ok(Expr::Var(2)),
                    _ => {
                        let Some(&(_, f)) = Func::ALL.iter().find(|e| e.0 == word) else {
                            self.pos = start;
                            return Err(self.error(format!("unknown identifier '{word}'")));
                        };
                        if self.peek() != Some(b'(') {
                            return Err(self.error(format!("expected '(' after '{word}'")));
                        }
                        self.pos += 1;
                        let arg = self.expr()?;
                        self.expect_close()?;
                        Ok(Expr::Call(f, Box::new(arg)))
                    }
                }
            }
            Some(c) => Err(self.error(format!("unexpected character '{}'", c as char))),
        }
    }

    fn expect_close(&mut self) -> Result<()> {
        if self.peek() != Some(b')') {
            return Err(self.error("expected ')'"));
        }
        self.pos += 1;
        Ok(())
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        let mut p = self.pos;
        digits(&mut p);
        if p < s.len() && s[p] == b'.' {
            p += 1;
            digits(&mut p);
        }
        if p < s.len() && (s[p] == b'e' || s[p] == b'E') {
            let mut q = p + 1;
            if q < s.len() && (s[q] == b'+' || s[q] == b'-') {
                q += 1;
            }
            if q < s.len() && s[q].is_ascii_digit() {
                digits(&mut q);
                p = q;
            }
        }
        let text = std::str::from_utf8(&s[start..p]).unwrap();
        let value: f64 = text.parse().map_err(|_| self.error(format!("malformed number '{text}'")))?;
        self.pos = p;
        Ok(Expr::Num(value))
    }
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool| {
            if paren {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Imag => write!(f, "i"),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(k) => write!(f, "{}", ["x", "y", "z"][*k]),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, prec(a) < 3)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Bin(op, a, b) => {
                let (p, sym) = match op {
                    BinOp::Add => (1, "+"),
                    BinOp::Sub => (1, "-"),
                    BinOp::Mul => (2, "*"),
                    BinOp::Div => (2, "/"),
                    BinOp::Pow => (4, "^"),
                };
                if *op == BinOp::Pow {
                    // base binds tighter than '^'; the exponent is a unary
                    wrap(f, a, prec(a) <= 4)?;
                    write!(f, "^")?;
                    wrap(f, b, prec(b) < 3)
                } else {
                    wrap(f, a, prec(a) < p)?;
                    write!(f, "{sym}")?;
                    wrap(f, b, prec(b) <= p)
                }
            }
        }
    }
}

fn pow(base: C64, exp: C64) -> C64 {
    if exp.im == 0.0 {
        let e = exp.re;
        if e.fract() == 0.0 && e.abs() <= i32::MAX as f64 {
            return if base.im == 0.0 {
                C64::new(base.re.powi(e as i32), 0.0)
            } else {
                base.powi(e as i32)
            };
        }
        if base.im == 0.0 && base.re >= 0.0 {
            return C64::new(base.re.powf(e), 0.0);
        }
    }
    if base == C64::new(0.0, 0.0) {
        return C64::new(0.0, 0.0);
    }
    base.powc(exp)
}

impl Expr {
    /// Evaluates at `point`, whose length supplies the available variables.
    pub fn eval(&self, point: &[f64]) -> Result<C64> {
        let fail = |message: String| Error::Eval {
            point: point.to_vec(),
            message,
        };
        Ok(match self {
            Expr::Num(v) => C64::new(*v, 0.0),
            Expr::Imag => C64::new(0.0, 1.0),
            Expr::Pi => C64::new(std::f64::consts::PI, 0.0),
            Expr::Var(k) => {
                let v = point
                    .get(*k)
                    .ok_or_else(|| fail(format!("variable '{}' not defined in {} dimensions", ["x", "y", "z"][*k], point.len())))?;
                C64::new(*v, 0.0)
            }
            Expr::Neg(a) => -a.eval(point)?,
            Expr::Call(func, a) => func.apply(a.eval(point)?),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(point)?, b.eval(point)?);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == C64::new(0.0, 0.0) {
                            return Err(fail("division by zero".into()));
                        }
                        if y.im == 0.0 {
                            C64::new(x.re / y.re, x.im / y.re)
                        } else {
                            x / y
                        }
                    }
                    BinOp::Pow => pow(x, y),
                }
            }
        })
    }

    /// Highest variable index used, plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Var(k) => k + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Bin(_, a, b) => a.arity().max(b.arity()),
            _ => 0,
        }
    }
}

/// Samples a scalar expression at every grid point.
pub fn materialize_scalar(e: &Expr, grid: &Grid) -> Result<ScalarField> {
    let n = grid.dim();
    let values = (0..grid.len())
        .map(|p| e.eval(&grid.coords(p)[..n]))
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(grid, values)
}

fn materialize_many(exprs: &[Expr], grid: &Grid, want: usize, kind: &str) -> Result<Vec<C64>> {
    if exprs.len() != want {
        return Err(Error::Config(format!(
            "{kind} field on a {}-D grid needs {want} expressions, got {}",
            grid.dim(),
            exprs.len()
        )));
    }
    let n = grid.dim();
    let mut values = Vec::with_capacity(grid.len() * want);
    for p in 0..grid.len() {
        let x = grid.coords(p);
        for e in exprs {
            values.push(e.eval(&x[..n])?);
        }
    }
    Ok(values)
}

pub fn materialize_vector(exprs: &[Expr], grid: &Grid) -> Result<VectorField> {
    let values = materialize_many(exprs, grid, grid.dim(), "vector")?;
    VectorField::new(grid, values)
}

/// Expressions are given in symmetric storage order.
pub fn materialize_tensor(exprs: &[Expr], grid: &Grid) -> Result<SymTensorField> {
    let values = materialize_many(exprs, grid, sym_len(grid.dim()), "symmetric tensor")?;
    SymTensorField::new(grid, values)
}

/// Parses a list of expression strings.
pub fn parse_all<S: AsRef<str>>(texts: &[S]) -> Result<Vec<Expr>> {
    texts.iter().map(|t| parse(t.as_ref())).collect()
}
