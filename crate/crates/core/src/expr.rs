//! Real-valued expressions of one variable `x`.
//!
//! Expressions are parsed from text, evaluated in IEEE double precision,
//! differentiated symbolically and simplified by constant folding plus the
//! usual 0/1 identities. Named parameters (`mu`, `delta`, ...) are bound at
//! evaluation time, or substituted once with [`Expression::bind`] so that hot
//! loops do not pay for map lookups.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Parameter bindings.
pub type Bindings = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("parameter `{0}` is not bound")]
    UnboundParameter(String),
    #[error("domain error in {op}({arg}) at x = {x}")]
    Domain { op: &'static str, arg: f64, x: f64 },
    #[error("division by zero at x = {x}")]
    DivisionByZero { x: f64 },
    #[error("result is NaN at x = {x}")]
    NotANumber { x: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("`{0}` is not differentiable everywhere")]
    NonDifferentiable(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Const(f64),
    Var,
    Param(String),
    Neg(Box<Expression>),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, Box<Expression>),
    Call(Func, Box<Expression>),
    Min(Box<Expression>, Box<Expression>),
    Max(Box<Expression>, Box<Expression>),
}

use Expression as E;

fn bx(e: Expression) -> Box<Expression> {
    Box::new(e)
}

// Constructors used by the symbolic code in this crate.
impl Expression {
    pub fn constant(c: f64) -> Self {
        E::Const(c)
    }
    pub fn x() -> Self {
        E::Var
    }
    pub fn param(name: &str) -> Self {
        E::Param(name.to_string())
    }
    pub fn add(a: Expression, b: Expression) -> Self {
        E::Add(bx(a), bx(b))
    }
    pub fn sub(a: Expression, b: Expression) -> Self {
        E::Sub(bx(a), bx(b))
    }
    pub fn mul(a: Expression, b: Expression) -> Self {
        E::Mul(bx(a), bx(b))
    }
    pub fn div(a: Expression, b: Expression) -> Self {
        E::Div(bx(a), bx(b))
    }
    pub fn pow(a: Expression, b: Expression) -> Self {
        E::Pow(bx(a), bx(b))
    }
    pub fn neg(a: Expression) -> Self {
        E::Neg(bx(a))
    }
    pub fn call(f: Func, a: Expression) -> Self {
        E::Call(f, bx(a))
    }
}

impl Expression {
    pub fn parse(text: &str) -> Result<Expression, ParseError> {
        let mut p = Parser { src: text, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < text.len() {
            return Err(p.syntax("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: f64, params: &Bindings) -> Result<f64, EvalError> {
        let v = self.eval_inner(x, Some(params))?;
        if v.is_nan() {
            return Err(EvalError::NotANumber { x });
        }
        Ok(v)
    }

    /// Evaluate an expression with no free parameters.
    pub fn eval_at(&self, x: f64) -> Result<f64, EvalError> {
        let v = self.eval_inner(x, None)?;
        if v.is_nan() {
            return Err(EvalError::NotANumber { x });
        }
        Ok(v)
    }

    /// Evaluate, mapping every error to NaN. Intended for integrands, whose
    /// consumers reject non-finite values themselves.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.eval_inner(x, None).unwrap_or(f64::NAN)
    }

    fn eval_inner(&self, x: f64, params: Option<&Bindings>) -> Result<f64, EvalError> {
        Ok(match self {
            E::Const(c) => *c,
            E::Var => x,
            E::Param(name) => *params
                .and_then(|p| p.get(name))
                .ok_or_else(|| EvalError::UnboundParameter(name.clone()))?,
            E::Neg(a) => -a.eval_inner(x, params)?,
            E::Add(a, b) => a.eval_inner(x, params)? + b.eval_inner(x, params)?,
            E::Sub(a, b) => a.eval_inner(x, params)? - b.eval_inner(x, params)?,
            E::Mul(a, b) => a.eval_inner(x, params)? * b.eval_inner(x, params)?,
            E::Div(a, b) => {
                let num = a.eval_inner(x, params)?;
                let den = b.eval_inner(x, params)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero { x });
                }
                num / den
            }
            E::Pow(a, b) => {
                let base = a.eval_inner(x, params)?;
                let exponent = b.eval_inner(x, params)?;
                if base == 0.0 && exponent < 0.0 {
                    return Err(EvalError::DivisionByZero { x });
                }
                let v = pow(base, exponent);
                if v.is_nan() && !base.is_nan() && !exponent.is_nan() {
                    return Err(EvalError::Domain { op: "pow", arg: base, x });
                }
                v
            }
            E::Call(f, a) => {
                let u = a.eval_inner(x, params)?;
                match f {
                    Func::Exp => u.exp(),
                    Func::Log => {
                        if u <= 0.0 {
                            return Err(EvalError::Domain { op: "log", arg: u, x });
                        }
                        u.ln()
                    }
                    Func::Sqrt => {
                        if u < 0.0 {
                            return Err(EvalError::Domain { op: "sqrt", arg: u, x });
                        }
                        u.sqrt()
                    }
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Abs => u.abs(),
                }
            }
            E::Min(a, b) => a.eval_inner(x, params)?.min(b.eval_inner(x, params)?),
            E::Max(a, b) => a.eval_inner(x, params)?.max(b.eval_inner(x, params)?),
        })
    }

    /// Substitute every parameter by its bound value and simplify.
    pub fn bind(&self, params: &Bindings) -> Result<Expression, EvalError> {
        fn go(e: &Expression, params: &Bindings) -> Result<Expression, EvalError> {
            Ok(match e {
                E::Param(name) => E::Const(
                    *params
                        .get(name)
                        .ok_or_else(|| EvalError::UnboundParameter(name.clone()))?,
                ),
                E::Const(_) | E::Var => e.clone(),
                _ => e.map_children(|c| go(c, params))?,
            })
        }
        Ok(go(self, params)?.simplify())
    }

    /// Replace the variable `x` by `by`.
    pub fn substitute(&self, by: &Expression) -> Expression {
        match self {
            E::Var => by.clone(),
            E::Const(_) | E::Param(_) => self.clone(),
            _ => self
                .map_children(|c| Ok::<_, EvalError>(c.substitute(by)))
                .expect("infallible"),
        }
    }

    fn map_children<Err>(
        &self,
        mut f: impl FnMut(&Expression) -> Result<Expression, Err>,
    ) -> Result<Expression, Err> {
        Ok(match self {
            E::Const(_) | E::Var | E::Param(_) => self.clone(),
            E::Neg(a) => E::Neg(bx(f(a)?)),
            E::Add(a, b) => E::Add(bx(f(a)?), bx(f(b)?)),
            E::Sub(a, b) => E::Sub(bx(f(a)?), bx(f(b)?)),
            E::Mul(a, b) => E::Mul(bx(f(a)?), bx(f(b)?)),
            E::Div(a, b) => E::Div(bx(f(a)?), bx(f(b)?)),
            E::Pow(a, b) => E::Pow(bx(f(a)?), bx(f(b)?)),
            E::Call(func, a) => E::Call(*func, bx(f(a)?)),
            E::Min(a, b) => E::Min(bx(f(a)?), bx(f(b)?)),
            E::Max(a, b) => E::Max(bx(f(a)?), bx(f(b)?)),
        })
    }

    pub fn depends_on_x(&self) -> bool {
        match self {
            E::Var => true,
            E::Const(_) | E::Param(_) => false,
            E::Neg(a) | E::Call(_, a) => a.depends_on_x(),
            E::Add(a, b)
            | E::Sub(a, b)
            | E::Mul(a, b)
            | E::Div(a, b)
            | E::Pow(a, b)
            | E::Min(a, b)
            | E::Max(a, b) => a.depends_on_x() || b.depends_on_x(),
        }
    }

    /// Names of the free parameters.
    pub fn parameters(&self) -> Vec<String> {
        fn walk(e: &Expression, out: &mut Vec<String>) {
            match e {
                E::Param(n) => {
                    if !out.contains(n) {
                        out.push(n.clone())
                    }
                }
                E::Const(_) | E::Var => {}
                E::Neg(a) | E::Call(_, a) => walk(a, out),
                E::Add(a, b)
                | E::Sub(a, b)
                | E::Mul(a, b)
                | E::Div(a, b)
                | E::Pow(a, b)
                | E::Min(a, b)
                | E::Max(a, b) => {
                    walk(a, out);
                    walk(b, out)
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Symbolic derivative with respect to `x`, simplified.
    pub fn differentiate(&self) -> Result<Expression, DiffError> {
        Ok(self.derive()?.simplify())
    }

    fn derive(&self) -> Result<Expression, DiffError> {
        Ok(match self {
            E::Const(_) | E::Param(_) => E::Const(0.0),
            E::Var => E::Const(1.0),
            E::Neg(a) => E::neg(a.derive()?),
            E::Add(a, b) => E::add(a.derive()?, b.derive()?),
            E::Sub(a, b) => E::sub(a.derive()?, b.derive()?),
            E::Mul(a, b) => E::add(
                E::mul(a.derive()?, (**b).clone()),
                E::mul((**a).clone(), b.derive()?),
            ),
            E::Div(a, b) => E::div(
                E::sub(
                    E::mul(a.derive()?, (**b).clone()),
                    E::mul((**a).clone(), b.derive()?),
                ),
                E::pow((**b).clone(), E::Const(2.0)),
            ),
            E::Pow(a, b) => {
                if !b.depends_on_x() {
                    // n u^(n-1) u'
                    E::mul(
                        E::mul(
                            (**b).clone(),
                            E::pow((**a).clone(), E::sub((**b).clone(), E::Const(1.0))),
                        ),
                        a.derive()?,
                    )
                } else {
                    // u^v (v' ln u + v u'/u)
                    E::mul(
                        self.clone(),
                        E::add(
                            E::mul(b.derive()?, E::call(Func::Log, (**a).clone())),
                            E::div(E::mul((**b).clone(), a.derive()?), (**a).clone()),
                        ),
                    )
                }
            }
            E::Call(f, a) => {
                let da = a.derive()?;
                let u = (**a).clone();
                let outer = match f {
                    Func::Exp => self.clone(),
                    Func::Log => E::div(E::Const(1.0), u),
                    Func::Sqrt => E::div(E::Const(1.0), E::mul(E::Const(2.0), self.clone())),
                    Func::Sin => E::call(Func::Cos, u),
                    Func::Cos => E::neg(E::call(Func::Sin, u)),
                    Func::Abs => return Err(DiffError::NonDifferentiable("abs")),
                };
                E::mul(outer, da)
            }
            E::Min(..) => return Err(DiffError::NonDifferentiable("min")),
            E::Max(..) => return Err(DiffError::NonDifferentiable("max")),
        })
    }

    /// Constant folding and 0/1 identities.
    pub fn simplify(&self) -> Expression {
        let e = self
            .map_children(|c| Ok::<_, EvalError>(c.simplify()))
            .expect("infallible");
        let folded = match &e {
            E::Const(_) | E::Var | E::Param(_) => None,
            _ if !e.depends_on_x() && e.parameters().is_empty() => e
                .eval_at(0.0)
                .ok()
                .filter(|v| v.is_finite())
                .map(E::Const),
            _ => None,
        };
        if let Some(c) = folded {
            return c;
        }
        let is = |x: &Expression, v: f64| matches!(x, E::Const(c) if *c == v);
        match e {
            E::Neg(a) => match *a {
                E::Neg(inner) => *inner,
                E::Const(c) => E::Const(-c),
                other => E::neg(other),
            },
            E::Add(a, b) if is(&a, 0.0) => *b,
            E::Add(a, b) if is(&b, 0.0) => *a,
            E::Sub(a, b) if is(&b, 0.0) => *a,
            E::Sub(a, b) if is(&a, 0.0) => E::neg(*b).simplify(),
            E::Mul(a, b) if is(&a, 0.0) || is(&b, 0.0) => E::Const(0.0),
            E::Mul(a, b) if is(&a, 1.0) => *b,
            E::Mul(a, b) if is(&b, 1.0) => *a,
            E::Div(a, b) if is(&b, 1.0) => *a,
            E::Div(a, b) if is(&a, 0.0) && !is(&b, 0.0) => E::Const(0.0),
            E::Pow(a, b) if is(&b, 1.0) => *a,
            E::Pow(_, b) if is(&b, 0.0) => E::Const(1.0),
            other => other,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            E::Add(..) | E::Sub(..) => 1,
            E::Mul(..) | E::Div(..) => 2,
            E::Neg(_) => 3,
            E::Pow(..) => 4,
            _ => 5,
        }
    }
}

#[inline]
fn pow(base: f64, exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, child: &Expression, paren: bool| {
            if paren {
                write!(f, "({child})")
            } else {
                write!(f, "{child}")
            }
        };
        let p = self.precedence();
        match self {
            E::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            E::Var => write!(f, "x"),
            E::Param(n) => write!(f, "{n}"),
            E::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, a.precedence() < 4)
            }
            E::Add(a, b) | E::Sub(a, b) | E::Mul(a, b) | E::Div(a, b) => {
                let op = match self {
                    E::Add(..) => "+",
                    E::Sub(..) => "-",
                    E::Mul(..) => "*",
                    _ => "/",
                };
                // left-associative: right child needs parens at equal precedence
                wrap(f, a, a.precedence() < p)?;
                write!(f, " {op} ")?;
                wrap(f, b, b.precedence() <= p)
            }
            E::Pow(a, b) => {
                wrap(f, a, a.precedence() <= 4)?;
                write!(f, "^")?;
                wrap(f, b, b.precedence() < 4)
            }
            E::Call(func, a) => write!(f, "{}({a})", func.name()),
            E::Min(a, b) => write!(f, "min({a}, {b})"),
            E::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}

impl FromStr for Expression {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

impl Serialize for Expression {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expression::parse(&text).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = E::add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = E::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = E::mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = E::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    // unary := '-' unary | power ;  binds looser than '^'
    fn unary(&mut self) -> Result<Expression, ParseError> {
        if self.eat(b'-') {
            return Ok(E::neg(self.unary()?));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    // power := atom ('^' unary)?  right-associative
    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            return Ok(E::pow(base, self.unary()?));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || c == b'_' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let name = &self.src[start..self.pos];
                if self.eat(b'(') {
                    let mut args = vec![self.expr()?];
                    while self.eat(b',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(b')') {
                        return Err(self.syntax("expected `)` after arguments"));
                    }
                    return self.call(name, start, args);
                }
                Ok(match name {
                    "x" => E::Var,
                    "pi" => E::Const(std::f64::consts::PI),
                    _ => E::Param(name.to_string()),
                })
            }
            Some(_) => Err(self.syntax("unexpected character")),
        }
    }

    fn call(
        &self,
        name: &str,
        offset: usize,
        mut args: Vec<Expression>,
    ) -> Result<Expression, ParseError> {
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(ParseError::Syntax {
                    offset,
                    message: format!("`{name}` takes {n} argument(s), got {}", args.len()),
                })
            }
        };
        match name {
            "min" | "max" => {
                arity(2)?;
                let b = args.pop().unwrap();
                let a = args.pop().unwrap();
                Ok(if name == "min" {
                    E::Min(bx(a), bx(b))
                } else {
                    E::Max(bx(a), bx(b))
                })
            }
            _ => match Func::from_name(name) {
                Some(f) => {
                    arity(1)?;
                    Ok(E::call(f, args.pop().unwrap()))
                }
                None => Err(ParseError::UnknownIdentifier {
                    offset,
                    name: name.to_string(),
                }),
            },
        }
    }

    fn number(&mut self) -> Result<Expression, ParseError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < bytes.len() && (bytes[look] == b'+' || bytes[look] == b'-') {
                look += 1;
            }
            if look < bytes.len() && bytes[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(E::Const)
            .map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{}`", &self.src[start..self.pos]),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expression {
        Expression::parse(s).unwrap()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(p("1/x"), E::div(E::Const(1.0), E::Var));
        assert_eq!(p("1/x").eval_at(2.0).unwrap(), 0.5);
        let mut b = Bindings::new();
        b.insert("mu".into(), 1.5);
        assert_eq!(p("2*mu*x").eval(2.0, &b).unwrap(), 6.0);
        assert_eq!(p("x^-4").eval_at(2.0).unwrap(), 0.0625);
    }

    #[test]
    fn precedence() {
        assert_eq!(p("-x^2").eval_at(3.0).unwrap(), -9.0);
        assert_eq!(p("2^3^2").eval_at(0.0).unwrap(), 512.0);
        assert_eq!(p("1 - 2 - 3").eval_at(0.0).unwrap(), -4.0);
        assert_eq!(p("8 / 4 / 2").eval_at(0.0).unwrap(), 1.0);
        assert_eq!(p("2*-x").eval_at(3.0).unwrap(), -6.0);
        assert_eq!(p("1.5e-3*x").eval_at(2.0).unwrap(), 3e-3);
        assert_eq!(p("max(x, 2) + min(x, 2)").eval_at(5.0).unwrap(), 7.0);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match Expression::parse("1 + * x") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match Expression::parse("foo(x)") {
            Err(ParseError::UnknownIdentifier { offset, name }) => {
                assert_eq!((offset, name.as_str()), (0, "foo"))
            }
            other => panic!("{other:?}"),
        }
        assert!(Expression::parse("(x").is_err());
        assert!(Expression::parse("x)").is_err());
        assert!(Expression::parse("min(x)").is_err());
    }

    #[test]
    fn eval_errors() {
        assert!(matches!(
            p("log(x)").eval_at(-1.0),
            Err(EvalError::Domain { op: "log", .. })
        ));
        assert!(matches!(p("1/x").eval_at(0.0), Err(EvalError::DivisionByZero { .. })));
        assert!(matches!(
            p("mu*x").eval_at(1.0),
            Err(EvalError::UnboundParameter(_))
        ));
        assert_eq!(p("exp(x)").eval_at(1000.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn derivative_examples() {
        let d = p("x^2").differentiate().unwrap();
        assert_eq!(d.eval_at(3.0).unwrap(), 6.0);
        let d = p("exp(2*x)").differentiate().unwrap();
        assert_eq!(d.eval_at(0.0).unwrap(), 2.0);
        // sqrt(f)/sigma with f = x^-4, sigma = 1
        let g1 = p("sqrt(x^-4)/1");
        let d = g1.differentiate().unwrap();
        let v = d.eval_at(2.0).unwrap();
        assert!((v + 0.25).abs() < 1e-12, "{v}");
        let h = 1e-5;
        let fd = (g1.eval_at(2.0 + h).unwrap() - g1.eval_at(2.0 - h).unwrap()) / (2.0 * h);
        assert!((fd - v).abs() < 1e-6);
    }

    #[test]
    fn non_differentiable_nodes_rejected() {
        assert!(p("abs(x)").differentiate().is_err());
        assert!(p("1/(1+max(x,0))").differentiate().is_err());
    }

    #[test]
    fn variable_exponent() {
        let d = p("x^x").differentiate().unwrap();
        let x: f64 = 1.7;
        let want = x.powf(x) * (x.ln() + 1.0);
        assert!((d.eval_at(x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn simplify_identities() {
        assert_eq!(p("0 + x*1").simplify(), E::Var);
        assert_eq!(p("x^1 - 0").simplify(), E::Var);
        assert_eq!(p("2*3 + x*0").simplify(), E::Const(6.0));
        assert_eq!(p("--x").simplify(), E::Var);
        assert_eq!(p("x^0").simplify(), E::Const(1.0));
    }

    #[test]
    fn bind_and_substitute() {
        let mut b = Bindings::new();
        b.insert("delta".into(), 3.0);
        let e = p("(delta - 1)/(2*x)").bind(&b).unwrap();
        assert!(e.parameters().is_empty());
        assert_eq!(e.eval_at(1.0).unwrap(), 1.0);
        let s = p("exp(-x)").substitute(&p("log(x)"));
        assert!((s.eval_at(4.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn display_round_trip() {
        for s in [
            "1/x",
            "-x^2",
            "(-x)^2",
            "x^-4",
            "2^3^2",
            "(2^3)^2",
            "a - (b - c)",
            "a / (b * c)",
            "exp(-2*mu*x) + log(1 + x^2)",
            "min(x, 1e-30) * max(-x, 2)",
            "x^(1/2)",
        ] {
            let e = p(s);
            assert_eq!(p(&e.to_string()), e, "{s} -> {e}");
        }
    }
}
