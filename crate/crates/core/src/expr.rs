//! A small arithmetic expression language.
//!
//! Grammar (usual precedence, `^` binds tightest and is right associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | name | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | sqrt
//! ```
//!
//! `pi` is a predefined constant. Variable names are resolved against a
//! caller-supplied list. Expressions evaluate either to plain `f64` or to a
//! second-order [`Jet`] carrying the exact gradient and Hessian.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
        }
    }

    /// Value, first and second derivative at `x`.
    fn taylor(self, x: f64) -> (f64, f64, f64) {
        match self {
            Func::Sin => (x.sin(), x.cos(), -x.sin()),
            Func::Cos => (x.cos(), -x.sin(), -x.cos()),
            Func::Sqrt => {
                let s = x.sqrt();
                (s, 0.5 / s, -0.25 / (s * x))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(source: &str, vars: &[&str]) -> Result<Expr> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, pos: 0, vars, len: source.len() };
        let expr = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(Error::Expression { column: tok.column, message: format!("unexpected `{}`", tok.kind) });
        }
        Ok(expr)
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => vars[*i],
            Expr::Neg(a) => -a.eval(vars),
            Expr::Add(a, b) => a.eval(vars) + b.eval(vars),
            Expr::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Expr::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Expr::Div(a, b) => a.eval(vars) / b.eval(vars),
            Expr::Pow(a, b) => match b.constant() {
                Some(e) => powc(a.eval(vars), e),
                None => a.eval(vars).powf(b.eval(vars)),
            },
            Expr::Call(f, a) => f.taylor(a.eval(vars)).0,
        }
    }

    /// Value, gradient and Hessian with respect to all variables.
    pub fn eval_jet(&self, vars: &[f64]) -> Jet {
        let n = vars.len();
        match self {
            Expr::Const(c) => Jet::constant(*c, n),
            Expr::Var(i) => Jet::variable(vars[*i], *i, n),
            Expr::Neg(a) => a.eval_jet(vars).scale(-1.0),
            Expr::Add(a, b) => a.eval_jet(vars).add(&b.eval_jet(vars), 1.0),
            Expr::Sub(a, b) => a.eval_jet(vars).add(&b.eval_jet(vars), -1.0),
            Expr::Mul(a, b) => a.eval_jet(vars).mul(&b.eval_jet(vars)),
            Expr::Div(a, b) => {
                let den = b.eval_jet(vars);
                let v = den.value;
                a.eval_jet(vars).mul(&den.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)))
            }
            Expr::Pow(a, b) => match b.constant() {
                Some(e) => {
                    let base = a.eval_jet(vars);
                    let x = base.value;
                    let d1 = if e == 0.0 { 0.0 } else { e * powc(x, e - 1.0) };
                    let d2 = if e == 0.0 || e == 1.0 { 0.0 } else { e * (e - 1.0) * powc(x, e - 2.0) };
                    base.chain(powc(x, e), d1, d2)
                }
                None => {
                    // a^b = exp(b ln a), requires a > 0.
                    let base = a.eval_jet(vars);
                    let x = base.value;
                    let ln = base.chain(x.ln(), 1.0 / x, -1.0 / (x * x));
                    let prod = ln.mul(&b.eval_jet(vars));
                    let ev = prod.value.exp();
                    prod.chain(ev, ev, ev)
                }
            },
            Expr::Call(f, a) => {
                let inner = a.eval_jet(vars);
                let (v, d1, d2) = f.taylor(inner.value);
                inner.chain(v, d1, d2)
            }
        }
    }

    /// Value when the expression does not depend on any variable.
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Var(_) => None,
            Expr::Neg(a) => a.constant().map(|v| -v),
            Expr::Call(f, a) => a.constant().map(|v| f.taylor(v).0),
            Expr::Add(a, b) => Some(a.constant()? + b.constant()?),
            Expr::Sub(a, b) => Some(a.constant()? - b.constant()?),
            Expr::Mul(a, b) => Some(a.constant()? * b.constant()?),
            Expr::Div(a, b) => Some(a.constant()? / b.constant()?),
            Expr::Pow(a, b) => Some(powc(a.constant()?, b.constant()?)),
        }
    }

    /// Replace variable `index` by `value` and shift higher indices down by one.
    pub fn bind(&self, index: usize, value: f64) -> Expr {
        let rec = |e: &Expr| Box::new(e.bind(index, value));
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) if *i == index => Expr::Const(value),
            Expr::Var(i) if *i > index => Expr::Var(i - 1),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Neg(a) => Expr::Neg(rec(a)),
            Expr::Add(a, b) => Expr::Add(rec(a), rec(b)),
            Expr::Sub(a, b) => Expr::Sub(rec(a), rec(b)),
            Expr::Mul(a, b) => Expr::Mul(rec(a), rec(b)),
            Expr::Div(a, b) => Expr::Div(rec(a), rec(b)),
            Expr::Pow(a, b) => Expr::Pow(rec(a), rec(b)),
            Expr::Call(f, a) => Expr::Call(*f, rec(a)),
        }
    }

    /// Renumber variables through `f`.
    pub fn map_vars(&self, f: &dyn Fn(usize) -> usize) -> Expr {
        let rec = |e: &Expr| Box::new(e.map_vars(f));
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => Expr::Var(f(*i)),
            Expr::Neg(a) => Expr::Neg(rec(a)),
            Expr::Add(a, b) => Expr::Add(rec(a), rec(b)),
            Expr::Sub(a, b) => Expr::Sub(rec(a), rec(b)),
            Expr::Mul(a, b) => Expr::Mul(rec(a), rec(b)),
            Expr::Div(a, b) => Expr::Div(rec(a), rec(b)),
            Expr::Pow(a, b) => Expr::Pow(rec(a), rec(b)),
            Expr::Call(g, a) => Expr::Call(*g, rec(a)),
        }
    }

    /// Highest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(a) | Expr::Call(_, a) => a.max_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }
}

/// Power with a constant exponent; integral exponents go through `powi` so
/// negative bases stay finite.
fn powc(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < 64.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

/// Second-order forward-mode jet: value, gradient and dense Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Row-major `n x n`.
    pub hess: Vec<f64>,
}

impl Jet {
    fn constant(c: f64, n: usize) -> Self {
        Self { value: c, grad: vec![0.0; n], hess: vec![0.0; n * n] }
    }

    fn variable(v: f64, i: usize, n: usize) -> Self {
        let mut j = Self::constant(v, n);
        j.grad[i] = 1.0;
        j
    }

    fn dim(&self) -> usize {
        self.grad.len()
    }

    fn scale(mut self, s: f64) -> Self {
        self.value *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
        self.hess.iter_mut().for_each(|h| *h *= s);
        self
    }

    fn add(mut self, other: &Jet, sign: f64) -> Self {
        self.value += sign * other.value;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += sign * b;
        }
        for (a, b) in self.hess.iter_mut().zip(&other.hess) {
            *a += sign * b;
        }
        self
    }

    fn mul(&self, other: &Jet) -> Self {
        let n = self.dim();
        let (a, b) = (self.value, other.value);
        let grad = (0..n).map(|i| a * other.grad[i] + b * self.grad[i]).collect();
        let mut hess = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                hess[k] =
                    a * other.hess[k] + b * self.hess[k] + self.grad[i] * other.grad[j] + other.grad[i] * self.grad[j];
            }
        }
        Self { value: a * b, grad, hess }
    }

    /// Compose with a scalar function given its value and first two
    /// derivatives at `self.value`.
    fn chain(&self, v: f64, d1: f64, d2: f64) -> Self {
        let n = self.dim();
        let grad = self.grad.iter().map(|g| d1 * g).collect();
        let mut hess = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                hess[k] = d1 * self.hess[k] + d2 * self.grad[i] * self.grad[j];
            }
        }
        Self { value: v, grad, hess }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "v{i}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(g, a) => write!(f, "{}({a})", g.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Number(n) => write!(f, "{n}"),
            TokenKind::Ident(s) => write!(f, "{s}"),
            TokenKind::Op(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    /// 1-based.
    column: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent suffix: 1e-3, 2.5E+4
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
            let value = text
                .parse::<f64>()
                .map_err(|_| Error::Expression { column, message: format!("malformed number `{text}`") })?;
            out.push(Token { kind: TokenKind::Number(value), column });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { kind: TokenKind::Ident(chars[start..i].iter().collect()), column });
        } else if "+-*/^()".contains(c) {
            out.push(Token { kind: TokenKind::Op(c), column });
            i += 1;
        } else {
            return Err(Error::Expression { column, message: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    vars: &'a [&'a str],
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: TokenKind::Op(c), .. }) if *c == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn end_column(&self) -> usize {
        self.len + 1
    }

    fn expect_op(&mut self, op: char) -> Result<()> {
        if self.eat_op(op) {
            return Ok(());
        }
        let column = self.peek().map_or(self.end_column(), |t| t.column);
        Err(Error::Expression { column, message: format!("expected `{op}`") })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat_op('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat_op('^') {
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return Err(Error::Expression {
                column: self.end_column(),
                message: "unexpected end of expression".into(),
            });
        };
        self.pos += 1;
        match tok.kind {
            TokenKind::Number(v) => Ok(Expr::Const(v)),
            TokenKind::Op('(') => {
                let inner = self.expr()?;
                self.expect_op(')')?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(func) = func {
                    self.expect_op('(')?;
                    let arg = self.expr()?;
                    self.expect_op(')')?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if let Some(i) = self.vars.iter().position(|v| *v == name) {
                    return Ok(Expr::Var(i));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                Err(Error::Expression { column: tok.column, message: format!("unknown name `{name}`") })
            }
            TokenKind::Op(c) => Err(Error::Expression { column: tok.column, message: format!("unexpected `{c}`") }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(e: &Expr, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (e.eval(&p) - e.eval(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn precedence_and_associativity() {
        let v = ["x", "y"];
        let e = Expr::parse("1 + 2 * 3 ^ 2", &v).unwrap();
        assert_eq!(e.eval(&[0.0, 0.0]), 19.0);
        let e = Expr::parse("2 ^ 3 ^ 2", &v).unwrap();
        assert_eq!(e.eval(&[0.0, 0.0]), 512.0);
        let e = Expr::parse("-x^2", &v).unwrap();
        assert_eq!(e.eval(&[3.0, 0.0]), -9.0);
        let e = Expr::parse("(x - y) / 2 - 1", &v).unwrap();
        assert_eq!(e.eval(&[5.0, 1.0]), 1.0);
        let e = Expr::parse("2.5e-1 * pi", &v).unwrap();
        assert!((e.eval(&[0.0, 0.0]) - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        let v = ["x"];
        match Expr::parse("x + * 2", &v) {
            Err(Error::Expression { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        match Expr::parse("x + q", &v) {
            Err(Error::Expression { column, message }) => {
                assert_eq!(column, 5);
                assert!(message.contains('q'));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(Expr::parse("sin(x", &v), Err(Error::Expression { column: 6, .. })));
        assert!(Expr::parse("x $ 2", &v).is_err());
        assert!(Expr::parse("", &v).is_err());
    }

    #[test]
    fn jet_matches_finite_differences() {
        let v = ["x", "y", "z"];
        let e = Expr::parse("(sqrt(x^2 + y^2) - 2)^2 + z^2 - 1 + sin(x*y)/cos(z) + x^y", &v).unwrap();
        let p = [1.3, 0.7, 0.4];
        let jet = e.eval_jet(&p);
        assert!((jet.value - e.eval(&p)).abs() < 1e-14);
        let g = fd_grad(&e, &p);
        for (i, gi) in g.iter().enumerate() {
            assert!((jet.grad[i] - gi).abs() < 1e-7, "grad {i}");
        }
        // Hessian rows against finite differences of the exact gradient.
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[i] += h;
            pm[i] -= h;
            let gp = e.eval_jet(&pp).grad;
            let gm = e.eval_jet(&pm).grad;
            for j in 0..3 {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!((jet.hess[i * 3 + j] - fd).abs() < 1e-6, "hess {i}{j}");
                assert!((jet.hess[i * 3 + j] - jet.hess[j * 3 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bind_substitutes_and_shifts() {
        let e = Expr::parse("x + 10*t + 100*y", &["x", "t", "y"]).unwrap();
        let b = e.bind(1, 0.5);
        assert_eq!(b.eval(&[1.0, 2.0]), 1.0 + 5.0 + 200.0);
        assert_eq!(b.max_var(), Some(1));
        assert_eq!(Expr::parse("2*pi", &[]).unwrap().constant(), Some(std::f64::consts::TAU));
    }

    #[test]
    fn negative_base_integer_power() {
        let e = Expr::parse("x^3", &["x"]).unwrap();
        assert_eq!(e.eval(&[-2.0]), -8.0);
        let j = e.eval_jet(&[-2.0]);
        assert_eq!(j.grad[0], 12.0);
        assert_eq!(j.hess[0], -12.0);
    }
}
