//! Coefficient expressions for inline model definitions.
//!
//! A small closed grammar over complex values: numeric literals, the spatial
//! variables `x` (and `y` in two dimensions), the time variable `t`, the
//! imaginary unit `i`, the operators `+ - * / ^` (integer exponents only),
//! parentheses, and the functions `exp`, `sin`, `cos`, `sqrt`, and
//! `pulse(t, ramp, width)`. Everything is evaluated pointwise; derivatives
//! fall back to finite differences inside the operator tables, so the grammar
//! does not need to differentiate.

use num_complex::Complex;
use std::fmt;

#[derive(Debug, Clone)]
pub struct ParseError {
    pub message: String,
    pub position: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (at byte {})", self.message, self.position)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Pulse,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Func::Pulse => 3,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Pulse => "pulse",
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    Imag,
    /// Spatial coordinate by axis index.
    Var(usize),
    Time,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Vec<Node>),
}

/// Parsed expression, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    uses_time: bool,
}

impl Expr {
    /// Parses `text` for a model in `dimension` spatial dimensions.
    pub fn parse(text: &str, dimension: usize) -> Result<Expr, ParseError> {
        let mut p = Parser {
            bytes: text.as_bytes(),
            pos: 0,
            dimension,
        };
        p.skip_ws();
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.err("unexpected trailing input"));
        }
        let uses_time = uses_time(&root);
        Ok(Expr { root, uses_time })
    }

    /// True when the expression mentions `t`.
    pub fn uses_time(&self) -> bool {
        self.uses_time
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Complex<f64> {
        eval(&self.root, t, x)
    }
}

fn uses_time(n: &Node) -> bool {
    match n {
        Node::Time => true,
        Node::Num(_) | Node::Imag | Node::Var(_) => false,
        Node::Neg(a) | Node::Pow(a, _) => uses_time(a),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            uses_time(a) || uses_time(b)
        }
        Node::Call(_, args) => args.iter().any(uses_time),
    }
}

fn eval(n: &Node, t: f64, x: &[f64]) -> Complex<f64> {
    match n {
        Node::Num(v) => Complex::new(*v, 0.0),
        Node::Imag => Complex::new(0.0, 1.0),
        Node::Var(axis) => Complex::new(x[*axis], 0.0),
        Node::Time => Complex::new(t, 0.0),
        Node::Neg(a) => -eval(a, t, x),
        Node::Add(a, b) => eval(a, t, x) + eval(b, t, x),
        Node::Sub(a, b) => eval(a, t, x) - eval(b, t, x),
        Node::Mul(a, b) => eval(a, t, x) * eval(b, t, x),
        Node::Div(a, b) => eval(a, t, x) / eval(b, t, x),
        Node::Pow(a, k) => eval(a, t, x).powi(*k),
        Node::Call(f, args) => {
            let a: Vec<Complex<f64>> = args.iter().map(|n| eval(n, t, x)).collect();
            match f {
                Func::Exp => a[0].exp(),
                Func::Sin => a[0].sin(),
                Func::Cos => a[0].cos(),
                Func::Sqrt => a[0].sqrt(),
                Func::Pulse => Complex::new(pulse(a[0].re, a[1].re, a[2].re), 0.0),
            }
        }
    }
}

/// Smooth switch envelope: quarter sine ramp over `[0, ramp]`, flat top,
/// cosine squared release over `[width - ramp, width]`, zero outside.
fn pulse(t: f64, ramp: f64, width: f64) -> f64 {
    if !(t > 0.0) || t >= width {
        return 0.0;
    }
    if t < ramp {
        let s = std::f64::consts::FRAC_PI_2 * t / ramp;
        s.sin()
    } else if t <= width - ramp {
        1.0
    } else {
        let s = std::f64::consts::FRAC_PI_2 * (width - t) / ramp;
        s.sin() * s.sin()
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    dimension: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ParseError {
        ParseError {
            message: message.to_string(),
            position: self.pos,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn accept(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.accept(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.accept(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            if self.accept(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
            } else if self.accept(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        if self.accept(b'-') {
            return Ok(Node::Neg(Box::new(self.factor()?)));
        }
        let mut base = self.atom()?;
        while self.accept(b'^') {
            let k = self.integer()?;
            base = Node::Pow(Box::new(base), k);
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        let neg = self.accept(b'-');
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an integer exponent"));
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: i32 = digits
            .parse()
            .map_err(|_| self.err("exponent out of range"))?;
        self.skip_ws();
        Ok(if neg { -value } else { value })
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let inner = self.expr()?;
                if !self.accept(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.err("expected a number, name, or '('")),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == b'.') {
            self.pos += 1;
        }
        // Scientific suffix with an optional sign.
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `e` belonged to a following name, not the literal.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ParseError {
            message: format!("bad numeric literal '{text}'"),
            position: start,
        })?;
        self.skip_ws();
        Ok(Node::Num(value))
    }

    fn ident(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .to_string();
        self.skip_ws();
        match name.as_str() {
            "x" => return Ok(Node::Var(0)),
            "y" => {
                if self.dimension < 2 {
                    return Err(ParseError {
                        message: "variable 'y' needs a two dimensional model".into(),
                        position: start,
                    });
                }
                return Ok(Node::Var(1));
            }
            "t" => return Ok(Node::Time),
            "i" => return Ok(Node::Imag),
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            _ => {}
        }
        let func = match name.as_str() {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "pulse" => Func::Pulse,
            _ => {
                return Err(ParseError {
                    message: format!("unknown name '{name}'"),
                    position: start,
                })
            }
        };
        if !self.accept(b'(') {
            return Err(self.err("expected '(' after a function name"));
        }
        let mut args = vec![self.expr()?];
        while self.accept(b',') {
            args.push(self.expr()?);
        }
        if !self.accept(b')') {
            return Err(self.err("expected ')'"));
        }
        if args.len() != func.arity() {
            return Err(ParseError {
                message: format!(
                    "{} takes {} argument(s), got {}",
                    func.name(),
                    func.arity(),
                    args.len()
                ),
                position: start,
            });
        }
        Ok(Node::Call(func, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, t: f64, x: &[f64]) -> Complex<f64> {
        Expr::parse(text, x.len()).unwrap().eval(t, x)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0, &[0.0]).re, 7.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0, &[0.0]).re, 9.0);
        assert_eq!(ev("2 ^ 3 ^ 1", 0.0, &[0.0]).re, 8.0);
        assert_eq!(ev("-x^2", 0.0, &[3.0]).re, -9.0);
        assert_eq!(ev("6 / 4", 0.0, &[0.0]).re, 1.5);
        assert_eq!(ev("2e-3 + 1", 0.0, &[0.0]).re, 1.002);
    }

    #[test]
    fn complex_values() {
        let v = ev("i * x", 0.0, &[2.0]);
        assert_eq!(v, Complex::new(0.0, 2.0));
        let w = ev("exp(i * pi)", 0.0, &[0.0]);
        assert!((w.re + 1.0).abs() < 1e-15 && w.im.abs() < 1e-15);
    }

    #[test]
    fn functions_and_variables() {
        let v = ev("0.5 * x^2 + sin(t)", 2.0, &[3.0]);
        assert!((v.re - (4.5 + 2.0f64.sin())).abs() < 1e-15);
        let well = ev("-2 * exp(-0.5 * (x - 1)^2)", 0.0, &[1.0]);
        assert_eq!(well.re, -2.0);
        let g = ev("x * y", 0.0, &[2.0, 5.0]);
        assert_eq!(g.re, 10.0);
    }

    #[test]
    fn pulse_envelope_shape() {
        // Ramp 0.5, width 2: zero outside, unity on the flat top.
        assert_eq!(ev("pulse(t, 0.5, 2)", -0.1, &[0.0]).re, 0.0);
        assert_eq!(ev("pulse(t, 0.5, 2)", 2.5, &[0.0]).re, 0.0);
        assert_eq!(ev("pulse(t, 0.5, 2)", 1.0, &[0.0]).re, 1.0);
        let mid = ev("pulse(t, 0.5, 2)", 0.25, &[0.0]).re;
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn time_detection() {
        assert!(Expr::parse("sin(t) * x", 1).unwrap().uses_time());
        assert!(!Expr::parse("x^2 + 1", 1).unwrap().uses_time());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(Expr::parse("x +", 1).is_err());
        assert!(Expr::parse("foo(x)", 1).is_err());
        assert!(Expr::parse("y", 1).is_err());
        assert!(Expr::parse("x ^ 0.5", 1).is_err());
        assert!(Expr::parse("pulse(t, 1)", 1).is_err());
        assert!(Expr::parse("(x", 1).is_err());
        let err = Expr::parse("x @ 2", 1).unwrap_err();
        assert!(err.message.contains("unexpected") || err.message.contains("expected"));
    }
}
