//! Tiny complex-arithmetic expression language for family trajectories.
//!
//! Grammar: numbers, `i`, `pi`, variables `delta`, `s`, the operators
//! `+ - * / ^`, parentheses and the functions `sqrt exp log sin cos abs`.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{0}' at {1}")]
    Char(char, usize),
    #[error("unexpected end of expression")]
    Eof,
    #[error("unexpected token at {0}")]
    Token(usize),
    #[error("unknown identifier '{0}'")]
    Ident(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(Complex64),
    Delta,
    S,
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
}

/// Parsed expression in the variables `delta` and `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| ExprError::Token(start))?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(ExprError::Char(c, i));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }
    fn at(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(usize::MAX)
    }
    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }
    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().cloned() {
                Some(Tok::Op(op @ ('*' | '/'))) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
                }
                // implicit multiplication: "2delta", "3i", "2(…)"
                Some(Tok::Num(_)) | Some(Tok::Ident(_)) | Some(Tok::Op('(')) => {
                    let rhs = self.unary()?;
                    lhs = Node::Bin('*', Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }
    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }
    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }
    fn atom(&mut self) -> Result<Node, ExprError> {
        let at = self.at();
        match self.peek().cloned() {
            None => Err(ExprError::Eof),
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(Complex64::new(v, 0.0)))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Tok::Op(')')) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    None => Err(ExprError::Eof),
                    _ => Err(ExprError::Token(self.at())),
                }
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "delta" => return Ok(Node::Delta),
                    "s" => return Ok(Node::S),
                    "i" => return Ok(Node::Num(Complex64::new(0.0, 1.0))),
                    "pi" => return Ok(Node::Num(Complex64::new(std::f64::consts::PI, 0.0))),
                    "sqrt" => Func::Sqrt,
                    "exp" => Func::Exp,
                    "log" | "ln" => Func::Log,
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "abs" => Func::Abs,
                    _ => return Err(ExprError::Ident(name)),
                };
                match self.peek() {
                    Some(Tok::Op('(')) => {}
                    None => return Err(ExprError::Eof),
                    _ => return Err(ExprError::Token(self.at())),
                }
                let arg = self.atom()?;
                Ok(Node::Call(func, Box::new(arg)))
            }
            Some(Tok::Op(_)) => Err(ExprError::Token(at)),
        }
    }
}

fn eval(n: &Node, delta: f64, s: f64) -> Complex64 {
    match n {
        Node::Num(c) => *c,
        Node::Delta => Complex64::new(delta, 0.0),
        Node::S => Complex64::new(s, 0.0),
        Node::Neg(a) => -eval(a, delta, s),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, delta, s), eval(b, delta, s));
            match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                '/' => x / y,
                _ => {
                    // keep real powers of real bases exact
                    if y.im == 0.0 && y.re.fract() == 0.0 && y.re.abs() <= 64.0 {
                        x.powi(y.re as i32)
                    } else if x.im == 0.0 && y.im == 0.0 && x.re >= 0.0 {
                        Complex64::new(x.re.powf(y.re), 0.0)
                    } else {
                        x.powc(y)
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let x = eval(a, delta, s);
            match f {
                Func::Sqrt => x.sqrt(),
                Func::Exp => x.exp(),
                Func::Log => x.ln(),
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Abs => Complex64::new(x.norm(), 0.0),
            }
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(ExprError::Token(p.at()));
        }
        Ok(Expr { source: src.to_string(), root })
    }

    pub fn eval(&self, delta: f64, s: f64) -> Complex64 {
        eval(&self.root, delta, s)
    }

    /// Real-valued evaluation (imaginary part discarded).
    pub fn eval_real(&self, delta: f64, s: f64) -> f64 {
        self.eval(delta, s).re
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, d: f64, s: f64) -> Complex64 {
        Expr::parse(src).unwrap().eval(d, s)
    }

    #[test]
    fn arithmetic() {
        assert_eq!(ev("1/s", 0.0, 4.0), Complex64::new(0.25, 0.0));
        assert_eq!(ev("-delta^2", 0.5, 0.0), Complex64::new(-0.25, 0.0));
        assert_eq!(ev("2delta + 3i", 0.5, 0.0), Complex64::new(1.0, 3.0));
        assert_eq!(ev("(1+i)*(1-i)", 0.0, 0.0), Complex64::new(2.0, 0.0));
        assert!((ev("s^-0.5", 0.0, 16.0).re - 0.25).abs() < 1e-15);
        assert!((ev("exp(i*pi)", 0.0, 0.0) + 1.0).norm() < 1e-15);
        assert_eq!(ev("1e-3*s", 0.0, 2.0), Complex64::new(2e-3, 0.0));
        assert_eq!(ev("2^3^2", 0.0, 0.0).re, 512.0);
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("delta +").is_err());
        assert!(Expr::parse("foo").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
    }
}
