//! A small arithmetic expression language for user-supplied fields.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers: `x1`, `x2`, … (spatial coordinates, 1-based), `x`/`y`/`z`
//! for the first three, `lambda` for the last spatial coordinate, `t` for
//! time, and the constants `pi` and `e`. Functions: `sin cos tan exp log
//! sqrt abs tanh floor frac sign` (one argument) and `min max` (any number).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Coord(usize),
    Lambda,
    Time,
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Floor,
    Frac,
    Sign,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "tan" => Self::Tan,
            "exp" => Self::Exp,
            "log" | "ln" => Self::Log,
            "sqrt" => Self::Sqrt,
            "abs" => Self::Abs,
            "tanh" => Self::Tanh,
            "floor" => Self::Floor,
            "frac" => Self::Frac,
            "sign" => Self::Sign,
            "min" => Self::Min,
            "max" => Self::Max,
            _ => return None,
        })
    }

    fn variadic(self) -> bool {
        matches!(self, Self::Min | Self::Max)
    }
}

/// A parsed expression in the spatial coordinates and time.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    source: String,
    root: Node,
    max_coord: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl TryFrom<String> for Expr {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Expr::parse(&s)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> String {
        e.source
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Parse(format!("unexpected trailing input in {source:?}")));
        }
        let max_coord = max_coord(&root);
        Ok(Self { source: source.to_string(), root, max_coord })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Smallest spatial dimension the expression can be evaluated in.
    pub fn min_dim(&self) -> usize {
        self.max_coord
    }

    /// Evaluates at spatial point `x` and time `t`.
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        eval(&self.root, x, t)
    }
}

fn max_coord(n: &Node) -> usize {
    match n {
        Node::Coord(i) => i + 1,
        Node::Lambda => 1,
        Node::Neg(a) => max_coord(a),
        Node::Bin(_, a, b) => max_coord(a).max(max_coord(b)),
        Node::Call(_, args) => args.iter().map(max_coord).max().unwrap_or(0),
        Node::Num(_) | Node::Time => 0,
    }
}

fn eval(n: &Node, x: &[f64], t: f64) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Coord(i) => x.get(*i).copied().unwrap_or(0.0),
        Node::Lambda => x.last().copied().unwrap_or(0.0),
        Node::Time => t,
        Node::Neg(a) => -eval(a, x, t),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, x, t), eval(b, x, t));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let first = eval(&args[0], x, t);
            match f {
                Func::Sin => first.sin(),
                Func::Cos => first.cos(),
                Func::Tan => first.tan(),
                Func::Exp => first.exp(),
                Func::Log => first.ln(),
                Func::Sqrt => first.sqrt(),
                Func::Abs => first.abs(),
                Func::Tanh => first.tanh(),
                Func::Floor => first.floor(),
                Func::Frac => first - first.floor(),
                Func::Sign => {
                    if first > 0.0 {
                        1.0
                    } else if first < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Func::Min => args[1..].iter().fold(first, |m, a| m.min(eval(a, x, t))),
                Func::Max => args[1..].iter().fold(first, |m, a| m.max(eval(a, x, t))),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = s.chars().collect();
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
            let v = text.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {text:?}")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(Error::Parse(format!("unexpected character {c:?}")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek_sym(&self, c: char) -> bool {
        matches!(self.tokens.get(self.pos), Some(Tok::Sym(s)) if *s == c)
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse(format!("expected {c:?} at token {}", self.pos)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                Op::Add
            } else if self.peek_sym('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                Op::Mul
            } else if self.peek_sym('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek_sym('-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.peek_sym('+') {
            self.pos += 1;
            return self.unary();
        }
        let base = self.atom()?;
        if self.peek_sym('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.tokens.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek_sym('(') {
                    let f = Func::lookup(&name).ok_or_else(|| Error::Parse(format!("unknown function {name:?}")))?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek_sym(',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if !f.variadic() && args.len() != 1 {
                        return Err(Error::Parse(format!("{name} takes one argument")));
                    }
                    return Ok(Node::Call(f, args));
                }
                variable(&name)
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

fn variable(name: &str) -> Result<Node> {
    Ok(match name {
        "pi" => Node::Num(std::f64::consts::PI),
        "e" => Node::Num(std::f64::consts::E),
        "t" => Node::Time,
        "lambda" => Node::Lambda,
        "x" => Node::Coord(0),
        "y" => Node::Coord(1),
        "z" => Node::Coord(2),
        _ => {
            let idx = name
                .strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .ok_or_else(|| Error::Parse(format!("unknown identifier {name:?}")))?;
            Node::Coord(idx - 1)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: &[f64], t: f64) -> f64 {
        Expr::parse(s).unwrap().eval(x, t)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", &[], 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", &[], 0.0), 512.0);
        assert_eq!(ev("-2 ^ 2", &[], 0.0), -4.0);
        assert_eq!(ev("(1 + 2) * 3 - 4 / 2", &[], 0.0), 7.0);
        assert_eq!(ev("1.5e1 + 2E-1", &[], 0.0), 15.2);
    }

    #[test]
    fn variables_and_functions() {
        let x = [0.25, 3.0];
        assert!((ev("2 + sin(2*pi*x1)", &x, 0.0) - 3.0).abs() < 1e-15);
        assert_eq!(ev("lambda", &x, 0.0), 3.0);
        assert_eq!(ev("max(x, y, 2) + min(abs(-x2), 1)", &x, 0.0), 4.0);
        assert_eq!(ev("t * x2", &x, 2.0), 6.0);
        assert_eq!(ev("frac(3.75) + floor(-0.5)", &x, 0.0), -0.25);
        assert_eq!(Expr::parse("x3 + lambda").unwrap().min_dim(), 3);
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in ["1 +", "sin(1, 2)", "foo(1)", "x0", "2 $ 3", "(1"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn serde_uses_source_text() {
        let e: Expr = serde_json::from_str("\"1 + x\"").unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"1 + x\"");
        assert!(serde_json::from_str::<Expr>("\"1 +\"").is_err());
    }
}
