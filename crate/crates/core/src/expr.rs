//! Closed-form initial-condition expressions in `x`, `y`, `z`.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := ('-' | '+') factor | power
//! power  := atom ('^' factor)?
//! atom   := number | 'x' | 'y' | 'z' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func   := 'exp' | 'cos' | 'sin'
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Cos,
    Sin,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Coord(usize),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, p: &[f64; 3]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Coord(i) => p[*i],
            Node::Neg(a) => -a.eval(p),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(p), b.eval(p));
                match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    '/' => a / b,
                    _ => a.powf(b),
                }
            }
            Node::Call(f, a) => {
                let a = a.eval(p);
                match f {
                    Func::Exp => a.exp(),
                    Func::Cos => a.cos(),
                    Func::Sin => a.sin(),
                }
            }
        }
    }
}

/// Parsed expression; keeps its source text for display and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser { src: source, chars: source.char_indices().collect(), pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Expr { source: source.to_string(), root })
    }

    pub fn eval(&self, p: &[f64; 3]) -> f64 {
        self.root.eval(p)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl FromStr for Expr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        let at = self.chars.get(self.pos).map_or(self.src.len(), |c| c.0);
        Error::Expression { expr: self.src.to_string(), msg: format!("{msg} at offset {at}") }
    }

    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.1.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).map(|c| c.1)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        while let Some(op @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.factor()?)));
        }
        if self.eat('+') {
            return self.factor();
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Node::Bin('^', Box::new(base), Box::new(self.factor()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.chars.get(self.pos).is_some_and(|c| c.1.is_ascii_alphanumeric() || c.1 == '_') {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().map(|c| c.1).collect();
                let func = match name.as_str() {
                    "x" => return Ok(Node::Coord(0)),
                    "y" => return Ok(Node::Coord(1)),
                    "z" => return Ok(Node::Coord(2)),
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "exp" => Func::Exp,
                    "cos" => Func::Cos,
                    "sin" => Func::Sin,
                    _ => {
                        self.pos = start;
                        return Err(self.error(&format!("unknown identifier `{name}`")));
                    }
                };
                if !self.eat('(') {
                    return Err(self.error(&format!("expected `(` after `{name}`")));
                }
                let arg = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(Node::Call(func, Box::new(arg)))
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let mut prev = ' ';
        while let Some(&(_, c)) = self.chars.get(self.pos) {
            let exp_sign = (c == '+' || c == '-') && (prev == 'e' || prev == 'E');
            if !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign) {
                break;
            }
            prev = c;
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().map(|c| c.1).collect();
        text.parse().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error(&format!("malformed number `{text}`"))
        })
    }
}
