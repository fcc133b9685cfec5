//! A small arithmetic expression language for closed-form rate functions.
//!
//! Grammar (usual precedence, `^` is right associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables are `a` (age) and `p` (the fertility argument). Constants `pi`
//! and `e` are predefined. Functions: `exp ln log sqrt abs sin cos tan`
//! (one argument), `step` (1 for x >= 0, else 0), `min max pow` (two).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Age,
    Param,
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func1 {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Tan,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func2 {
    Min,
    Max,
    Pow,
}

/// A parsed expression in the variables `a` and `p`.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        if let Some(tok) = parser.tokens.get(parser.pos) {
            return Err(Error::Expr {
                offset: tok.offset,
                message: format!("unexpected token {:?}", tok.kind),
            });
        }
        Ok(Self {
            source: source.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_param(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Param => true,
                Node::Num(_) | Node::Age => false,
                Node::Neg(x) | Node::Call1(_, x) => walk(x),
                Node::Bin(_, x, y) | Node::Call2(_, x, y) => walk(x) || walk(y),
            }
        }
        walk(&self.root)
    }

    pub fn eval(&self, a: f64, p: f64) -> f64 {
        eval(&self.root, a, p)
    }
}

fn eval(node: &Node, a: f64, p: f64) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Age => a,
        Node::Param => p,
        Node::Neg(x) => -eval(x, a, p),
        Node::Bin(op, x, y) => {
            let (x, y) = (eval(x, a, p), eval(y, a, p));
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Pow => x.powf(y),
            }
        }
        Node::Call1(f, x) => {
            let x = eval(x, a, p);
            match f {
                Func1::Exp => x.exp(),
                Func1::Ln => x.ln(),
                Func1::Sqrt => x.sqrt(),
                Func1::Abs => x.abs(),
                Func1::Sin => x.sin(),
                Func1::Cos => x.cos(),
                Func1::Tan => x.tan(),
                Func1::Step => {
                    if x >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
        Node::Call2(f, x, y) => {
            let (x, y) = (eval(x, a, p), eval(y, a, p));
            match f {
                Func2::Min => x.min(y),
                Func2::Max => x.max(y),
                Func2::Pow => x.powf(y),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // exponent part
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| Error::Expr {
                offset: start,
                message: format!("bad number `{text}`"),
            })?;
            TokenKind::Num(v)
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            TokenKind::Ident(src[start..i].to_string())
        } else {
            i += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => TokenKind::Op(c),
                '(' => TokenKind::LParen,
                ')' => TokenKind::RParen,
                ',' => TokenKind::Comma,
                _ => {
                    return Err(Error::Expr {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|t| t.offset)
            .or_else(|| self.tokens.last().map(|t| t.offset + 1))
            .unwrap_or(0)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Expr {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, kind: TokenKind) -> Result<()> {
        if self.peek() == Some(&kind) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {kind:?}"))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(TokenKind::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(TokenKind::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(TokenKind::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if let Some(TokenKind::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(TokenKind::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek().cloned() {
            Some(TokenKind::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some(TokenKind::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(inner)
            }
            Some(TokenKind::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&TokenKind::LParen) {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&TokenKind::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(TokenKind::RParen)?;
                    self.call(&name, args)
                } else {
                    match name.as_str() {
                        "a" => Ok(Node::Age),
                        "p" => Ok(Node::Param),
                        "pi" => Ok(Node::Num(std::f64::consts::PI)),
                        "e" => Ok(Node::Num(std::f64::consts::E)),
                        _ => {
                            self.pos -= 1;
                            self.err(format!("unknown variable `{name}`"))
                        }
                    }
                }
            }
            Some(other) => self.err(format!("unexpected token {other:?}")),
            None => self.err("unexpected end of expression"),
        }
    }

    fn call(&self, name: &str, mut args: Vec<Node>) -> Result<Node> {
        let f1 = match name {
            "exp" => Some(Func1::Exp),
            "ln" | "log" => Some(Func1::Ln),
            "sqrt" => Some(Func1::Sqrt),
            "abs" => Some(Func1::Abs),
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "tan" => Some(Func1::Tan),
            "step" => Some(Func1::Step),
            _ => None,
        };
        if let Some(f) = f1 {
            if args.len() != 1 {
                return self.err(format!("`{name}` takes one argument"));
            }
            return Ok(Node::Call1(f, Box::new(args.remove(0))));
        }
        let f2 = match name {
            "min" => Func2::Min,
            "max" => Func2::Max,
            "pow" => Func2::Pow,
            _ => return self.err(format!("unknown function `{name}`")),
        };
        if args.len() != 2 {
            return self.err(format!("`{name}` takes two arguments"));
        }
        let y = args.pop().unwrap();
        let x = args.pop().unwrap();
        Ok(Node::Call2(f2, Box::new(x), Box::new(y)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, a: f64, p: f64) -> f64 {
        Expr::parse(s).unwrap().eval(a, p)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0, 0.0), 9.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0, 0.0), 512.0);
        assert_eq!(ev("-2 ^ 2", 0.0, 0.0), -4.0);
        assert_eq!(ev("8 / 2 / 2", 0.0, 0.0), 2.0);
        assert_eq!(ev("1e-1 * 10", 0.0, 0.0), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        assert_eq!(ev("step(a - 0.15) * p / (1 + p)", 0.5, 1.0), 0.5);
        assert_eq!(ev("step(a - 0.15) * p / (1 + p)", 0.1, 1.0), 0.0);
        assert!((ev("exp(-0.5 * a)", 2.0, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(ev("max(a, p)", 0.2, 0.7), 0.7);
        assert!((ev("sin(pi * a)^2", 0.5, 0.0) - 1.0).abs() < 1e-15);
        assert!(Expr::parse("p + 1").unwrap().uses_param());
        assert!(!Expr::parse("a + 1").unwrap().uses_param());
    }

    #[test]
    fn errors_report_offsets() {
        match Expr::parse("a + q") {
            Err(Error::Expr { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Expr::parse("a +").is_err());
        assert!(Expr::parse("min(a)").is_err());
        assert!(Expr::parse("foo(a)").is_err());
        assert!(Expr::parse("(a").is_err());
        assert!(Expr::parse("a $ 2").is_err());
    }
}
