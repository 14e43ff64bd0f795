use std::collections::BTreeMap;

use thiserror::Error;

use super::ast::{BinaryOp, Expr, NormArg, UnaryOp, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at offset {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("`{name}` is not available in a {context} expression (offset {pos})")]
    NotInScope {
        name: String,
        context: &'static str,
        pos: usize,
    },
    #[error("function `{name}` takes {expected} argument(s), got {got} (offset {pos})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
    #[error("index {index} in `{name}` is outside 1..={max} (offset {pos})")]
    IndexOutOfRange {
        name: String,
        index: usize,
        max: usize,
        pos: usize,
    },
}

/// Which identifiers an expression may use.
#[derive(Debug, Clone, PartialEq)]
pub struct Scope {
    context: &'static str,
    n: usize,
    d: usize,
    time: bool,
    state: bool,
    brownian: bool,
    unit: bool,
    constants: BTreeMap<String, f64>,
}

impl Scope {
    /// Generator components: `t`, `y1..yn`, `z[i][j]`.
    pub fn generator(n: usize, d: usize) -> Self {
        Scope {
            context: "generator",
            n,
            d,
            time: true,
            state: true,
            brownian: false,
            unit: false,
            constants: BTreeMap::new(),
        }
    }

    /// Terminal functions of the Brownian endpoint: `b1..bd`.
    pub fn terminal(d: usize) -> Self {
        Scope {
            context: "terminal",
            n: 0,
            d,
            time: false,
            state: false,
            brownian: true,
            unit: false,
            constants: BTreeMap::new(),
        }
    }

    /// The nonnegative process alpha: `t` and `b1..bd`.
    pub fn alpha(d: usize) -> Self {
        Scope {
            context: "alpha",
            n: 0,
            d,
            time: true,
            state: false,
            brownian: true,
            unit: false,
            constants: BTreeMap::new(),
        }
    }

    /// A scalar function of `x`, used for the growth modulus.
    pub fn scalar() -> Self {
        Scope {
            context: "scalar",
            n: 0,
            d: 0,
            time: false,
            state: false,
            brownian: false,
            unit: true,
            constants: BTreeMap::new(),
        }
    }

    pub fn with_constant(mut self, name: &str, value: f64) -> Self {
        self.constants.insert(name.to_string(), value);
        self
    }

    pub fn with_constants<'a>(mut self, it: impl IntoIterator<Item = (&'a String, &'a f64)>) -> Self {
        for (k, v) in it {
            self.constants.insert(k.clone(), *v);
        }
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

pub fn parse(src: &str, scope: &Scope) -> Result<Expr, ParseError> {
    let tokens = lex(src)?;
    let mut p = Parser {
        tokens,
        idx: 0,
        scope,
        len: src.len(),
    };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ParseError::Syntax {
            pos: t.pos,
            msg: format!("unexpected {}", t.kind.describe()),
        });
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("malformed number `{text}`"),
            })?;
            out.push(Token {
                kind: Tok::Num(v),
                pos: start,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Ident(src[start..i].to_string()),
                pos: start,
            });
        } else if "+-*/^(),[]".contains(c) {
            out.push(Token {
                kind: Tok::Sym(c),
                pos: i,
            });
            i += 1;
        } else {
            return Err(ParseError::Syntax {
                pos: i,
                msg: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    idx: usize,
    scope: &'a Scope,
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.idx)
    }

    fn peek_sym(&self, c: char) -> bool {
        matches!(self.peek(), Some(Token { kind: Tok::Sym(s), .. }) if *s == c)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.len, |t| t.pos)
    }

    fn expect_sym(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek_sym(c) {
            self.idx += 1;
            Ok(())
        } else {
            let found = self
                .peek()
                .map_or_else(|| "end of input".to_string(), |t| t.kind.describe());
            Err(ParseError::Syntax {
                pos: self.pos(),
                msg: format!("expected `{c}`, found {found}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                BinaryOp::Add
            } else if self.peek_sym('-') {
                BinaryOp::Sub
            } else {
                return Ok(lhs);
            };
            self.idx += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                BinaryOp::Mul
            } else if self.peek_sym('/') {
                BinaryOp::Div
            } else {
                return Ok(lhs);
            };
            self.idx += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek_sym('-') {
            self.idx += 1;
            let inner = self.unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    // `^` binds tighter than unary minus and associates to the right; the
    // exponent may itself carry a sign.
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek_sym('^') {
            self.idx += 1;
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError::Syntax {
                pos: self.len,
                msg: "unexpected end of input".into(),
            });
        };
        self.idx += 1;
        match tok.kind {
            Tok::Num(v) => Ok(Expr::Lit(v)),
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect_sym(')')?;
                Ok(e)
            }
            Tok::Sym(c) => Err(ParseError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected `{c}`"),
            }),
            Tok::Ident(name) => self.identifier(name, tok.pos),
        }
    }

    fn integer(&mut self) -> Result<usize, ParseError> {
        let pos = self.pos();
        match self.peek().map(|t| t.kind.clone()) {
            Some(Tok::Num(v)) if v.fract() == 0.0 && v >= 0.0 => {
                self.idx += 1;
                Ok(v as usize)
            }
            _ => Err(ParseError::Syntax {
                pos,
                msg: "expected an integer index".into(),
            }),
        }
    }

    fn check_index(&self, name: &str, index: usize, max: usize, pos: usize) -> Result<usize, ParseError> {
        if index == 0 || index > max {
            Err(ParseError::IndexOutOfRange {
                name: name.to_string(),
                index,
                max,
                pos,
            })
        } else {
            Ok(index - 1)
        }
    }

    fn not_in_scope(&self, name: &str, pos: usize) -> ParseError {
        ParseError::NotInScope {
            name: name.to_string(),
            context: self.scope.context,
            pos,
        }
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect_sym('(')?;
        let mut out = vec![self.expr()?];
        while self.peek_sym(',') {
            self.idx += 1;
            out.push(self.expr()?);
        }
        self.expect_sym(')')?;
        Ok(out)
    }

    fn identifier(&mut self, name: String, pos: usize) -> Result<Expr, ParseError> {
        if let Some(op) = UnaryOp::from_name(&name) {
            let mut a = self.args()?;
            if a.len() != 1 {
                return Err(ParseError::Arity {
                    name,
                    expected: 1,
                    got: a.len(),
                    pos,
                });
            }
            return Ok(Expr::Unary(op, Box::new(a.pop().unwrap())));
        }
        if let Some(op) = BinaryOp::from_function_name(&name) {
            let mut a = self.args()?;
            if a.len() != 2 {
                return Err(ParseError::Arity {
                    name,
                    expected: 2,
                    got: a.len(),
                    pos,
                });
            }
            let rhs = a.pop().unwrap();
            let lhs = a.pop().unwrap();
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        if name == "norm" {
            return self.norm(pos);
        }
        if name == "z" {
            if !self.scope.state {
                return Err(self.not_in_scope("z", pos));
            }
            self.expect_sym('[')?;
            let ipos = self.pos();
            let i = self.integer()?;
            self.expect_sym(']')?;
            self.expect_sym('[')?;
            let jpos = self.pos();
            let j = self.integer()?;
            self.expect_sym(']')?;
            let row = self.check_index("z row", i, self.scope.n, ipos)?;
            let col = self.check_index("z column", j, self.scope.d, jpos)?;
            return Ok(Expr::Var(Var::Z {
                row,
                col,
                flat: row * self.scope.d + col,
            }));
        }
        if let Some(&value) = self.scope.constants.get(&name) {
            return Ok(Expr::Const { name, value });
        }
        match name.as_str() {
            "t" if self.scope.time => return Ok(Expr::Var(Var::T)),
            "x" if self.scope.unit => return Ok(Expr::Var(Var::X)),
            "t" | "x" => return Err(self.not_in_scope(&name, pos)),
            _ => {}
        }
        if let Some(idx) = indexed(&name, 'y') {
            if !self.scope.state {
                return Err(self.not_in_scope(&name, pos));
            }
            let i = self.check_index(&name, idx, self.scope.n, pos)?;
            return Ok(Expr::Var(Var::Y(i)));
        }
        if let Some(idx) = indexed(&name, 'b') {
            if !self.scope.brownian {
                return Err(self.not_in_scope(&name, pos));
            }
            let i = self.check_index(&name, idx, self.scope.d, pos)?;
            return Ok(Expr::Var(Var::B(i)));
        }
        Err(ParseError::UnknownIdentifier { name, pos })
    }

    fn norm(&mut self, pos: usize) -> Result<Expr, ParseError> {
        self.expect_sym('(')?;
        let apos = self.pos();
        let arg = match self.peek().map(|t| t.kind.clone()) {
            Some(Tok::Ident(a)) => a,
            _ => {
                return Err(ParseError::Syntax {
                    pos: apos,
                    msg: "norm expects y, z, b or zrow(i)".into(),
                })
            }
        };
        self.idx += 1;
        let out = match arg.as_str() {
            "y" if self.scope.state => NormArg::Y,
            "z" if self.scope.state => NormArg::Z,
            "b" if self.scope.brownian => NormArg::B,
            "zrow" if self.scope.state => {
                self.expect_sym('(')?;
                let ipos = self.pos();
                let i = self.integer()?;
                self.expect_sym(')')?;
                let row = self.check_index("zrow", i, self.scope.n, ipos)?;
                NormArg::ZRow {
                    row,
                    width: self.scope.d,
                }
            }
            "y" | "z" | "b" | "zrow" => return Err(self.not_in_scope(&arg, apos)),
            _ => {
                return Err(ParseError::Syntax {
                    pos: apos,
                    msg: format!("norm expects y, z, b or zrow(i), found `{arg}`"),
                })
            }
        };
        if !self.peek_sym(')') {
            return Err(ParseError::Arity {
                name: "norm".into(),
                expected: 1,
                got: 2,
                pos,
            });
        }
        self.idx += 1;
        Ok(Expr::Norm(out))
    }
}

fn indexed(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}
