//! Recursive-descent parser for factor formulas.
//!
//! ```text
//! cmp    := sum (('>' | '<' | '>=' | '<=' | '==') sum)*
//! sum    := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | '$' IDENT | IDENT '(' args ')' | '(' cmp ')' | '-' factor
//! ```
//!
//! All binary levels are left associative. Function names are case
//! insensitive; attribute names are folded to lower case.

use super::ast::{BinaryOp, Expr, RollingOp, UnaryOp};
use super::ParseError;

/// Windows and shifts above this are rejected as nonsensical.
pub const MAX_WINDOW: usize = 1 << 20;
/// Tallest accepted syntax tree; bounds every recursive walk over it.
pub const MAX_HEIGHT: usize = 200;
/// Parser recursion limit. The canonical rendering of a tree of height `h`
/// nests at most `2h + 1` levels deep, so every accepted tree re-parses.
const MAX_DEPTH: usize = 2 * MAX_HEIGHT + 1;

/// A parsed subtree and its height.
type Node = (Expr, usize);

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    /// integer literal text, kept for window arguments
    Int(u64),
    Attr(String),
    Ident(String),
    LParen,
    RParen,
    Comma,
    Op(BinaryOp),
    End,
}

#[derive(Clone)]
struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next_token(&mut self) -> Result<(Tok, usize), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((Tok::End, start));
        };
        let single = |tok: Tok, lexer: &mut Lexer| {
            lexer.pos += 1;
            Ok((tok, start))
        };
        match c {
            b'(' => single(Tok::LParen, self),
            b')' => single(Tok::RParen, self),
            b',' => single(Tok::Comma, self),
            b'+' => single(Tok::Op(BinaryOp::Add), self),
            b'-' => single(Tok::Op(BinaryOp::Sub), self),
            b'*' => single(Tok::Op(BinaryOp::Mul), self),
            b'/' => single(Tok::Op(BinaryOp::Div), self),
            b'>' | b'<' | b'=' => {
                let eq = bytes.get(start + 1) == Some(&b'=');
                let op = match (c, eq) {
                    (b'>', true) => BinaryOp::Ge,
                    (b'>', false) => BinaryOp::Gt,
                    (b'<', true) => BinaryOp::Le,
                    (b'<', false) => BinaryOp::Lt,
                    (b'=', true) => BinaryOp::Eq,
                    _ => return Err(ParseError::syntax(start, "expected '=='")),
                };
                self.pos += if eq { 2 } else { 1 };
                Ok((Tok::Op(op), start))
            }
            b'$' => {
                self.pos += 1;
                let name = self.ident();
                if name.is_empty() {
                    return Err(ParseError::syntax(start, "expected attribute name after '$'"));
                }
                Ok((Tok::Attr(name.to_ascii_lowercase()), start))
            }
            b'0'..=b'9' | b'.' => self.number(start),
            c if c.is_ascii_alphabetic() || c == b'_' => Ok((Tok::Ident(self.ident().to_string()), start)),
            _ => {
                let ch = self.src[start..].chars().next().unwrap();
                Err(ParseError::syntax(start, format!("unexpected character {ch:?}")))
            }
        }
    }

    fn ident(&mut self) -> &'a str {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        if self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphabetic() || bytes[self.pos] == b'_') {
            self.pos += 1;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
        }
        &self.src[start..self.pos]
    }

    fn number(&mut self, start: usize) -> Result<(Tok, usize), ParseError> {
        let bytes = self.src.as_bytes();
        let digits = |lexer: &mut Lexer| {
            let s = lexer.pos;
            while lexer.pos < bytes.len() && bytes[lexer.pos].is_ascii_digit() {
                lexer.pos += 1;
            }
            lexer.pos - s
        };
        let int_digits = digits(self);
        let mut integral = true;
        if bytes.get(self.pos) == Some(&b'.') {
            integral = false;
            self.pos += 1;
            if digits(self) == 0 && int_digits == 0 {
                return Err(ParseError::syntax(start, "malformed number"));
            }
        }
        if matches!(bytes.get(self.pos), Some(b'e' | b'E')) {
            integral = false;
            self.pos += 1;
            if matches!(bytes.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                return Err(ParseError::syntax(start, "malformed exponent"));
            }
        }
        let text = &self.src[start..self.pos];
        if integral {
            if let Ok(n) = text.parse::<u64>() {
                return Ok((Tok::Int(n), start));
            }
        }
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((Tok::Num(v), start)),
            _ => Err(ParseError::syntax(start, format!("number {text} is out of range"))),
        }
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    at: usize,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (tok, at) = self.lexer.next_token()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.tok == want {
            self.bump()
        } else {
            Err(ParseError::syntax(self.at, format!("expected {what}")))
        }
    }

    /// Joins two operands, rejecting trees taller than [`MAX_HEIGHT`].
    fn node(&self, at: usize, expr: Expr, children: &[usize]) -> Result<Node, ParseError> {
        let height = 1 + children.iter().copied().max().unwrap_or(0);
        if height > MAX_HEIGHT {
            return Err(ParseError::syntax(at, "expression nested too deeply"));
        }
        Ok((expr, height))
    }

    fn cmp(&mut self) -> Result<Node, ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseError::syntax(self.at, "expression nested too deeply"));
        }
        let (mut lhs, mut h) = self.sum()?;
        while let Tok::Op(op @ (BinaryOp::Gt | BinaryOp::Lt | BinaryOp::Ge | BinaryOp::Le | BinaryOp::Eq)) = self.tok {
            let at = self.at;
            self.bump()?;
            let (rhs, hr) = self.sum()?;
            (lhs, h) = self.node(at, Expr::binary(op, lhs, rhs), &[h, hr])?;
        }
        self.depth -= 1;
        Ok((lhs, h))
    }

    fn sum(&mut self) -> Result<Node, ParseError> {
        let (mut lhs, mut h) = self.term()?;
        while let Tok::Op(op @ (BinaryOp::Add | BinaryOp::Sub)) = self.tok {
            let at = self.at;
            self.bump()?;
            let (rhs, hr) = self.term()?;
            (lhs, h) = self.node(at, Expr::binary(op, lhs, rhs), &[h, hr])?;
        }
        Ok((lhs, h))
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let (mut lhs, mut h) = self.factor()?;
        while let Tok::Op(op @ (BinaryOp::Mul | BinaryOp::Div)) = self.tok {
            let at = self.at;
            self.bump()?;
            let (rhs, hr) = self.factor()?;
            (lhs, h) = self.node(at, Expr::binary(op, lhs, rhs), &[h, hr])?;
        }
        Ok((lhs, h))
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        let at = self.at;
        match std::mem::replace(&mut self.tok, Tok::End) {
            Tok::Num(v) => {
                self.bump()?;
                Ok((Expr::Const(v), 1))
            }
            Tok::Int(n) => {
                self.bump()?;
                Ok((Expr::Const(n as f64), 1))
            }
            Tok::Attr(name) => {
                self.bump()?;
                Ok((Expr::Attr(name), 1))
            }
            Tok::Op(BinaryOp::Sub) => {
                self.depth += 1;
                if self.depth > MAX_DEPTH {
                    return Err(ParseError::syntax(at, "expression nested too deeply"));
                }
                self.bump()?;
                let (inner, h) = self.factor()?;
                self.depth -= 1;
                self.node(at, Expr::unary(UnaryOp::Neg, inner), &[h])
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.cmp()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump()?;
                self.call(&name, at)
            }
            Tok::End => Err(ParseError::syntax(at, "unexpected end of input")),
            _ => Err(ParseError::syntax(at, "expected a number, attribute, function call or '('")),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Node, ParseError> {
        enum Kind {
            Unary(UnaryOp),
            Rolling(RollingOp),
            Ref,
        }
        let kind = match name.to_ascii_uppercase().as_str() {
            "ABS" => Kind::Unary(UnaryOp::Abs),
            "LOG" => Kind::Unary(UnaryOp::Log),
            "REF" => Kind::Ref,
            upper => match RollingOp::ALL.iter().find(|op| op.name() == upper) {
                Some(&op) => Kind::Rolling(op),
                None => {
                    return Err(ParseError::UnknownFunction {
                        offset: at,
                        name: name.to_string(),
                    })
                }
            },
        };
        let expected = if matches!(kind, Kind::Unary(_)) { 1 } else { 2 };
        self.expect(Tok::LParen, "'(' after function name")?;
        let (child, h) = self.cmp()?;
        let mut found = 1;
        let mut window = None;
        while self.tok == Tok::Comma {
            self.bump()?;
            found += 1;
            if found == 2 && expected == 2 {
                let min = if matches!(kind, Kind::Ref) { 0 } else { 1 };
                window = Some(self.window_literal(min)?);
            } else {
                self.cmp()?;
            }
        }
        if found != expected {
            return Err(ParseError::Arity {
                offset: at,
                name: name.to_ascii_uppercase(),
                expected,
                found,
            });
        }
        self.expect(Tok::RParen, "')'")?;
        let expr = match kind {
            Kind::Unary(op) => Expr::unary(op, child),
            Kind::Rolling(op) => Expr::rolling(op, child, window.unwrap()),
            Kind::Ref => Expr::shift(child, window.unwrap()),
        };
        self.node(at, expr, &[h])
    }

    /// A window or shift: a bare integer literal directly followed by `,` or `)`.
    fn window_literal(&mut self, min: usize) -> Result<usize, ParseError> {
        let at = self.at;
        if let Tok::Int(n) = self.tok {
            let (next, _) = self.lexer.clone().next_token()?;
            if matches!(next, Tok::RParen | Tok::Comma) {
                self.bump()?;
                return match usize::try_from(n) {
                    Ok(n) if (min..=MAX_WINDOW).contains(&n) => Ok(n),
                    _ => Err(ParseError::NonIntegerWindow { offset: at }),
                };
            }
        }
        // parse the argument anyway so genuine syntax errors win
        self.cmp()?;
        if !matches!(self.tok, Tok::RParen | Tok::Comma) {
            return Err(ParseError::syntax(self.at, "expected ')'"));
        }
        Err(ParseError::NonIntegerWindow { offset: at })
    }
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        lexer: Lexer { src: text, pos: 0 },
        tok: Tok::End,
        at: 0,
        depth: 0,
    };
    p.bump()?;
    let (expr, _) = p.cmp()?;
    if p.tok != Tok::End {
        return Err(ParseError::syntax(p.at, "unexpected trailing input"));
    }
    Ok(expr)
}
