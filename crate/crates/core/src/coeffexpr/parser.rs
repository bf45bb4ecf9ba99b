use std::fmt;

use super::{BinOp, Expr, Func, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    Syntax { expected: Vec<&'static str>, found: String },
    UnknownIdentifier(String),
    Arity { func: &'static str, expected: usize, got: usize },
    BadNumber(String),
}

/// Parse failure with the byte offset into the source where it was detected.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::Syntax { expected, found } => write!(
                f,
                "syntax error at offset {}: expected {}, found {}",
                self.offset,
                expected.join(" or "),
                found
            ),
            ParseErrorKind::UnknownIdentifier(name) => {
                write!(f, "unknown identifier '{name}' at offset {}", self.offset)
            }
            ParseErrorKind::Arity { func, expected, got } => write!(
                f,
                "{func} takes {expected} argument(s), got {got} at offset {}",
                self.offset
            ),
            ParseErrorKind::BadNumber(text) => {
                write!(f, "malformed number '{text}' at offset {}", self.offset)
            }
        }
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = src[pos..].chars().next().unwrap();
        let start = pos;
        if c.is_whitespace() {
            pos += c.len_utf8();
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' | '\u{2212}' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            pos += c.len_utf8();
            out.push((tok, start));
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let digits = |p: &mut usize| {
                let s = *p;
                while *p < bytes.len() && bytes[*p].is_ascii_digit() {
                    *p += 1;
                }
                *p - s
            };
            let mut n = digits(&mut pos);
            if pos < bytes.len() && bytes[pos] == b'.' {
                pos += 1;
                n += digits(&mut pos);
            }
            if n == 0 {
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber(src[start..pos].to_string()),
                });
            }
            if pos < bytes.len() && (bytes[pos] == b'e' || bytes[pos] == b'E') {
                let mut p = pos + 1;
                if p < bytes.len() && (bytes[p] == b'+' || bytes[p] == b'-') {
                    p += 1;
                }
                if digits(&mut p) == 0 {
                    return Err(ParseError {
                        offset: start,
                        kind: ParseErrorKind::BadNumber(src[start..p.min(bytes.len())].to_string()),
                    });
                }
                pos = p;
            }
            let text = &src[start..pos];
            let v: f64 = text.parse().map_err(|_| ParseError {
                offset: start,
                kind: ParseErrorKind::BadNumber(text.to_string()),
            })?;
            out.push((Tok::Num(v), start));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            out.push((Tok::Ident(src[start..pos].to_string()), start));
            continue;
        }
        return Err(ParseError {
            offset: start,
            kind: ParseErrorKind::Syntax {
                expected: vec!["operand", "operator"],
                found: format!("character {c:?}"),
            },
        });
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

const MAX_DEPTH: usize = 200;

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: Vec<&'static str>) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            kind: ParseErrorKind::Syntax { expected, found: self.peek().describe() },
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn descend(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::Syntax {
                    expected: vec!["shallower nesting"],
                    found: format!("nesting deeper than {MAX_DEPTH}"),
                },
            });
        }
        Ok(())
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.descend()?;
        let base = self.unary()?;
        let out = if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.factor()?;
            Expr::bin(BinOp::Pow, base, exp)
        } else {
            base
        };
        self.depth -= 1;
        Ok(out)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.descend()?;
            self.bump();
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return self.fail(vec!["')'", "operator"]);
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| ParseError {
                        offset: at,
                        kind: ParseErrorKind::UnknownIdentifier(name.clone()),
                    })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    loop {
                        match self.peek() {
                            Tok::Comma => {
                                self.bump();
                                args.push(self.expr()?);
                            }
                            Tok::RParen => {
                                self.bump();
                                break;
                            }
                            _ => return self.fail(vec!["','", "')'", "operator"]),
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ParseError {
                            offset: at,
                            kind: ParseErrorKind::Arity {
                                func: func.name(),
                                expected: func.arity(),
                                got: args.len(),
                            },
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                match name.as_str() {
                    "t" => Ok(Expr::Var(Var::T)),
                    "x" => Ok(Expr::Var(Var::X)),
                    "l" => Ok(Expr::Var(Var::L)),
                    _ => Err(ParseError { offset: at, kind: ParseErrorKind::UnknownIdentifier(name) }),
                }
            }
            _ => self.fail(vec!["operand"]),
        }
    }
}

/// Parses a complete expression; trailing input is a syntax error.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0, depth: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.fail(vec!["operator", "end of input"]);
    }
    Ok(e)
}
