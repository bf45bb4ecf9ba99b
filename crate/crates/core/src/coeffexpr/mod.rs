//! Closed-form coefficient expressions over `(t, x, l)`.
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := unary ("^" factor)?
//! unary  := "-" unary | atom
//! atom   := number | ident | ident "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! `^` is right-associative. Both the ASCII hyphen and U+2212 are accepted as
//! minus signs.

mod build;
mod parser;

use std::fmt;
use std::sync::Arc;

pub use build::{
    build_coefficient_set, AlphaConfig, AlphaSpec, BuiltCoefficients, ExprError, Normalization,
    NetworkConfig,
};
pub use parser::{parse, ParseError, ParseErrorKind};
pub(crate) use build::field_from_source;

use crate::error::EvalError;
use crate::network::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    X,
    L,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::L => "l",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
    Min,
    Max,
    Clamp,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Sin,
        Func::Cos,
        Func::Exp,
        Func::Tanh,
        Func::Sqrt,
        Func::Abs,
        Func::Min,
        Func::Max,
        Func::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn evaluate(&self, t: f64, x: f64, l: f64) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::X) => x,
            Expr::Var(Var::L) => l,
            Expr::Neg(e) => -e.evaluate(t, x, l)?,
            Expr::Bin(op, a, b) => {
                let a = a.evaluate(t, x, l)?;
                let b = b.evaluate(t, x, l)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, args) => {
                let arg = |k: usize| args[k].evaluate(t, x, l);
                match f {
                    Func::Sin => arg(0)?.sin(),
                    Func::Cos => arg(0)?.cos(),
                    Func::Exp => arg(0)?.exp(),
                    Func::Tanh => arg(0)?.tanh(),
                    Func::Abs => arg(0)?.abs(),
                    Func::Sqrt => {
                        let v = arg(0)?;
                        if v < 0.0 {
                            return Err(EvalError::NegativeSqrt(v));
                        }
                        v.sqrt()
                    }
                    Func::Min => arg(0)?.min(arg(1)?),
                    Func::Max => arg(0)?.max(arg(1)?),
                    Func::Clamp => {
                        let (v, lo, hi) = (arg(0)?, arg(1)?, arg(2)?);
                        if lo > hi {
                            return Err(EvalError::Other(format!("clamp bounds reversed: {lo} > {hi}")));
                        }
                        v.clamp(lo, hi)
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(self.to_string()))
        }
    }

    /// Variables referenced anywhere in the expression.
    pub fn free_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Neg(e) => e.collect_vars(out),
            Expr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Wraps the expression as a shareable field; closed expressions are
    /// folded to a constant first.
    pub fn into_field(self) -> Result<Field, EvalError> {
        if self.free_vars().is_empty() {
            let v = self.evaluate(0.0, 0.0, 0.0)?;
            return Ok(Arc::new(move |_, _, _| Ok(v)));
        }
        let e = Arc::new(self);
        Ok(Arc::new(move |t, x, l| e.evaluate(t, x, l)))
    }

    // Binding strength used by the printer: how tightly the node holds
    // together when it appears as an operand.
    fn level(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Bin(BinOp::Pow, ..) => 3,
            Expr::Neg(_) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Prints with the fewest parentheses that re-parse to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => {
                f.write_str("-")?;
                write_operand(f, e, e.level() < 4)
            }
            Expr::Bin(op, a, b) => {
                let (sym, left_parens, right_parens) = match op {
                    BinOp::Add => ("+", a.level() < 1, b.level() <= 1),
                    BinOp::Sub => ("-", a.level() < 1, b.level() <= 1),
                    BinOp::Mul => ("*", a.level() < 2, b.level() <= 2),
                    BinOp::Div => ("/", a.level() < 2, b.level() <= 2),
                    // Left operand must be a unary, right operand a factor.
                    BinOp::Pow => ("^", a.level() < 4, b.level() < 3),
                };
                write_operand(f, a, left_parens)?;
                write!(f, " {sym} ")?;
                write_operand(f, b, right_parens)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}
