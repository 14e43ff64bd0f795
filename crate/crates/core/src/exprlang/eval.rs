use thiserror::Error;

use super::ast::{BinaryOp, Expr, NormArg, UnaryOp, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    LogOfNonPositive,
    SqrtOfNegative,
    ZeroToNegativePower,
    NonFinite,
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DomainKind::DivisionByZero => "division by zero",
            DomainKind::LogOfNonPositive => "logarithm of a non-positive value",
            DomainKind::SqrtOfNegative => "square root of a negative value",
            DomainKind::ZeroToNegativePower => "zero raised to a negative power",
            DomainKind::NonFinite => "non-finite result",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} in `{subexpr}`")]
pub struct DomainError {
    pub kind: DomainKind,
    pub subexpr: String,
}

/// Values bound to the free variables. `z` is row-major with `d` columns.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub t: f64,
    pub x: f64,
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub b: &'a [f64],
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn fail(kind: DomainKind, e: &Expr) -> DomainError {
    DomainError {
        kind,
        subexpr: e.to_string(),
    }
}

pub fn eval(e: &Expr, env: &Env<'_>) -> Result<f64, DomainError> {
    let v = match e {
        Expr::Lit(v) => *v,
        Expr::Const { value, .. } => *value,
        Expr::Var(v) => match *v {
            Var::T => env.t,
            Var::X => env.x,
            Var::Y(i) => env.y[i],
            Var::B(i) => env.b[i],
            Var::Z { flat, .. } => env.z[flat],
        },
        Expr::Norm(arg) => match *arg {
            NormArg::Y => norm(env.y),
            NormArg::Z => norm(env.z),
            NormArg::B => norm(env.b),
            NormArg::ZRow { row, width } => norm(&env.z[row * width..(row + 1) * width]),
        },
        Expr::Unary(op, a) => {
            let a = eval(a, env)?;
            match op {
                UnaryOp::Neg => -a,
                UnaryOp::Abs => a.abs(),
                UnaryOp::Sgn => {
                    if a > 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                UnaryOp::Sin => a.sin(),
                UnaryOp::Cos => a.cos(),
                UnaryOp::Exp => a.exp(),
                UnaryOp::Ln => {
                    if a <= 0.0 {
                        return Err(fail(DomainKind::LogOfNonPositive, e));
                    }
                    a.ln()
                }
                UnaryOp::Sqrt => {
                    if a < 0.0 {
                        return Err(fail(DomainKind::SqrtOfNegative, e));
                    }
                    a.sqrt()
                }
            }
        }
        Expr::Binary(op, a, b) => {
            let a = eval(a, env)?;
            let b = eval(b, env)?;
            match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b == 0.0 {
                        return Err(fail(DomainKind::DivisionByZero, e));
                    }
                    a / b
                }
                BinaryOp::Pow => {
                    if a == 0.0 && b < 0.0 {
                        return Err(fail(DomainKind::ZeroToNegativePower, e));
                    }
                    if b == 2.0 {
                        a * a
                    } else {
                        a.powf(b)
                    }
                }
                BinaryOp::Min => a.min(b),
                BinaryOp::Max => a.max(b),
            }
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(fail(DomainKind::NonFinite, e))
    }
}
