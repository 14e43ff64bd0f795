use std::fmt;

/// Variables resolved at parse time. Indices are zero-based; `Z` carries the
/// flattened row-major offset alongside its (row, column) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Var {
    T,
    X,
    Y(usize),
    Z { row: usize, col: usize, flat: usize },
    B(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormArg {
    Y,
    Z,
    B,
    /// Row `row` of z, stored with the row width `d`.
    ZRow { row: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sgn,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    Var(Var),
    Const { name: String, value: f64 },
    Norm(NormArg),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Abs => "abs",
            UnaryOp::Sgn => "sgn",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "abs" => UnaryOp::Abs,
            "sgn" => UnaryOp::Sgn,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "ln" => UnaryOp::Ln,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
    }
}

impl BinaryOp {
    pub(crate) fn from_function_name(name: &str) -> Option<Self> {
        Some(match name {
            "pow" => BinaryOp::Pow,
            "min" => BinaryOp::Min,
            "max" => BinaryOp::Max,
            _ => return None,
        })
    }

    fn infix_symbol(self) -> Option<&'static str> {
        match self {
            BinaryOp::Add => Some("+"),
            BinaryOp::Sub => Some("-"),
            BinaryOp::Mul => Some("*"),
            BinaryOp::Div => Some("/"),
            BinaryOp::Pow => Some("^"),
            BinaryOp::Min | BinaryOp::Max => None,
        }
    }
}

impl Expr {
    /// Every node of the tree, depth first.
    pub fn nodes(&self) -> usize {
        match self {
            Expr::Lit(_) | Expr::Var(_) | Expr::Const { .. } | Expr::Norm(_) => 1,
            Expr::Unary(_, a) => 1 + a.nodes(),
            Expr::Binary(_, a, b) => 1 + a.nodes() + b.nodes(),
        }
    }

    /// True when the expression reads any row of z other than `row`
    /// (including whole-matrix norms).
    pub fn reads_other_rows(&self, row: usize) -> bool {
        match self {
            Expr::Var(Var::Z { row: r, .. }) => *r != row,
            Expr::Norm(NormArg::Z) => true,
            Expr::Norm(NormArg::ZRow { row: r, .. }) => *r != row,
            Expr::Lit(_) | Expr::Var(_) | Expr::Const { .. } | Expr::Norm(_) => false,
            Expr::Unary(_, a) => a.reads_other_rows(row),
            Expr::Binary(_, a, b) => a.reads_other_rows(row) || b.reads_other_rows(row),
        }
    }
}

fn fmt_literal(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if v < 0.0 {
        write!(f, "(-{:?})", -v)
    } else {
        write!(f, "{v:?}")
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised output; reparses to an identical tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => fmt_literal(*v, f),
            Expr::Const { name, .. } => f.write_str(name),
            Expr::Var(v) => match v {
                Var::T => f.write_str("t"),
                Var::X => f.write_str("x"),
                Var::Y(i) => write!(f, "y{}", i + 1),
                Var::B(i) => write!(f, "b{}", i + 1),
                Var::Z { row, col, .. } => write!(f, "z[{}][{}]", row + 1, col + 1),
            },
            Expr::Norm(arg) => match arg {
                NormArg::Y => f.write_str("norm(y)"),
                NormArg::Z => f.write_str("norm(z)"),
                NormArg::B => f.write_str("norm(b)"),
                NormArg::ZRow { row, .. } => write!(f, "norm(zrow({}))", row + 1),
            },
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => match op.infix_symbol() {
                Some(sym) => write!(f, "({a} {sym} {b})"),
                None => {
                    let name = if *op == BinaryOp::Min { "min" } else { "max" };
                    write!(f, "{name}({a}, {b})")
                }
            },
        }
    }
}
