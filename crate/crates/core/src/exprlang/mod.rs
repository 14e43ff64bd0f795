//! A small arithmetic language for generator components, terminal
//! functions, the alpha process and the growth modulus.
//!
//! Precedence from loosest to tightest: `+ -`, `* /`, unary minus, `^`
//! (right associative). So `-2^2` is `-(2^2)` and `2^-1` is allowed.

mod ast;
mod eval;
mod parse;

pub use ast::{BinaryOp, Expr, NormArg, UnaryOp, Var};
pub use eval::{eval, DomainError, DomainKind, Env};
pub use parse::{parse, ParseError, Scope};

impl Expr {
    pub fn parse(src: &str, scope: &Scope) -> Result<Expr, ParseError> {
        parse(src, scope)
    }

    pub fn eval(&self, env: &Env<'_>) -> Result<f64, DomainError> {
        eval(self, env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gen(n: usize, d: usize) -> Scope {
        Scope::generator(n, d)
    }

    fn eval_at(src: &str, y: &[f64], z: &[f64]) -> f64 {
        let e = parse(src, &gen(y.len(), z.len() / y.len().max(1))).unwrap();
        e.eval(&Env {
            y,
            z,
            ..Env::default()
        })
        .unwrap()
    }

    #[test]
    fn half_norm_squared_of_first_row() {
        let v = eval_at("0.5*norm(zrow(1))^2", &[0.0, 0.0], &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(v, 12.5);
    }

    #[test]
    fn precedence() {
        let s = Scope::scalar();
        let e = |src: &str| parse(src, &s).unwrap().eval(&Env::default()).unwrap();
        assert_eq!(e("-2^2"), -4.0);
        assert_eq!(e("2^3^2"), 512.0);
        assert_eq!(e("2^-1"), 0.5);
        assert_eq!(e("1+2*3"), 7.0);
        assert_eq!(e("(1+2)*3"), 9.0);
        assert_eq!(e("8/4/2"), 1.0);
        assert_eq!(e("1-2-3"), -4.0);
        assert_eq!(e("-3*-2"), 6.0);
        assert_eq!(e("1.5e2 + 2E-1"), 150.2);
    }

    #[test]
    fn functions() {
        let s = Scope::scalar();
        let e = |src: &str| parse(src, &s).unwrap().eval(&Env::default()).unwrap();
        assert_eq!(e("sgn(0)"), -1.0);
        assert_eq!(e("sgn(2)"), 1.0);
        assert_eq!(e("abs(-3)"), 3.0);
        assert_eq!(e("min(1, 2)"), 1.0);
        assert_eq!(e("max(1, 2)"), 2.0);
        assert_eq!(e("pow(2, 10)"), 1024.0);
        assert_eq!(e("exp(0) + ln(1) + sqrt(4)"), 3.0);
    }

    #[test]
    fn domain_error_names_subexpression() {
        let e = parse("y1 + ln(y1 - 1)", &gen(1, 1)).unwrap();
        let err = e
            .eval(&Env {
                y: &[0.0],
                z: &[0.0],
                ..Env::default()
            })
            .unwrap_err();
        assert_eq!(err.kind, DomainKind::LogOfNonPositive);
        assert_eq!(err.subexpr, "ln((y1 - 1.0))");
        let s = Scope::scalar();
        let div = parse("1/(x-x)", &s).unwrap().eval(&Env::default()).unwrap_err();
        assert_eq!(div.kind, DomainKind::DivisionByZero);
        let big = parse("exp(1000)", &s).unwrap().eval(&Env::default()).unwrap_err();
        assert_eq!(big.kind, DomainKind::NonFinite);
        let neg = parse("(-8)^(1/3)", &s).unwrap().eval(&Env::default()).unwrap_err();
        assert_eq!(neg.kind, DomainKind::NonFinite);
    }

    #[test]
    fn scope_errors() {
        assert!(matches!(
            parse("y3", &gen(2, 1)),
            Err(ParseError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            parse("z[1][2]", &gen(2, 1)),
            Err(ParseError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            parse("b1", &gen(2, 1)),
            Err(ParseError::NotInScope { .. })
        ));
        assert!(matches!(
            parse("y1", &Scope::terminal(1)),
            Err(ParseError::NotInScope { .. })
        ));
        assert!(matches!(
            parse("foo + 1", &Scope::scalar()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse("sin(1, 2)", &Scope::scalar()),
            Err(ParseError::Arity { .. })
        ));
        assert!(matches!(parse("1 +", &Scope::scalar()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("(1", &Scope::scalar()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("1 $ 2", &Scope::scalar()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("", &Scope::scalar()), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn named_constants_keep_their_name() {
        let s = Scope::scalar().with_constant("gamma", 2.0);
        let e = parse("gamma*x", &s).unwrap();
        assert_eq!(e.to_string(), "(gamma * x)");
        assert_eq!(
            e.eval(&Env {
                x: 3.0,
                ..Env::default()
            })
            .unwrap(),
            6.0
        );
        assert_eq!(parse(&e.to_string(), &s).unwrap(), e);
    }

    #[test]
    fn reads_other_rows() {
        let s = gen(2, 2);
        assert!(!parse("norm(zrow(1))^2 + y2", &s).unwrap().reads_other_rows(0));
        assert!(parse("z[2][1]", &s).unwrap().reads_other_rows(0));
        assert!(parse("norm(z)", &s).unwrap().reads_other_rows(1));
    }

    fn leaf() -> impl Strategy<Value = String> {
        prop_oneof![
            (0u32..1000).prop_map(|v| format!("{}", v as f64 / 8.0)),
            Just("t".to_string()),
            Just("y1".to_string()),
            Just("y2".to_string()),
            Just("z[1][1]".to_string()),
            Just("z[2][2]".to_string()),
            Just("norm(z)".to_string()),
            Just("norm(zrow(2))".to_string()),
            Just("k".to_string()),
        ]
    }

    fn tree() -> impl Strategy<Value = String> {
        leaf().prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), 0usize..5).prop_map(|(a, b, op)| {
                    let sym = ["+", "-", "*", "/", "^"][op];
                    format!("{a} {sym} {b}")
                }),
                (inner.clone(), 0usize..7).prop_map(|(a, f)| {
                    let name = ["abs", "sgn", "sin", "cos", "exp", "ln", "sqrt"][f];
                    format!("{name}({a})")
                }),
                (inner.clone(), inner.clone(), 0usize..3).prop_map(|(a, b, f)| {
                    let name = ["min", "max", "pow"][f];
                    format!("{name}({a}, {b})")
                }),
                inner.clone().prop_map(|a| format!("-{a}")),
                inner.prop_map(|a| format!("({a})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(src in tree()) {
            let s = gen(2, 2).with_constant("k", 0.25);
            let e = parse(&src, &s).unwrap();
            let again = parse(&e.to_string(), &s).unwrap();
            prop_assert_eq!(again, e);
        }

        #[test]
        fn evaluation_is_finite_or_domain_error(
            src in tree(),
            y in prop::array::uniform2(-5.0f64..5.0),
            z in prop::array::uniform4(-5.0f64..5.0),
        ) {
            let s = gen(2, 2).with_constant("k", 0.25);
            let e = parse(&src, &s).unwrap();
            match e.eval(&Env { t: 0.3, x: 0.0, y: &y, z: &z, b: &[] }) {
                Ok(v) => prop_assert!(v.is_finite()),
                Err(err) => prop_assert!(!err.subexpr.is_empty()),
            }
        }
    }
}
