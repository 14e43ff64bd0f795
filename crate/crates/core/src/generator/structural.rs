use std::fmt;

use serde::{Serialize, Serializer};

use super::ModelError;
use crate::exprlang::{Env, Expr};

/// The growth modulus phi: nondecreasing on [0, inf) with phi(0) = 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Modulus {
    Zero,
    /// `coef * x^exponent`, exponent > 0.
    Power { coef: f64, exponent: f64 },
    /// `slope * x`.
    Affine { slope: f64 },
    /// An expression in the single variable `x`.
    Expr(Expr),
}

impl Modulus {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Modulus::Zero => 0.0,
            Modulus::Power { coef, exponent } => coef * x.powf(*exponent),
            Modulus::Affine { slope } => slope * x,
            Modulus::Expr(e) => e
                .eval(&Env {
                    x,
                    ..Env::default()
                })
                .unwrap_or(f64::NAN),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Modulus::Zero => true,
            Modulus::Power { coef, .. } => *coef == 0.0,
            Modulus::Affine { slope } => *slope == 0.0,
            Modulus::Expr(_) => false,
        }
    }
}

impl fmt::Display for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulus::Zero => f.write_str("0.0"),
            Modulus::Power { coef, exponent } => write!(f, "({coef:?} * (x ^ {exponent:?}))"),
            Modulus::Affine { slope } => write!(f, "({slope:?} * x)"),
            Modulus::Expr(e) => write!(f, "{e}"),
        }
    }
}

fn as_text<S: Serializer>(m: &Modulus, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&m.to_string())
}

/// Dimensions, horizon and every structural constant of the assumptions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralConstants {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_bar: f64,
    pub lambda: f64,
    pub delta: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(serialize_with = "as_text")]
    pub phi: Modulus,
}

impl StructuralConstants {
    /// Constants with all growth terms switched off: `beta = lambda = delta
    /// = C1 = C2 = 0`, `phi = 0`, `gamma_bar = gamma`.
    pub fn new(n: usize, d: usize, horizon: f64, gamma: f64) -> Self {
        StructuralConstants {
            n,
            d,
            horizon,
            beta: 0.0,
            gamma,
            gamma_bar: gamma,
            lambda: 0.0,
            delta: 0.0,
            c1: 0.0,
            c2: 0.0,
            phi: Modulus::Zero,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |name: &'static str, reason: &str| {
            Err(ModelError::InvalidConstant {
                name,
                reason: reason.to_string(),
            })
        };
        let finite = [
            ("T", self.horizon),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("gamma_bar", self.gamma_bar),
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("C1", self.c1),
            ("C2", self.c2),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return bad(name, "must be finite");
            }
        }
        if self.n == 0 {
            return bad("n", "must be at least 1");
        }
        if self.d == 0 {
            return bad("d", "must be at least 1");
        }
        if self.horizon <= 0.0 {
            return bad("T", "must be positive");
        }
        if self.gamma <= 0.0 {
            return bad("gamma", "must be positive");
        }
        if !(self.gamma_bar > 0.0 && self.gamma_bar <= self.gamma) {
            return bad("gamma_bar", "must satisfy 0 < gamma_bar <= gamma");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta", "must lie in [0, 1)");
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("C1", self.c1), ("C2", self.c2)] {
            if v < 0.0 {
                return bad(name, "must be non-negative");
            }
        }
        let at0 = self.phi.eval(0.0);
        if at0 != 0.0 {
            return bad("phi", &format!("phi(0) = {at0}, expected 0"));
        }
        let mut prev = 0.0;
        for j in 1..=2000 {
            let x = j as f64 * 0.05;
            let v = self.phi.eval(x);
            if !v.is_finite() {
                return bad("phi", &format!("phi({x}) is not finite"));
            }
            if v < prev {
                return bad("phi", &format!("phi decreases near x = {x}"));
            }
            prev = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::{parse, Scope};

    #[test]
    fn rejects_bad_constants() {
        let ok = StructuralConstants::new(2, 1, 1.0, 1.0);
        assert!(ok.check().is_ok());
        let mut c = ok.clone();
        c.gamma_bar = 2.0;
        assert!(c.check().is_err());
        let mut c = ok.clone();
        c.delta = 1.0;
        assert!(c.check().is_err());
        let mut c = ok.clone();
        c.phi = Modulus::Expr(parse("1 + x", &Scope::scalar()).unwrap());
        assert!(c.check().is_err());
        let mut c = ok.clone();
        c.phi = Modulus::Expr(parse("sin(x)", &Scope::scalar()).unwrap());
        assert!(c.check().is_err());
        let mut c = ok;
        c.phi = Modulus::Expr(parse("exp(2*x) - 1", &Scope::scalar()).unwrap());
        assert!(c.check().is_ok());
    }

    #[test]
    fn modulus_text_reparses() {
        for m in [
            Modulus::Zero,
            Modulus::Power {
                coef: 2.0,
                exponent: 1.5,
            },
            Modulus::Affine { slope: 0.5 },
        ] {
            let e = parse(&m.to_string(), &Scope::scalar()).unwrap();
            for x in [0.0, 0.3, 2.0] {
                let v = e
                    .eval(&Env {
                        x,
                        ..Env::default()
                    })
                    .unwrap();
                assert!((v - m.eval(x)).abs() < 1e-14);
            }
        }
    }
}
