//! Generator models g(t, y, z), terminal conditions and sampled checks of
//! the structural assumptions.
//!
//! Matrices z in R^{n x d} are passed as row-major slices of length `n*d`.
//! Component and row indices are zero-based throughout the Rust API.

mod family;
mod structural;
mod validate;

use std::sync::Arc;

use thiserror::Error;

use crate::exprlang::{DomainError, Env, Expr};
use crate::quasi::Kronecker;

pub use family::Family;
pub use structural::{Modulus, StructuralConstants};
pub use validate::{
    theorem_tags, validate_b, validate_b4, validate_h, validate_h3, Assumption, ComponentReport,
    ValidationOptions, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid constant {name}: {reason}")]
    InvalidConstant { name: &'static str, reason: String },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("component {component}: {source}")]
    Domain {
        component: usize,
        #[source]
        source: DomainError,
    },
    #[error("alpha is negative ({value}) at t = {t}")]
    NegativeAlpha { t: f64, value: f64 },
    #[error("component {component} is flagged diagonal but reads other rows of z")]
    NotDiagonal { component: usize },
    #[error("terminal component {component} reaches {value}, above the declared bound {bound}")]
    TerminalUnbounded {
        component: usize,
        value: f64,
        bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convexity {
    Convex,
    Concave,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Builtin(Family),
    Expr(Expr),
}

impl Component {
    fn reads_other_rows(&self, row: usize) -> bool {
        match self {
            Component::Builtin(f) => f.reads_other_rows(row),
            Component::Expr(e) => e.reads_other_rows(row),
        }
    }
}

/// Returns a copy of `z` (`rows x width`, row-major) with row `i` replaced.
pub fn substitute_row(z: &[f64], width: usize, i: usize, row: &[f64]) -> Result<Vec<f64>, ModelError> {
    let rows = z.len() / width.max(1);
    if i >= rows {
        return Err(ModelError::RowIndex { index: i, rows });
    }
    if row.len() != width {
        return Err(ModelError::Dimension {
            what: "substituted row",
            expected: width,
            got: row.len(),
        });
    }
    let mut out = z.to_vec();
    out[i * width..(i + 1) * width].copy_from_slice(row);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    constants: StructuralConstants,
    components: Vec<Component>,
    alpha: Expr,
    diagonal: Vec<bool>,
    convexity: Vec<Convexity>,
}

impl GeneratorModel {
    pub fn new(
        constants: StructuralConstants,
        components: Vec<Component>,
        alpha: Expr,
        diagonal: Vec<bool>,
        convexity: Vec<Convexity>,
    ) -> Result<Self, ModelError> {
        constants.check()?;
        let n = constants.n;
        for (what, got) in [
            ("generator components", components.len()),
            ("diagonal flags", diagonal.len()),
            ("convexity tags", convexity.len()),
        ] {
            if got != n {
                return Err(ModelError::Dimension {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        let model = GeneratorModel {
            constants,
            components,
            alpha,
            diagonal,
            convexity,
        };
        model.check_alpha()?;
        model.check_diagonal()?;
        Ok(model)
    }

    /// Every component diagonal, convexity untagged, alpha = 0.
    pub fn diagonal(constants: StructuralConstants, components: Vec<Component>) -> Result<Self, ModelError> {
        let n = constants.n;
        GeneratorModel::new(
            constants,
            components,
            Expr::Lit(0.0),
            vec![true; n],
            vec![Convexity::None; n],
        )
    }

    pub fn with_convexity(mut self, convexity: Vec<Convexity>) -> Self {
        assert_eq!(convexity.len(), self.n());
        self.convexity = convexity;
        self
    }

    pub fn constants(&self) -> &StructuralConstants {
        &self.constants
    }

    pub fn n(&self) -> usize {
        self.constants.n
    }

    pub fn d(&self) -> usize {
        self.constants.d
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_diagonal(&self, i: usize) -> bool {
        self.diagonal[i]
    }

    pub fn all_diagonal(&self) -> bool {
        self.diagonal.iter().all(|&b| b)
    }

    pub fn convexity(&self) -> &[Convexity] {
        &self.convexity
    }

    pub fn alpha_expr(&self) -> &Expr {
        &self.alpha
    }

    /// True if component `i` reads y. Builtins know this exactly; expression
    /// components are assumed to.
    pub fn depends_on_y(&self, i: usize) -> bool {
        match &self.components[i] {
            Component::Builtin(f) => f.depends_on_y(),
            Component::Expr(_) => true,
        }
    }

    pub fn evaluate_component(&self, i: usize, t: f64, y: &[f64], z: &[f64]) -> Result<f64, ModelError> {
        match &self.components[i] {
            Component::Builtin(f) => Ok(f.eval(i, y, z, self.constants.d)),
            Component::Expr(e) => e
                .eval(&Env {
                    t,
                    x: 0.0,
                    y,
                    z,
                    b: &[],
                })
                .map_err(|source| ModelError::Domain { component: i, source }),
        }
    }

    pub fn evaluate(&self, t: f64, y: &[f64], z: &[f64]) -> Result<Vec<f64>, ModelError> {
        (0..self.n()).map(|i| self.evaluate_component(i, t, y, z)).collect()
    }

    pub fn alpha(&self, t: f64, b: &[f64]) -> Result<f64, ModelError> {
        self.alpha
            .eval(&Env {
                t,
                x: 0.0,
                y: &[],
                z: &[],
                b,
            })
            .map_err(|source| ModelError::Domain {
                component: usize::MAX,
                source,
            })
    }

    fn check_alpha(&self) -> Result<(), ModelError> {
        let c = &self.constants;
        let q = Kronecker::new(1 + c.d, 0x0a1f_a000);
        let mut u = vec![0.0; 1 + c.d];
        let r = 8.0 * c.horizon.sqrt();
        let mut b = vec![0.0; c.d];
        for k in 0..256 {
            q.point(k, &mut u);
            let t = u[0] * c.horizon;
            for (bj, uj) in b.iter_mut().zip(&u[1..]) {
                *bj = (2.0 * uj - 1.0) * r;
            }
            let v = self.alpha(t, &b)?;
            if v < 0.0 {
                return Err(ModelError::NegativeAlpha { t, value: v });
            }
        }
        Ok(())
    }

    fn check_diagonal(&self) -> Result<(), ModelError> {
        for i in 0..self.n() {
            if self.diagonal[i] && self.components[i].reads_other_rows(i) {
                return Err(ModelError::NotDiagonal { component: i });
            }
        }
        Ok(())
    }
}

type NativeTerminal = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Terminal value xi = h(B_T), one function per component.
#[derive(Clone)]
pub struct TerminalCondition {
    n: usize,
    d: usize,
    exprs: Vec<Expr>,
    native: Option<NativeTerminal>,
    bounded: bool,
}

impl std::fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("exprs", &self.exprs.iter().map(|e| e.to_string()).collect::<Vec<_>>())
            .field("native", &self.native.is_some())
            .field("bounded", &self.bounded)
            .finish()
    }
}

impl TerminalCondition {
    pub fn from_exprs(exprs: Vec<Expr>, d: usize, bounded: bool) -> Self {
        TerminalCondition {
            n: exprs.len(),
            d,
            exprs,
            native: None,
            bounded,
        }
    }

    /// A terminal given by a Rust closure writing all `n` components.
    pub fn from_fn(n: usize, d: usize, bounded: bool, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        TerminalCondition {
            n,
            d,
            exprs: Vec::new(),
            native: Some(Arc::new(f)),
            bounded,
        }
    }

    /// The same scalar function of b in every component.
    pub fn scalar(n: usize, d: usize, bounded: bool, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TerminalCondition::from_fn(n, d, bounded, move |b, out| {
            let v = f(b);
            out.iter_mut().for_each(|o| *o = v);
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn eval(&self, b: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        if let Some(f) = &self.native {
            f(b, out);
            return Ok(());
        }
        let env = Env {
            b,
            ..Env::default()
        };
        for (i, e) in self.exprs.iter().enumerate() {
            out[i] = e
                .eval(&env)
                .map_err(|source| ModelError::Domain { component: i, source })?;
        }
        Ok(())
    }

    /// Checks `|h(b)| <= bound` on a grid of +-8 sqrt(T) per coordinate.
    pub fn check_bound(&self, bound: f64, horizon: f64) -> Result<(), ModelError> {
        let r = 8.0 * horizon.sqrt();
        let per_axis: usize = match self.d {
            1 => 4001,
            2 => 201,
            3 => 41,
            _ => 11,
        };
        let total = per_axis.pow(self.d as u32);
        let mut b = vec![0.0; self.d];
        let mut out = vec![0.0; self.n];
        for flat in 0..total {
            let mut rest = flat;
            for bj in b.iter_mut() {
                let j = rest % per_axis;
                rest /= per_axis;
                *bj = -r + 2.0 * r * j as f64 / (per_axis - 1) as f64;
            }
            self.eval(&b, &mut out)?;
            for (i, &v) in out.iter().enumerate() {
                if !(v.abs() <= bound * (1.0 + 1e-12)) {
                    return Err(ModelError::TerminalUnbounded {
                        component: i,
                        value: v,
                        bound,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::{parse, Scope};

    fn quad(n: usize, d: usize, gamma: f64) -> GeneratorModel {
        let c = StructuralConstants::new(n, d, 1.0, gamma);
        GeneratorModel::diagonal(
            c,
            (0..n)
                .map(|_| Component::Builtin(Family::DiagonalQuadratic { gamma, sign: 1.0 }))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_generator() {
        let c = StructuralConstants::new(3, 2, 1.0, 1.0);
        let m = GeneratorModel::diagonal(c, vec![Component::Builtin(Family::Zero); 3]).unwrap();
        let v = m.evaluate(0.5, &[1.0, -2.0, 3.0], &[1.0; 6]).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn diagonal_quadratic_formula() {
        let m = quad(2, 2, 2.0);
        let v = m.evaluate(0.0, &[0.0, 0.0], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(v, vec![1.0, 4.0]);
    }

    #[test]
    fn polynomial_y_growth_example() {
        let c = StructuralConstants::new(2, 2, 1.0, 1.0);
        let m = GeneratorModel::new(
            c,
            vec![Component::Builtin(Family::PolynomialYGrowth); 2],
            Expr::Lit(0.0),
            vec![false; 2],
            vec![Convexity::None; 2],
        )
        .unwrap();
        let g = m.evaluate(0.0, &[0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((g[0] - (1f64.sin() + 2.0)).abs() < 1e-14);
        assert!((g[0] - 2.841_470_984_807_896_5).abs() < 1e-12);
    }

    #[test]
    fn exponential_example_matches_its_expression() {
        let c = StructuralConstants::new(2, 2, 1.0, 1.0);
        let src = "(exp(-y1)+cos(norm(zrow(1))))*norm(z) - norm(z)^(4/3) - norm(zrow(1))^2";
        let e = parse(src, &Scope::generator(2, 2)).unwrap();
        let fam = Family::ExponentialYGrowth;
        let y = [0.3, -0.7];
        let z = [0.2, -1.1, 0.5, 0.9];
        let direct = e
            .eval(&Env {
                y: &y,
                z: &z,
                ..Env::default()
            })
            .unwrap();
        let built = fam.eval(0, &y, &z, c.d);
        assert!((direct - built).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn substitute_row_definition() {
        let z = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(substitute_row(&z, 2, 0, &[5.0, 5.0]).unwrap(), vec![5.0, 5.0, 0.0, 1.0]);
        assert_eq!(substitute_row(&z, 2, 1, &[0.0, 1.0]).unwrap(), z.to_vec());
        assert!(matches!(
            substitute_row(&z, 2, 2, &[0.0, 1.0]),
            Err(ModelError::RowIndex { .. })
        ));
    }

    #[test]
    fn diagonal_flag_is_enforced() {
        let c = StructuralConstants::new(2, 1, 1.0, 1.0);
        let off = GeneratorModel::diagonal(
            c.clone(),
            vec![
                Component::Builtin(Family::OffDiagonalQuadratic { row: 1 }),
                Component::Builtin(Family::Zero),
            ],
        );
        assert!(matches!(off, Err(ModelError::NotDiagonal { component: 0 })));
        let e = parse("z[2][1]", &Scope::generator(2, 1)).unwrap();
        let off = GeneratorModel::diagonal(c, vec![Component::Expr(e), Component::Builtin(Family::Zero)]);
        assert!(matches!(off, Err(ModelError::NotDiagonal { component: 0 })));
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let c = StructuralConstants::new(1, 1, 1.0, 1.0);
        let a = parse("b1", &Scope::alpha(1)).unwrap();
        let r = GeneratorModel::new(
            c,
            vec![Component::Builtin(Family::Zero)],
            a,
            vec![true],
            vec![Convexity::None],
        );
        assert!(matches!(r, Err(ModelError::NegativeAlpha { .. })));
    }

    #[test]
    fn domain_errors_carry_component() {
        let c = StructuralConstants::new(2, 1, 1.0, 1.0);
        let e = parse("ln(y2)", &Scope::generator(2, 1)).unwrap();
        let m = GeneratorModel::diagonal(c, vec![Component::Builtin(Family::Zero), Component::Expr(e)]).unwrap();
        let err = m.evaluate(0.0, &[1.0, -1.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, ModelError::Domain { component: 1, .. }));
    }

    #[test]
    fn terminal_bound_check() {
        let s = Scope::terminal(1);
        let clipped = TerminalCondition::from_exprs(vec![parse("max(-3, min(3, b1))", &s).unwrap()], 1, true);
        assert!(clipped.check_bound(3.0, 1.0).is_ok());
        assert!(clipped.check_bound(2.5, 1.0).is_err());
        let mut out = [0.0];
        clipped.eval(&[5.0], &mut out).unwrap();
        assert_eq!(out[0], 3.0);
    }
}
