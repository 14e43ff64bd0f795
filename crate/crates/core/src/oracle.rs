//! Reference values independent of the solver: exponential transform,
//! Girsanov shift and linear ODE.

use serde::Serialize;
use thiserror::Error;

use crate::quadrature::{expect_normal_2d, expect_normal_checked, QuadratureError};

/// Agreement required between successive quadrature rules.
pub const QUADRATURE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("invalid argument {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCase {
    pub name: String,
    pub params: String,
    /// Reference Y_0 per component.
    pub y0: Vec<f64>,
    pub method: &'static str,
    pub validity: &'static str,
}

/// `Y_0^i = (s_i/gamma_i) ln E[exp(s_i gamma_i h^i(B_T))]` for the diagonal
/// generator `g^i = s_i (gamma_i/2)|z^i|^2`, d = 1.
pub fn pure_quadratic_case(
    gammas: &[f64],
    signs: &[f64],
    h: &[&dyn Fn(f64) -> f64],
    horizon: f64,
) -> Result<OracleCase, OracleError> {
    if gammas.len() != signs.len() || gammas.len() != h.len() {
        return Err(OracleError::InvalidArgument {
            name: "components",
            reason: "gammas, signs and terminals must have equal length".into(),
        });
    }
    let s = horizon.sqrt();
    let mut y0 = Vec::with_capacity(h.len());
    for ((&g, &sign), f) in gammas.iter().zip(signs).zip(h) {
        if g <= 0.0 || sign.abs() != 1.0 {
            return Err(OracleError::InvalidArgument {
                name: "gamma, sign",
                reason: format!("need gamma > 0 and sign = +-1, got {g}, {sign}"),
            });
        }
        let v = expect_normal_checked(|x| (sign * g * f(s * x)).exp(), QUADRATURE_TOL)?;
        y0.push(sign / g * v.value.ln());
    }
    Ok(OracleCase {
        name: "pure_quadratic".into(),
        params: format!("gamma = {gammas:?}, sign = {signs:?}, T = {horizon}"),
        y0,
        method: "exponential transform, Gauss-Hermite quadrature",
        validity: "diagonal generator s (gamma/2)|z^i|^2 with terminal h^i(B_T), d = 1",
    })
}

/// `Y_0 = E[h(B_T + mu T)] + c T` for the generator `mu . z + c`, d = 1 or 2.
pub fn linear_case(mu: &[f64], c: f64, h: &dyn Fn(&[f64]) -> f64, horizon: f64) -> Result<OracleCase, OracleError> {
    let s = horizon.sqrt();
    let y0 = match mu.len() {
        // kinked terminals fall back to adaptive quadrature
        1 => expect_normal_checked(|x| h(&[s * x + mu[0] * horizon]), QUADRATURE_TOL)?.value,
        2 => {
            let value = |n: usize| expect_normal_2d(|x, y| h(&[s * x + mu[0] * horizon, s * y + mu[1] * horizon]), n);
            let (coarse, fine) = (value(60), value(120));
            if (coarse - fine).abs() > QUADRATURE_TOL * fine.abs().max(1.0) {
                return Err(QuadratureError::NotConverged {
                    coarse,
                    fine,
                    tol: QUADRATURE_TOL,
                }
                .into());
            }
            fine
        }
        d => {
            return Err(OracleError::InvalidArgument {
                name: "mu",
                reason: format!("quadrature covers d = 1 or 2, got {d}"),
            })
        }
    };
    Ok(OracleCase {
        name: "linear".into(),
        params: format!("mu = {mu:?}, c = {c}, T = {horizon}"),
        y0: vec![y0 + c * horizon],
        method: "Girsanov shift, Gauss-Hermite quadrature",
        validity: "generator mu . z + c with terminal h(B_T)",
    })
}

/// `Y_t^i = c_i e^{beta (T - t)}` for `g^i = beta y^i` and constant terminals.
pub fn deterministic_ode_case(beta: f64, terminal: &[f64], horizon: f64) -> OracleCase {
    let f = (beta * horizon).exp();
    OracleCase {
        name: "deterministic_ode".into(),
        params: format!("beta = {beta}, c = {terminal:?}, T = {horizon}"),
        y0: terminal.iter().map(|c| c * f).collect(),
        method: "linear ODE",
        validity: "generator beta y^i with constant terminals; Z = 0",
    }
}

/// The backward Euler counterpart of the ODE factor, `(1 - beta dt)^{-N}`,
/// which the frozen-Y iteration reaches as its fixed point.
pub fn implicit_euler_factor(beta: f64, horizon: f64, steps: usize) -> f64 {
    (1.0 - beta * horizon / steps as f64).powi(-(steps as i32))
}
