//! Estimators of the process norms on discrete solutions. Stopping-time
//! suprema are replaced by suprema over grid nodes and essential suprema by
//! ensemble maxima; both under-estimate, and every estimate says so in its
//! note.

use rayon::prelude::*;
use serde::Serialize;

use crate::field::Field;
use crate::paths::PathEnsemble;
use crate::regression::{ordered_sum, RegressionPlan};

pub const GRID_SUP_NOTE: &str = "grid-node supremum; under-estimates the stopping-time supremum";
pub const ENSEMBLE_MAX_NOTE: &str = "ensemble maximum; under-estimates the essential supremum";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormEstimate {
    pub name: String,
    pub value: f64,
    pub note: &'static str,
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn path_sup(f: &Field, m: usize) -> f64 {
    (0..f.nodes()).map(|k| row_norm(f.at(m, k))).fold(0.0, f64::max)
}

/// Largest vector norm over paths and nodes.
pub fn s_inf(y: &Field) -> f64 {
    y.data().par_chunks(y.dim()).map(row_norm).reduce(|| 0.0, f64::max)
}

/// `(mean_m sup_k |Y|^p)^{1/p}`.
pub fn s_p(y: &Field, p: f64) -> f64 {
    (ordered_sum(y.paths(), |m| path_sup(y, m).powf(p)) / y.paths() as f64).powf(1.0 / p)
}

/// `(mean_m (sum_k |Z_k|^2 dt)^{p/2})^{1/p}`.
pub fn h_p(z: &Field, p: f64, dt: f64) -> f64 {
    let qv = |m: usize| (0..z.nodes()).map(|k| z.at(m, k).iter().map(|a| a * a).sum::<f64>()).sum::<f64>() * dt;
    (ordered_sum(z.paths(), |m| qv(m).powf(0.5 * p)) / z.paths() as f64).powf(1.0 / p)
}

/// Per node k, `max_m E_{t_k}[sum_{j >= k} |Z_j|^2 dt]` by regression on the
/// state at `offset + k`; the estimate is the square root of the largest.
pub fn bmo(z: &Field, offset: usize, ens: &PathEnsemble, plan: &RegressionPlan) -> NormEstimate {
    let per_node = bmo_profile(z, offset, ens, plan);
    NormEstimate {
        name: "bmo".into(),
        value: per_node.iter().copied().fold(0.0, f64::max).sqrt(),
        note: GRID_SUP_NOTE,
    }
}

/// The squared BMO estimate at each node.
pub fn bmo_profile(z: &Field, offset: usize, ens: &PathEnsemble, plan: &RegressionPlan) -> Vec<f64> {
    let paths = z.paths();
    let dt = ens.grid().dt();
    let mut tail = vec![0.0; paths];
    let mut out = vec![0.0; z.nodes()];
    let mut mean = vec![0.0; paths];
    for k in (0..z.nodes()).rev() {
        tail.par_iter_mut().enumerate().for_each(|(m, t)| {
            *t += z.at(m, k).iter().map(|a| a * a).sum::<f64>() * dt;
        });
        plan.conditional_mean(ens, offset + k, &tail, &mut mean);
        out[k] = mean.iter().copied().fold(0.0, f64::max);
    }
    out
}

/// `ln mean exp(x_m)` without overflow.
pub fn ln_mean_exp(x: &[f64]) -> f64 {
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    let s = ordered_sum(x.len(), |m| (x[m] - top).exp());
    top + (s / x.len() as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpMoment {
    /// Logarithm of the Monte Carlo mean; always finite for finite fields.
    pub ln_value: f64,
    /// The mean itself, infinite when it overflows.
    pub value: f64,
    pub overflow: bool,
}

impl ExpMoment {
    pub fn from_ln(ln_value: f64) -> Self {
        let value = ln_value.exp();
        ExpMoment {
            ln_value,
            value,
            overflow: !value.is_finite(),
        }
    }
}

/// Monte Carlo mean of `exp(p gamma sup_k |field|)` per path.
pub fn exp_moment(field: &Field, p: f64, gamma: f64) -> ExpMoment {
    let x: Vec<f64> = (0..field.paths())
        .into_par_iter()
        .map(|m| p * gamma * path_sup(field, m))
        .collect();
    ExpMoment::from_ln(ln_mean_exp(&x))
}

/// Monte Carlo mean of `exp(w |x_m|)` for per-path samples (terminal values
/// or integrated alpha), each sample a vector.
pub fn exp_moment_of_samples(samples: &[f64], dim: usize, w: f64) -> ExpMoment {
    let x: Vec<f64> = samples.par_chunks(dim).map(|v| w * row_norm(v)).collect();
    ExpMoment::from_ln(ln_mean_exp(&x))
}

/// The standard table for a solution: sup norm, S^2, H^2 and BMO.
pub fn norm_table(y: &Field, z: &Field, offset: usize, ens: &PathEnsemble, plan: &RegressionPlan) -> Vec<NormEstimate> {
    let dt = ens.grid().dt();
    vec![
        NormEstimate {
            name: "s_inf".into(),
            value: s_inf(y),
            note: ENSEMBLE_MAX_NOTE,
        },
        NormEstimate {
            name: "s_p(2)".into(),
            value: s_p(y, 2.0),
            note: "grid-node supremum per path",
        },
        NormEstimate {
            name: "h_p(2)".into(),
            value: h_p(z, 2.0, dt),
            note: "left-point Riemann sum",
        },
        bmo(z, offset, ens, plan),
    ]
}
