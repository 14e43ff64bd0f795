//! Closed-form evaluation of every explicit constant and bound: the local
//! radii K1, K2, eps0, the stitching step, the global bounds and the
//! exponential-moment multipliers. Nothing here touches a simulation.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::generator::StructuralConstants;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("{quantity} overflows: parameters are outside desk scale")]
    OutsideDeskScale { quantity: &'static str },
    #[error("invalid argument {name} = {value}: {reason}")]
    InvalidArgument {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

fn finite(v: f64, quantity: &'static str) -> Result<f64, BoundError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BoundError::OutsideDeskScale { quantity })
    }
}

/// Greatest integer not exceeding `x`, as a count.
fn floor_count(x: f64) -> u32 {
    x.floor().max(0.0) as u32
}

/// `((1-delta)/2) (1+delta)^{(1+delta)/(1-delta)} (n lambda)^{2/(1-delta)}`.
pub fn c_delta_lambda_n(delta: f64, lambda: f64, n: usize) -> f64 {
    let e = (1.0 + delta) / (1.0 - delta);
    0.5 * (1.0 - delta) * (1.0 + delta).powf(e) * (n as f64 * lambda).powf(2.0 / (1.0 - delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalRadii {
    pub k1: f64,
    pub k2: f64,
    /// `f64::INFINITY` when both denominators vanish (phi = 0 and lambda = 0):
    /// every eps up to T is admissible.
    pub eps0: f64,
}

pub fn local_radii(c: &StructuralConstants) -> Result<LocalRadii, BoundError> {
    let n = c.n as f64;
    let g = c.gamma;
    let k1 = n / g * 2f64.ln() + n * (c.c1 + c.c2);
    let k2 = finite(
        n / (g * g) * (2.0 * g * c.c1).exp() + n / g * (4.0 * g * k1).exp() * (1.0 + 2.0 * c.c2),
        "K2",
    )?;
    let e = (1.0 + c.delta) / (1.0 - c.delta);
    let cdl = c_delta_lambda_n(c.delta, c.lambda, c.n);
    let phi = c.phi.eval(2.0 * k1);
    let growth = finite(cdl * (2.0 * k2).powf(e), "C_{delta,lambda,n} (2 K2)^e")?;
    let quotient = |num: f64, den: f64| if den == 0.0 { f64::INFINITY } else { num / den };
    let q1 = quotient(k1, n * phi + n * g.powf(e) * growth);
    let q2 = quotient(g / n * (-4.0 * g * k1).exp() * k2, 2.0 * phi + 2.0 * growth);
    Ok(LocalRadii {
        k1,
        k2,
        eps0: q1.min(q2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StitchStep {
    /// Interval length; equals T when beta = 0.
    pub eps: f64,
    pub m0: usize,
    /// True when beta = 0 and no splitting is needed.
    pub single_interval: bool,
}

pub fn stitch_step(c: &StructuralConstants) -> StitchStep {
    if c.beta == 0.0 {
        return StitchStep {
            eps: c.horizon,
            m0: 1,
            single_interval: true,
        };
    }
    let eps = 1.0 / (2.0 * c.n as f64 * c.beta);
    let ratio = c.horizon / eps;
    // T/eps <= m0 < T/eps + 1, and at least one interval
    let m0 = (ratio.ceil() as usize).max(1);
    StitchStep {
        eps,
        m0,
        single_interval: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YoungRemainders {
    pub eps0_prime: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

pub fn young_remainders(c: &StructuralConstants) -> Result<YoungRemainders, BoundError> {
    let n = c.n as f64;
    let (g, gb, d) = (c.gamma, c.gamma_bar, c.delta);
    let t = c.horizon;
    let eps0_prime = (gb / 9.0).min(g / (12.0 * (c.beta * t + 2.0)));
    let e = (1.0 + d) / (1.0 - d);
    let young = ((1.0 + d) / 2.0).powf(e);
    let c3 = gb * eps0_prime * (1.0 - d) / (8.0 * n) * young * (12.0 * n * c.lambda / gb).powf(2.0 / (1.0 - d));
    let c4 = gb * eps0_prime * (1.0 - d) / (4.0 * n)
        * young
        * (2.0 * n * n * c.lambda * g / (gb * eps0_prime)).powf(2.0 / (1.0 - d));
    let c5 = c.c2 + (6.0 * eps0_prime * c.c2 + 2.0 * c3 * t) / (n * g) + c4 * t / (n * g);
    Ok(YoungRemainders {
        eps0_prime,
        c3: finite(c3, "C3")?,
        c4: finite(c4, "C4")?,
        c5: finite(c5, "C5")?,
    })
}

/// Sup-norm bound on Y obtained by iterating the interval recursion over
/// the stitching plan. With beta = 0 a single interval suffices and the
/// bound is `n(C1 + C2)` (variant i) or `2n(C1 + C5)` (variant ii).
pub fn stitched_bound(c: &StructuralConstants, variant: Variant) -> Result<f64, BoundError> {
    let n = c.n as f64;
    let (base, rate, tail) = match variant {
        Variant::I => (2.0 * n, 2.0 * n * c.beta * c.horizon, c.c2),
        Variant::II => (4.0 * n, 4.0 * n * c.beta * c.horizon, young_remainders(c)?.c5),
    };
    if c.beta == 0.0 {
        return Ok(base / 2.0 * (c.c1 + tail));
    }
    let top = floor_count(rate) + 2;
    let mut sum = 0.0;
    let mut pow = 1.0;
    for _ in 0..top {
        pow *= base;
        sum += pow * tail;
    }
    finite(pow * c.c1 + sum, "global bound")
}

/// The sharper exponential bounds: `n(C1+C2) e^{n beta T}` and
/// `2n(C1+C5) e^{2n beta T}`.
pub fn gronwall_bound(c: &StructuralConstants, variant: Variant) -> Result<f64, BoundError> {
    let n = c.n as f64;
    let v = match variant {
        Variant::I => n * (c.c1 + c.c2) * (n * c.beta * c.horizon).exp(),
        Variant::II => 2.0 * n * (c.c1 + young_remainders(c)?.c5) * (2.0 * n * c.beta * c.horizon).exp(),
    };
    finite(v, "Gronwall bound")
}

/// `A(q) = (q/(q-1))^{2q}`.
pub fn a_of_q(q: f64) -> Result<f64, BoundError> {
    if !(q > 1.0) {
        return Err(BoundError::InvalidArgument {
            name: "q",
            value: q,
            reason: "must exceed 1",
        });
    }
    Ok((q / (q - 1.0)).powf(2.0 * q))
}

/// The multiplier K(q) split into its coefficient and the two exponent
/// weights: `K(q) = coefficient * E[exp(xi_weight |xi|)] * E[exp(alpha_weight int alpha)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentMultiplier {
    pub a_q: f64,
    pub ln_coefficient: f64,
    pub xi_weight: f64,
    pub alpha_weight: f64,
}

impl MomentMultiplier {
    /// ln K(q) given the logarithms of the two expectations.
    pub fn ln_value(&self, ln_xi_moment: f64, ln_alpha_moment: f64) -> f64 {
        self.ln_coefficient + ln_xi_moment + ln_alpha_moment
    }
}

pub fn exp_moment_constants(c: &StructuralConstants, q: f64) -> Result<MomentMultiplier, BoundError> {
    let a_q = a_of_q(q)?;
    let n = c.n as f64;
    let j = floor_count(2.0 * n * c.beta * c.horizon) + 1;
    let ln_coefficient = j as f64 * (a_of_q(2.0 * q)?.ln() + a_of_q(8.0 * n * q)?.ln());
    let xi_weight = 4.0 * n * (8.0 * n).powi(j as i32) * q * c.gamma;
    let alpha_weight = 4.0 * n * (16.0 * n).powi(j as i32) * q * c.gamma;
    Ok(MomentMultiplier {
        a_q,
        ln_coefficient,
        xi_weight: finite(xi_weight, "K(q) weight")?,
        alpha_weight: finite(alpha_weight, "K(q) weight")?,
    })
}

/// Returns `(bound, lhs)` with `lhs = a b^{1+delta}` and
/// `bound = b^2 + ((1-delta)/2) ((1+delta)/2)^{(1+delta)/(1-delta)} a^{2/(1-delta)}`.
pub fn young_split(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let e = (1.0 + delta) / (1.0 - delta);
    let bound = b * b + 0.5 * (1.0 - delta) * ((1.0 + delta) / 2.0).powf(e) * a.powf(2.0 / (1.0 - delta));
    (bound, a * b.powf(1.0 + delta))
}

/// `1/(8 n beta)`, or `None` when beta = 0 (uniqueness holds on all of [0, T]).
pub fn uniqueness_step(c: &StructuralConstants) -> Option<f64> {
    (c.beta > 0.0).then(|| 1.0 / (8.0 * c.n as f64 * c.beta))
}

/// Every constant in one table, with the structural constants used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub constants: StructuralConstants,
    pub values: BTreeMap<String, f64>,
    /// Quantities that could not be evaluated, with the reason.
    pub diagnostics: BTreeMap<String, String>,
    /// Measured statistics and margins filled in by audits.
    pub measured: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

pub fn bound_report(c: &StructuralConstants, q: f64) -> BoundReport {
    let mut values = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    let mut put = |key: &str, v: Result<f64, BoundError>| match v {
        Ok(v) => {
            values.insert(key.to_string(), v);
        }
        Err(e) => {
            diagnostics.insert(key.to_string(), e.to_string());
        }
    };
    match local_radii(c) {
        Ok(r) => {
            put("k1", Ok(r.k1));
            put("k2", Ok(r.k2));
            put("eps0", Ok(r.eps0));
        }
        Err(e) => {
            put("k1", Ok(c.n as f64 / c.gamma * 2f64.ln() + c.n as f64 * (c.c1 + c.c2)));
            put("k2", Err(e.clone()));
            put("eps0", Err(e));
        }
    }
    put("c_dln", Ok(c_delta_lambda_n(c.delta, c.lambda, c.n)));
    let step = stitch_step(c);
    put("eps_stitch", Ok(step.eps));
    put("m0", Ok(step.m0 as f64));
    put("stitched_i", stitched_bound(c, Variant::I));
    put("stitched_ii", stitched_bound(c, Variant::II));
    match young_remainders(c) {
        Ok(y) => {
            put("eps0_prime", Ok(y.eps0_prime));
            put("c3", Ok(y.c3));
            put("c4", Ok(y.c4));
            put("c5", Ok(y.c5));
        }
        Err(e) => put("c5", Err(e)),
    }
    put("gronwall_i", gronwall_bound(c, Variant::I));
    put("gronwall_ii", gronwall_bound(c, Variant::II));
    put("a_q", a_of_q(q));
    match exp_moment_constants(c, q) {
        Ok(k) => {
            put("k_q_ln_coefficient", Ok(k.ln_coefficient));
            put("k_q_xi_weight", Ok(k.xi_weight));
            put("k_q_alpha_weight", Ok(k.alpha_weight));
        }
        Err(e) => put("k_q_ln_coefficient", Err(e)),
    }
    put("eps_bar", Ok(uniqueness_step(c).unwrap_or(f64::INFINITY)));
    BoundReport {
        constants: c.clone(),
        values,
        diagnostics,
        measured: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Modulus;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn consts(n: usize, gamma: f64, c1: f64, c2: f64) -> StructuralConstants {
        let mut c = StructuralConstants::new(n, 1, 1.0, gamma);
        c.c1 = c1;
        c.c2 = c2;
        c
    }

    #[test]
    fn c_delta_lambda_n_values() {
        assert_relative_eq!(c_delta_lambda_n(0.0, 1.0, 2), 2.0, max_relative = 1e-12);
        assert_eq!(c_delta_lambda_n(0.0, 0.0, 5), 0.0);
        assert_relative_eq!(c_delta_lambda_n(0.5, 1.0, 1), 27.0 / 32.0, max_relative = 1e-12);
    }

    #[test]
    fn local_radii_values() {
        let r = local_radii(&consts(2, 1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(r.k1, 2.0 * 2f64.ln() + 4.0, max_relative = 1e-12);
        let r = local_radii(&consts(1, 1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(r.k1, 2f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(r.k2, 17.0, max_relative = 1e-12);
        assert_eq!(r.eps0, f64::INFINITY);
    }

    #[test]
    fn eps0_is_positive_with_growth() {
        let mut c = consts(2, 1.0, 1.0, 1.0);
        c.phi = Modulus::Affine { slope: 1.0 };
        c.lambda = 0.5;
        c.delta = 0.25;
        let r = local_radii(&c).unwrap();
        assert!(r.eps0 > 0.0 && r.eps0.is_finite());
    }

    #[test]
    fn local_radii_overflow_is_reported() {
        let c = consts(4, 1.0, 50.0, 50.0);
        assert!(matches!(local_radii(&c), Err(BoundError::OutsideDeskScale { .. })));
    }

    #[test]
    fn stitch_step_values() {
        let mut c = consts(2, 1.0, 0.0, 0.0);
        c.beta = 0.25;
        c.horizon = 3.0;
        let s = stitch_step(&c);
        assert_relative_eq!(s.eps, 1.0, max_relative = 1e-12);
        assert_eq!(s.m0, 3);
        c.beta = 0.0;
        assert!(stitch_step(&c).single_interval);
        let mut c = consts(1, 1.0, 0.0, 0.0);
        c.beta = 1.0;
        c.horizon = 0.4;
        let s = stitch_step(&c);
        assert_eq!((s.eps, s.m0), (0.5, 1));
    }

    #[test]
    fn global_bound_values() {
        let c = consts(2, 1.0, 1.0, 0.5);
        assert_relative_eq!(stitched_bound(&c, Variant::I).unwrap(), 3.0, max_relative = 1e-12);
        let mut c = consts(1, 1.0, 1.0, 0.0);
        c.beta = 1.0;
        assert_relative_eq!(stitched_bound(&c, Variant::I).unwrap(), 16.0, max_relative = 1e-12);
    }

    #[test]
    fn young_remainders_vanish_without_lambda() {
        let mut c = consts(2, 1.0, 1.0, 0.7);
        c.beta = 0.3;
        c.gamma_bar = 0.5;
        let y = young_remainders(&c).unwrap();
        assert_eq!(y.c3, 0.0);
        assert_eq!(y.c4, 0.0);
        assert_relative_eq!(y.c5, 0.7 * (1.0 + 6.0 * y.eps0_prime / 2.0), max_relative = 1e-12);
        assert_relative_eq!(y.eps0_prime, (0.5f64 / 9.0).min(1.0 / (12.0 * 2.3)), max_relative = 1e-12);
    }

    #[test]
    fn gronwall_values() {
        let mut c = consts(1, 1.0, 1.0, 0.0);
        c.beta = 1.0;
        assert_relative_eq!(gronwall_bound(&c, Variant::I).unwrap(), std::f64::consts::E, max_relative = 1e-12);
        let c = consts(3, 1.0, 1.0, 2.0);
        assert_relative_eq!(gronwall_bound(&c, Variant::I).unwrap(), 9.0, max_relative = 1e-12);
    }

    #[test]
    fn moment_constants() {
        assert_relative_eq!(a_of_q(2.0).unwrap(), 16.0, max_relative = 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        assert!((a_of_q(100.0).unwrap() / e2 - 1.0).abs() < 0.02);
        assert!(a_of_q(1.0).is_err());
        let k = exp_moment_constants(&consts(1, 1.0, 0.0, 0.0), 2.0).unwrap();
        assert_relative_eq!(k.xi_weight, 64.0, max_relative = 1e-12);
        assert_relative_eq!(k.alpha_weight, 128.0, max_relative = 1e-12);
        let want = (a_of_q(4.0).unwrap() * a_of_q(16.0).unwrap()).ln();
        assert_relative_eq!(k.ln_coefficient, want, max_relative = 1e-12);
    }

    #[test]
    fn young_split_examples() {
        let (bound, lhs) = young_split(1.0, 1.0, 0.0);
        assert_relative_eq!(bound, 1.25, max_relative = 1e-12);
        assert_eq!(lhs, 1.0);
        let (bound, lhs) = young_split(1e-9, 2.0, 0.3);
        assert!((bound - 4.0).abs() < 1e-9 && lhs < 1e-8);
    }

    #[test]
    fn uniqueness_step_values() {
        let mut c = consts(1, 1.0, 0.0, 0.0);
        c.beta = 1.0;
        assert_eq!(uniqueness_step(&c), Some(0.125));
        let mut c = consts(2, 1.0, 0.0, 0.0);
        c.beta = 0.5;
        assert_eq!(uniqueness_step(&c), Some(0.125));
        assert_relative_eq!(uniqueness_step(&c).unwrap(), stitch_step(&c).eps / 4.0);
        c.beta = 0.0;
        assert_eq!(uniqueness_step(&c), None);
    }

    #[test]
    fn report_contains_every_key() {
        let mut c = consts(2, 1.0, 1.0, 0.5);
        c.beta = 0.5;
        let r = bound_report(&c, 2.0);
        for key in [
            "k1", "k2", "eps0", "c_dln", "eps_stitch", "m0", "stitched_i", "stitched_ii", "c3", "c4", "c5",
            "gronwall_i", "gronwall_ii", "a_q", "k_q_ln_coefficient", "eps_bar",
        ] {
            assert!(r.get(key).is_some(), "{key}");
        }
        assert!(r.values.values().all(|v| *v >= 0.0));
    }

    fn random_constants() -> impl Strategy<Value = StructuralConstants> {
        (1usize..4, 0.1f64..3.0, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..1.5, 0.1f64..3.0).prop_map(
            |(n, gamma, c1, c2, beta, t)| {
                let mut c = consts(n, gamma, c1, c2);
                c.beta = beta;
                c.horizon = t;
                c
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gronwall_never_exceeds_the_stitched_bound(c in random_constants()) {
            let g = gronwall_bound(&c, Variant::I).unwrap();
            let l = stitched_bound(&c, Variant::I).unwrap();
            prop_assert!(g <= l * (1.0 + 1e-12));
        }

        #[test]
        fn k1_monotone(c in random_constants(), bump in 0.0f64..1.0) {
            let k1 = |c: &StructuralConstants| c.n as f64 / c.gamma * 2f64.ln() + c.n as f64 * (c.c1 + c.c2);
            let base = k1(&c);
            let mut up = c.clone();
            up.c1 += bump;
            prop_assert!(k1(&up) >= base);
            let mut up = c.clone();
            up.c2 += bump;
            prop_assert!(k1(&up) >= base);
            let mut up = c.clone();
            up.n += 1;
            prop_assert!(k1(&up) >= base);
            let mut up = c.clone();
            up.gamma += bump;
            prop_assert!(k1(&up) <= base);
            // and the library agrees with the transcription above
            if let Ok(r) = local_radii(&c) {
                prop_assert!((r.k1 - base).abs() <= 1e-12 * base.max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]

        #[test]
        fn young_split_holds(a in 1e-6f64..10.0, b in 1e-6f64..10.0, delta in 0.0f64..0.9) {
            let (bound, lhs) = young_split(a, b, delta);
            prop_assert!(lhs <= bound * (1.0 + 1e-12));
        }
    }
}
