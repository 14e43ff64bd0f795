//! Randomly shifted Kronecker (R_d) sequences for the assumption validators.
//! Point `k` is a closed-form function of `(seed, k)`, so sampling is
//! reproducible regardless of how the index range is split across workers.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Kronecker {
    alpha: Vec<f64>,
    shift: Vec<f64>,
}

fn generalized_golden(dim: usize) -> f64 {
    // Unique positive root of x^(dim+1) = x + 1.
    let p = (dim + 1) as i32;
    let mut x = 1.5f64;
    for _ in 0..100 {
        let f = x.powi(p) - x - 1.0;
        let df = p as f64 * x.powi(p - 1) - 1.0;
        let next = x - f / df;
        if (next - x).abs() < 1e-16 {
            break;
        }
        x = next;
    }
    x
}

impl Kronecker {
    pub fn new(dim: usize, seed: u64) -> Self {
        let g = generalized_golden(dim);
        let alpha = (1..=dim).map(|j| (1.0 / g.powi(j as i32)).fract()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)).collect();
        Kronecker { alpha, shift }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// Writes point `k` (components in [0, 1)) into `out`.
    pub fn point(&self, k: usize, out: &mut [f64]) {
        let kk = (k + 1) as f64;
        for ((o, a), s) in out.iter_mut().zip(&self.alpha).zip(&self.shift) {
            *o = (s + kk * a).fract();
        }
    }
}
