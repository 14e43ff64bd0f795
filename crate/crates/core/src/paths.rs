//! Brownian path ensembles on uniform grids.
//!
//! Normals come from ChaCha12 keyed by `seed`, with the path index as the
//! stream id and the word position fixed by `(step, coordinate)`, so any
//! single increment can be regenerated on its own.

use std::io::{self, Read, Write};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

/// Default cap on `M * (N + 1) * d` stored values.
pub const DEFAULT_MEMORY_BUDGET: usize = 100_000_000;

const MAGIC: &[u8; 8] = b"QBSDEPTH";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ensemble needs {needed} values, above the memory budget of {budget}")]
    OverBudget { needed: usize, budget: usize },
    #[error("malformed ensemble file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, PathError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(PathError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(PathError::InvalidArgument("step count must be at least 1".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `k`; exactly `T` at `k = N`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }
}

/// The standard normal for `(seed, path, step, coordinate)`, generated
/// independently of every other draw.
pub fn normal_at(seed: u64, path: usize, step: usize, coord: usize, d: usize) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos(((step * d + coord) * 4) as u128);
    box_muller(rng.next_u64(), rng.next_u64())
}

fn box_muller(a: u64, b: u64) -> f64 {
    let scale = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) as f64 + 0.5) * scale;
    let u2 = (b >> 11) as f64 * scale;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `M` paths of a d-dimensional Brownian motion on `grid`, stored
/// node-major: the value for `(path m, node k, coordinate c)` sits at
/// `(k * M + m) * d + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    seed: u64,
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn simulate(seed: u64, paths: usize, steps: usize, horizon: f64, dim: usize) -> Result<Self, PathError> {
        Self::simulate_with_budget(seed, paths, steps, horizon, dim, DEFAULT_MEMORY_BUDGET)
    }

    pub fn simulate_with_budget(
        seed: u64,
        paths: usize,
        steps: usize,
        horizon: f64,
        dim: usize,
        budget: usize,
    ) -> Result<Self, PathError> {
        let grid = TimeGrid::new(horizon, steps)?;
        if paths == 0 || dim == 0 {
            return Err(PathError::InvalidArgument("path count and dimension must be at least 1".into()));
        }
        let needed = paths
            .checked_mul(steps + 1)
            .and_then(|v| v.checked_mul(dim))
            .unwrap_or(usize::MAX);
        if needed > budget {
            return Err(PathError::OverBudget { needed, budget });
        }
        let sd = grid.dt().sqrt();
        let nodes = steps + 1;
        // Path-major scratch, filled in parallel, then transposed.
        let mut by_path = vec![0.0; paths * nodes * dim];
        by_path
            .par_chunks_mut(nodes * dim)
            .enumerate()
            .for_each(|(m, row)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(m as u64);
                rng.set_word_pos(0);
                for k in 0..steps {
                    for c in 0..dim {
                        let z = box_muller(rng.next_u64(), rng.next_u64());
                        row[(k + 1) * dim + c] = row[k * dim + c] + sd * z;
                    }
                }
            });
        let mut values = vec![0.0; paths * nodes * dim];
        values.par_chunks_mut(paths * dim).enumerate().for_each(|(k, node)| {
            for m in 0..paths {
                let src = &by_path[(m * nodes + k) * dim..(m * nodes + k + 1) * dim];
                node[m * dim..(m + 1) * dim].copy_from_slice(src);
            }
        });
        Ok(PathEnsemble {
            grid,
            paths,
            dim,
            seed,
            values,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    /// `B[m][k]` as a slice of length d.
    pub fn at(&self, m: usize, k: usize) -> &[f64] {
        let o = (k * self.paths + m) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// All paths at node `k`, path-major, length `M * d`.
    pub fn node(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.values[k * w..(k + 1) * w]
    }

    /// The ensemble with every path negated.
    pub fn antithetic(&self) -> PathEnsemble {
        PathEnsemble {
            values: self.values.iter().map(|v| if *v == 0.0 { 0.0 } else { -v }).collect(),
            ..self.clone()
        }
    }

    /// This ensemble followed by its negation: `2M` paths whose odd sample
    /// moments vanish exactly at every node.
    pub fn with_antithetic(&self) -> PathEnsemble {
        let (m, d) = (self.paths, self.dim);
        let mut values = Vec::with_capacity(2 * self.values.len());
        for k in 0..=self.grid.steps {
            let node = &self.values[k * m * d..(k + 1) * m * d];
            values.extend_from_slice(node);
            values.extend(node.iter().map(|v| if *v == 0.0 { 0.0 } else { -v }));
        }
        PathEnsemble {
            paths: 2 * m,
            values,
            ..self.clone()
        }
    }

    /// Keeps every `factor`-th node; the coarse paths are exact samples of
    /// the same Brownian motion on the coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble, PathError> {
        if factor == 0 || !self.grid.steps.is_multiple_of(factor) {
            return Err(PathError::InvalidArgument(format!(
                "factor {factor} does not divide {} steps",
                self.grid.steps
            )));
        }
        let steps = self.grid.steps / factor;
        let w = self.paths * self.dim;
        let mut values = Vec::with_capacity((steps + 1) * w);
        for k in 0..=steps {
            values.extend_from_slice(self.node(k * factor));
        }
        Ok(PathEnsemble {
            grid: TimeGrid::new(self.grid.horizon, steps)?,
            values,
            ..self.clone()
        })
    }

    /// Binary dump: header (magic, version, seed, M, N, T, d) then the
    /// values in path-major row order, all little endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), PathError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.paths as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity((self.grid.steps + 1) * self.dim * 8);
        for m in 0..self.paths {
            buf.clear();
            for k in 0..=self.grid.steps {
                for v in self.at(m, k) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<PathEnsemble, PathError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PathError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(PathError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8], PathError> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let paths = u64::from_le_bytes(next(&mut r)?) as usize;
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let horizon = f64::from_le_bytes(next(&mut r)?);
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let grid = TimeGrid::new(horizon, steps)?;
        let nodes = steps + 1;
        let total = paths
            .checked_mul(nodes)
            .and_then(|v| v.checked_mul(dim))
            .filter(|&v| v <= DEFAULT_MEMORY_BUDGET.max(1) * 4)
            .ok_or_else(|| PathError::Format("implausible header sizes".into()))?;
        let mut raw = vec![0u8; total * 8];
        r.read_exact(&mut raw)?;
        let mut values = vec![0.0; total];
        for m in 0..paths {
            for k in 0..nodes {
                for c in 0..dim {
                    let src = ((m * nodes + k) * dim + c) * 8;
                    let v = f64::from_le_bytes(raw[src..src + 8].try_into().unwrap());
                    values[(k * paths + m) * dim + c] = v;
                }
            }
        }
        Ok(PathEnsemble {
            grid,
            paths,
            dim,
            seed,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(7), 0.3);
        for k in 0..7 {
            assert!(g.t(k + 1) > g.t(k));
        }
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn starts_at_zero_and_is_reproducible() {
        let a = PathEnsemble::simulate(11, 50, 8, 1.0, 2).unwrap();
        let b = PathEnsemble::simulate(11, 50, 8, 1.0, 2).unwrap();
        assert_eq!(a, b);
        for m in 0..50 {
            assert_eq!(a.at(m, 0), &[0.0, 0.0]);
        }
        let c = PathEnsemble::simulate(12, 50, 8, 1.0, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_draws_are_random_access() {
        let (seed, d) = (99, 3);
        let e = PathEnsemble::simulate(seed, 20, 6, 2.0, d).unwrap();
        let sd = e.grid().dt().sqrt();
        for (m, k, c) in [(0, 0, 0), (7, 3, 2), (19, 5, 1)] {
            let inc = e.at(m, k + 1)[c] - e.at(m, k)[c];
            let z = normal_at(seed, m, k, c, d);
            assert!((inc - sd * z).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_variance_at_horizon() {
        let e = PathEnsemble::simulate(1, 100_000, 1, 1.0, 1).unwrap();
        let x = e.node(1);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((0.985..=1.015).contains(&var), "{var}");
        assert!(mean.abs() < 5.0 / (x.len() as f64).sqrt());
    }

    #[test]
    fn increments_have_the_right_moments_and_no_lag_correlation() {
        let (m, n, d) = (100_000, 4, 2);
        let e = PathEnsemble::simulate(5, m, n, 2.0, d).unwrap();
        let dt = e.grid().dt();
        let inc = |p: usize, k: usize, c: usize| e.at(p, k + 1)[c] - e.at(p, k)[c];
        let mf = m as f64;
        for k in 0..n {
            for c in 0..d {
                let mean: f64 = (0..m).map(|p| inc(p, k, c)).sum::<f64>() / mf;
                assert!(mean.abs() < 5.0 * (dt / mf).sqrt());
                let var: f64 = (0..m).map(|p| inc(p, k, c).powi(2)).sum::<f64>() / mf;
                // the variance of a chi-square sample mean is 2 dt^2 / M
                assert!((var - dt).abs() < 5.0 * dt * (2.0 / mf).sqrt());
            }
            let cross: f64 = (0..m).map(|p| inc(p, k, 0) * inc(p, k, 1)).sum::<f64>() / mf;
            assert!(cross.abs() < 5.0 * dt / mf.sqrt());
            if k + 1 < n {
                let lag: f64 = (0..m).map(|p| inc(p, k, 0) * inc(p, k + 1, 0)).sum::<f64>() / mf;
                assert!(lag.abs() < 5.0 * dt / mf.sqrt());
            }
        }
    }

    #[test]
    fn antithetic_is_an_involution_with_zero_odd_moments() {
        let e = PathEnsemble::simulate(3, 101, 5, 1.0, 2).unwrap();
        assert_eq!(e.antithetic().antithetic(), e);
        let u = e.with_antithetic();
        assert_eq!(u.paths(), 202);
        for k in 0..=5 {
            for c in 0..2 {
                for m in 0..101 {
                    assert_eq!(u.at(m, k)[c], -u.at(m + 101, k)[c]);
                }
                let s3: f64 = (0..202).map(|m| u.at(m, k)[c].powi(3)).sum();
                assert!(s3.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn antithetic_pairing_reduces_variance_for_monotone_payoffs() {
        let reps = 200;
        let m = 500;
        let est = |seed: u64, anti: bool| {
            let e = PathEnsemble::simulate(seed, m, 1, 1.0, 1).unwrap();
            let e = if anti {
                PathEnsemble::simulate(seed, m / 2, 1, 1.0, 1).unwrap().with_antithetic()
            } else {
                e
            };
            e.node(1).iter().map(|b| b.tanh()).sum::<f64>() / e.paths() as f64
        };
        let var = |anti: bool| {
            let xs: Vec<f64> = (0..reps).map(|s| est(1000 + s as u64, anti)).collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
        };
        let (plain, paired) = (var(false), var(true));
        assert!(paired <= plain, "paired {paired} plain {plain}");
    }

    #[test]
    fn coarsening_keeps_nodes() {
        let e = PathEnsemble::simulate(2, 10, 8, 1.0, 1).unwrap();
        let c = e.coarsen(4).unwrap();
        assert_eq!(c.steps(), 2);
        assert_eq!(c.at(3, 1), e.at(3, 4));
        assert_eq!(c.at(3, 2), e.at(3, 8));
        assert!(e.coarsen(3).is_err());
    }

    #[test]
    fn dump_and_load() {
        let e = PathEnsemble::simulate(8, 13, 4, 0.5, 2).unwrap();
        let mut buf = Vec::new();
        e.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 5 * 8 + 13 * 5 * 2 * 8);
        let back = PathEnsemble::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, e);
        buf[0] = b'X';
        assert!(matches!(PathEnsemble::read_from(buf.as_slice()), Err(PathError::Format(_))));
    }

    #[test]
    fn budget_is_enforced() {
        let r = PathEnsemble::simulate_with_budget(1, 1000, 100, 1.0, 2, 1000);
        assert!(matches!(r, Err(PathError::OverBudget { .. })));
    }
}
