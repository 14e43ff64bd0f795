//! Cross-sectional least squares on polynomial features of the Brownian
//! state.
//!
//! At step k the design row of path m is `[phi(x), phi(x) dB^1/sqrt(dt), ...,
//! phi(x) dB^d/sqrt(dt)]` with `x = B_k / sqrt(t_k)`. Regressing `Y_{k+1}` on
//! it yields the conditional mean from the `phi` block and Z from the
//! martingale blocks in a single fit. Factorizations are computed once per
//! ensemble and shared by every solve on it.

use rayon::prelude::*;
use thiserror::Error;

use crate::paths::PathEnsemble;

/// Paths per chunk in parallel reductions. Partial sums are combined in
/// chunk order, so results do not depend on the number of workers.
const CHUNK: usize = 2048;

/// Columns with `|R_jj| < DROP_TOL * |R_00|` are dropped.
pub const DROP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("basis degree must be at least 1")]
    ZeroDegree,
    #[error("step {step}: design matrix has rank zero")]
    RankZero { step: usize },
}

/// Deterministic parallel sum of `f(0..len)`.
pub fn ordered_sum(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let parts: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(len)).map(&f).sum::<f64>())
        .collect();
    parts.iter().sum()
}

/// Monomials of the standardized state: all multi-indices of total degree
/// at most `degree` when d <= 2; otherwise per-coordinate powers plus
/// pairwise products.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    d: usize,
    degree: usize,
    exps: Vec<Vec<u8>>,
}

impl Basis {
    pub fn new(d: usize, degree: usize) -> Self {
        let mut exps = vec![vec![0u8; d]];
        if d <= 2 {
            for total in 1..=degree {
                if d == 1 {
                    exps.push(vec![total as u8]);
                } else {
                    for a in (0..=total).rev() {
                        exps.push(vec![a as u8, (total - a) as u8]);
                    }
                }
            }
        } else {
            for c in 0..d {
                for p in 1..=degree {
                    let mut e = vec![0u8; d];
                    e[c] = p as u8;
                    exps.push(e);
                }
            }
            if degree >= 2 {
                for i in 0..d {
                    for j in i + 1..d {
                        let mut e = vec![0u8; d];
                        e[i] = 1;
                        e[j] = 1;
                        exps.push(e);
                    }
                }
            }
        }
        Basis { d, degree, exps }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exps
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut pw = [[1.0f64; 9]; 8];
        let small = self.d <= 8 && self.degree <= 8;
        if small {
            for c in 0..self.d {
                for p in 1..=self.degree {
                    pw[c][p] = pw[c][p - 1] * x[c];
                }
            }
        }
        for (o, e) in out.iter_mut().zip(&self.exps) {
            let mut v = 1.0;
            for (c, &p) in e.iter().enumerate() {
                if p > 0 {
                    v *= if small { pw[c][p as usize] } else { x[c].powi(p as i32) };
                }
            }
            *o = v;
        }
    }
}

/// Householder QR with column-norm pivoting on a column-major `rows x cols`
/// matrix. Returns the pivot order and the leading `rank x rank` block of R
/// (row-major), where rank stops at the first `|R_jj| < DROP_TOL |R_00|`.
fn pivoted_qr(a: &mut [f64], rows: usize, cols: usize) -> (Vec<usize>, Vec<f64>, usize) {
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = rows.min(cols);
    let mut rdiag0 = 0.0;
    let mut rank = 0;
    let col = |j: usize| j * rows;
    for i in 0..steps {
        // remaining norm of each candidate column below row i
        let mut best = i;
        let mut best_norm = -1.0;
        for j in i..cols {
            let s: f64 = a[col(j) + i..col(j) + rows].iter().map(|v| v * v).sum();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        if best != i {
            for r in 0..rows {
                a.swap(col(i) + r, col(best) + r);
            }
            perm.swap(i, best);
        }
        let norm = best_norm.sqrt();
        if i == 0 {
            rdiag0 = norm;
        }
        if norm == 0.0 || norm < DROP_TOL * rdiag0 {
            break;
        }
        // Householder vector in place of column i (rows i..).
        let x0 = a[col(i) + i];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        a[col(i) + i] = x0 - alpha;
        let vnorm2: f64 = a[col(i) + i..col(i) + rows].iter().map(|v| v * v).sum();
        if vnorm2 > 0.0 {
            let (left, right) = a.split_at_mut(col(i + 1));
            let v = &left[col(i) + i..col(i) + rows];
            for j in 0..cols - i - 1 {
                let cj = &mut right[j * rows + i..j * rows + rows];
                let dot: f64 = v.iter().zip(cj.iter()).map(|(p, q)| p * q).sum();
                let f = 2.0 * dot / vnorm2;
                for (q, p) in cj.iter_mut().zip(v) {
                    *q -= f * p;
                }
            }
        }
        a[col(i) + i] = alpha;
        rank = i + 1;
    }
    let mut r = vec![0.0; rank * rank];
    for i in 0..rank {
        for j in i..rank {
            r[i * rank + j] = a[col(j) + i];
        }
    }
    (perm, r, rank)
}

#[derive(Debug, Clone, PartialEq)]
struct StepFactor {
    /// Kept design columns, in pivot order.
    kept: Vec<usize>,
    /// Upper-triangular factor of the kept columns, row-major.
    r: Vec<f64>,
    scale: f64,
    condition: f64,
}

impl StepFactor {
    #[allow(clippy::needless_range_loop)]
    fn solve(&self, v: &mut [f64]) {
        let n = self.kept.len();
        // R^T w = v
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.r[j * n + i] * v[j];
            }
            v[i] = s / self.r[i * n + i];
        }
        // R x = w
        for i in (0..n).rev() {
            let mut s = v[i];
            for j in i + 1..n {
                s -= self.r[i * n + j] * v[j];
            }
            v[i] = s / self.r[i * n + i];
        }
    }
}

/// Per-step diagnostics of a fit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FitDiagnostics {
    pub residual_rms: f64,
    pub dropped_columns: usize,
    pub condition: f64,
}

/// Coefficients over the full design (zero for dropped columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coef: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPlan {
    basis: Basis,
    d: usize,
    paths: usize,
    dt: f64,
    steps: Vec<StepFactor>,
}

impl RegressionPlan {
    pub fn build(ens: &PathEnsemble, degree: usize) -> Result<Self, RegressionError> {
        if degree == 0 {
            return Err(RegressionError::ZeroDegree);
        }
        let d = ens.dim();
        let basis = Basis::new(d, degree);
        let grid = ens.grid();
        let mut plan = RegressionPlan {
            basis,
            d,
            paths: ens.paths(),
            dt: grid.dt(),
            steps: Vec::new(),
        };
        let cols = plan.width();
        let rows = ens.paths();
        let steps: Result<Vec<StepFactor>, RegressionError> = (0..grid.steps())
            .into_par_iter()
            .map(|k| {
                let scale = if k == 0 { 1.0 } else { 1.0 / grid.t(k).sqrt() };
                let mut a = vec![0.0; rows * cols];
                let mut row = vec![0.0; cols];
                for m in 0..rows {
                    plan.design_row(ens, k, m, scale, &mut row);
                    for (j, v) in row.iter().enumerate() {
                        a[j * rows + m] = *v;
                    }
                }
                let (perm, r, rank) = pivoted_qr(&mut a, rows, cols);
                if rank == 0 {
                    return Err(RegressionError::RankZero { step: k });
                }
                let condition = (r[0] / r[(rank - 1) * rank + rank - 1]).abs();
                Ok(StepFactor {
                    kept: perm[..rank].to_vec(),
                    r,
                    scale,
                    condition,
                })
            })
            .collect();
        plan.steps = steps?;
        Ok(plan)
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    /// Number of design columns before dropping.
    pub fn width(&self) -> usize {
        self.basis.len() * (1 + self.d)
    }

    pub fn dropped(&self, k: usize) -> usize {
        self.width() - self.steps[k].kept.len()
    }

    fn design_row(&self, ens: &PathEnsemble, k: usize, m: usize, scale: f64, out: &mut [f64]) {
        let p = self.basis.len();
        let b = ens.at(m, k);
        let mut x = [0.0f64; 16];
        let mut xv;
        let xs: &mut [f64] = if self.d <= 16 {
            &mut x[..self.d]
        } else {
            xv = vec![0.0; self.d];
            &mut xv
        };
        for (xi, bi) in xs.iter_mut().zip(b) {
            *xi = bi * scale;
        }
        self.basis.eval(xs, &mut out[..p]);
        let b1 = ens.at(m, k + 1);
        let sd = self.dt.sqrt();
        for c in 0..self.d {
            let w = (b1[c] - b[c]) / sd;
            for i in 0..p {
                out[p * (1 + c) + i] = out[i] * w;
            }
        }
    }

    /// Fits `target` (one value per path, typically `Y_{k+1}`) on the step-k
    /// design. Semi-normal equations with one refinement sweep.
    pub fn fit(&self, ens: &PathEnsemble, k: usize, target: &[f64]) -> Fit {
        let st = &self.steps[k];
        let r = st.kept.len();
        let cols = self.width();
        let chunks = self.paths.div_ceil(CHUNK);
        let gather = |resid_of: &(dyn Fn(usize, &[f64]) -> f64 + Sync)| -> (Vec<f64>, f64) {
            let parts: Vec<(Vec<f64>, f64)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut acc = vec![0.0; r];
                    let mut ss = 0.0;
                    let mut row = vec![0.0; cols];
                    for m in c * CHUNK..((c + 1) * CHUNK).min(self.paths) {
                        self.design_row(ens, k, m, st.scale, &mut row);
                        let res = resid_of(m, &row);
                        ss += res * res;
                        for (a, &j) in acc.iter_mut().zip(&st.kept) {
                            *a += row[j] * res;
                        }
                    }
                    (acc, ss)
                })
                .collect();
            let mut v = vec![0.0; r];
            let mut ss = 0.0;
            for (p, s) in parts {
                for (a, b) in v.iter_mut().zip(p) {
                    *a += b;
                }
                ss += s;
            }
            (v, ss)
        };
        let (mut x, _) = gather(&|m, _| target[m]);
        st.solve(&mut x);
        let (mut dx, ss) = gather(&|m, row: &[f64]| {
            let fitted: f64 = st.kept.iter().zip(&x).map(|(&j, c)| row[j] * c).sum();
            target[m] - fitted
        });
        st.solve(&mut dx);
        let mut coef = vec![0.0; cols];
        for ((&j, a), b) in st.kept.iter().zip(&x).zip(&dx) {
            coef[j] = a + b;
        }
        Fit {
            coef,
            diagnostics: FitDiagnostics {
                residual_rms: (ss / self.paths as f64).sqrt(),
                dropped_columns: cols - r,
                condition: st.condition,
            },
        }
    }

    /// Evaluates a fit at every path: the conditional mean into `mean`, and
    /// if given, the martingale coefficients (Z, one row of length d per
    /// path) into `z`.
    pub fn evaluate(&self, ens: &PathEnsemble, k: usize, fit: &Fit, mean: &mut [f64], z: Option<&mut [f64]>) {
        let p = self.basis.len();
        let d = self.d;
        let scale = self.steps[k].scale;
        let inv_sd = 1.0 / self.dt.sqrt();
        let coef = &fit.coef;
        let eval_path = |m: usize, phi: &mut [f64], x: &mut [f64]| {
            for (xi, bi) in x.iter_mut().zip(ens.at(m, k)) {
                *xi = bi * scale;
            }
            self.basis.eval(x, phi);
        };
        match z {
            Some(z) => {
                mean.par_iter_mut()
                    .zip(z.par_chunks_mut(d))
                    .enumerate()
                    .for_each_init(
                        || (vec![0.0; p], vec![0.0; d]),
                        |(phi, x), (m, (mu, zr))| {
                            eval_path(m, phi, x);
                            *mu = phi.iter().zip(&coef[..p]).map(|(a, b)| a * b).sum();
                            for (c, zc) in zr.iter_mut().enumerate() {
                                let blk = &coef[p * (1 + c)..p * (2 + c)];
                                *zc = phi.iter().zip(blk).map(|(a, b)| a * b).sum::<f64>() * inv_sd;
                            }
                        },
                    );
            }
            None => {
                mean.par_iter_mut().enumerate().for_each_init(
                    || (vec![0.0; p], vec![0.0; d]),
                    |(phi, x), (m, mu)| {
                        eval_path(m, phi, x);
                        *mu = phi.iter().zip(&coef[..p]).map(|(a, b)| a * b).sum();
                    },
                );
            }
        }
    }

    /// Regression estimate of `E_k[target]` at every path.
    pub fn conditional_mean(&self, ens: &PathEnsemble, k: usize, target: &[f64], out: &mut [f64]) -> FitDiagnostics {
        let fit = self.fit(ens, k, target);
        self.evaluate(ens, k, &fit, out, None);
        fit.diagnostics
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::new(1, 4).len(), 5);
        assert_eq!(Basis::new(2, 4).len(), 15);
        // constant + 3*4 powers + 3 pairs
        assert_eq!(Basis::new(3, 4).len(), 16);
        let b = Basis::new(2, 2);
        let mut out = vec![0.0; b.len()];
        b.eval(&[2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn qr_reproduces_gram_matrix_and_drops_dependent_columns() {
        let rows = 50;
        // columns: x, 2x (dependent), x^2, 1
        let mut a = vec![0.0; rows * 4];
        for i in 0..rows {
            let x = i as f64 / 7.0 - 3.0;
            a[i] = x;
            a[rows + i] = 2.0 * x;
            a[2 * rows + i] = x * x;
            a[3 * rows + i] = 1.0;
        }
        let orig = a.clone();
        let (perm, r, rank) = pivoted_qr(&mut a, rows, 4);
        assert_eq!(rank, 3);
        // R^T R equals the Gram matrix of the kept columns
        for i in 0..rank {
            for j in 0..rank {
                let g: f64 = (0..rows)
                    .map(|t| orig[perm[i] * rows + t] * orig[perm[j] * rows + t])
                    .sum();
                let rr: f64 = (0..rank).map(|t| r[t * rank + i] * r[t * rank + j]).sum();
                assert!((g - rr).abs() < 1e-9 * g.abs().max(1.0), "{i} {j} {g} {rr}");
            }
        }
        let kept: std::collections::BTreeSet<_> = perm[..rank].iter().copied().collect();
        assert!(kept.contains(&2) && kept.contains(&3));
        assert!(kept.contains(&0) ^ kept.contains(&1));
    }

    #[test]
    fn recovers_polynomial_conditional_mean_and_martingale_coefficient() {
        let ens = PathEnsemble::simulate(4, 4000, 4, 1.0, 1).unwrap();
        let plan = RegressionPlan::build(&ens, 3).unwrap();
        let k = 2;
        // target = B_k^2 + 3 dB_k: E_k = B_k^2, Z = 3
        let target: Vec<f64> = (0..ens.paths())
            .map(|m| {
                let b = ens.at(m, k)[0];
                let db = ens.at(m, k + 1)[0] - b;
                b * b + 3.0 * db
            })
            .collect();
        let fit = plan.fit(&ens, k, &target);
        assert!(fit.diagnostics.residual_rms < 1e-9);
        let mut mean = vec![0.0; ens.paths()];
        let mut z = vec![0.0; ens.paths()];
        plan.evaluate(&ens, k, &fit, &mut mean, Some(&mut z));
        for m in 0..ens.paths() {
            let b = ens.at(m, k)[0];
            assert!((mean[m] - b * b).abs() < 1e-9);
            assert!((z[m] - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn first_step_keeps_only_nondegenerate_columns() {
        let ens = PathEnsemble::simulate(4, 1000, 3, 1.0, 2).unwrap();
        let plan = RegressionPlan::build(&ens, 4).unwrap();
        // B_0 = 0: only the constant and the two plain dB columns survive
        assert_eq!(plan.width() - plan.dropped(0), 3);
        assert_eq!(plan.dropped(1), 0);
    }

    #[test]
    fn ordered_sum_matches_serial_sum() {
        let f = |i: usize| (i as f64).sin();
        let s = ordered_sum(10_000, f);
        let chunks: f64 = (0..10_000usize.div_ceil(CHUNK))
            .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(10_000)).map(f).sum::<f64>())
            .sum();
        assert_eq!(s, chunks);
    }
}
