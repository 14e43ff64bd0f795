//! Multi-dimensional solves by decoupled iteration. Each outer iteration
//! freezes the previous iterate in the generator and solves the n scalar
//! equations independently.

use std::collections::VecDeque;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::Field;
use crate::generator::{GeneratorModel, ModelError, TerminalCondition};
use crate::norms::{exp_moment, ExpMoment};
use crate::paths::PathEnsemble;
use crate::regression::{ordered_sum, RegressionPlan};
use crate::scalar_solver::{solve_scalar_on, NodeCtx, ScalarDriver, SolverError, SolverOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PicardError {
    #[error("the frozen-y iteration needs every component flagged diagonal")]
    NotDiagonal,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("component {component}: {source}")]
    Solver {
        component: usize,
        #[source]
        source: SolverError,
    },
    #[error("iteration diverged: the sup difference grew three times in a row (last {last})")]
    Diverged { last: f64, trace: IterationTrace },
    #[error("invalid argument {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardMode {
    /// Freeze Y only; the generator sees the component's own row of z.
    FrozenY,
    /// Freeze (Y, Z); row i of the frozen Z is replaced by the unknown.
    FrozenYv,
}

/// Starting iterate.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zero,
    /// Y equal to the terminal value at every node, Z = 0.
    FlatTerminal,
    Given { y: Field, z: Field },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardOptions {
    pub solver: SolverOptions,
    pub max_iters: usize,
    pub tol: f64,
    pub mode: PicardMode,
    /// Number of full Y iterates retained for the theta monitor (0 keeps none).
    pub keep_iterates: usize,
    /// Orders q for which `E[exp(q gamma sup|Y^(m)|)]` is recorded per iterate.
    pub moment_orders: Vec<f64>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            solver: SolverOptions::default(),
            max_iters: 30,
            tol: 1e-4,
            mode: PicardMode::FrozenY,
            keep_iterates: 0,
            moment_orders: Vec::new(),
        }
    }
}

pub const DEFAULT_THETA_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub m: usize,
    pub dy: f64,
    pub dz: f64,
    pub ratio: Option<f64>,
    pub seconds: f64,
    /// `(q, ln E[exp(q gamma sup|Y^(m)|)])` for each requested order.
    pub ln_exp_moments: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    pub rows: Vec<TraceRow>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_dy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.dy)
    }

    /// CSV with columns m, dY, dZ, ratio, seconds. With `with_time = false`
    /// the seconds column is zero so the output is reproducible.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut s = String::from("m,dY,dZ,ratio,seconds\n");
        for r in &self.rows {
            let ratio = r.ratio.map(|v| format!("{v:e}")).unwrap_or_default();
            let secs = if with_time { r.seconds } else { 0.0 };
            s.push_str(&format!("{},{:e},{:e},{},{:.6}\n", r.m, r.dy, r.dz, ratio, secs));
        }
        s
    }
}

/// Solution on nodes `offset..offset + y.nodes()`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub offset: usize,
    /// n values per path and node.
    pub y: Field,
    /// n x d values (row-major) per path and step.
    pub z: Field,
    pub converged: bool,
    pub iterations: usize,
    pub z_clip: f64,
    pub clipped: usize,
    pub max_residual_rms: f64,
    pub max_condition: f64,
}

impl BsdeSolution {
    pub fn n(&self) -> usize {
        self.y.dim()
    }

    /// Cross-path mean of Y at the first node, per component.
    pub fn y0_mean(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.y.mean_at(0, i)).collect()
    }
}

/// `xi = h(B_T)` for every path, n values per path.
pub fn terminal_field(terminal: &TerminalCondition, ens: &PathEnsemble) -> Result<Vec<f64>, ModelError> {
    let n = terminal.n();
    let last = ens.steps();
    let mut out = vec![0.0; ens.paths() * n];
    out.par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(m, row)| terminal.eval(ens.at(m, last), row))?;
    Ok(out)
}

struct ComponentDriver<'a> {
    model: &'a GeneratorModel,
    i: usize,
    offset: usize,
    u: &'a Field,
    v: Option<&'a Field>,
}

impl ScalarDriver for ComponentDriver<'_> {
    fn eval(&self, at: &NodeCtx<'_>, _y: f64, z: &[f64]) -> Result<f64, String> {
        let local = at.k - self.offset;
        let d = z.len();
        let n = self.model.n();
        let mut full = match self.v {
            Some(v) => v.at(at.m, local).to_vec(),
            None => vec![0.0; n * d],
        };
        full[self.i * d..(self.i + 1) * d].copy_from_slice(z);
        self.model
            .evaluate_component(self.i, at.t, self.u.at(at.m, local), &full)
            .map_err(|e| e.to_string())
    }

    fn depends_on_y(&self) -> bool {
        false
    }
}

/// One application of the solution map: solves component i with generator
/// `z -> g^i(t, U_t, V_t(z; i))` and terminal `xi^i`, all components
/// independently. With `v = None` the other rows of z are zero, which is
/// exact for diagonal components.
#[allow(clippy::too_many_arguments)]
pub fn gamma_map(
    model: &GeneratorModel,
    u: &Field,
    v: Option<&Field>,
    xi: &[f64],
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    span: Range<usize>,
    opts: &SolverOptions,
) -> Result<BsdeSolution, PicardError> {
    let n = model.n();
    let d = model.d();
    let paths = ens.paths();
    let steps = span.len();
    if u.dim() != n || u.nodes() != steps + 1 {
        return Err(ModelError::Dimension {
            what: "frozen U nodes",
            expected: steps + 1,
            got: u.nodes(),
        }
        .into());
    }
    if xi.len() != paths * n {
        return Err(ModelError::Dimension {
            what: "terminal values",
            expected: paths * n,
            got: xi.len(),
        }
        .into());
    }
    let parts: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let driver = ComponentDriver {
                model,
                i,
                offset: span.start,
                u,
                v,
            };
            let eta: Vec<f64> = (0..paths).map(|m| xi[m * n + i]).collect();
            solve_scalar_on(&driver, &eta, ens, plan, span.clone(), opts)
                .map_err(|source| PicardError::Solver { component: i, source })
        })
        .collect::<Result<_, _>>()?;
    let mut y = Field::zeros(paths, steps + 1, n);
    let mut z = Field::zeros(paths, steps, n * d);
    for (i, s) in parts.iter().enumerate() {
        for (dst, src) in y.data_mut().chunks_mut(n).zip(s.y.data()) {
            dst[i] = *src;
        }
        for (dst, src) in z.data_mut().chunks_mut(n * d).zip(s.z.data().chunks(d)) {
            dst[i * d..(i + 1) * d].copy_from_slice(src);
        }
    }
    let fold = |f: fn(&crate::regression::FitDiagnostics) -> f64| {
        parts
            .iter()
            .flat_map(|s| s.diagnostics.iter().map(f))
            .fold(0.0, f64::max)
    };
    Ok(BsdeSolution {
        offset: span.start,
        y,
        z,
        converged: true,
        iterations: 1,
        z_clip: parts.iter().map(|s| s.z_clip).fold(0.0, f64::max),
        clipped: parts.iter().map(|s| s.clipped).sum(),
        max_residual_rms: fold(|g| g.residual_rms),
        max_condition: fold(|g| g.condition),
    })
}

fn h2_distance(a: &Field, b: &Field, dt: f64) -> f64 {
    let per_path = |m: usize| {
        (0..a.nodes())
            .map(|k| a.at(m, k).iter().zip(b.at(m, k)).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
    };
    (ordered_sum(a.paths(), per_path) / a.paths() as f64 * dt).sqrt()
}

/// Result of an iteration, with the retained iterates `(m, Y^(m))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardRun {
    pub solution: BsdeSolution,
    pub trace: IterationTrace,
    pub iterates: Vec<(usize, Field)>,
}

/// Iterates the solution map from `init` until the sup difference of
/// successive Y iterates is at most `tol` or `max_iters` is reached.
pub fn picard_iterate(
    model: &GeneratorModel,
    xi: &[f64],
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    span: Range<usize>,
    opts: &PicardOptions,
    init: &Init,
) -> Result<PicardRun, PicardError> {
    if opts.mode == PicardMode::FrozenY && !model.all_diagonal() {
        return Err(PicardError::NotDiagonal);
    }
    if opts.max_iters == 0 {
        return Err(PicardError::InvalidArgument {
            name: "max_iters",
            reason: "must be at least 1".into(),
        });
    }
    let n = model.n();
    let d = model.d();
    let paths = ens.paths();
    let steps = span.len();
    let dt = ens.grid().dt();
    let gamma = model.constants().gamma;
    let (mut y, mut z) = match init {
        Init::Zero => (Field::zeros(paths, steps + 1, n), Field::zeros(paths, steps, n * d)),
        Init::FlatTerminal => {
            let mut y = Field::zeros(paths, steps + 1, n);
            for k in 0..=steps {
                y.node_mut(k).copy_from_slice(xi);
            }
            (y, Field::zeros(paths, steps, n * d))
        }
        Init::Given { y, z } => (y.clone(), z.clone()),
    };
    let mut trace = IterationTrace::default();
    let mut kept: VecDeque<(usize, Field)> = VecDeque::new();
    let mut increases = 0;
    let mut last: Option<BsdeSolution> = None;
    for m in 1..=opts.max_iters {
        let started = Instant::now();
        let v = match opts.mode {
            PicardMode::FrozenY => None,
            PicardMode::FrozenYv => Some(&z),
        };
        let mut next = gamma_map(model, &y, v, xi, ens, plan, span.clone(), &opts.solver)?;
        let dy = next.y.sup_distance(&y);
        let dz = h2_distance(&next.z, &z, dt);
        let prev = trace.last_dy();
        let ratio = prev.filter(|p| *p > 0.0).map(|p| dy / p);
        let ln_exp_moments = opts
            .moment_orders
            .iter()
            .map(|&q| (q, exp_moment(&next.y, q, gamma).ln_value))
            .collect();
        trace.rows.push(TraceRow {
            m,
            dy,
            dz,
            ratio,
            seconds: started.elapsed().as_secs_f64(),
            ln_exp_moments,
        });
        increases = match prev {
            Some(p) if dy > p => increases + 1,
            _ => 0,
        };
        if opts.keep_iterates > 0 {
            kept.push_back((m, next.y.clone()));
            if kept.len() > opts.keep_iterates {
                kept.pop_front();
            }
        }
        if increases >= 3 {
            return Err(PicardError::Diverged { last: dy, trace });
        }
        y = std::mem::replace(&mut next.y, Field::zeros(0, 0, 0));
        z = std::mem::replace(&mut next.z, Field::zeros(0, 0, 0));
        next.iterations = m;
        next.converged = dy <= opts.tol;
        let done = next.converged;
        last = Some(next);
        if done {
            break;
        }
    }
    let mut solution = last.expect("at least one iteration");
    solution.y = y;
    solution.z = z;
    Ok(PicardRun {
        solution,
        trace,
        iterates: kept.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaRow {
    pub m: usize,
    pub p: usize,
    pub q: f64,
    pub moment: ExpMoment,
    pub note: Option<String>,
}

/// For consecutive retained iterates `(m, Y^(m))` and a lag p, the
/// empirical mean of `exp(q gamma sup_k (|dY| + |dY~|))` with
/// `dY = (Y^(m+p) - theta Y^(m))/(1-theta)` and
/// `dY~ = (Y^(m) - theta Y^(m+p))/(1-theta)`. If the mean overflows, q is
/// halved (not below 1) and the row says so.
pub fn theta_monitor(
    iterates: &[(usize, Field)],
    p: usize,
    theta: f64,
    q: f64,
    gamma: f64,
) -> Result<Vec<ThetaRow>, PicardError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(PicardError::InvalidArgument {
            name: "theta",
            reason: format!("must lie in (0, 1), got {theta}"),
        });
    }
    if !(q > 1.0) || p == 0 {
        return Err(PicardError::InvalidArgument {
            name: "q, p",
            reason: "need q > 1 and p >= 1".into(),
        });
    }
    let mut rows = Vec::new();
    for (a, (m, ya)) in iterates.iter().enumerate() {
        let Some((_, yb)) = iterates.get(a + p).filter(|(mb, _)| *mb == m + p) else {
            continue;
        };
        let delta = theta_deltas(ya, yb, theta);
        let mut q_used = q;
        let mut moment = exp_moment(&delta, q_used, gamma);
        let mut note = None;
        while moment.overflow && q_used > 1.0 {
            q_used = (q_used / 2.0).max(1.0);
            moment = exp_moment(&delta, q_used, gamma);
            note = Some(format!("overflow at q = {q}; reported at q = {q_used}"));
        }
        rows.push(ThetaRow {
            m: *m,
            p,
            q: q_used,
            moment,
            note,
        });
    }
    Ok(rows)
}

/// Per path and node, `|dY| + |dY~|` as a one-dimensional field.
pub fn theta_deltas(ya: &Field, yb: &Field, theta: f64) -> Field {
    let n = ya.dim();
    let data = ya
        .data()
        .par_chunks(n)
        .zip(yb.data().par_chunks(n))
        .map(|(a, b)| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                s1 += ((y - theta * x) / (1.0 - theta)).powi(2);
                s2 += ((x - theta * y) / (1.0 - theta)).powi(2);
            }
            s1.sqrt() + s2.sqrt()
        })
        .collect();
    Field::from_vec(ya.paths(), ya.nodes(), 1, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub sup_difference: f64,
    pub converged: [bool; 2],
    pub iterations: [usize; 2],
    /// True when the difference is within twice the tolerance.
    pub agree: bool,
}

/// Runs the iteration from two starting points and reports how far apart
/// the results end. It reports; it never asserts.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_probe(
    model: &GeneratorModel,
    xi: &[f64],
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    span: Range<usize>,
    opts: &PicardOptions,
    init_a: &Init,
    init_b: &Init,
) -> Result<ProbeReport, PicardError> {
    let a = picard_iterate(model, xi, ens, plan, span.clone(), opts, init_a)?;
    let b = picard_iterate(model, xi, ens, plan, span, opts, init_b)?;
    let diff = a.solution.y.sup_distance(&b.solution.y);
    Ok(ProbeReport {
        sup_difference: diff,
        converged: [a.solution.converged, b.solution.converged],
        iterations: [a.solution.iterations, b.solution.iterations],
        agree: diff <= 2.0 * opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Component, Family, StructuralConstants};
    use crate::scalar_solver::cole_hopf_oracle;
    use approx::assert_relative_eq;

    fn model(n: usize, d: usize, fam: impl Fn(usize) -> Family) -> GeneratorModel {
        let c = StructuralConstants::new(n, d, 1.0, 1.0);
        GeneratorModel::diagonal(c, (0..n).map(|i| Component::Builtin(fam(i))).collect()).unwrap()
    }

    fn setup(m: usize, n_steps: usize, d: usize) -> (PathEnsemble, RegressionPlan) {
        let e = PathEnsemble::simulate(9, m, n_steps, 1.0, d).unwrap();
        let p = RegressionPlan::build(&e, 4).unwrap();
        (e, p)
    }

    #[test]
    fn zero_generator_converges_immediately() {
        let (e, plan) = setup(400, 10, 1);
        let g = model(2, 1, |_| Family::Zero);
        let t = TerminalCondition::scalar(2, 1, true, |b| b[0].cos());
        let xi = terminal_field(&t, &e).unwrap();
        let run = picard_iterate(&g, &xi, &e, &plan, 0..10, &PicardOptions::default(), &Init::Zero).unwrap();
        assert!(run.solution.converged);
        assert_eq!(run.trace.len(), 2);
        assert!(run.trace.rows[0].dy > 0.0);
        assert_eq!(run.trace.rows[1].dy, 0.0);
        for m in 0..400 {
            assert_eq!(run.solution.y.at(m, 10), &xi[2 * m..2 * m + 2]);
        }
        let probe = uniqueness_probe(
            &g,
            &xi,
            &e,
            &plan,
            0..10,
            &PicardOptions::default(),
            &Init::Zero,
            &Init::FlatTerminal,
        )
        .unwrap();
        assert_eq!(probe.sup_difference, 0.0);
        assert_eq!(probe.iterations, [2, 2]);
    }

    #[test]
    fn diagonal_models_ignore_frozen_z() {
        let (e, plan) = setup(300, 6, 2);
        let g = model(2, 2, |_| Family::CoupledQuadratic {
            gamma: 1.0,
            sign: 1.0,
            beta: 0.5,
            source: 1,
        });
        let t = TerminalCondition::scalar(2, 2, true, |b| b[0].sin());
        let xi = terminal_field(&t, &e).unwrap();
        let u = Field::constant(300, 7, &[0.3, -0.2]);
        let v1 = Field::zeros(300, 6, 4);
        let v2 = Field::constant(300, 6, &[5.0, -1.0, 2.0, 7.0]);
        let o = SolverOptions::default();
        let a = gamma_map(&g, &u, Some(&v1), &xi, &e, &plan, 0..6, &o).unwrap();
        let b = gamma_map(&g, &u, Some(&v2), &xi, &e, &plan, 0..6, &o).unwrap();
        let c = gamma_map(&g, &u, None, &xi, &e, &plan, 0..6, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn non_diagonal_model_needs_frozen_z() {
        let (e, plan) = setup(100, 4, 2);
        let c = StructuralConstants::new(2, 2, 1.0, 1.0);
        let g = GeneratorModel::new(
            c,
            vec![
                Component::Builtin(Family::OffDiagonalQuadratic { row: 1 }),
                Component::Builtin(Family::Zero),
            ],
            crate::exprlang::Expr::Lit(0.0),
            vec![false, true],
            vec![crate::generator::Convexity::None; 2],
        )
        .unwrap();
        let xi = vec![0.0; 200];
        let err = picard_iterate(&g, &xi, &e, &plan, 0..4, &PicardOptions::default(), &Init::Zero);
        assert_eq!(err.unwrap_err(), PicardError::NotDiagonal);
        let opts = PicardOptions {
            mode: PicardMode::FrozenYv,
            ..PicardOptions::default()
        };
        assert!(picard_iterate(&g, &xi, &e, &plan, 0..4, &opts, &Init::Zero).is_ok());
    }

    #[test]
    fn linear_in_y_reaches_the_implicit_ode_factor() {
        let (e, plan) = setup(200, 20, 1);
        let beta = 0.8;
        let g = model(2, 1, |_| Family::LinearInY { beta });
        let t = TerminalCondition::from_fn(2, 1, true, |_, out| {
            out[0] = 1.0;
            out[1] = -2.0;
        });
        let xi = terminal_field(&t, &e).unwrap();
        let opts = PicardOptions {
            tol: 1e-12,
            max_iters: 60,
            ..PicardOptions::default()
        };
        let run = picard_iterate(&g, &xi, &e, &plan, 0..20, &opts, &Init::Zero).unwrap();
        assert!(run.solution.converged);
        let factor = (1.0 - beta * 0.05f64).powi(-20);
        let y0 = run.solution.y0_mean();
        assert_relative_eq!(y0[0], factor, max_relative = 1e-10);
        assert_relative_eq!(y0[1], -2.0 * factor, max_relative = 1e-10);
        // and the discrete factor approaches e^{beta T}
        assert!((factor - beta.exp()).abs() < 0.05);
    }

    #[test]
    fn pure_quadratic_components_match_the_oracle() {
        let (e, plan) = setup(20_000, 50, 2);
        let g = model(2, 2, |_| Family::DiagonalQuadratic { gamma: 1.0, sign: 1.0 });
        let t = TerminalCondition::from_fn(2, 2, true, |b, out| {
            out[0] = b[0].sin();
            out[1] = b[1].sin();
        });
        let xi = terminal_field(&t, &e).unwrap();
        let run = picard_iterate(&g, &xi, &e, &plan, 0..50, &PicardOptions::default(), &Init::Zero).unwrap();
        let want = cole_hopf_oracle(1.0, f64::sin, 1.0, 1e-10).unwrap();
        for v in run.solution.y0_mean() {
            assert!((v - want).abs() < 1e-2, "{v} vs {want}");
        }
    }

    #[test]
    fn theta_identities() {
        let y = Field::constant(3, 4, &[2.0]);
        let d = theta_deltas(&y, &y, 0.5);
        assert!(d.data().iter().all(|v| (v - 4.0).abs() < 1e-12));
        let a = Field::zeros(3, 4, 1);
        let b = Field::constant(3, 4, &[1.0]);
        for theta in [0.9, 0.99, 0.999] {
            let d = theta_deltas(&a, &b, theta);
            // |dY| + |dY~| = (1 + theta)/(1 - theta) for these iterates
            assert_relative_eq!(d.data()[0], (1.0 + theta) / (1.0 - theta), max_relative = 1e-12);
        }
        let rows = theta_monitor(&[(1, a.clone()), (2, b.clone()), (3, b.clone())], 1, 0.5, 2.0, 1.0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(theta_monitor(&[(1, a)], 1, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn theta_monitor_reduces_q_on_overflow() {
        let a = Field::constant(2, 2, &[200.0]);
        let rows = theta_monitor(&[(1, a.clone()), (2, a)], 1, 0.5, 8.0, 1.0).unwrap();
        assert!(rows[0].q < 8.0 && rows[0].note.is_some());
    }

    #[test]
    fn trace_csv_columns() {
        let t = IterationTrace {
            rows: vec![TraceRow {
                m: 1,
                dy: 0.5,
                dz: 0.25,
                ratio: None,
                seconds: 1.5,
                ln_exp_moments: vec![],
            }],
        };
        let csv = t.to_csv(false);
        assert_eq!(csv.lines().next(), Some("m,dY,dZ,ratio,seconds"));
        assert_eq!(csv.lines().nth(1), Some("1,5e-1,2.5e-1,,0.000000"));
    }
}
