//! The four workflows. Each returns a report and an exit status; printing
//! and file output stay in `main`.

use std::io::Write;
use std::ops::Range;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use qbsde::constants::{bound_report, local_radii, stitch_step, BoundReport};
use qbsde::field::Field;
use qbsde::generator::{
    theorem_tags, validate_b, validate_b4, validate_h, validate_h3, Assumption, ValidationOptions, ValidationReport,
};
use qbsde::norms::{norm_table, NormEstimate};
use qbsde::paths::PathEnsemble;
use qbsde::picard::{picard_iterate, terminal_field, theta_monitor, BsdeSolution, Init, PicardOptions, ThetaRow};
use qbsde::regression::RegressionPlan;
use qbsde::scalar_solver::SolverOptions;
use qbsde::stitcher::{bound_audit, plan, solve_global, GlobalSolution, StitchError, StitchPlan};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, PlanKind, Resolved, RunMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VIOLATIONS: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    /// The iteration diverged; the trace is kept for the output directory.
    #[error("not converged: {message}")]
    Diverged { message: String, trace_csv: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage { .. } => EXIT_FAILURE,
            CliError::Diverged { .. } => EXIT_NOT_CONVERGED,
        }
    }
}

fn stage(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> CliError {
    move |e| CliError::Stage {
        stage,
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub reports: Vec<ValidationReport>,
    pub tags: Vec<&'static str>,
}

impl ValidateReport {
    pub fn exit_code(&self) -> i32 {
        if self.tags.is_empty() {
            EXIT_VIOLATIONS
        } else {
            EXIT_OK
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6} {:>8} {:>10} {:>14}  {}\n", "check", "samples", "violations", "worst margin", "detail");
        for r in &self.reports {
            let mut detail = Vec::new();
            let variants: Vec<&str> = r.components.iter().filter_map(|c| c.variant).collect();
            if !variants.is_empty() {
                detail.push(variants.join("/"));
            }
            if let Some(k) = r.min_multiplier {
                detail.push(format!("phi multiplier >= {k:.4}"));
            }
            if let Some(n) = &r.note {
                detail.push(n.clone());
            }
            s.push_str(&format!(
                "{:<6} {:>8} {:>10} {:>14.6e}  {}\n",
                r.assumption.to_string(),
                r.samples,
                r.violations,
                r.worst_margin,
                detail.join("; ")
            ));
        }
        let tags = if self.tags.is_empty() {
            "none".to_string()
        } else {
            self.tags.join(", ")
        };
        s.push_str(&format!("hypotheses satisfied: {tags}\n"));
        s
    }
}

/// Runs every validator on the model; `tags` lists the existence results
/// whose hypotheses passed.
pub fn run_validate(r: &Resolved) -> ValidateReport {
    let opts = ValidationOptions {
        samples: r.config.simulation.validation_samples,
        seed: r.config.simulation.seed,
        radius_y: r.config.simulation.validation_radius_y,
        radius_z: r.config.simulation.validation_radius_z,
    };
    let m = &r.model;
    let mut reports = vec![
        validate_h(m, Assumption::H1, opts),
        validate_h(m, Assumption::H2, opts),
        validate_h3(m, &r.terminal, opts),
        validate_h(m, Assumption::H4, opts),
        validate_h(m, Assumption::H5, opts),
    ];
    for a in [Assumption::B1, Assumption::B2, Assumption::B3] {
        reports.push(validate_b(m, a, opts));
    }
    reports.push(validate_b4(m, &r.terminal, opts));
    let tags = theorem_tags(&reports, m.constants().lambda);
    ValidateReport { reports, tags }
}

// ------------------------------------------------------------------ bounds

pub fn run_bounds(r: &Resolved, q: f64) -> BoundReport {
    let mut report = bound_report(r.model.constants(), q);
    let dt = r.config.constants.horizon / r.config.simulation.steps as f64;
    if let Some(eps0) = report.get("eps0") {
        if eps0 < dt {
            report
                .diagnostics
                .insert("eps0_warning".into(), format!("eps0 = {eps0:e} is below the grid step {dt:e}"));
        }
    }
    report
}

pub fn bounds_text(report: &BoundReport) -> String {
    let mut s = String::new();
    for (k, v) in &report.values {
        s.push_str(&format!("{k} = {v:e}\n"));
    }
    for (k, v) in &report.diagnostics {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s
}

// ------------------------------------------------------------------- solve

#[derive(Debug, Clone, Default)]
pub struct SolveFlags {
    pub deterministic: bool,
    pub plan: Option<PlanKind>,
    pub boundaries: Option<Vec<f64>>,
    pub dump_fields: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentStats {
    pub component: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalSummary {
    pub t_lo: f64,
    pub t_hi: f64,
    pub lo: usize,
    pub hi: usize,
    pub iterations: usize,
    pub converged: bool,
    pub sup_y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub interval: usize,
    pub m: usize,
    #[serde(rename = "dY")]
    pub dy: f64,
    #[serde(rename = "dZ")]
    pub dz: f64,
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    pub ln_exp_moments: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub z_clip: f64,
    pub clipped: usize,
    pub max_residual_rms: f64,
    pub max_condition: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub unix_seconds: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub mode: RunMode,
    pub picard_mode: qbsde::picard::PicardMode,
    pub converged: bool,
    pub iterations: usize,
    /// First node of the solved window and its time.
    pub offset: usize,
    pub t0: f64,
    pub y0: Vec<ComponentStats>,
    pub norms: Vec<NormEstimate>,
    pub bounds: BoundReport,
    pub intervals: Vec<IntervalSummary>,
    pub trace: Vec<TraceEntry>,
    pub theta: Vec<ThetaRow>,
    pub diagnostics: SolverDiagnostics,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

pub struct SolveOutcome {
    pub summary: Summary,
    pub trace_csv: String,
    pub fields: Option<Vec<u8>>,
}

impl SolveOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.summary.converged {
            EXIT_OK
        } else {
            EXIT_NOT_CONVERGED
        }
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn component_stats(y: &Field, node: usize) -> Vec<ComponentStats> {
    let paths = y.paths() as f64;
    (0..y.dim())
        .map(|i| {
            let vals: Vec<f64> = (0..y.paths()).map(|m| y.at(m, node)[i]).collect();
            let mean = y.mean_at(node, i);
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / paths;
            ComponentStats {
                component: i + 1,
                mean,
                sd: var.sqrt(),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// `QBSDEFLD` dump: magic, version (u32), offset, M, nodes, n, d (u64), then
/// Y and Z in path-major order, all little endian.
pub fn encode_fields(sol: &BsdeSolution) -> Vec<u8> {
    let (y, z) = (&sol.y, &sol.z);
    let mut out = Vec::with_capacity(48 + 8 * (y.data().len() + z.data().len()));
    out.extend_from_slice(b"QBSDEFLD");
    out.extend_from_slice(&1u32.to_le_bytes());
    for v in [sol.offset, y.paths(), y.nodes(), y.dim(), z.dim() / y.dim().max(1)] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for f in [y, z] {
        for m in 0..f.paths() {
            for k in 0..f.nodes() {
                for v in f.at(m, k) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Solved {
    solution: BsdeSolution,
    intervals: Vec<(usize, usize, usize, bool, f64, qbsde::picard::IterationTrace)>,
    iterates: Vec<(usize, Field)>,
}

fn from_global(g: GlobalSolution) -> Solved {
    Solved {
        solution: g.solution,
        intervals: g
            .intervals
            .into_iter()
            .map(|i| (i.lo, i.hi, i.iterations, i.converged, i.sup_y, i.trace))
            .collect(),
        iterates: Vec::new(),
    }
}

fn run_window(
    r: &Resolved,
    xi: &[f64],
    ens: &PathEnsemble,
    reg: &RegressionPlan,
    span: Range<usize>,
    opts: &PicardOptions,
) -> Result<Solved, CliError> {
    let (lo, hi) = (span.start, span.end);
    let run = match picard_iterate(&r.model, xi, ens, reg, span, opts, &Init::Zero) {
        Ok(run) => run,
        Err(qbsde::picard::PicardError::Diverged { last, trace }) => {
            return Err(CliError::Diverged {
                message: format!("diverged (last dY {last:e}) after {} iterations", trace.len()),
                trace_csv: trace.to_csv(false),
            });
        }
        Err(e) => return Err(stage("picard")(&e)),
    };
    let sup = qbsde::norms::s_inf(&run.solution.y);
    Ok(Solved {
        intervals: vec![(lo, hi, run.solution.iterations, run.solution.converged, sup, run.trace)],
        solution: run.solution,
        iterates: run.iterates,
    })
}

pub fn run_solve(r: &Resolved, flags: &SolveFlags) -> Result<SolveOutcome, CliError> {
    let start = Instant::now();
    let cfg = &r.config;
    let sim = &cfg.simulation;
    let c = r.model.constants();
    let mut warnings = Vec::new();

    let base = PathEnsemble::simulate_with_budget(sim.seed, sim.paths, sim.steps, c.horizon, c.d, r.memory_budget)
        .map_err(|e| stage("paths")(&e))?;
    let ens = if sim.antithetic { base.with_antithetic() } else { base };
    let reg = RegressionPlan::build(&ens, sim.basis_degree).map_err(|e| stage("regression")(&e))?;
    let xi = terminal_field(&r.terminal, &ens).map_err(|e| stage("terminal")(&e))?;
    let grid = ens.grid();

    let keep = if cfg.run.theta.is_empty() { 0 } else { cfg.run.max_iters + 1 };
    let opts = PicardOptions {
        solver: SolverOptions {
            basis_degree: sim.basis_degree,
            inner_iters: sim.inner_iters,
            z_clip: sim.z_clip,
            ..SolverOptions::default()
        },
        max_iters: cfg.run.max_iters,
        tol: cfg.run.tol,
        mode: r.picard_mode,
        keep_iterates: keep,
        moment_orders: cfg.run.q.clone(),
    };

    let solved = match cfg.run.mode {
        RunMode::Picard => run_window(r, &xi, &ens, &reg, 0..grid.steps(), &opts)?,
        RunMode::Local => {
            let eps0 = local_radii(c).map(|l| l.eps0).unwrap_or(0.0);
            let mut steps = ((eps0.min(c.horizon) / grid.dt()) + 1e-9).floor() as usize;
            if steps == 0 {
                warnings.push(format!("eps0 = {eps0:e} is below the grid step; solving one step"));
                steps = 1;
            }
            let steps = steps.min(grid.steps());
            run_window(r, &xi, &ens, &reg, grid.steps() - steps..grid.steps(), &opts)?
        }
        RunMode::Global => {
            let kind = flags.plan.unwrap_or(cfg.run.plan);
            let stitch = match kind {
                PlanKind::Single => Ok(StitchPlan::single(&grid)),
                PlanKind::Auto => plan(&grid, stitch_step(c).eps),
                PlanKind::Explicit => {
                    let b = flags.boundaries.as_deref().unwrap_or(&cfg.run.boundaries);
                    StitchPlan::explicit(&grid, b)
                }
            }
            .map_err(|e| CliError::Config(ConfigError::Field {
                    path: "run.plan".into(),
                    message: e.to_string(),
            }))?;
            if !cfg.run.theta.is_empty() {
                warnings.push("the theta monitor runs in picard mode only".into());
            }
            match solve_global(&r.model, &xi, &ens, &reg, &stitch, &opts) {
                Ok(g) => from_global(g),
                Err(StitchError::NotConverged { partial, .. }) => from_global(*partial),
                Err(e) => return Err(stage("stitch")(&e)),
            }
        }
    };

    let sol = &solved.solution;
    let mut theta = Vec::new();
    if !solved.iterates.is_empty() {
        let qs = if cfg.run.q.is_empty() { vec![2.0] } else { cfg.run.q.clone() };
        for &t in &cfg.run.theta {
            for &q in &qs {
                theta.extend(theta_monitor(&solved.iterates, 1, t, q, c.gamma).map_err(|e| stage("theta")(&e))?);
            }
        }
    }

    let mut trace = Vec::new();
    let mut csv = String::new();
    let stitched = solved.intervals.len() > 1;
    csv.push_str(if stitched { "interval,m,dY,dZ,ratio,seconds\n" } else { "m,dY,dZ,ratio,seconds\n" });
    for (j, (_, _, _, _, _, tr)) in solved.intervals.iter().enumerate() {
        for line in tr.to_csv(!flags.deterministic).lines().skip(1) {
            if stitched {
                csv.push_str(&format!("{j},"));
            }
            csv.push_str(line);
            csv.push('\n');
        }
        trace.extend(tr.rows.iter().map(|row| TraceEntry {
            interval: j,
            m: row.m,
            dy: row.dy,
            dz: row.dz,
            ratio: row.ratio,
            seconds: (!flags.deterministic).then_some(row.seconds),
            ln_exp_moments: row.ln_exp_moments.clone(),
        }));
    }

    let summary = Summary {
        seed: sim.seed,
        config: cfg.clone(),
        mode: cfg.run.mode,
        picard_mode: r.picard_mode,
        converged: sol.converged,
        iterations: sol.iterations,
        offset: sol.offset,
        t0: grid.t(sol.offset),
        y0: component_stats(&sol.y, 0),
        norms: norm_table(&sol.y, &sol.z, sol.offset, &ens, &reg),
        bounds: bound_audit(sol, c, cfg.run.variant),
        intervals: solved
            .intervals
            .iter()
            .map(|(lo, hi, it, conv, sup, _)| IntervalSummary {
                t_lo: grid.t(*lo),
                t_hi: grid.t(*hi),
                lo: *lo,
                hi: *hi,
                iterations: *it,
                converged: *conv,
                sup_y: *sup,
            })
            .collect(),
        trace,
        theta,
        diagnostics: SolverDiagnostics {
            z_clip: sol.z_clip,
            clipped: sol.clipped,
            max_residual_rms: sol.max_residual_rms,
            max_condition: sol.max_condition,
        },
        warnings,
        timing: (!flags.deterministic).then(|| Timing {
            unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_seconds: start.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        }),
    };
    Ok(SolveOutcome {
        fields: flags.dump_fields.then(|| encode_fields(sol)),
        summary,
        trace_csv: csv,
    })
}

/// Writes summary.json, trace.csv and, when requested, fields.bin.
pub fn write_outputs(out: &SolveOutcome, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), out.summary_json())?;
    std::fs::write(dir.join("trace.csv"), &out.trace_csv)?;
    if let Some(bytes) = &out.fields {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("fields.bin"))?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Resolved, CliError> {
    Ok(ExperimentConfig::load(path)?.resolve()?)
}
