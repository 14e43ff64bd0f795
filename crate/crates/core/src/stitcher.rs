//! Global solutions by backward concatenation of local solves over
//! intervals of length at most eps.

use serde::Serialize;
use thiserror::Error;

use crate::constants::{bound_report, gronwall_bound, stitched_bound, BoundReport, Variant};
use crate::field::Field;
use crate::generator::{GeneratorModel, StructuralConstants};
use crate::norms::s_inf;
use crate::paths::{PathEnsemble, TimeGrid};
use crate::picard::{picard_iterate, BsdeSolution, Init, IterationTrace, PicardError, PicardOptions};
use crate::regression::RegressionPlan;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StitchError {
    #[error("eps = {eps} is not resolved by the grid step {dt}: use at least {needed} steps")]
    GridTooCoarse { eps: f64, dt: f64, needed: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("interval {interval}: {source}")]
    Picard {
        interval: usize,
        #[source]
        source: PicardError,
    },
    #[error("interval {interval} did not converge")]
    NotConverged {
        interval: usize,
        partial: Box<GlobalSolution>,
    },
}

/// Interval boundaries as grid nodes, from the terminal node down to 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StitchPlan {
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub eps: f64,
}

impl StitchPlan {
    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    /// The whole grid as one interval.
    pub fn single(grid: &TimeGrid) -> Self {
        StitchPlan {
            nodes: vec![grid.steps(), 0],
            times: vec![grid.horizon(), 0.0],
            eps: grid.horizon(),
        }
    }

    /// Explicit boundary times, snapped up to grid nodes. The terminal time
    /// and 0 are added when missing.
    pub fn explicit(grid: &TimeGrid, times: &[f64]) -> Result<Self, StitchError> {
        let dt = grid.dt();
        let mut nodes: Vec<usize> = times
            .iter()
            .map(|&t| {
                if !(0.0..=grid.horizon()).contains(&t) {
                    Err(StitchError::InvalidPlan(format!("boundary {t} outside [0, T]")))
                } else {
                    Ok(((t / dt) - 1e-9).ceil().max(0.0) as usize)
                }
            })
            .collect::<Result<_, _>>()?;
        nodes.push(grid.steps());
        nodes.push(0);
        nodes.sort_unstable_by(|a, b| b.cmp(a));
        nodes.dedup();
        let eps = nodes.windows(2).map(|w| grid.t(w[0]) - grid.t(w[1])).fold(0.0, f64::max);
        Ok(StitchPlan {
            times: nodes.iter().map(|&k| grid.t(k)).collect(),
            nodes,
            eps,
        })
    }
}

/// Greedy backward partition into intervals no longer than `eps`, each
/// boundary snapped to the nearest node at or after the exact boundary.
pub fn plan(grid: &TimeGrid, eps: f64) -> Result<StitchPlan, StitchError> {
    if !(eps > 0.0) {
        return Err(StitchError::InvalidPlan(format!("eps must be positive, got {eps}")));
    }
    let t_end = grid.horizon();
    let dt = grid.dt();
    if eps >= t_end {
        return Ok(StitchPlan {
            eps,
            ..StitchPlan::single(grid)
        });
    }
    if eps / dt < 2.0 - 1e-9 {
        return Err(StitchError::GridTooCoarse {
            eps,
            dt,
            needed: (2.0 * t_end / eps).ceil() as usize,
        });
    }
    let mut nodes = vec![grid.steps()];
    let mut k = grid.steps();
    while k > 0 {
        let exact = grid.t(k) - eps;
        let next = if exact <= 0.0 {
            0
        } else {
            ((exact / dt) - 1e-9).ceil() as usize
        };
        k = next.min(k - 1);
        nodes.push(k);
    }
    Ok(StitchPlan {
        times: nodes.iter().map(|&k| grid.t(k)).collect(),
        nodes,
        eps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalReport {
    /// Node range `lo..=hi`.
    pub lo: usize,
    pub hi: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Measured max |Y| over the interval.
    pub sup_y: f64,
    pub trace: IterationTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSolution {
    pub solution: BsdeSolution,
    /// In solve order: the interval ending at T first.
    pub intervals: Vec<IntervalReport>,
}

/// Solves interval by interval from T backwards. Each interval's terminal
/// is the previous interval's Y at the seam, per path.
pub fn solve_global(
    model: &GeneratorModel,
    xi: &[f64],
    ens: &PathEnsemble,
    reg: &RegressionPlan,
    stitch: &StitchPlan,
    opts: &PicardOptions,
) -> Result<GlobalSolution, StitchError> {
    let n = model.n();
    let d = model.d();
    let paths = ens.paths();
    let total = ens.steps();
    if stitch.nodes.first() != Some(&total) || stitch.nodes.last() != Some(&0) {
        return Err(StitchError::InvalidPlan("plan must run from the last node to 0".into()));
    }
    if stitch.intervals() == 1 {
        let run = picard_iterate(model, xi, ens, reg, 0..total, opts, &Init::Zero)
            .map_err(|source| StitchError::Picard { interval: 0, source })?;
        let report = IntervalReport {
            lo: 0,
            hi: total,
            iterations: run.solution.iterations,
            converged: run.solution.converged,
            sup_y: s_inf(&run.solution.y),
            trace: run.trace,
        };
        let out = GlobalSolution {
            solution: run.solution,
            intervals: vec![report],
        };
        if !out.solution.converged {
            return Err(StitchError::NotConverged {
                interval: 0,
                partial: Box::new(out),
            });
        }
        return Ok(out);
    }
    let mut y = Field::zeros(paths, total + 1, n);
    let mut z = Field::zeros(paths, total, n * d);
    let mut terminal = xi.to_vec();
    let mut intervals = Vec::new();
    let mut summary: Option<BsdeSolution> = None;
    for (j, w) in stitch.nodes.windows(2).enumerate() {
        let (hi, lo) = (w[0], w[1]);
        let run = picard_iterate(model, &terminal, ens, reg, lo..hi, opts, &Init::Zero)
            .map_err(|source| StitchError::Picard { interval: j, source })?;
        let s = run.solution;
        // seam: the terminal handed in is reproduced exactly at node hi
        assert_eq!(s.y.node(hi - lo), &terminal[..], "seam mismatch at node {hi}");
        for k in lo..=hi {
            y.node_mut(k).copy_from_slice(s.y.node(k - lo));
        }
        for k in lo..hi {
            z.node_mut(k).copy_from_slice(s.z.node(k - lo));
        }
        terminal = s.y.node(0).to_vec();
        intervals.push(IntervalReport {
            lo,
            hi,
            iterations: s.iterations,
            converged: s.converged,
            sup_y: s_inf(&s.y),
            trace: run.trace,
        });
        let converged = s.converged;
        summary = Some(match summary {
            None => s,
            Some(acc) => BsdeSolution {
                converged: acc.converged && s.converged,
                iterations: acc.iterations + s.iterations,
                z_clip: acc.z_clip.max(s.z_clip),
                clipped: acc.clipped + s.clipped,
                max_residual_rms: acc.max_residual_rms.max(s.max_residual_rms),
                max_condition: acc.max_condition.max(s.max_condition),
                ..acc
            },
        });
        if !converged {
            let mut partial = summary.take().expect("set above");
            partial.offset = 0;
            partial.y = y;
            partial.z = z;
            return Err(StitchError::NotConverged {
                interval: j,
                partial: Box::new(GlobalSolution {
                    solution: partial,
                    intervals,
                }),
            });
        }
    }
    let mut solution = summary.expect("at least one interval");
    solution.offset = 0;
    solution.y = y;
    solution.z = z;
    Ok(GlobalSolution { solution, intervals })
}

/// Interval-to-interval pattern `sup_j <= 2n (sup_{j-1} + C2)`: the margin
/// (right side minus left) for each interval after the first.
pub fn recursion_margins(intervals: &[IntervalReport], c: &StructuralConstants) -> Vec<f64> {
    let n = c.n as f64;
    intervals
        .windows(2)
        .map(|w| 2.0 * n * (w[0].sup_y + c.c2) - w[1].sup_y)
        .collect()
}

/// The bound table for `c` with the measured sup of |Y| (vector and per
/// component) and the margins against the stitched and exponential bounds.
pub fn bound_audit(solution: &BsdeSolution, c: &StructuralConstants, variant: Variant) -> BoundReport {
    let mut report = bound_report(c, 2.0);
    let measured = s_inf(&solution.y);
    report.measured.insert("s_inf".into(), measured);
    for i in 0..solution.n() {
        let sup = solution.y.data().iter().skip(i).step_by(solution.n()).fold(0.0f64, |a, v| a.max(v.abs()));
        report.measured.insert(format!("s_inf[{i}]"), sup);
    }
    let tag = match variant {
        Variant::I => "i",
        Variant::II => "ii",
    };
    if let Ok(b) = stitched_bound(c, variant) {
        report.measured.insert(format!("margin_stitched_{tag}"), b - measured);
    }
    if let Ok(b) = gronwall_bound(c, variant) {
        report.measured.insert(format!("margin_gronwall_{tag}"), b - measured);
    }
    report
}
