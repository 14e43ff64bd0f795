//! Picard iteration on a coupled system, stitching and the bound audit.

use qbsde::constants::{stitch_step, Variant};
use qbsde::generator::{Component, Family, GeneratorModel, StructuralConstants, TerminalCondition};
use qbsde::paths::PathEnsemble;
use qbsde::picard::{picard_iterate, terminal_field, uniqueness_probe, Init, PicardOptions};
use qbsde::regression::RegressionPlan;
use qbsde::stitcher::{bound_audit, plan, recursion_margins, solve_global, StitchPlan};

fn coupled(beta: f64, c2: f64) -> GeneratorModel {
    let mut c = StructuralConstants::new(2, 1, 1.0, 1.0);
    c.beta = beta;
    c.c2 = c2;
    let comps = (0..2)
        .map(|i| {
            Component::Builtin(Family::CoupledQuadratic {
                gamma: 1.0,
                sign: 1.0,
                beta,
                source: 1 - i,
            })
        })
        .collect();
    GeneratorModel::diagonal(c, comps).unwrap()
}

fn sin_cos(ens: &PathEnsemble) -> Vec<f64> {
    let t = TerminalCondition::from_fn(2, 1, true, |b, out| {
        out[0] = b[0].sin();
        out[1] = 0.5 * b[0].cos();
    });
    terminal_field(&t, ens).unwrap()
}

#[test]
fn coupled_iteration_contracts_and_is_unique() {
    let ens = PathEnsemble::simulate(31, 5000, 20, 1.0, 1).unwrap();
    let reg = RegressionPlan::build(&ens, 4).unwrap();
    let model = coupled(0.5, 0.0);
    let xi = sin_cos(&ens);
    let opts = PicardOptions::default();
    let run = picard_iterate(&model, &xi, &ens, &reg, 0..20, &opts, &Init::Zero).unwrap();
    assert!(run.solution.converged);
    let dy: Vec<f64> = run.trace.rows.iter().map(|r| r.dy).collect();
    assert!(dy.windows(2).all(|w| w[1] < w[0]), "{dy:?}");
    assert!(run.trace.rows.iter().skip(1).all(|r| r.ratio.unwrap() < 1.0));
    let probe = uniqueness_probe(&model, &xi, &ens, &reg, 0..20, &opts, &Init::Zero, &Init::FlatTerminal).unwrap();
    assert!(probe.converged == [true, true]);
    assert!(probe.sup_difference < 2e-4, "{}", probe.sup_difference);
}

#[test]
fn three_intervals_match_one() {
    let ens = PathEnsemble::simulate(32, 4000, 30, 1.0, 1).unwrap();
    let reg = RegressionPlan::build(&ens, 4).unwrap();
    let model = coupled(0.5, 0.0);
    let xi = sin_cos(&ens);
    let opts = PicardOptions {
        tol: 1e-7,
        ..PicardOptions::default()
    };
    let one = solve_global(&model, &xi, &ens, &reg, &StitchPlan::single(&ens.grid()), &opts).unwrap();
    let three = solve_global(&model, &xi, &ens, &reg, &plan(&ens.grid(), 0.34).unwrap(), &opts).unwrap();
    assert_eq!(three.intervals.len(), 3);
    let diff = one.solution.y.sup_distance(&three.solution.y);
    assert!(diff < 5e-3, "{diff}");
    for w in three.intervals.windows(2) {
        assert_eq!(w[0].lo, w[1].hi);
    }
}

#[test]
fn stitched_solution_respects_the_global_bounds() {
    // |g^i| <= C1 + beta|y| + (gamma/2)|z^i|^2 with the sin coupling
    let beta = 0.5;
    let ens = PathEnsemble::simulate(33, 4000, 40, 1.0, 1).unwrap();
    let reg = RegressionPlan::build(&ens, 4).unwrap();
    let model = coupled(beta, 0.0);
    let mut c = model.constants().clone();
    c.c1 = 1.0;
    let step = stitch_step(&c);
    let stitch = plan(&ens.grid(), step.eps).unwrap();
    let xi = sin_cos(&ens);
    let sol = solve_global(&model, &xi, &ens, &reg, &stitch, &PicardOptions::default()).unwrap();
    let report = bound_audit(&sol.solution, &c, Variant::I);
    let s = report.measured["s_inf"];
    let g = report.get("gronwall_i").unwrap();
    let l = report.get("stitched_i").unwrap();
    assert!(s <= g && g <= l, "{s} {g} {l}");
    assert!(recursion_margins(&sol.intervals, &c).iter().all(|m| *m >= 0.0));
}
