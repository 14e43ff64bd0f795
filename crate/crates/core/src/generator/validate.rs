use rayon::prelude::*;
use serde::Serialize;

use super::{GeneratorModel, TerminalCondition};
use crate::quasi::Kronecker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    H1,
    H2,
    H3,
    H4,
    H5,
    B1,
    B2,
    B3,
    B4,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    pub samples: usize,
    pub seed: u64,
    pub radius_y: f64,
    pub radius_z: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            samples: 10_000,
            seed: 0,
            radius_y: 10.0,
            radius_z: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` seen; negative means every sample had slack.
    pub worst_margin: f64,
    /// Which side of a two-sided assumption the component satisfies
    /// (`lower`/`upper` for H5, `convex`/`concave` for B3).
    pub variant: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub assumption: Assumption,
    pub samples: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub components: Vec<ComponentReport>,
    /// H2 only: the smallest factor on phi that makes every sample pass.
    pub min_multiplier: Option<f64>,
    pub note: Option<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

const REL_TOL: f64 = 1e-9;

fn exceeds(lhs: f64, rhs: f64) -> bool {
    !(lhs - rhs <= REL_TOL * lhs.abs().max(rhs.abs()).max(1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct Sample {
    t: f64,
    y: Vec<f64>,
    z: Vec<f64>,
    ybar: Vec<f64>,
    zbar: Vec<f64>,
    alpha: f64,
}

struct Sampler<'a> {
    model: &'a GeneratorModel,
    q: Kronecker,
    bpoints: Vec<Vec<f64>>,
    opts: ValidationOptions,
}

impl<'a> Sampler<'a> {
    fn new(model: &'a GeneratorModel, opts: ValidationOptions, salt: u64) -> Self {
        let (n, d) = (model.n(), model.d());
        let q = Kronecker::new(2 + 2 * n + 2 * n * d, opts.seed ^ salt);
        let horizon = model.constants().horizon;
        let qb = Kronecker::new(d, opts.seed ^ salt ^ 0xb0b0);
        let r = 8.0 * horizon.sqrt();
        let mut bpoints = vec![vec![0.0; d]];
        let mut u = vec![0.0; d];
        for k in 0..31 {
            qb.point(k, &mut u);
            bpoints.push(u.iter().map(|v| (2.0 * v - 1.0) * r).collect());
        }
        Sampler {
            model,
            q,
            bpoints,
            opts,
        }
    }

    fn alpha_max(&self, t: f64) -> f64 {
        self.bpoints
            .iter()
            .map(|b| self.model.alpha(t, b).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    fn sample(&self, k: usize) -> Sample {
        let (n, d) = (self.model.n(), self.model.d());
        let nd = n * d;
        let mut u = vec![0.0; self.q.dim()];
        self.q.point(k, &mut u);
        let (ry, rz) = (self.opts.radius_y, self.opts.radius_z);
        let t = u[0] * self.model.constants().horizon;
        let y: Vec<f64> = u[2..2 + n].iter().map(|v| (2.0 * v - 1.0) * ry).collect();
        let z: Vec<f64> = u[2 + n..2 + n + nd].iter().map(|v| (2.0 * v - 1.0) * rz).collect();
        let ub = &u[2 + n + nd..2 + n + nd + n];
        let uz = &u[2 + 2 * n + nd..];
        // Even samples pair independent points, odd samples a local
        // perturbation whose scale ranges over three decades.
        let (ybar, zbar) = if k.is_multiple_of(2) {
            (
                ub.iter().map(|v| (2.0 * v - 1.0) * ry).collect(),
                uz.iter().map(|v| (2.0 * v - 1.0) * rz).collect(),
            )
        } else {
            let scale = 10f64.powf(-3.0 * u[1]);
            (
                y.iter().zip(ub).map(|(a, v)| a + (2.0 * v - 1.0) * ry * scale).collect(),
                z.iter().zip(uz).map(|(a, v)| a + (2.0 * v - 1.0) * rz * scale).collect(),
            )
        };
        let alpha = self.alpha_max(t);
        Sample {
            t,
            y,
            z,
            ybar,
            zbar,
            alpha,
        }
    }
}

/// Per-component, per-variant pairs `(lhs, rhs)` for the inequality `lhs <= rhs`.
type Check = Vec<[(f64, f64); 2]>;

#[derive(Clone)]
struct Acc {
    viol: Vec<[usize; 2]>,
    worst: Vec<[f64; 2]>,
    mult: f64,
}

impl Acc {
    fn new(k: usize) -> Self {
        Acc {
            viol: vec![[0; 2]; k],
            worst: vec![[f64::NEG_INFINITY; 2]; k],
            mult: 0.0,
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for c in 0..self.viol.len() {
            for v in 0..2 {
                self.viol[c][v] += o.viol[c][v];
                self.worst[c][v] = self.worst[c][v].max(o.worst[c][v]);
            }
        }
        self.mult = self.mult.max(o.mult);
        self
    }
}

fn run(
    model: &GeneratorModel,
    opts: ValidationOptions,
    salt: u64,
    ncomp: usize,
    check: impl Fn(&Sample) -> Check + Sync,
) -> Acc {
    let sampler = Sampler::new(model, opts, salt);
    (0..opts.samples)
        .into_par_iter()
        .fold(
            || Acc::new(ncomp),
            |mut acc, k| {
                let s = sampler.sample(k);
                for (c, pairs) in check(&s).into_iter().enumerate() {
                    for (v, (lhs, rhs)) in pairs.into_iter().enumerate() {
                        let margin = if lhs.is_nan() || rhs.is_nan() {
                            f64::INFINITY
                        } else {
                            lhs - rhs
                        };
                        acc.worst[c][v] = acc.worst[c][v].max(margin);
                        if exceeds(lhs, rhs) {
                            acc.viol[c][v] += 1;
                        }
                        if v == 0 && lhs > 0.0 {
                            let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
                            acc.mult = acc.mult.max(ratio);
                        }
                    }
                }
                acc
            },
        )
        .reduce(|| Acc::new(ncomp), Acc::merge)
}

fn report_single(which: Assumption, samples: usize, acc: &Acc) -> ValidationReport {
    let components: Vec<ComponentReport> = (0..acc.viol.len())
        .map(|c| ComponentReport {
            component: c,
            violations: acc.viol[c][0],
            worst_margin: acc.worst[c][0],
            variant: None,
        })
        .collect();
    finish(which, samples, components, None)
}

fn report_either(which: Assumption, samples: usize, acc: &Acc, names: [&'static str; 2]) -> ValidationReport {
    let components: Vec<ComponentReport> = (0..acc.viol.len())
        .map(|c| {
            let v = if acc.viol[c][0] <= acc.viol[c][1] { 0 } else { 1 };
            ComponentReport {
                component: c,
                violations: acc.viol[c][v],
                worst_margin: acc.worst[c][v],
                variant: if acc.viol[c][v] == 0 { Some(names[v]) } else { None },
            }
        })
        .collect();
    finish(which, samples, components, None)
}

fn finish(which: Assumption, samples: usize, components: Vec<ComponentReport>, note: Option<String>) -> ValidationReport {
    ValidationReport {
        assumption: which,
        samples,
        violations: components.iter().map(|c| c.violations).sum(),
        worst_margin: components.iter().map(|c| c.worst_margin).fold(f64::NEG_INFINITY, f64::max),
        components,
        min_multiplier: None,
        note,
    }
}

fn eval_or_nan(model: &GeneratorModel, i: usize, t: f64, y: &[f64], z: &[f64]) -> f64 {
    model.evaluate_component(i, t, y, z).unwrap_or(f64::NAN)
}

/// Sampled check of one of H1, H2, H4, H5 (H3 concerns the data, see
/// [`validate_h3`]). The `alpha` term uses `a(t, b)` maximised over 32
/// Brownian states spread over +-8 sqrt(T).
pub fn validate_h(model: &GeneratorModel, which: Assumption, opts: ValidationOptions) -> ValidationReport {
    let c = model.constants().clone();
    let (n, d) = (model.n(), model.d());
    let row = |z: &[f64], j: usize| norm(&z[j * d..(j + 1) * d]);
    let p = 1.0 + c.delta;
    match which {
        Assumption::H1 => {
            let acc = run(model, opts, 0x4801, n, |s| {
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let others: f64 = (0..n).filter(|&j| j != i).map(|j| row(&s.z, j).powf(p)).sum();
                        let rhs = s.alpha + c.phi.eval(norm(&s.y)) + 0.5 * c.gamma * row(&s.z, i).powi(2) + c.lambda * others;
                        [(g.abs(), rhs), (0.0, 0.0)]
                    })
                    .collect()
            });
            report_single(which, opts.samples, &acc)
        }
        Assumption::H2 => {
            let acc = run(model, opts, 0x4802, n, |s| {
                let zn = norm(&s.z);
                let zbn = norm(&s.zbar);
                let phi = c.phi.eval(norm(&s.y).max(norm(&s.ybar)));
                let dy = diff_norm(&s.y, &s.ybar);
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let gb = eval_or_nan(model, i, s.t, &s.ybar, &s.zbar);
                        let dzi = diff_norm(&s.z[i * d..(i + 1) * d], &s.zbar[i * d..(i + 1) * d]);
                        let dzo: f64 = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| diff_norm(&s.z[j * d..(j + 1) * d], &s.zbar[j * d..(j + 1) * d]))
                            .sum();
                        let bracket =
                            (1.0 + zn + zbn) * (dy + dzi) + (1.0 + zn.powf(c.delta) + zbn.powf(c.delta)) * dzo;
                        [((g - gb).abs(), phi * bracket), (0.0, 0.0)]
                    })
                    .collect()
            });
            let mut r = report_single(which, opts.samples, &acc);
            r.min_multiplier = Some(acc.mult);
            r.note = Some(
                "with phi(0) = 0 the right side vanishes at y = ybar = 0, so any z-dependence there \
                 violates the inequality; sampled points avoid the origin"
                    .into(),
            );
            r
        }
        Assumption::H4 => {
            let acc = run(model, opts, 0x4804, n, |s| {
                let zn = norm(&s.z);
                let yn = norm(&s.y);
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let sg = if s.y[i] > 0.0 { 1.0 } else { -1.0 };
                        let rhs = s.alpha + c.beta * yn + c.lambda * zn.powf(p) + 0.5 * c.gamma * row(&s.z, i).powi(2);
                        [(sg * g, rhs), (0.0, 0.0)]
                    })
                    .collect()
            });
            report_single(which, opts.samples, &acc)
        }
        Assumption::H5 => {
            let acc = run(model, opts, 0x4805, n, |s| {
                let zn = norm(&s.z);
                let yn = norm(&s.y);
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let slack = s.alpha + c.beta * yn + c.lambda * zn.powf(p);
                        let q = 0.5 * c.gamma_bar * row(&s.z, i).powi(2);
                        // lower: q - slack <= g ; upper: g <= -q + slack
                        [(q - slack, g), (g, slack - q)]
                    })
                    .collect()
            });
            report_either(which, opts.samples, &acc, ["lower", "upper"])
        }
        _ => panic!("validate_h handles H1, H2, H4 and H5; use validate_h3 or validate_b for {which}"),
    }
}

/// Bounded data: `|xi| <= C1` on a wide grid and `T * a(t, b) <= C2` on
/// sampled (t, b).
pub fn validate_h3(model: &GeneratorModel, terminal: &TerminalCondition, opts: ValidationOptions) -> ValidationReport {
    let c = model.constants();
    let mut components = Vec::new();
    let (violations, margin) = match terminal.check_bound(c.c1, c.horizon) {
        Ok(()) => (0, 0.0),
        Err(super::ModelError::TerminalUnbounded { value, bound, .. }) => (1, value.abs() - bound),
        Err(_) => (1, f64::INFINITY),
    };
    components.push(ComponentReport {
        component: 0,
        violations,
        worst_margin: margin,
        variant: None,
    });
    let sampler = Sampler::new(model, opts, 0x4803);
    let q = Kronecker::new(1, opts.seed ^ 0x4803);
    let mut u = [0.0];
    let mut worst = f64::NEG_INFINITY;
    let mut viol = 0;
    for k in 0..opts.samples.min(1000) {
        q.point(k, &mut u);
        let lhs = c.horizon * sampler.alpha_max(u[0] * c.horizon);
        worst = worst.max(lhs - c.c2);
        if exceeds(lhs, c.c2) {
            viol += 1;
        }
    }
    components.push(ComponentReport {
        component: 1,
        violations: viol,
        worst_margin: worst,
        variant: None,
    });
    finish(
        Assumption::H3,
        opts.samples,
        components,
        Some("entry 0 checks the terminal bound C1, entry 1 the alpha integral bound C2".into()),
    )
}

/// Sampled check of B1, B2 or B3.
pub fn validate_b(model: &GeneratorModel, which: Assumption, opts: ValidationOptions) -> ValidationReport {
    let c = model.constants().clone();
    let (n, d) = (model.n(), model.d());
    match which {
        Assumption::B1 => {
            // variant 0: growth; variant 1: invariance under other-row substitution
            let acc = run(model, opts, 0x4201, n, |s| {
                let yn = norm(&s.y);
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let zi = &s.z[i * d..(i + 1) * d];
                        let growth = (g.abs(), s.alpha + c.beta * yn + 0.5 * c.gamma * norm(zi).powi(2));
                        let mut moved = s.zbar.clone();
                        moved[i * d..(i + 1) * d].copy_from_slice(zi);
                        let g2 = eval_or_nan(model, i, s.t, &s.y, &moved);
                        let change = (g - g2).abs();
                        [growth, (change, 1e-12 * g.abs().max(1.0))]
                    })
                    .collect()
            });
            let components = (0..n)
                .map(|i| ComponentReport {
                    component: i,
                    violations: acc.viol[i][0] + acc.viol[i][1],
                    worst_margin: acc.worst[i][0],
                    variant: None,
                })
                .collect();
            let note = (0..n)
                .filter(|&i| acc.viol[i][1] > 0)
                .map(|i| format!("component {i} changes when other rows of z change"))
                .collect::<Vec<_>>()
                .join("; ");
            finish(which, opts.samples, components, (!note.is_empty()).then_some(note))
        }
        Assumption::B2 => {
            let acc = run(model, opts, 0x4202, 1, |s| {
                let g: Vec<f64> = (0..n).map(|i| eval_or_nan(model, i, s.t, &s.y, &s.z)).collect();
                let gb: Vec<f64> = (0..n).map(|i| eval_or_nan(model, i, s.t, &s.ybar, &s.z)).collect();
                vec![[(diff_norm(&g, &gb), c.beta * diff_norm(&s.y, &s.ybar)), (0.0, 0.0)]]
            });
            report_single(which, opts.samples, &acc)
        }
        Assumption::B3 => {
            let acc = run(model, opts, 0x4203, n, |s| {
                let mid: Vec<f64> = s.z.iter().zip(&s.zbar).map(|(a, b)| 0.5 * (a + b)).collect();
                (0..n)
                    .map(|i| {
                        let g = eval_or_nan(model, i, s.t, &s.y, &s.z);
                        let gb = eval_or_nan(model, i, s.t, &s.y, &s.zbar);
                        let gm = eval_or_nan(model, i, s.t, &s.y, &mid);
                        let avg = 0.5 * (g + gb);
                        // absolute tolerance 1e-9 on the midpoint inequality
                        [(gm - avg - 1e-9, 0.0), (avg - gm - 1e-9, 0.0)]
                    })
                    .collect()
            });
            report_either(which, opts.samples, &acc, ["convex", "concave"])
        }
        _ => panic!("validate_b handles B1, B2 and B3; use validate_b4 for {which}"),
    }
}

/// Heuristic for exponential moments of every order: the terminal and the
/// alpha integral must grow strictly slower than quadratically in |b|. The
/// growth exponent is estimated between radii 16 sqrt(T) and 32 sqrt(T).
pub fn validate_b4(model: &GeneratorModel, terminal: &TerminalCondition, opts: ValidationOptions) -> ValidationReport {
    let c = model.constants();
    let d = c.d;
    let q = Kronecker::new(d + 1, opts.seed ^ 0x4204);
    let mut u = vec![0.0; d + 1];
    let mut out = vec![0.0; terminal.n()];
    let mut envelope = |r: f64| -> f64 {
        let mut worst = 0.0f64;
        for k in 0..64 {
            q.point(k, &mut u);
            let mut dir: Vec<f64> = u[..d].iter().map(|v| 2.0 * v - 1.0).collect();
            let len = norm(&dir).max(1e-12);
            dir.iter_mut().for_each(|v| *v *= r / len);
            let h = match terminal.eval(&dir, &mut out) {
                Ok(()) => norm(&out),
                Err(_) => f64::INFINITY,
            };
            let a = c.horizon * model.alpha(u[d] * c.horizon, &dir).unwrap_or(f64::INFINITY);
            worst = worst.max(h + a);
        }
        worst
    };
    let s = c.horizon.sqrt();
    let (h1, h2) = (envelope(16.0 * s), envelope(32.0 * s));
    let exponent = if h2 <= 1.0 || h1 <= 0.0 {
        0.0
    } else {
        (h2 / h1.max(1.0)).log2()
    };
    let fails = !(exponent < 2.0 - 1e-6) || !h2.is_finite();
    let components = vec![ComponentReport {
        component: 0,
        violations: fails as usize,
        worst_margin: exponent - 2.0,
        variant: None,
    }];
    finish(
        Assumption::B4,
        opts.samples,
        components,
        Some(format!("estimated growth exponent {exponent:.3} (must be below 2)")),
    )
}

/// Which existence results the passed reports support:
/// `local` needs H1-H3, `global_bounded` adds H4 with lambda = 0,
/// `global_strict` needs H1-H5 and `global_unbounded` needs B1-B4.
pub fn theorem_tags(reports: &[ValidationReport], lambda: f64) -> Vec<&'static str> {
    let ok = |a: Assumption| reports.iter().any(|r| r.assumption == a && r.passed());
    let mut tags = Vec::new();
    let local = ok(Assumption::H1) && ok(Assumption::H2) && ok(Assumption::H3);
    if local {
        tags.push("local");
        if ok(Assumption::H4) && lambda == 0.0 {
            tags.push("global_bounded");
        }
        if ok(Assumption::H4) && ok(Assumption::H5) {
            tags.push("global_strict");
        }
    }
    if ok(Assumption::B1) && ok(Assumption::B2) && ok(Assumption::B3) && ok(Assumption::B4) {
        tags.push("global_unbounded");
    }
    tags
}
