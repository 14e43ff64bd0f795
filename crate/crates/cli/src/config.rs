//! The experiment file: a JSON document with `constants`, `generator`,
//! `terminal`, `simulation` and `run` blocks, plus optional named `vars`
//! usable inside every expression.

use std::collections::BTreeMap;

use qbsde::exprlang::{Expr, Scope};
use qbsde::generator::{
    Component, Convexity, Family, GeneratorModel, Modulus, StructuralConstants, TerminalCondition,
};
use qbsde::paths::DEFAULT_MEMORY_BUDGET;
use qbsde::picard::PicardMode;
use qbsde::constants::Variant;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Overrides the cap on `M * (N + 1) * d` stored path values.
pub const MEMORY_BUDGET_ENV: &str = "QBSDE_MEMORY_BUDGET";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

fn field_err(path: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        path: path.into(),
        message: message.to_string(),
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsBlock {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub gamma: f64,
    #[serde(default)]
    pub beta: f64,
    /// Defaults to gamma.
    #[serde(default)]
    pub gamma_bar: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default, rename = "C1")]
    pub c1: f64,
    #[serde(default, rename = "C2")]
    pub c2: f64,
    /// Growth modulus as an expression in `x`.
    #[serde(default = "zero_text")]
    pub phi: String,
}

fn zero_text() -> String {
    "0".into()
}

/// Built-in generator families; indices are one-based as in the
/// expression language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinSpec {
    Zero,
    DiagonalQuadratic {
        gamma: f64,
        #[serde(default = "one")]
        sign: f64,
    },
    LinearInY {
        beta: f64,
    },
    Linear {
        mu: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    CoupledQuadratic {
        gamma: f64,
        #[serde(default = "one")]
        sign: f64,
        beta: f64,
        source: usize,
    },
    PolynomialYGrowth,
    ExponentialYGrowth,
    OffDiagonalQuadratic {
        row: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentSpec {
    Expr { expr: String },
    Builtin(BuiltinSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    pub components: Vec<ComponentSpec>,
    #[serde(default = "zero_text")]
    pub alpha: String,
    /// Detected from the components when absent.
    #[serde(default)]
    pub diagonal: Option<Vec<bool>>,
    #[serde(default)]
    pub convexity: Option<Vec<Convexity>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalBlock {
    pub components: Vec<String>,
    #[serde(default)]
    pub bounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationBlock {
    #[serde(rename = "M")]
    pub paths: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub inner_iters: usize,
    pub z_clip: Option<f64>,
    /// Append the negated paths, doubling M.
    pub antithetic: bool,
    /// Sample count for the assumption validators.
    pub validation_samples: usize,
    /// Half-widths of the (y, z) boxes the validators sample from.
    pub validation_radius_y: f64,
    pub validation_radius_z: f64,
}

impl Default for SimulationBlock {
    fn default() -> Self {
        SimulationBlock {
            paths: 20_000,
            steps: 50,
            seed: 0,
            basis_degree: 4,
            inner_iters: 3,
            z_clip: None,
            antithetic: false,
            validation_samples: 10_000,
            validation_radius_y: 10.0,
            validation_radius_z: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// One interval of length min(eps0, T) at the end of the horizon.
    Local,
    /// Stitched intervals over the whole horizon.
    Global,
    /// One Picard run over the whole horizon.
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    /// Intervals of length 1/(2 n beta).
    Auto,
    Single,
    /// Boundaries taken from `run.boundaries`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    pub mode: RunMode,
    pub plan: PlanKind,
    pub boundaries: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
    /// Frozen-Y for all-diagonal models, frozen (Y, Z) otherwise.
    pub picard_mode: Option<PicardMode>,
    pub theta: Vec<f64>,
    pub q: Vec<f64>,
    pub variant: Variant,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            mode: RunMode::Global,
            plan: PlanKind::Auto,
            boundaries: Vec::new(),
            max_iters: 30,
            tol: 1e-4,
            picard_mode: None,
            theta: Vec::new(),
            q: Vec::new(),
            variant: Variant::I,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub vars: BTreeMap<String, f64>,
    pub constants: ConstantsBlock,
    pub generator: GeneratorBlock,
    pub terminal: TerminalBlock,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub run: RunBlock,
}

/// A parsed config with every expression compiled.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: GeneratorModel,
    pub terminal: TerminalCondition,
    pub picard_mode: PicardMode,
    pub memory_budget: usize,
}

fn section<T: DeserializeOwned>(top: &mut Map<String, Value>, name: &str) -> Result<Option<T>, ConfigError> {
    match top.remove(name) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| field_err(name, e)),
    }
}

fn required<T: DeserializeOwned>(top: &mut Map<String, Value>, name: &str) -> Result<T, ConfigError> {
    section(top, name)?.ok_or_else(|| field_err(name, format!("missing field `{name}`")))
}

/// Components are checked one by one so errors carry their index.
fn components(v: &Value) -> Result<(), ConfigError> {
    let Some(list) = v.get("components").and_then(Value::as_array) else {
        return Ok(());
    };
    for (i, c) in list.iter().enumerate() {
        let path = format!("generator.components[{i}]");
        match c {
            Value::Object(o) if o.contains_key("builtin") => {
                serde_json::from_value::<BuiltinSpec>(c.clone()).map_err(|e| field_err(path, e))?;
            }
            Value::Object(o) if o.contains_key("expr") => {
                if o.len() != 1 || !o["expr"].is_string() {
                    return Err(field_err(path, "expected {\"expr\": \"...\"}"));
                }
            }
            _ => return Err(field_err(path, "expected an object with `expr` or `builtin`")),
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| field_err("<document>", e))?;
        let Value::Object(mut top) = value else {
            return Err(field_err("<document>", "expected a JSON object"));
        };
        if let Some(g) = top.get("generator") {
            components(g)?;
        }
        let cfg = ExperimentConfig {
            vars: section(&mut top, "vars")?.unwrap_or_default(),
            constants: required(&mut top, "constants")?,
            generator: required(&mut top, "generator")?,
            terminal: required(&mut top, "terminal")?,
            simulation: section(&mut top, "simulation")?.unwrap_or_default(),
            run: section(&mut top, "run")?.unwrap_or_default(),
        };
        if let Some(key) = top.keys().next() {
            return Err(field_err(key.clone(), "unknown top-level field"));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn constants(&self) -> Result<StructuralConstants, ConfigError> {
        let b = &self.constants;
        let phi = if b.phi.trim() == "0" {
            Modulus::Zero
        } else {
            let scope = Scope::scalar().with_constants(&self.vars);
            Modulus::Expr(Expr::parse(&b.phi, &scope).map_err(|e| field_err("constants.phi", e))?)
        };
        let c = StructuralConstants {
            n: b.n,
            d: b.d,
            horizon: b.horizon,
            beta: b.beta,
            gamma: b.gamma,
            gamma_bar: b.gamma_bar.unwrap_or(b.gamma),
            lambda: b.lambda,
            delta: b.delta,
            c1: b.c1,
            c2: b.c2,
            phi,
        };
        c.check().map_err(|e| field_err("constants", e))?;
        Ok(c)
    }

    /// Compiles every expression and checks sizes against the memory budget.
    pub fn resolve(self) -> Result<Resolved, ConfigError> {
        let c = self.constants()?;
        let (n, d) = (c.n, c.d);
        let g = &self.generator;
        if g.components.len() != n {
            return Err(field_err(
                "generator.components",
                format!("expected {n} components, got {}", g.components.len()),
            ));
        }
        let gscope = Scope::generator(n, d).with_constants(&self.vars);
        let mut comps = Vec::with_capacity(n);
        let mut reads_other = Vec::with_capacity(n);
        for (i, spec) in g.components.iter().enumerate() {
            let path = format!("generator.components[{i}]");
            let comp = match spec {
                ComponentSpec::Expr { expr } => {
                    let e = Expr::parse(expr, &gscope).map_err(|e| field_err(path, e))?;
                    reads_other.push(e.reads_other_rows(i));
                    Component::Expr(e)
                }
                ComponentSpec::Builtin(b) => {
                    let f = family(b, n, d).map_err(|m| field_err(path, m))?;
                    reads_other.push(f.reads_other_rows(i));
                    Component::Builtin(f)
                }
            };
            comps.push(comp);
        }
        let alpha = Expr::parse(&g.alpha, &Scope::alpha(d).with_constants(&self.vars))
            .map_err(|e| field_err("generator.alpha", e))?;
        let diagonal = match &g.diagonal {
            Some(v) => v.clone(),
            None => reads_other.iter().map(|r| !r).collect(),
        };
        let convexity = g.convexity.clone().unwrap_or_else(|| vec![Convexity::None; n]);
        let model = GeneratorModel::new(c, comps, alpha, diagonal, convexity).map_err(|e| field_err("generator", e))?;

        let t = &self.terminal;
        if t.components.len() != n {
            return Err(field_err(
                "terminal.components",
                format!("expected {n} components, got {}", t.components.len()),
            ));
        }
        let tscope = Scope::terminal(d).with_constants(&self.vars);
        let exprs = t
            .components
            .iter()
            .enumerate()
            .map(|(i, s)| Expr::parse(s, &tscope).map_err(|e| field_err(format!("terminal.components[{i}]"), e)))
            .collect::<Result<Vec<_>, _>>()?;
        let terminal = TerminalCondition::from_exprs(exprs, d, t.bounded);

        let s = &self.simulation;
        if s.paths == 0 || s.steps == 0 {
            return Err(field_err("simulation", "M and N must be positive"));
        }
        let budget = memory_budget().map_err(|m| field_err(MEMORY_BUDGET_ENV, m))?;
        let stored = s.paths.saturating_mul(if s.antithetic { 2 } else { 1 });
        let needed = stored.saturating_mul(s.steps + 1).saturating_mul(d);
        if needed > budget {
            return Err(field_err(
                "simulation",
                format!("M (N + 1) d = {needed} exceeds the memory budget {budget}; set {MEMORY_BUDGET_ENV} to raise it"),
            ));
        }
        if !(s.validation_radius_y > 0.0 && s.validation_radius_z > 0.0) {
            return Err(field_err("simulation", "validation radii must be positive"));
        }
        let r = &self.run;
        if r.plan == PlanKind::Explicit && r.boundaries.is_empty() {
            return Err(field_err("run.boundaries", "an explicit plan needs at least one boundary"));
        }
        if let Some(bad) = r.theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(field_err("run.theta", format!("{bad} is outside (0, 1)")));
        }
        let picard_mode = r.picard_mode.unwrap_or(if model.all_diagonal() {
            PicardMode::FrozenY
        } else {
            PicardMode::FrozenYv
        });
        Ok(Resolved {
            config: self,
            model,
            terminal,
            picard_mode,
            memory_budget: budget,
        })
    }
}

fn memory_budget() -> Result<usize, String> {
    match std::env::var(MEMORY_BUDGET_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| format!("not a count: {v:?}")),
        Err(_) => Ok(DEFAULT_MEMORY_BUDGET),
    }
}

fn family(b: &BuiltinSpec, n: usize, d: usize) -> Result<Family, String> {
    let index = |name: &str, i: usize| {
        if (1..=n).contains(&i) {
            Ok(i - 1)
        } else {
            Err(format!("{name} = {i} is outside 1..={n}"))
        }
    };
    Ok(match b {
        BuiltinSpec::Zero => Family::Zero,
        BuiltinSpec::DiagonalQuadratic { gamma, sign } => Family::DiagonalQuadratic {
            gamma: *gamma,
            sign: *sign,
        },
        BuiltinSpec::LinearInY { beta } => Family::LinearInY { beta: *beta },
        BuiltinSpec::Linear { mu, c } => {
            if mu.len() != d {
                return Err(format!("mu has {} entries, expected d = {d}", mu.len()));
            }
            Family::Linear { mu: mu.clone(), c: *c }
        }
        BuiltinSpec::CoupledQuadratic {
            gamma,
            sign,
            beta,
            source,
        } => Family::CoupledQuadratic {
            gamma: *gamma,
            sign: *sign,
            beta: *beta,
            source: index("source", *source)?,
        },
        BuiltinSpec::PolynomialYGrowth => Family::PolynomialYGrowth,
        BuiltinSpec::ExponentialYGrowth => Family::ExponentialYGrowth,
        BuiltinSpec::OffDiagonalQuadratic { row } => Family::OffDiagonalQuadratic {
            row: index("row", *row)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const COLE_HOPF: &str = r#"{
        "constants": {"n": 1, "d": 1, "T": 1.0, "gamma": 1.0},
        "generator": {"components": [{"expr": "0.5*norm(zrow(1))^2"}]},
        "terminal": {"components": ["max(min(b1, 3), -3)"], "bounded": true},
        "simulation": {"M": 1000, "N": 10, "seed": 3}
    }"#;

    #[test]
    fn minimal_config_resolves() {
        let r = ExperimentConfig::from_json(COLE_HOPF).unwrap().resolve().unwrap();
        assert_eq!(r.model.n(), 1);
        assert!(r.model.all_diagonal());
        assert_eq!(r.picard_mode, PicardMode::FrozenY);
        assert_eq!(r.config.run.mode, RunMode::Global);
        assert_eq!(r.config.simulation.basis_degree, 4);
    }

    #[test]
    fn empty_generator_names_the_missing_field() {
        let text = r#"{"constants": {"n": 1, "d": 1, "T": 1.0, "gamma": 1.0},
                       "generator": {}, "terminal": {"components": ["b1"]}}"#;
        let e = ExperimentConfig::from_json(text).unwrap_err().to_string();
        assert!(e.starts_with("generator:") && e.contains("components"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"constants": {"n": 1, "d": 1, "T": 1.0, "gamma": 1.0}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("generator"), "{e}");
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad_expr = COLE_HOPF.replace("0.5*norm(zrow(1))^2", "y3 + 1");
        let e = ExperimentConfig::from_json(&bad_expr).unwrap().resolve().unwrap_err().to_string();
        assert!(e.starts_with("generator.components[0]:"), "{e}");
        let bad_builtin = COLE_HOPF.replace(r#"{"expr": "0.5*norm(zrow(1))^2"}"#, r#"{"builtin": "diagonal_quadratic"}"#);
        let e = ExperimentConfig::from_json(&bad_builtin).unwrap_err().to_string();
        assert!(e.starts_with("generator.components[0]:") && e.contains("gamma"), "{e}");
        let bad_gamma = COLE_HOPF.replace(r#""gamma": 1.0}"#, r#""gamma": -1.0}"#);
        let e = ExperimentConfig::from_json(&bad_gamma).unwrap().resolve().unwrap_err().to_string();
        assert!(e.starts_with("constants:"), "{e}");
        let extra = COLE_HOPF.replace(r#""seed": 3"#, r#""seed": 3, "paths": 5"#);
        assert!(ExperimentConfig::from_json(&extra).unwrap_err().to_string().starts_with("simulation:"));
    }

    #[test]
    fn vars_reach_expressions() {
        let text = COLE_HOPF
            .replace("0.5*norm", "g/2*norm")
            .replace(r#""constants""#, r#""vars": {"g": 2.0}, "constants""#);
        assert!(ExperimentConfig::from_json(&text).unwrap().resolve().is_ok());
    }

    #[test]
    fn off_diagonal_components_are_detected() {
        let text = r#"{"constants": {"n": 2, "d": 1, "T": 1.0, "gamma": 1.0},
            "generator": {"components": [{"builtin": "off_diagonal_quadratic", "row": 2}, {"builtin": "zero"}]},
            "terminal": {"components": ["0", "0"]}}"#;
        let r = ExperimentConfig::from_json(text).unwrap().resolve().unwrap();
        assert!(!r.model.is_diagonal(0) && r.model.is_diagonal(1));
        assert_eq!(r.picard_mode, PicardMode::FrozenYv);
    }

    #[test]
    fn round_trips_through_serde() {
        let c = ExperimentConfig::from_json(COLE_HOPF).unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
