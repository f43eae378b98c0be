//! Configuration ingestion, command dispatch, and machine-readable result
//! emission.
//!
//! Configs are JSON objects with a strict schema: unknown keys are rejected
//! so a misspelled tolerance cannot be ignored silently. Every command runs
//! the birth normalization first. Floating-point data files are written at
//! full round-trip precision (17 significant digits), so identical run specs
//! produce byte-identical output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bifurcation::{
    continue_branch, local_expansion, solve_equilibrium, Branch, BranchPoint, Constraint,
    Expansion, SolveOptions,
};
use crate::error::{Error, Result};
use crate::evolution::DensityField;
use crate::grid::{AgeGrid, Grids, SpaceGrid};
use crate::model::{build_preset, ModelSpec, ParamValue, Params, Preset};
use crate::spectral::{normalize_birth_with, SpectralData};
use crate::transient::{run_to_steady, step_transient, TransientState};

/// Steady-state residual threshold of the `transient` command.
pub const TRANSIENT_STEADY_TOL: f64 = 1e-6;
/// Number of locked steps and residual bound of the `validate` command.
pub const VALIDATE_STEPS: usize = 100;
pub const VALIDATE_RESIDUAL_BOUND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Normalize,
    Expansion,
    Branch,
    Transient,
    Validate,
    Converge,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Normalize => "normalize",
            Command::Expansion => "expansion",
            Command::Branch => "branch",
            Command::Transient => "transient",
            Command::Validate => "validate",
            Command::Converge => "converge",
        };
        f.write_str(s)
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown command `{s}`")))
    }
}

fn default_eps_max() -> f64 {
    0.1
}
fn default_steps() -> usize {
    10
}
fn default_n() -> f64 {
    1.0
}
fn default_t_max() -> f64 {
    10.0
}
fn default_tol_newton() -> f64 {
    1e-9
}
fn default_tol_eigen() -> f64 {
    1e-12
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub preset: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    pub n_a: usize,
    pub n_x: usize,
    pub command: Command,
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_n")]
    pub n: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_tol_newton")]
    pub tol_newton: f64,
    #[serde(default = "default_tol_eigen")]
    pub tol_eigen: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if !(8..=100_000).contains(&self.n_a) {
            return Err(Error::Config(format!(
                "n_a must lie in [8, 100000], got {}",
                self.n_a
            )));
        }
        if !(4..=1024).contains(&self.n_x) {
            return Err(Error::Config(format!(
                "n_x must lie in [4, 1024], got {}",
                self.n_x
            )));
        }
        for (name, value) in [
            ("eps_max", self.eps_max),
            ("n", self.n),
            ("t_max", self.t_max),
            ("tol_newton", self.tol_newton),
            ("tol_eigen", self.tol_eigen),
            ("fd_step", self.fd_step),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn serialize_to_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunSpec is always serializable")
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol_newton: self.tol_newton,
            eigen_tol: self.tol_eigen,
            ..SolveOptions::default()
        }
    }

    fn model_params(&self) -> Result<Params> {
        let mut params = Params::new();
        for (key, value) in &self.params {
            let converted = match value {
                serde_json::Value::Number(n) => {
                    ParamValue::Number(n.as_f64().ok_or_else(|| {
                        Error::Config(format!("parameter `{key}` is not a finite number"))
                    })?)
                }
                serde_json::Value::String(s) => ParamValue::Text(s.clone()),
                other => {
                    return Err(Error::Config(format!(
                        "parameter `{key}` must be a number or string, got {other}"
                    )))
                }
            };
            params.insert(key.clone(), converted);
        }
        Ok(params)
    }
}

/// Parses a JSON config document into a validated [`RunSpec`].
pub fn parse_config(text: &str) -> Result<RunSpec> {
    let spec: RunSpec = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("{e} (line {}, column {})", e.line(), e.column())))?;
    spec.validate()?;
    Ok(spec)
}

/// Exit status for an error: 1 for solver refusals, 2 for input errors.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

/// Files written and summary lines produced by a command.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub stdout: Vec<String>,
}

impl RunOutcome {
    fn line(&mut self, s: String) {
        self.stdout.push(s);
    }
}

/// Full round-trip float formatting: 17 significant digits.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

struct Pipeline {
    model: ModelSpec,
    grids: Grids,

    spectral: SpectralData,
    iterations: usize,
}

fn build_pipeline(spec: &RunSpec, n_a: usize, n_x: usize) -> Result<Pipeline> {
    let preset: Preset = spec.preset.parse()?;
    let params = spec.model_params()?;
    let model = build_preset(preset, &params)?;
    let grids = Grids::new(
        AgeGrid::new(model.a_max, n_a)?,
        SpaceGrid::new(model.domain_length, n_x, model.bc)?,
    );
    let (model, _scale, spectral) = normalize_birth_with(&model, &grids, spec.tol_eigen, 100_000)?;
    let iterations = spectral.iterations;
    Ok(Pipeline {
        model,
        grids,

        spectral,
        iterations,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Dispatches a validated run spec: always normalizes first, then runs the
/// requested command, writing outputs into `out_dir`.
pub fn run_command(spec: &RunSpec) -> Result<RunOutcome> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let mut outcome = RunOutcome::default();
    let pipeline = build_pipeline(spec, spec.n_a, spec.n_x)?;

    match spec.command {
        Command::Normalize => {
            let path = spec.out_dir.join("normalize.json");
            write_json(
                &path,
                &serde_json::json!({
                    "birth_scale": pipeline.model.birth_scale,
                    "r_Q0": pipeline.spectral.radius,
                    "iterations": pipeline.iterations,
                }),
            )?;
            outcome.line(format!(
                "birth_scale={} r_Q0={:.12}",
                fmt_full(pipeline.model.birth_scale),
                pipeline.spectral.radius
            ));
            outcome.files.push(path);
        }
        Command::Expansion => {
            let expansion = local_expansion(&pipeline.model, &pipeline.grids, spec.fd_step)?;
            let path = spec.out_dir.join("expansion.json");
            write_json(&path, &expansion_json(&expansion))?;
            outcome.line(format!(
                "zeta={} tau={}",
                fmt_full(expansion.slope),
                fmt_full(expansion.tau)
            ));
            outcome.files.push(path);
        }
        Command::Branch => {
            let expansion = local_expansion(&pipeline.model, &pipeline.grids, spec.fd_step)?;
            let branch = continue_branch(
                &pipeline.model,
                &pipeline.grids,
                &expansion,
                spec.eps_max,
                spec.steps,
                &spec.solve_options(),
            )?;
            let path = spec.out_dir.join("branch.csv");
            fs::write(&path, branch_csv(&branch))?;
            outcome.files.push(path);
            outcome.line(format!(
                "branch: {} points, n in [{}, {}], direction {}",
                branch.points.len(),
                fmt_full(branch.n_window.0),
                fmt_full(branch.n_window.1),
                branch.direction
            ));
            if let Some((eps, reason)) = branch.truncations.first() {
                return Err(Error::BranchTruncated {
                    eps: *eps,
                    reason: reason.clone(),
                });
            }
        }
        Command::Transient => {
            // Seed with the propagated principal direction at the requested
            // amplitude, then integrate at the prescribed parameter.
            let zero = DensityField::zeros(&pipeline.grids);
            let propagated = crate::evolution::propagate(
                &pipeline.model,
                &pipeline.grids,
                &zero,
                &pipeline.spectral.right,
            )?;
            let u0 = propagated.scale(spec.eps_max);
            let state = run_to_steady(
                &pipeline.model,
                &pipeline.grids,
                spec.n,
                u0,
                spec.t_max,
                TRANSIENT_STEADY_TOL,
            )?;
            let path = spec.out_dir.join("transient.csv");
            fs::write(&path, transient_csv(&state))?;
            outcome.files.push(path);
            let last = state.last_residual().unwrap_or(f64::NAN);
            outcome.line(format!(
                "transient: t={} residual={}",
                fmt_full(state.t),
                fmt_full(last)
            ));
        }
        Command::Validate => {
            let expansion = local_expansion(&pipeline.model, &pipeline.grids, spec.fd_step)?;
            let eps = spec.eps_max;
            let seed = BranchPoint::seed(
                eps,
                expansion.predict_parameter(eps),
                expansion.predict_field(eps),
            );
            let point = solve_equilibrium(
                &pipeline.model,
                &pipeline.grids,
                &expansion.spectral.left,
                Constraint::Amplitude(eps),
                &seed,
                &spec.solve_options(),
            )?;
            if !point.converged {
                return Err(Error::BranchTruncated {
                    eps,
                    reason: format!("corrector stagnated at residual {:.3e}", point.residual),
                });
            }
            let dt = pipeline.grids.age.step();
            let mut state = TransientState::new(point.u.clone());
            let mut worst: f64 = 0.0;
            for _ in 0..VALIDATE_STEPS {
                state = step_transient(&pipeline.model, &pipeline.grids, point.n, &state, dt)?;
                worst = worst.max(state.last_residual().unwrap());
            }
            let path = spec.out_dir.join("transient.csv");
            fs::write(&path, transient_csv(&state))?;
            outcome.files.push(path);
            outcome.line(format!(
                "validate: eps={} n={} worst_residual={}",
                fmt_full(eps),
                fmt_full(point.n),
                fmt_full(worst)
            ));
            if worst > VALIDATE_RESIDUAL_BOUND {
                return Err(Error::ValidationFailed(worst));
            }
        }
        Command::Converge => {
            let report = emit_convergence_study(spec)?;
            let path = spec.out_dir.join("converge.json");
            write_json(&path, &report.to_json())?;
            outcome.files.push(path);
            for line in report.summary_lines() {
                outcome.line(line);
            }
        }
    }
    Ok(outcome)
}

fn expansion_json(expansion: &Expansion) -> serde_json::Value {
    let vec_json = |v: &DVector<f64>| -> serde_json::Value {
        serde_json::Value::Array(v.iter().map(|x| serde_json::json!(x)).collect::<Vec<_>>())
    };
    serde_json::json!({
        "zeta": expansion.slope,
        "tau_residual": expansion.tau,
        "xi_norm": expansion.xi.amax(),
        "B": vec_json(&expansion.spectral.right),
        "psi": vec_json(&expansion.spectral.left),
        "notes": expansion.notes,
    })
}

pub const BRANCH_CSV_HEADER: &str =
    "eps,n,amplitude,min_u0,max_u0,r_Qu,residual,positive,sign_flipped";

fn branch_csv(branch: &Branch) -> String {
    let mut out = String::from(BRANCH_CSV_HEADER);
    out.push('\n');
    for p in &branch.points {
        let trace = p.u.trace();
        let (min_u0, max_u0) = if trace.is_empty() {
            (0.0, 0.0)
        } else {
            (trace.min(), trace.max())
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt_full(p.eps),
            fmt_full(p.n),
            fmt_full(p.u.sup_norm()),
            fmt_full(min_u0),
            fmt_full(max_u0),
            fmt_full(p.r_qu),
            fmt_full(p.residual),
            p.positive,
            p.sign_flipped
        ));
    }
    out
}

pub const TRANSIENT_CSV_HEADER: &str = "t,residual,mass,min_u";

fn transient_csv(state: &TransientState) -> String {
    let mut out = String::from(TRANSIENT_CSV_HEADER);
    out.push('\n');
    for s in &state.history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_full(s.t),
            fmt_full(s.residual),
            fmt_full(s.mass),
            fmt_full(s.min_u)
        ));
    }
    out
}

/// One measured quantity at the refinement ladder, with the Richardson order
/// estimate when the differences sit above rounding.
#[derive(Debug, Clone)]
pub struct OrderEstimate {
    pub quantity: &'static str,
    /// Refined in which direction: "age" or "space".
    pub direction: &'static str,
    pub values: Vec<f64>,
    pub order: Option<f64>,
}

fn richardson_order(values: &[f64]) -> Option<f64> {
    let d1 = (values[0] - values[1]).abs();
    let d2 = (values[1] - values[2]).abs();
    let scale = values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if d1 < 1e-12 * scale || d2 < 1e-13 * scale {
        return None; // differences at rounding level: quantity is exact here
    }
    Some((d1 / d2).log2())
}

#[derive(Debug)]
pub struct ConvergenceReport {
    pub estimates: Vec<OrderEstimate>,
    /// Relative mass defect of one implicit diffusion step per grid; present
    /// for models with no-flux boundaries, where it sits at rounding level.
    pub mass_defect: Option<Vec<f64>>,
}

impl ConvergenceReport {
    pub fn to_json(&self) -> serde_json::Value {
        let estimates: Vec<serde_json::Value> = self
            .estimates
            .iter()
            .map(|e| {
                serde_json::json!({
                    "quantity": e.quantity,
                    "direction": e.direction,
                    "values": e.values,
                    "order": e.order,
                })
            })
            .collect();
        serde_json::json!({
            "estimates": estimates,
            "mass_defect": self.mass_defect,
        })
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for e in &self.estimates {
            match e.order {
                Some(p) => lines.push(format!("{} ({}): order {:.3}", e.quantity, e.direction, p)),
                None => lines.push(format!(
                    "{} ({}): differences at rounding level",
                    e.quantity, e.direction
                )),
            }
        }
        if let Some(defects) = &self.mass_defect {
            let worst = defects.iter().cloned().fold(0.0, f64::max);
            lines.push(format!("mass defect: max {}", fmt_full(worst)));
        }
        lines
    }

    pub fn find(&self, quantity: &str, direction: &str) -> Option<&OrderEstimate> {
        self.estimates
            .iter()
            .find(|e| e.quantity == quantity && e.direction == direction)
    }
}

/// Reruns the normalization and expansion over a refinement ladder and
/// reports observed convergence orders: first order in age (implicit Euler)
/// and second order in space (central differences) are the expectations.
pub fn emit_convergence_study(spec: &RunSpec) -> Result<ConvergenceReport> {
    spec.validate()?;
    let ladder_age = [spec.n_a, 2 * spec.n_a, 4 * spec.n_a];
    let ladder_space = [spec.n_x, 2 * spec.n_x, 4 * spec.n_x];

    let mut scale_age = Vec::new();
    let mut slope_age = Vec::new();
    for &n_a in &ladder_age {
        let p = build_pipeline(spec, n_a, spec.n_x)?;
        scale_age.push(p.model.birth_scale);
        let e = local_expansion(&p.model, &p.grids, spec.fd_step)?;
        slope_age.push(e.slope);
    }

    let mut scale_space = Vec::new();
    let mut lambda_space = Vec::new();
    let mut mass_defect = Vec::new();
    let mut has_neumann = false;
    for &n_x in &ladder_space {
        let p = build_pipeline(spec, spec.n_a, n_x)?;
        scale_space.push(p.model.birth_scale);
        let zero = DensityField::zeros(&p.grids);
        let a0 = crate::evolution::spatial_operator_at(&p.model, &p.grids, &zero, 0)?;
        let lambda = a0
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::INFINITY, f64::min);
        lambda_space.push(lambda);

        if p.model.bc
            == (
                crate::grid::Boundary::Neumann,
                crate::grid::Boundary::Neumann,
            )
        {
            has_neumann = true;
            let da = p.grids.age.step();
            let n = p.grids.space.len();
            let step = nalgebra::DMatrix::identity(n, n) + da * &a0;
            let lu = step.lu();
            let x = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919 % 13) as f64) * 0.1);
            let y = lu.solve(&x).ok_or(Error::SingularStep(0))?;
            let defect =
                (p.grids.space.mass(&y) - p.grids.space.mass(&x)).abs() / p.grids.space.mass(&x);
            mass_defect.push(defect);
        }
    }

    let estimates = vec![
        OrderEstimate {
            quantity: "birth_scale",
            direction: "age",
            order: richardson_order(&scale_age),
            values: scale_age,
        },
        OrderEstimate {
            quantity: "zeta",
            direction: "age",
            order: richardson_order(&slope_age),
            values: slope_age,
        },
        OrderEstimate {
            quantity: "birth_scale",
            direction: "space",
            order: richardson_order(&scale_space),
            values: scale_space,
        },
        OrderEstimate {
            quantity: "principal_eigenvalue",
            direction: "space",
            order: richardson_order(&lambda_space),
            values: lambda_space,
        },
    ];

    Ok(ConvergenceReport {
        estimates,
        mass_defect: has_neumann.then_some(mass_defect),
    })
}
