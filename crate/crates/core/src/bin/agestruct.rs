//! Command-line front end: reads a JSON config (positional argument), applies
//! flag overrides, and dispatches. Exit codes: 0 on success, 1 on solver
//! refusal, 2 on input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use agestruct::cli::{self, parse_config};
use agestruct::Error;

#[derive(Parser, Debug)]
#[command(
    name = "agestruct",
    version,
    about = "Equilibrium branches for age-structured population models with nonlinear diffusion"
)]
struct Args {
    /// JSON config file; flags override its values
    config: Option<PathBuf>,

    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_a: Option<u64>,
    #[arg(long)]
    n_x: Option<u64>,
    /// normalize | expansion | branch | transient | validate | converge
    #[arg(long)]
    command: Option<String>,
    #[arg(long)]
    eps_max: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    tol_newton: Option<f64>,
    #[arg(long)]
    tol_eigen: Option<f64>,
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Preset parameter override `key=value`; repeatable
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

fn merged_config(args: &Args) -> Result<String, Error> {
    let mut doc: serde_json::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("{e} (line {}, column {})", e.line(), e.column()))
            })?
        }
        None => serde_json::json!({}),
    };
    let map = doc
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".to_string()))?;

    let mut set = |key: &str, value: Option<serde_json::Value>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    set("preset", args.preset.clone().map(serde_json::Value::from));
    set("n_a", args.n_a.map(serde_json::Value::from));
    set("n_x", args.n_x.map(serde_json::Value::from));
    set("command", args.command.clone().map(serde_json::Value::from));
    set("eps_max", args.eps_max.map(serde_json::Value::from));
    set("steps", args.steps.map(serde_json::Value::from));
    set("n", args.n.map(serde_json::Value::from));
    set("t_max", args.t_max.map(serde_json::Value::from));
    set("tol_newton", args.tol_newton.map(serde_json::Value::from));
    set("tol_eigen", args.tol_eigen.map(serde_json::Value::from));
    set("fd_step", args.fd_step.map(serde_json::Value::from));
    if let Some(dir) = &args.out_dir {
        map.insert(
            "out_dir".to_string(),
            serde_json::Value::from(dir.to_string_lossy().into_owned()),
        );
    }

    if !args.params.is_empty() {
        let params = map.entry("params").or_insert_with(|| serde_json::json!({}));
        let params = params
            .as_object_mut()
            .ok_or_else(|| Error::Config("params must be a JSON object".to_string()))?;
        for entry in &args.params {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("--param expects key=value, got `{entry}`"))
            })?;
            let parsed = match value.parse::<f64>() {
                Ok(x) => serde_json::json!(x),
                Err(_) => serde_json::Value::from(value.to_string()),
            };
            params.insert(key.to_string(), parsed);
        }
    }

    Ok(serde_json::to_string(&doc).expect("merged config serializes"))
}

fn run(args: &Args) -> Result<(), Error> {
    let text = merged_config(args)?;
    let spec = parse_config(&text)?;
    let outcome = cli::run_command(&spec)?;
    for line in &outcome.stdout {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
