//! End-to-end runs of the command-line binary: exit codes, output files, and
//! the emitted formats.

use std::path::Path;
use std::process::Output;

use agestruct::cli::{
    emit_convergence_study, parse_config, BRANCH_CSV_HEADER, TRANSIENT_CSV_HEADER,
};

fn run_cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_agestruct"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn normalize_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"preset":"Neumann33","params":{{"a_max":1.0,"mu0":1.0,"d":0.1}},
                "n_a":100,"n_x":8,"command":"normalize","out_dir":{:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let output = run_cli(&[&config]);
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.starts_with("birth_scale="), "{stdout}");
    assert!(stdout.contains(" r_Q0="), "{stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("normalize.json")).unwrap())
            .unwrap();
    let r = report["r_Q0"].as_f64().unwrap();
    assert!((r - 1.0).abs() <= 1e-10);
    assert!(report["birth_scale"].as_f64().unwrap() > 1.0);
    assert!(report["iterations"].as_u64().unwrap() > 0);
}

#[test]
fn flag_overrides_beat_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = write_config(
        dir.path(),
        r#"{"preset":"Neumann33","params":{"a_max":1.0,"mu0":1.0,"d":0.1},
            "n_a":100,"n_x":8,"command":"branch","eps_max":0.1,"steps":4}"#,
    );
    // Override the command and write somewhere else.
    let output = run_cli(&[
        &config,
        "--command",
        "normalize",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    assert!(out_dir.join("normalize.json").exists());
    assert!(!out_dir.join("branch.csv").exists());
}

#[test]
fn branch_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"preset":"Neumann33","params":{{"a_max":1.0,"mu0":1.0,"d":0.1}},
                "n_a":100,"n_x":8,"command":"branch","eps_max":0.1,"steps":5,
                "out_dir":{:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let output = run_cli(&[&config]);
    assert!(output.status.success(), "{output:?}");

    let csv = std::fs::read_to_string(out_dir.join("branch.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), BRANCH_CSV_HEADER);
    let mut prev_eps = f64::NEG_INFINITY;
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9, "{line}");
        let eps: f64 = fields[0].parse().unwrap();
        let n: f64 = fields[1].parse().unwrap();
        let r_qu: f64 = fields[5].parse().unwrap();
        assert!(eps > prev_eps, "rows not strictly ordered by eps");
        prev_eps = eps;
        if eps != 0.0 {
            assert!(
                (n * r_qu - 1.0).abs() <= 1e-6,
                "row invariant broken: {line}"
            );
        }
        assert!(matches!(fields[7], "true" | "false"));
        assert!(matches!(fields[8], "true" | "false"));
        rows += 1;
    }
    assert_eq!(rows, 11);
}

#[test]
fn validate_and_transient_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"preset":"Neumann33","params":{{"a_max":1.0,"mu0":1.0,"d":0.1}},
                "n_a":100,"n_x":8,"command":"validate","eps_max":0.1,
                "out_dir":{:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let output = run_cli(&[&config]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(out_dir.join("transient.csv")).unwrap();
    assert!(csv.starts_with(TRANSIENT_CSV_HEADER));
    assert_eq!(csv.lines().count(), 101); // header + one row per step

    // Subcritical transient decays; the run converges to the zero state.
    let out_dir2 = dir.path().join("out2");
    let output = run_cli(&[
        &config,
        "--command",
        "transient",
        "--n",
        "0.5",
        "--t-max",
        "60",
        "--out-dir",
        out_dir2.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(out_dir2.join("transient.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    let residual: f64 = fields[1].parse().unwrap();
    assert!(residual <= 1e-6, "terminal residual {residual}");
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown preset.
    let config = write_config(
        dir.path(),
        r#"{"preset":"Cushing77","n_a":100,"n_x":8,"command":"normalize"}"#,
    );
    let output = run_cli(&[&config]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // Grid bounds.
    let config = write_config(
        dir.path(),
        r#"{"preset":"Neumann33","params":{"a_max":1.0,"mu0":1.0,"d":0.1},
            "n_a":2,"n_x":8,"command":"normalize"}"#,
    );
    let output = run_cli(&[&config]);
    assert_eq!(output.status.code(), Some(2));

    // Negative boundary weight.
    let config = write_config(
        dir.path(),
        r#"{"preset":"Robin31","params":{"a_max":1.0,"mu0":1.0,"d":0.1,"nu0":-1.0},
            "n_a":100,"n_x":8,"command":"normalize"}"#,
    );
    let output = run_cli(&[&config]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("nu0"), "{stderr}");

    // Missing config and missing required flags.
    let output = run_cli(&["--command", "normalize"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn solver_refusal_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // Far outside the validity ball of the inverted-mortality model the
    // coefficient self-consistency loop leaves its contraction regime; the
    // corrector fails there and the branch command reports the truncation.
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"preset":"Neumann33","params":{{"a_max":1.0,"mu0":1.0,"d":0.1,"c_mu":-1.0}},
                "n_a":64,"n_x":8,"command":"branch","eps_max":3.0,"steps":3,
                "out_dir":{:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let output = run_cli(&[&config]);
    assert_eq!(output.status.code(), Some(1), "{output:?}");
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("truncated"), "{stderr}");
    // The partial CSV is still written.
    assert!(out_dir.join("branch.csv").exists());
}

#[test]
fn convergence_orders() {
    // Dirichlet configuration: second order in space, first order in age.
    let spec = parse_config(
        r#"{"preset":"Robin31",
            "params":{"a_max":1.0,"mu0":1.0,"d":0.1,"c_mu":0.0,"c_a":0.0,
                      "bc_left":"dirichlet","bc_right":"dirichlet"},
            "n_a":100,"n_x":16,"command":"converge"}"#,
    )
    .unwrap();
    let report = emit_convergence_study(&spec).unwrap();

    let lambda = report.find("principal_eigenvalue", "space").unwrap();
    let p = lambda.order.expect("space differences measurable");
    assert!((1.7..=2.3).contains(&p), "space order {p}");

    let scale_age = report.find("birth_scale", "age").unwrap();
    let p = scale_age.order.expect("age differences measurable");
    assert!((0.8..=1.2).contains(&p), "age order {p}");

    let scale_space = report.find("birth_scale", "space").unwrap();
    let p = scale_space.order.expect("space differences measurable");
    assert!((1.7..=2.3).contains(&p), "birth_scale space order {p}");

    // Neumann configuration: mass conservation is exact at every grid and
    // the flat principal direction leaves no space error to measure.
    let spec = parse_config(
        r#"{"preset":"Neumann33","params":{"a_max":1.0,"mu0":1.0,"d":0.1},
            "n_a":100,"n_x":8,"command":"converge"}"#,
    )
    .unwrap();
    let report = emit_convergence_study(&spec).unwrap();
    let defects = report.mass_defect.as_ref().expect("no-flux model");
    for defect in defects {
        assert!(*defect <= 1e-13, "mass defect {defect}");
    }
    assert!(report.find("birth_scale", "space").unwrap().order.is_none());
    let zeta_age = report.find("zeta", "age").unwrap();
    let p = zeta_age.order.expect("age differences measurable");
    assert!((0.8..=1.2).contains(&p), "zeta age order {p}");
}

#[test]
fn expansion_json_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = write_config(
        dir.path(),
        &format!(
            r#"{{"preset":"Functional32","params":{{"a_max":1.0,"mu0":1.0,"d":0.1}},
                "n_a":200,"n_x":12,"command":"expansion","out_dir":{:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let output = run_cli(&[&config]);
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("expansion.json")).unwrap())
            .unwrap();
    for key in ["zeta", "tau_residual", "xi_norm"] {
        assert!(report[key].is_f64() || report[key].is_number(), "{key}");
    }
    assert_eq!(report["B"].as_array().unwrap().len(), 12);
    assert_eq!(report["psi"].as_array().unwrap().len(), 12);
    assert!(report["notes"].is_array());
    assert!(report["tau_residual"].as_f64().unwrap().abs() <= 1e-8);
}
