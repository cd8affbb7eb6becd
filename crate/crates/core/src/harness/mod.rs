//! Command-line surface: experiment configs, runs with metric files,
//! verification suites and the constants table.
//!
//! Exit codes: 0 ok, 2 schema error, 3 invariant violation, 4 solver abort.

pub mod config;

pub use config::*;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::Error;
use crate::solvers::{run, MetricsRow, RunOptions, SolverState};
use crate::verify::{
    check_parameter_inequalities, fd_agreement, property_suite, random_instances,
    suggest_parameters, theory_constants, CheckReport, ObjectiveChoice, ProblemConstants,
    PropertyCheck, SuiteOptions, VerifyReport,
};

pub const OUTPUT_ROOT_ENV: &str = "SOBIRL_OUTPUT_ROOT";
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "k,phi,grad_hat_norm2,grad_true_norm2,lower_residual,w_residual,eps_cert,wall_ms";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_ABORT: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_SCHEMA,
            message: message.into(),
        }
    }

    /// Invariant violations map to 3, everything else about a config to 2.
    pub fn from_model(context: &str, e: Error) -> Self {
        let code = if matches!(e, Error::Invalid(_)) {
            EXIT_INVARIANT
        } else {
            EXIT_SCHEMA
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

fn report(e: &CliError) -> i32 {
    eprintln!("error: {}", e.message);
    e.code
}

pub fn cmd_validate(path: &Path) -> i32 {
    match load_experiment(path) {
        Ok(_) => {
            println!("valid: {}", path.display());
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

/// Root under which run directories are created.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn metrics_line(row: &MetricsRow) -> String {
    format!(
        "{},{:e},{:e},{},{:e},{},{},{}",
        row.k,
        row.phi,
        row.grad_hat_norm2,
        opt(row.grad_true_norm2),
        row.lower_residual,
        opt(row.w_residual),
        opt(row.eps_cert),
        opt(row.wall_ms)
    )
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", metrics_line(row));
    }
    out
}

fn final_state_json(state: &SolverState) -> serde_json::Value {
    let na = state.pi.n_actions();
    let pi: Vec<Vec<f64>> = (0..state.pi.n_states())
        .map(|s| state.pi.row(s).to_vec())
        .collect();
    json!({
        "k": state.k,
        "x": state.x.as_slice(),
        "pi": pi,
        "q": state.q.as_slice().chunks(na).map(|c| c.to_vec()).collect::<Vec<_>>(),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|e| CliError::schema(format!("cannot write {}: {e}", path.display())))
}

/// Where a run with `seed` writes its artifacts.
pub fn run_dir(exp: &Experiment, seed: u64) -> PathBuf {
    output_root()
        .join(&exp.output_dir)
        .join(format!("seed_{seed}"))
}

/// Executes a configured run and writes `metrics.csv`, `final_state.json`, `run_meta.json`.
pub fn cmd_run(path: &Path, seed: Option<u64>, diagnostics: bool, wall_time: bool) -> i32 {
    let exp = match load_experiment(path) {
        Ok(e) => e,
        Err(e) => return report(&e),
    };
    match execute(&exp, seed, diagnostics, wall_time) {
        Ok((dir, code)) => {
            if code == EXIT_OK {
                println!("wrote {}", dir.display());
            }
            code
        }
        Err(e) => report(&e),
    }
}

/// Runs `exp` and writes its artifacts; returns the run directory and exit code.
pub fn execute(
    exp: &Experiment,
    seed: Option<u64>,
    diagnostics: bool,
    wall_time: bool,
) -> Result<(PathBuf, i32), CliError> {
    let mut solver = exp.solver.clone();
    if let Some(s) = seed.or(exp.seed) {
        solver.seed = s;
    }
    let opts = RunOptions {
        diagnostics: diagnostics || exp.diagnostics,
        record_wall_time: wall_time || exp.record_wall_time,
    };
    let dir = run_dir(exp, solver.seed);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::schema(format!("cannot create {}: {e}", dir.display())))?;

    let outcome = run(&exp.mdp, &exp.rm, &exp.obj, &solver, opts, &mut |_, _| {});
    let (metrics, state, error) = match outcome {
        Ok(out) => (out.metrics, out.state, None),
        Err(abort) => (abort.metrics, abort.last_good, Some(abort.error)),
    };
    write_file(&dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    write_file(
        &dir.join("final_state.json"),
        &pretty(&final_state_json(&state)),
    )?;
    let meta = json!({
        "config_hash": exp.config_hash,
        "seed": solver.seed,
        "algo": solver.algo,
        "status": if error.is_some() { "aborted" } else { "ok" },
        "error": error.as_ref().map(|e| e.to_string()),
        "versions": {
            "sobirl": env!("CARGO_PKG_VERSION"),
            "metrics_schema": METRICS_SCHEMA_VERSION,
        },
    });
    write_file(&dir.join("run_meta.json"), &pretty(&meta))?;
    match error {
        None => Ok((dir, EXIT_OK)),
        Some(e) => {
            eprintln!(
                "error: solver aborted: {e}; partial metrics in {}",
                dir.display()
            );
            Ok((dir, EXIT_ABORT))
        }
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

pub const SUITES: [&str; 8] = [
    "all",
    "mmatrix",
    "ubounds",
    "lognorm",
    "contraction",
    "tv",
    "plipschitz",
    "fd",
];

/// Property-suite size used by `verify`.
pub const VERIFY_INSTANCES: usize = 100;

pub fn verify_report(
    suite: &str,
    seed: u64,
    objective: ObjectiveChoice,
) -> Result<VerifyReport, CliError> {
    let checks: Vec<CheckReport> = match suite {
        "fd" => {
            let (check, rows) = fd_agreement(objective, 20, seed, 1e-5).map_err(|e| CliError {
                code: EXIT_FAIL,
                message: e.to_string(),
            })?;
            println!(
                "{:>8} {:>3} {:>3} {:>12} {:>12}",
                "instance", "S", "A", "|grad|", "rel_err"
            );
            for r in &rows {
                println!(
                    "{:>8} {:>3} {:>3} {:>12.4e} {:>12.4e}",
                    r.instance, r.n_states, r.n_actions, r.exact_norm, r.rel_error
                );
            }
            vec![check]
        }
        _ => {
            let selected: Vec<PropertyCheck> = if suite == "all" {
                PropertyCheck::ALL.to_vec()
            } else {
                vec![PropertyCheck::from_name(suite).ok_or_else(|| {
                    CliError::schema(format!(
                        "unknown suite {suite:?}; expected one of {SUITES:?}"
                    ))
                })?]
            };
            let instances = random_instances(VERIFY_INSTANCES, 6, 4, seed);
            property_suite(&instances, &selected, SuiteOptions::default(), seed)
        }
    };
    Ok(VerifyReport {
        suite: suite.to_string(),
        seed,
        checks,
    })
}

pub fn cmd_verify(
    suite: &str,
    seed: u64,
    objective: ObjectiveChoice,
    report_path: Option<&Path>,
) -> i32 {
    let result = match verify_report(suite, seed, objective) {
        Ok(r) => r,
        Err(e) => return report(&e),
    };
    for c in &result.checks {
        println!(
            "{:<14} instances={:<4} worst_margin={:+.3e} {}",
            c.name,
            c.instances,
            c.worst_margin,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let path = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| output_root().join(format!("verify_{suite}_seed{seed}.json")));
    let body = pretty(&serde_json::to_value(&result).expect("report serializes"));
    if let Err(e) = write_file(&path, &body) {
        return report(&e);
    }
    if result.pass() {
        EXIT_OK
    } else {
        EXIT_FAIL
    }
}

pub fn constants_table(pc: &ProblemConstants) -> String {
    let dc = theory_constants(pc);
    let sp = suggest_parameters(pc);
    let mut out = String::new();
    for (name, v) in dc.rows() {
        let _ = writeln!(out, "{name:<12} {v:.12e}");
    }
    let _ = writeln!(out, "{:<12} {:.12e}", "beta", sp.beta);
    let _ = writeln!(out, "{:<12} {:.12e}", "xi", sp.xi);
    let _ = writeln!(out, "{:<12} {:.12e}", "rho", sp.rho);
    let _ = writeln!(out, "{:<12} {}", "N", sp.n_inner);
    for c in check_parameter_inequalities(pc, &sp) {
        let _ = writeln!(out, "{} {}", if c.holds { "ok  " } else { "FAIL" }, c.name);
    }
    out
}

pub fn cmd_constants(path: &Path) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return report(&CliError::schema(format!(
                "cannot read {}: {e}",
                path.display()
            )))
        }
    };
    let pc: ProblemConstants = match serde_json::from_str(&text) {
        Ok(pc) => pc,
        Err(e) => return report(&CliError::schema(format!("{}: {e}", path.display()))),
    };
    if let Err(e) = pc.validate() {
        return report(&CliError::schema(e.to_string()));
    }
    print!("{}", constants_table(&pc));
    EXIT_OK
}
