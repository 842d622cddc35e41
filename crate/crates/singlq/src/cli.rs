//! Command-line front end: problem-file ingestion, assumption reports,
//! single solves, epsilon sweeps, and the built-in tracking example, with
//! JSON/CSV artifacts and a generated plotting script.
//!
//! All serialization lives here; the solver modules traffic only in
//! `nalgebra` types. Output files are deterministic: identical inputs and
//! flags produce byte-identical JSON, independent of the sweep thread
//! count (rows are assembled in sorted epsilon order after the parallel
//! section joins).
//!
//! Exit codes: `0` success, `2` validation or usage failure, `3` solver or
//! I/O failure, `4` problem-file parse failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cheap;
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{
    validate_raw, validate_reduced, AssumptionReport, ExpMode, ExpSignal, Oocp, RawProblem,
};
use crate::reduced::{
    minimizing_feedback_1, minimizing_feedback_2, solve_reduced, ReducedSolution,
};
use crate::sim::{self, AffineLaw, CostEstimate, Trajectory};
use crate::transform::{lift_control, transform_problem, TransformData};

const DEFAULT_EPSILONS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

// ---------------------------------------------------------------------
// problem files
// ---------------------------------------------------------------------

/// On-disk problem schema, version `"1"`. Every field is optional at the
/// serde layer so that missing entries produce parse errors naming the
/// field instead of opaque deserializer messages; unknown fields are
/// rejected outright.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    schema_version: Option<String>,
    /// `"raw"` (original coordinates: `a`, `b`, `d`) or `"oocp"`
    /// (transformed coordinates: `a`, `hcal`, `d1`, `d2`).
    mode: Option<String>,
    dimensions: Option<Dimensions>,
    /// Row-major `n x n` dynamics matrix.
    a: Option<Vec<f64>>,
    /// Row-major `n x r` input matrix (raw mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    /// Row-major `n x n` state weight (raw mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<Vec<f64>>,
    /// Row-major `(r-q) x (n-r+q)` coupling matrix (oocp mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    hcal: Option<Vec<f64>>,
    /// Row-major `(n-r+q)^2` slow state weight (oocp mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    d1: Option<Vec<f64>>,
    /// Row-major `(r-q)^2` fast state weight (oocp mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    d2: Option<Vec<f64>>,
    /// The `q` positive control weights.
    g: Option<Vec<f64>>,
    /// Decaying exponential disturbance modes.
    disturbance: Option<Vec<DisturbanceMode>>,
    initial_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dimensions {
    n: Option<usize>,
    r: Option<usize>,
    q: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisturbanceMode {
    rate: Option<f64>,
    coef: Option<Vec<f64>>,
}

/// A parsed problem file: exactly one of the two coordinate forms.
#[derive(Debug, Clone)]
pub enum LoadedProblem {
    Raw(RawProblem),
    Transformed(Oocp),
}

fn parse_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Parse {
        field: field.into(),
        detail: detail.into(),
    }
}

fn req<T>(opt: Option<T>, field: &str) -> Result<T> {
    opt.ok_or_else(|| parse_err(field, "missing required field"))
}

fn mat_from_flat(flat: &[f64], rows: usize, cols: usize, field: &str) -> Result<DMatrix<f64>> {
    if flat.len() != rows * cols {
        return Err(parse_err(
            field,
            format!(
                "expected {rows} x {cols} = {} entries, got {}",
                rows * cols,
                flat.len()
            ),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, flat))
}

fn check_symmetric_field(m: &DMatrix<f64>, field: &str) -> Result<()> {
    let defect = linalg::symmetry_defect(m);
    if defect > 1e-12 {
        return Err(parse_err(
            field,
            format!("matrix is not symmetric (relative defect {defect:.3e})"),
        ));
    }
    Ok(())
}

fn reject_field<T>(opt: &Option<T>, field: &str, mode: &str) -> Result<()> {
    if opt.is_some() {
        return Err(parse_err(
            field,
            format!("field is not allowed in {mode} mode"),
        ));
    }
    Ok(())
}

/// Parses a problem file from JSON text. Every failure names the
/// offending field.
pub fn parse_problem(text: &str) -> Result<LoadedProblem> {
    let file: ProblemFile =
        serde_json::from_str(text).map_err(|e| parse_err("<json>", e.to_string()))?;
    let version = req(file.schema_version.clone(), "schema_version")?;
    if version != "1" {
        return Err(parse_err(
            "schema_version",
            format!("unsupported version {version:?}, expected \"1\""),
        ));
    }
    let mode = req(file.mode.clone(), "mode")?;
    let dims = req(file.dimensions.clone(), "dimensions")?;
    let n = req(dims.n, "dimensions.n")?;
    let r = req(dims.r, "dimensions.r")?;
    let q = req(dims.q, "dimensions.q")?;
    if r == 0 || r > n || q >= r {
        return Err(parse_err(
            "dimensions",
            format!("need 0 < r <= n and q < r, got n={n}, r={r}, q={q}"),
        ));
    }

    let g = file.g.clone().unwrap_or_default();
    if g.len() != q {
        return Err(parse_err(
            "g",
            format!("expected {q} control weights, got {}", g.len()),
        ));
    }

    let modes_in = file.disturbance.clone().unwrap_or_default();
    let mut modes = Vec::with_capacity(modes_in.len());
    for (k, m) in modes_in.iter().enumerate() {
        let rate = req(m.rate, "disturbance.rate")?;
        let coef = req(m.coef.clone(), "disturbance.coef")?;
        if coef.len() != n {
            return Err(parse_err(
                "disturbance.coef",
                format!("mode {k}: expected {n} entries, got {}", coef.len()),
            ));
        }
        modes.push(ExpMode {
            rate,
            coef: DVector::from_vec(coef),
        });
    }
    let disturbance =
        ExpSignal::new(n, modes).map_err(|e| parse_err("disturbance", e.to_string()))?;

    let z0 = req(file.initial_state.clone(), "initial_state")?;
    if z0.len() != n {
        return Err(parse_err(
            "initial_state",
            format!("expected {n} entries, got {}", z0.len()),
        ));
    }
    let z0 = DVector::from_vec(z0);

    let a = mat_from_flat(&req(file.a.clone(), "a")?, n, n, "a")?;

    match mode.as_str() {
        "raw" => {
            reject_field(&file.hcal, "hcal", "raw")?;
            reject_field(&file.d1, "d1", "raw")?;
            reject_field(&file.d2, "d2", "raw")?;
            let b = mat_from_flat(&req(file.b.clone(), "b")?, n, r, "b")?;
            let d = mat_from_flat(&req(file.d.clone(), "d")?, n, n, "d")?;
            check_symmetric_field(&d, "d")?;
            let p = RawProblem::new(a, b, d, g, disturbance, z0)
                .map_err(|e| parse_err("<problem>", e.to_string()))?;
            Ok(LoadedProblem::Raw(p))
        }
        "oocp" => {
            reject_field(&file.b, "b", "oocp")?;
            reject_field(&file.d, "d", "oocp")?;
            let xd = n - r + q;
            let yd = r - q;
            let hcal = mat_from_flat(&req(file.hcal.clone(), "hcal")?, yd, xd, "hcal")?;
            let d1 = mat_from_flat(&req(file.d1.clone(), "d1")?, xd, xd, "d1")?;
            check_symmetric_field(&d1, "d1")?;
            let d2 = mat_from_flat(&req(file.d2.clone(), "d2")?, yd, yd, "d2")?;
            check_symmetric_field(&d2, "d2")?;
            let o = Oocp::new(a, hcal, d1, d2, g, disturbance, z0)
                .map_err(|e| parse_err("<problem>", e.to_string()))?;
            Ok(LoadedProblem::Transformed(o))
        }
        other => Err(parse_err(
            "mode",
            format!("expected \"raw\" or \"oocp\", got {other:?}"),
        )),
    }
}

fn flat_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn signal_modes(sig: &ExpSignal) -> Vec<DisturbanceMode> {
    sig.modes()
        .iter()
        .map(|m| DisturbanceMode {
            rate: Some(m.rate),
            coef: Some(m.coef.iter().copied().collect()),
        })
        .collect()
}

/// Re-emits a loaded problem as schema-version-1 JSON text. Parsing the
/// emission yields an identical in-memory problem (the roundtrip
/// invariant).
pub fn emit_problem(lp: &LoadedProblem) -> String {
    let file = match lp {
        LoadedProblem::Raw(p) => ProblemFile {
            schema_version: Some("1".into()),
            mode: Some("raw".into()),
            dimensions: Some(Dimensions {
                n: Some(p.n()),
                r: Some(p.r()),
                q: Some(p.q()),
            }),
            a: Some(flat_row_major(p.a())),
            b: Some(flat_row_major(p.b())),
            d: Some(flat_row_major(p.d())),
            hcal: None,
            d1: None,
            d2: None,
            g: Some(p.g().to_vec()),
            disturbance: Some(signal_modes(p.disturbance())),
            initial_state: Some(p.z0().iter().copied().collect()),
        },
        LoadedProblem::Transformed(o) => ProblemFile {
            schema_version: Some("1".into()),
            mode: Some("oocp".into()),
            dimensions: Some(Dimensions {
                n: Some(o.n()),
                r: Some(o.r()),
                q: Some(o.q()),
            }),
            a: Some(flat_row_major(o.a())),
            b: None,
            d: None,
            hcal: Some(flat_row_major(o.hcal())),
            d1: Some(flat_row_major(o.d1())),
            d2: Some(flat_row_major(o.d2())),
            g: Some(o.g().to_vec()),
            disturbance: Some(signal_modes(o.disturbance())),
            initial_state: Some(o.z0().iter().copied().collect()),
        },
    };
    to_json(&file)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    text.push('\n');
    text
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| parse_err("<file>", format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------
// output documents
// ---------------------------------------------------------------------

fn nested_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize)]
struct ModeOut {
    rate: f64,
    coef: Vec<f64>,
}

#[derive(Serialize)]
struct ScalarTermOut {
    rate: f64,
    value: f64,
}

#[derive(Serialize)]
struct LawOut {
    gain: Vec<Vec<f64>>,
    feedforward: Vec<ModeOut>,
    constant: Vec<f64>,
}

fn law_out(law: &AffineLaw) -> LawOut {
    LawOut {
        gain: nested_rows(law.gain()),
        feedforward: modes_out(law.feedforward()),
        constant: law.constant().iter().copied().collect(),
    }
}

fn modes_out(sig: &ExpSignal) -> Vec<ModeOut> {
    sig.modes()
        .iter()
        .map(|m| ModeOut {
            rate: m.rate,
            coef: m.coef.iter().copied().collect(),
        })
        .collect()
}

fn scalar_terms_out(sig: &ExpSignal) -> Vec<ScalarTermOut> {
    sig.modes()
        .iter()
        .map(|m| ScalarTermOut {
            rate: m.rate,
            value: m.coef[0],
        })
        .collect()
}

#[derive(Serialize)]
struct EntryOut {
    id: String,
    pass: bool,
    witness: f64,
    message: String,
}

#[derive(Serialize)]
struct ReportOut {
    all_pass: bool,
    entries: Vec<EntryOut>,
}

fn report_out(report: &AssumptionReport) -> ReportOut {
    ReportOut {
        all_pass: report.all_pass(),
        entries: report
            .entries
            .iter()
            .map(|e| EntryOut {
                id: e.id.into(),
                pass: e.pass,
                witness: e.witness,
                message: e.message.clone(),
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct ReducedOut {
    p10: Vec<Vec<f64>>,
    p20: Vec<Vec<f64>>,
    p30: Vec<Vec<f64>>,
    s0: Vec<Vec<f64>>,
    acl0: Vec<Vec<f64>>,
    alpha: f64,
    mu: f64,
    jbar: f64,
    h10: Vec<ModeOut>,
    h20: Vec<ModeOut>,
    s0_terms: Vec<ScalarTermOut>,
}

fn reduced_out(rs: &ReducedSolution) -> ReducedOut {
    ReducedOut {
        p10: nested_rows(&rs.p10),
        p20: nested_rows(&rs.p20),
        p30: nested_rows(&rs.p30),
        s0: nested_rows(&rs.s0),
        acl0: nested_rows(&rs.acl0),
        alpha: rs.alpha,
        mu: rs.mu,
        jbar: rs.jbar,
        h10: modes_out(&rs.h10),
        h20: modes_out(&rs.h20),
        s0_terms: scalar_terms_out(&rs.s0_signal),
    }
}

#[derive(Serialize)]
struct SolutionBundle {
    epsilon: f64,
    jstar: f64,
    jbar: f64,
    p: Vec<Vec<f64>>,
    p1: Vec<Vec<f64>>,
    p2: Vec<Vec<f64>>,
    p3: Vec<Vec<f64>>,
    h: Vec<ModeOut>,
    s_terms: Vec<ScalarTermOut>,
    feedback: LawOut,
    minimizing_u1: LawOut,
    minimizing_u2: LawOut,
    /// The exact feedback lifted to the original coordinates; present only
    /// when the input was a raw-mode file.
    #[serde(skip_serializing_if = "Option::is_none")]
    feedback_raw: Option<LawOut>,
    reduced: ReducedOut,
    assumptions: ReportOut,
}

#[derive(Serialize, Clone)]
struct SweepRow {
    epsilon: f64,
    status: String,
    jstar: Option<f64>,
    j_u1: Option<f64>,
    j_u2: Option<f64>,
    err_p1: Option<f64>,
    err_p2: Option<f64>,
    err_p3: Option<f64>,
    h_sup_err: Option<f64>,
    s_sup_err: Option<f64>,
    max_u_lower: Option<f64>,
    eps_max_u_lower: Option<f64>,
}

#[derive(Serialize)]
struct RatioDiag {
    /// What is divided by what; every operand is a reported quantity.
    name: String,
    per_epsilon: Vec<Option<f64>>,
    /// Largest per-epsilon value over the smallest (the factor-boundedness
    /// diagnostic); absent when a value is missing or nonpositive.
    spread: Option<f64>,
}

#[derive(Serialize)]
struct SweepReport {
    jbar: f64,
    mu: f64,
    epsilons: Vec<f64>,
    rows: Vec<SweepRow>,
    diagnostics: Vec<RatioDiag>,
}

// ---------------------------------------------------------------------
// command-line definition
// ---------------------------------------------------------------------

/// Singular infinite-horizon LQ control via cheap-control regularization.
#[derive(Parser, Debug)]
#[command(name = "singlq", version, about)]
struct Cli {
    /// Integrator tolerance: local error per unit time.
    #[arg(long, global = true, default_value_t = 1e-6)]
    tol: f64,
    /// Fixed simulation horizon; default derives one from the decay rate.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Print the machine-readable JSON document instead of the text summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the standing assumptions on a problem file.
    Validate {
        /// Problem file (JSON, schema version 1).
        file: PathBuf,
    },
    /// Solve the regularized problem at one epsilon and write a solution bundle.
    Solve {
        /// Problem file (JSON, schema version 1).
        file: PathBuf,
        /// Regularization parameter in (0, 1].
        #[arg(long)]
        epsilon: f64,
        /// Output directory for the solution bundle.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Solve and simulate across an epsilon sweep; write report, CSV, and plot script.
    Sweep {
        /// Problem file (JSON, schema version 1).
        file: PathBuf,
        /// Comma-separated epsilon list (at least two values).
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        /// Output directory for the sweep artifacts.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Build the built-in tracking example, sweep it, and write all artifacts.
    ExampleTracking {
        /// Output directory.
        #[arg(long, default_value = "example-tracking")]
        out: PathBuf,
        /// Comma-separated epsilon list (at least two values).
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        /// Nominal trajectory amplitude of the slow component.
        #[arg(long, default_value_t = 2.0)]
        nominal_a1: f64,
        /// Nominal trajectory amplitude of the fast component.
        #[arg(long, default_value_t = 2.0)]
        nominal_a2: f64,
        /// Nominal trajectory decay rate.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Initial value of the raw slow state.
        #[arg(long, default_value_t = 4.0)]
        nominal_x0: f64,
        /// Initial value of the raw fast state.
        #[arg(long, default_value_t = 3.0)]
        nominal_y0: f64,
    },
}

/// Entry point for the binary: parses arguments, dispatches, maps errors
/// to the exit-code contract.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } => 4,
                _ => 3,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { file } => cmd_validate(&file, cli.json),
        Command::Solve { file, epsilon, out } => cmd_solve(&file, epsilon, &out, cli.json),
        Command::Sweep {
            file,
            epsilons,
            out,
        } => cmd_sweep(&file, epsilons, &out, cli.tol, cli.horizon, cli.json),
        Command::ExampleTracking {
            out,
            epsilons,
            nominal_a1,
            nominal_a2,
            gamma,
            nominal_x0,
            nominal_y0,
        } => cmd_example_tracking(
            &out,
            epsilons,
            [nominal_a1, nominal_a2, gamma, nominal_x0, nominal_y0],
            cli.tol,
            cli.horizon,
            cli.json,
        ),
    }
}

// ---------------------------------------------------------------------
// validation plumbing
// ---------------------------------------------------------------------

struct Analysis {
    report: AssumptionReport,
    /// Present when validation got far enough to produce a transformed
    /// problem.
    oocp: Option<Oocp>,
    /// Present when the input was raw and the transform succeeded.
    transform: Option<TransformData>,
}

/// Runs the full assumption chain: raw checks, then (when they pass) the
/// coordinate transform and the reduced-problem checks.
fn analyze(lp: &LoadedProblem) -> Result<Analysis> {
    match lp {
        LoadedProblem::Raw(p) => {
            let mut report = validate_raw(p);
            if !report.all_pass() {
                return Ok(Analysis {
                    report,
                    oocp: None,
                    transform: None,
                });
            }
            let (o, td) = transform_problem(p)?;
            report.entries.extend(validate_reduced(&o).entries);
            Ok(Analysis {
                report,
                oocp: Some(o),
                transform: Some(td),
            })
        }
        LoadedProblem::Transformed(o) => Ok(Analysis {
            report: validate_reduced(o),
            oocp: Some(o.clone()),
            transform: None,
        }),
    }
}

fn print_report(report: &AssumptionReport) {
    for e in &report.entries {
        let flag = if e.pass { "pass" } else { "FAIL" };
        println!(
            "{:>3}  {}  witness {:.6e}  {}",
            e.id, flag, e.witness, e.message
        );
    }
    if report.all_pass() {
        println!("all assumptions hold");
    } else {
        let failed = report.entries.iter().filter(|e| !e.pass).count();
        println!("{failed} assumption(s) failed");
    }
}

fn load_and_analyze(file: &Path) -> Result<(LoadedProblem, Analysis)> {
    let lp = parse_problem(&read_input(file)?)?;
    let analysis = analyze(&lp)?;
    Ok((lp, analysis))
}

fn cmd_validate(file: &Path, json: bool) -> Result<i32> {
    let (_, analysis) = load_and_analyze(file)?;
    if json {
        print!("{}", to_json(&report_out(&analysis.report)));
    } else {
        print_report(&analysis.report);
    }
    Ok(if analysis.report.all_pass() { 0 } else { 2 })
}

// ---------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------

fn format_eps(eps: f64) -> String {
    format!("{eps}")
}

fn cmd_solve(file: &Path, epsilon: f64, out: &Path, json: bool) -> Result<i32> {
    let (lp, analysis) = load_and_analyze(file)?;
    if !analysis.report.all_pass() {
        print_report(&analysis.report);
        return Ok(2);
    }
    let o = analysis.oocp.as_ref().expect("analysis passed");
    let rs = solve_reduced(o)?;
    let sol = cheap::solve_pccp(o, epsilon)?;
    let feedback = cheap::cheap_feedback(&sol, o)?;
    let feedback_raw = match (&lp, &analysis.transform) {
        (LoadedProblem::Raw(_), Some(td)) => Some(law_out(&lift_control(&feedback, td))),
        _ => None,
    };

    let bundle = SolutionBundle {
        epsilon,
        jstar: sol.jstar,
        jbar: rs.jbar,
        p: nested_rows(&sol.p),
        p1: nested_rows(&sol.p1),
        p2: nested_rows(&sol.p2),
        p3: nested_rows(&sol.p3),
        h: modes_out(&sol.h),
        s_terms: scalar_terms_out(&sol.s),
        feedback: law_out(&feedback),
        minimizing_u1: law_out(&minimizing_feedback_1(&rs, o, epsilon)?),
        minimizing_u2: law_out(&minimizing_feedback_2(&rs, o, epsilon)?),
        feedback_raw,
        reduced: reduced_out(&rs),
        assumptions: report_out(&analysis.report),
    };

    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        detail: e.to_string(),
    })?;
    let bundle_path = out.join(format!("solution_eps{}.json", format_eps(epsilon)));
    let text = to_json(&bundle);
    write_output(&bundle_path, &text)?;

    if json {
        print!("{text}");
    } else {
        println!("epsilon  {epsilon}");
        println!("J*_eps   {:.12e}", sol.jstar);
        println!("Jbar     {:.12e}", rs.jbar);
        println!("feedback gain (rows = controls):");
        for i in 0..feedback.gain().nrows() {
            let row: Vec<String> = (0..feedback.gain().ncols())
                .map(|j| format!("{:.6e}", feedback.gain()[(i, j)]))
                .collect();
            println!("  [{}]", row.join(", "));
        }
        println!("wrote {}", bundle_path.display());
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

struct EpsData {
    jstar: f64,
    j_u1: f64,
    j_u2: f64,
    err_p1: f64,
    err_p2: f64,
    err_p3: f64,
    h_sup_err: f64,
    s_sup_err: f64,
    max_u_lower: f64,
    traj_u1: Trajectory,
}

/// Cost of a law under the given weight, honoring a fixed horizon when one
/// was requested and the adaptive policy otherwise.
fn cost_of(
    o: &Oocp,
    law: &AffineLaw,
    mu: f64,
    tol: f64,
    horizon: Option<f64>,
    weight: &DMatrix<f64>,
) -> Result<(Trajectory, CostEstimate)> {
    match horizon {
        Some(t) => {
            let traj = sim::simulate_weighted(o, law, t, tol, weight)?;
            let est = sim::evaluate_cost_weighted(&traj, o, weight)?;
            Ok((traj, est))
        }
        None => sim::simulate_cost_weighted(o, law, mu, tol, weight),
    }
}

/// Everything the sweep reports for one epsilon: the solve, both
/// minimizing-sequence simulations, block errors against the reduced
/// limits, and the feedforward/value sup errors on a time grid.
fn eps_work(
    o: &Oocp,
    rs: &ReducedSolution,
    epsilon: f64,
    tol: f64,
    horizon: Option<f64>,
) -> Result<EpsData> {
    let sol = cheap::solve_pccp(o, epsilon)?;
    let mu_sim = if rs.mu.is_finite() {
        rs.mu
    } else {
        0.9 * linalg::spectral_abscissa(&sol.acl)?.abscissa.abs()
    };

    let law1 = minimizing_feedback_1(rs, o, epsilon)?;
    let law2 = minimizing_feedback_2(rs, o, epsilon)?;
    let weight = o.g_full();
    let (traj_u1, est1) = cost_of(o, &law1, mu_sim, tol, horizon, &weight)?;
    let (_, est2) = cost_of(o, &law2, mu_sim, tol, horizon, &weight)?;

    let err_p1 = (&sol.p1 - &rs.p10).norm();
    let err_p2 = (&sol.p2 - &rs.p20).norm();
    let err_p3 = (&sol.p3 - &rs.p30).norm();

    // sup over a time grid of the weighted feedforward errors and of the
    // value-correction error; the lower feedforward block carries a 1/eps
    // scaling by construction
    let xd = o.x_dim();
    let yd = o.y_dim();
    let h_upper = sol.h.rows(0, xd);
    let h_lower = sol.h.rows(xd, yd).scale(1.0 / epsilon);
    let mu_w = if rs.mu.is_finite() { rs.mu } else { 0.0 };
    let t_grid = if mu_w > 0.0 { 10.0 / mu_w } else { 10.0 };
    let mut h_sup_err = 0.0f64;
    let mut s_sup_err = 0.0f64;
    for k in 0..=200 {
        let t = t_grid * k as f64 / 200.0;
        let w = (mu_w * t).exp();
        let du = (h_upper.eval(t) - rs.h10.eval(t)).norm();
        let dl = (h_lower.eval(t) - rs.h20.eval(t)).norm();
        h_sup_err = h_sup_err.max(w * du.max(dl));
        s_sup_err = s_sup_err.max((sol.s.eval_scalar(t) - rs.s0_signal.eval_scalar(t)).abs());
    }

    let max_u_lower = traj_u1
        .controls
        .iter()
        .map(|u| u.rows(o.q(), yd).norm())
        .fold(0.0f64, f64::max);

    Ok(EpsData {
        jstar: sol.jstar,
        j_u1: est1.total,
        j_u2: est2.total,
        err_p1,
        err_p2,
        err_p3,
        h_sup_err,
        s_sup_err,
        max_u_lower,
        traj_u1,
    })
}

/// Runs `f` over `jobs` indices on up to `threads` scoped threads and
/// returns the results in index order, so the output is identical to a
/// serial run.
fn run_indexed<T: Send>(jobs: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = threads.clamp(1, jobs.max(1));
    let slots: Vec<Mutex<Option<T>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let value = f(i);
                *slots[i].lock().expect("result slot") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("worker filled slot")
        })
        .collect()
}

fn sweep_threads(jobs: usize) -> usize {
    match std::env::var("SINGLQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(0) => 1,
        Some(k) => k.min(jobs.max(1)),
        None => thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(jobs.max(1)),
    }
}

fn ratio_diag(name: &str, values: Vec<Option<f64>>) -> RatioDiag {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let spread = if present.len() == values.len() && !present.is_empty() {
        let max = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = present.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            Some(max / min)
        } else {
            None
        }
    } else {
        None
    };
    RatioDiag {
        name: name.into(),
        per_epsilon: values,
        spread,
    }
}

fn build_report(
    rs: &ReducedSolution,
    epsilons: &[f64],
    outcomes: Vec<Result<EpsData>>,
) -> (SweepReport, Vec<Option<Trajectory>>) {
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut trajectories = Vec::with_capacity(epsilons.len());
    for (eps, outcome) in epsilons.iter().zip(outcomes) {
        match outcome {
            Ok(data) => {
                rows.push(SweepRow {
                    epsilon: *eps,
                    status: "ok".into(),
                    jstar: Some(data.jstar),
                    j_u1: Some(data.j_u1),
                    j_u2: Some(data.j_u2),
                    err_p1: Some(data.err_p1),
                    err_p2: Some(data.err_p2),
                    err_p3: Some(data.err_p3),
                    h_sup_err: Some(data.h_sup_err),
                    s_sup_err: Some(data.s_sup_err),
                    max_u_lower: Some(data.max_u_lower),
                    eps_max_u_lower: Some(eps * data.max_u_lower),
                });
                trajectories.push(Some(data.traj_u1));
            }
            Err(e) => {
                rows.push(SweepRow {
                    epsilon: *eps,
                    status: e.to_string(),
                    jstar: None,
                    j_u1: None,
                    j_u2: None,
                    err_p1: None,
                    err_p2: None,
                    err_p3: None,
                    h_sup_err: None,
                    s_sup_err: None,
                    max_u_lower: None,
                    eps_max_u_lower: None,
                });
                trajectories.push(None);
            }
        }
    }

    let over_eps = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Vec<Option<f64>> {
        rows.iter().map(|r| f(r).map(|v| v / r.epsilon)).collect()
    };
    let diagnostics = vec![
        ratio_diag(
            "(jstar - jbar) / epsilon",
            over_eps(&|r| r.jstar.map(|j| j - rs.jbar)),
        ),
        ratio_diag(
            "(j_u1 - jbar) / epsilon",
            over_eps(&|r| r.j_u1.map(|j| j - rs.jbar)),
        ),
        ratio_diag(
            "(j_u2 - jbar) / epsilon",
            over_eps(&|r| r.j_u2.map(|j| j - rs.jbar)),
        ),
        ratio_diag("err_p1 / epsilon", over_eps(&|r| r.err_p1)),
        ratio_diag("err_p2 / epsilon", over_eps(&|r| r.err_p2)),
        ratio_diag("err_p3 / epsilon", over_eps(&|r| r.err_p3)),
        ratio_diag("h_sup_err / epsilon", over_eps(&|r| r.h_sup_err)),
        ratio_diag("s_sup_err / epsilon", over_eps(&|r| r.s_sup_err)),
        ratio_diag(
            "epsilon * max_u_lower",
            rows.iter().map(|r| r.eps_max_u_lower).collect(),
        ),
    ];

    (
        SweepReport {
            jbar: rs.jbar,
            mu: rs.mu,
            epsilons: epsilons.to_vec(),
            rows,
            diagnostics,
        },
        trajectories,
    )
}

fn sweep_csv(report: &SweepReport) -> String {
    let mut csv = String::from(
        "epsilon, jstar, j_u1, j_u2, err_p1, err_p2, err_p3, h_sup_err, s_sup_err, max_u_lower, eps_max_u_lower, jbar, status\n",
    );
    let cell = |v: Option<f64>| v.map_or_else(|| "nan".into(), |x| format!("{x:.16e}"));
    for r in &report.rows {
        csv.push_str(&format!(
            "{:.16e}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {:.16e}, {}\n",
            r.epsilon,
            cell(r.jstar),
            cell(r.j_u1),
            cell(r.j_u2),
            cell(r.err_p1),
            cell(r.err_p2),
            cell(r.err_p3),
            cell(r.h_sup_err),
            cell(r.s_sup_err),
            cell(r.max_u_lower),
            cell(r.eps_max_u_lower),
            report.jbar,
            r.status.replace(',', ";"),
        ));
    }
    csv
}

/// Reference (outer) trajectory CSV: the epsilon-independent slow solution
/// and the fast manifold it induces.
fn reference_csv(rs: &ReducedSolution, o: &Oocp, t_end: f64) -> Result<String> {
    let asy = sim::asymptotic_reference(rs, o, 1.0)?;
    let mut csv = String::from("t");
    for i in 1..=o.x_dim() {
        csv.push_str(&format!(", xo_{i}"));
    }
    for i in 1..=o.y_dim() {
        csv.push_str(&format!(", yo_{i}"));
    }
    csv.push('\n');
    for k in 0..=400 {
        let t = t_end * k as f64 / 400.0;
        let x = asy.x_outer(t)?;
        let y = asy.y_outer(t)?;
        csv.push_str(&format!("{t:.16e}"));
        for v in x.iter().chain(y.iter()) {
            csv.push_str(&format!(", {v:.16e}"));
        }
        csv.push('\n');
    }
    Ok(csv)
}

fn run_sweep_pipeline(
    o: &Oocp,
    rs: &ReducedSolution,
    epsilons: &[f64],
    out: &Path,
    tol: f64,
    horizon: Option<f64>,
    json: bool,
) -> Result<i32> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        detail: e.to_string(),
    })?;

    let threads = sweep_threads(epsilons.len());
    let outcomes = run_indexed(epsilons.len(), threads, |i| {
        eps_work(o, rs, epsilons[i], tol, horizon)
    });
    let (report, trajectories) = build_report(rs, epsilons, outcomes);

    let report_text = to_json(&report);
    write_output(&out.join("sweep.json"), &report_text)?;
    write_output(&out.join("sweep.csv"), &sweep_csv(&report))?;
    write_output(&out.join("plot.py"), PLOT_SCRIPT)?;

    for (eps, traj) in epsilons.iter().zip(&trajectories) {
        if let Some(traj) = traj {
            let mut buf = Vec::new();
            sim::write_csv(traj, &mut buf).map_err(|e| Error::Io {
                path: "trajectory csv".into(),
                detail: e.to_string(),
            })?;
            let path = out.join(format!("traj_u1_eps{}.csv", format_eps(*eps)));
            write_output(&path, &String::from_utf8(buf).expect("csv is ascii"))?;
        }
    }
    let t_end = trajectories
        .iter()
        .flatten()
        .map(|t| *t.times.last().unwrap_or(&10.0))
        .fold(0.0f64, f64::max)
        .max(1.0);
    match reference_csv(rs, o, t_end) {
        Ok(csv) => write_output(&out.join("reference.csv"), &csv)?,
        Err(e) => eprintln!("note: reference trajectory skipped: {e}"),
    }

    if json {
        print!("{report_text}");
    } else {
        println!("Jbar {:.12e}", report.jbar);
        println!(
            "{:>10} {:>18} {:>18} {:>18} {:>14}  status",
            "epsilon", "J*_eps", "J(u1)", "J(u2)", "eps*max|u_low|"
        );
        for r in &report.rows {
            let c = |v: Option<f64>| {
                v.map_or_else(|| format!("{:>18}", "-"), |x| format!("{x:>18.10e}"))
            };
            println!(
                "{:>10} {} {} {} {:>14}  {}",
                format_eps(r.epsilon),
                c(r.jstar),
                c(r.j_u1),
                c(r.j_u2),
                r.eps_max_u_lower
                    .map_or_else(|| "-".into(), |x| format!("{x:.6e}")),
                r.status
            );
        }
        println!("wrote {}", out.join("sweep.json").display());
    }

    Ok(if report.rows.iter().all(|r| r.status == "ok") {
        0
    } else {
        3
    })
}

fn prepare_epsilons(epsilons: Option<Vec<f64>>) -> std::result::Result<Vec<f64>, String> {
    let mut eps = epsilons.unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
    if eps.len() < 2 {
        return Err("a sweep needs at least two epsilon values".into());
    }
    if eps.iter().any(|e| !e.is_finite() || *e <= 0.0 || *e > 1.0) {
        return Err("every epsilon must lie in (0, 1]".into());
    }
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eps.dedup();
    if eps.len() < 2 {
        return Err("a sweep needs at least two distinct epsilon values".into());
    }
    Ok(eps)
}

fn cmd_sweep(
    file: &Path,
    epsilons: Option<Vec<f64>>,
    out: &Path,
    tol: f64,
    horizon: Option<f64>,
    json: bool,
) -> Result<i32> {
    let eps = match prepare_epsilons(epsilons) {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("usage error: {msg}");
            return Ok(2);
        }
    };
    let (_, analysis) = load_and_analyze(file)?;
    if !analysis.report.all_pass() {
        print_report(&analysis.report);
        return Ok(2);
    }
    let o = analysis.oocp.as_ref().expect("analysis passed");
    let rs = solve_reduced(o)?;
    run_sweep_pipeline(o, &rs, &eps, out, tol, horizon, json)
}

// ---------------------------------------------------------------------
// built-in tracking example
// ---------------------------------------------------------------------

/// Builds the built-in tracking example from nominal-trajectory data: a
/// double integrator whose state is required to follow the decaying
/// nominal `(na1 e^{-gamma t}, na2 e^{-gamma t})` from the raw initial
/// point `(nx0, ny0)`, with no penalty on the control itself. In deviation
/// coordinates this is the standard form with disturbance amplitudes
/// `a1 = gamma na1 + na2`, `a2 = gamma na2` and initial state
/// `(nx0 - na1, ny0 - na2)`; the defaults give `a1 = 4`, `a2 = 2`,
/// `x0 = 2`, `y0 = 1`.
pub fn tracking_example_problem(
    na1: f64,
    na2: f64,
    gamma: f64,
    nx0: f64,
    ny0: f64,
) -> Result<Oocp> {
    let a1 = gamma * na1 + na2;
    let a2 = gamma * na2;
    let x0 = nx0 - na1;
    let y0 = ny0 - na2;
    Oocp::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::zeros(1, 1),
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, 1.0),
        vec![],
        ExpSignal::new(
            2,
            vec![ExpMode {
                rate: gamma,
                coef: DVector::from_vec(vec![a1, a2]),
            }],
        )?,
        DVector::from_vec(vec![x0, y0]),
    )
}

#[derive(Serialize)]
struct ExampleSummary {
    jbar: f64,
    alpha: f64,
    mu: f64,
    p10: f64,
    p20: f64,
    p30: f64,
    h10_at_0: f64,
    h20_at_0: f64,
    s0_at_0: f64,
    epsilons: Vec<f64>,
}

fn cmd_example_tracking(
    out: &Path,
    epsilons: Option<Vec<f64>>,
    nominal: [f64; 5],
    tol: f64,
    horizon: Option<f64>,
    json: bool,
) -> Result<i32> {
    let eps = match prepare_epsilons(epsilons) {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("usage error: {msg}");
            return Ok(2);
        }
    };
    let [na1, na2, gamma, nx0, ny0] = nominal;
    let o = tracking_example_problem(na1, na2, gamma, nx0, ny0)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        detail: e.to_string(),
    })?;
    write_output(
        &out.join("problem.json"),
        &emit_problem(&LoadedProblem::Transformed(o.clone())),
    )?;

    let rs = solve_reduced(&o)?;
    let summary = ExampleSummary {
        jbar: rs.jbar,
        alpha: rs.alpha,
        mu: rs.mu,
        p10: rs.p10[(0, 0)],
        p20: rs.p20[(0, 0)],
        p30: rs.p30[(0, 0)],
        h10_at_0: rs.h10.eval(0.0)[0],
        h20_at_0: rs.h20.eval(0.0)[0],
        s0_at_0: rs.s0_signal.eval_scalar(0.0),
        epsilons: eps.clone(),
    };
    let summary_text = to_json(&summary);
    write_output(&out.join("summary.json"), &summary_text)?;
    if json {
        print!("{summary_text}");
    } else {
        println!("tracking example in deviation coordinates");
        println!("Jbar     {:.12e}", rs.jbar);
        println!("h10(0)   {:.12e}", summary.h10_at_0);
        println!("h20(0)   {:.12e}", summary.h20_at_0);
        println!("s0(0)    {:.12e}", summary.s0_at_0);
    }
    // `--json` prints the summary document above; the sweep report stays
    // on disk either way
    run_sweep_pipeline(&o, &rs, &eps, out, tol, horizon, false)
}

// ---------------------------------------------------------------------
// plot script
// ---------------------------------------------------------------------

const PLOT_SCRIPT: &str = r##"#!/usr/bin/env python3
"""Render sweep figures from the CSV artifacts in this directory.

Reads sweep.csv, traj_u1_eps*.csv and reference.csv (all written by the
sweep command) and produces three PNG figures: costs versus epsilon,
state-trajectory overlays against the outer reference, and control
magnitude over time.
"""
import csv
import glob
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, skipinitialspace=True))
    header, data = rows[0], rows[1:]
    return header, data


def fnum(s):
    try:
        return float(s)
    except ValueError:
        return math.nan


def costs_figure():
    header, data = read_csv(os.path.join(HERE, "sweep.csv"))
    col = {name: i for i, name in enumerate(header)}
    rows = [r for r in data if r[col["status"]] == "ok"]
    eps = [fnum(r[col["epsilon"]]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in [("jstar", "J*_eps"), ("j_u1", "J(u_eps,1)"), ("j_u2", "J(u_eps,2)")]:
        ax.plot(eps, [fnum(r[col[key]]) for r in rows], "o-", label=label)
    jbar = fnum(rows[0][col["jbar"]]) if rows else math.nan
    ax.axhline(jbar, color="k", linestyle="--", linewidth=1, label="Jbar")
    ax.set_xscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("cost")
    ax.legend()
    ax.set_title("costs versus epsilon")
    fig.tight_layout()
    fig.savefig(os.path.join(HERE, "sweep_costs.png"), dpi=150)


def trajectory_figures():
    traj_files = sorted(glob.glob(os.path.join(HERE, "traj_u1_eps*.csv")))
    if not traj_files:
        return
    fig, ax = plt.subplots(figsize=(7, 4.5))
    figc, axc = plt.subplots(figsize=(7, 4.5))
    for path in traj_files:
        eps_label = os.path.basename(path)[len("traj_u1_eps"):-len(".csv")]
        header, data = read_csv(path)
        col = {name: i for i, name in enumerate(header)}
        t = [fnum(r[col["t"]]) for r in data]
        states = [name for name in header if name.startswith("z_")]
        for name in states:
            ax.plot(t, [fnum(r[col[name]]) for r in data], linewidth=1,
                    label=f"{name}, eps={eps_label}")
        controls = [name for name in header if name.startswith("u_")]
        unorm = [
            math.sqrt(sum(fnum(r[col[name]]) ** 2 for name in controls)) for r in data
        ]
        axc.plot(t, unorm, linewidth=1, label=f"eps={eps_label}")
    ref = os.path.join(HERE, "reference.csv")
    if os.path.exists(ref):
        header, data = read_csv(ref)
        col = {name: i for i, name in enumerate(header)}
        t = [fnum(r[col["t"]]) for r in data]
        for name in header[1:]:
            ax.plot(t, [fnum(r[col[name]]) for r in data], "k--", linewidth=1,
                    label=f"outer {name}")
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    ax.legend(fontsize=7)
    ax.set_title("closed-loop states and outer reference")
    fig.tight_layout()
    fig.savefig(os.path.join(HERE, "trajectories.png"), dpi=150)
    axc.set_xlabel("t")
    axc.set_ylabel("|u|")
    axc.set_yscale("log")
    axc.legend(fontsize=8)
    axc.set_title("control magnitude (impulse-like as epsilon shrinks)")
    figc.tight_layout()
    figc.savefig(os.path.join(HERE, "controls.png"), dpi=150)


if __name__ == "__main__":
    costs_figure()
    trajectory_figures()
    print("wrote sweep_costs.png, trajectories.png, controls.png")
"##;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tracking_file_text() -> String {
        emit_problem(&LoadedProblem::Transformed(
            tracking_example_problem(2.0, 2.0, 1.0, 4.0, 3.0).unwrap(),
        ))
    }

    #[test]
    fn nominal_builder_produces_documented_deviation_data() {
        let o = tracking_example_problem(2.0, 2.0, 1.0, 4.0, 3.0).unwrap();
        let f = o.disturbance();
        assert_eq!(f.modes().len(), 1);
        assert_abs_diff_eq!(f.modes()[0].rate, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(f.modes()[0].coef[0], 4.0, epsilon = 0.0);
        assert_abs_diff_eq!(f.modes()[0].coef[1], 2.0, epsilon = 0.0);
        assert_abs_diff_eq!(o.z0()[0], 2.0, epsilon = 0.0);
        assert_abs_diff_eq!(o.z0()[1], 1.0, epsilon = 0.0);
    }

    #[test]
    fn roundtrip_preserves_problem_and_bytes() {
        let text = tracking_file_text();
        let parsed = parse_problem(&text).unwrap();
        let re_emitted = emit_problem(&parsed);
        assert_eq!(text, re_emitted, "emission must be stable under reparse");
        match parsed {
            LoadedProblem::Transformed(o) => {
                assert_eq!(o.n(), 2);
                assert_eq!(o.r(), 1);
                assert_eq!(o.q(), 0);
                assert_abs_diff_eq!(o.a()[(0, 1)], 1.0, epsilon = 0.0);
                assert_abs_diff_eq!(o.d1()[(0, 0)], 2.0, epsilon = 0.0);
            }
            LoadedProblem::Raw(_) => panic!("expected an oocp-mode problem"),
        }
    }

    #[test]
    fn raw_mode_roundtrip() {
        let raw = RawProblem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            vec![],
            ExpSignal::new(
                2,
                vec![ExpMode {
                    rate: 1.0,
                    coef: DVector::from_vec(vec![4.0, 2.0]),
                }],
            )
            .unwrap(),
            DVector::from_vec(vec![2.0, 1.0]),
        )
        .unwrap();
        let text = emit_problem(&LoadedProblem::Raw(raw));
        let parsed = parse_problem(&text).unwrap();
        assert_eq!(text, emit_problem(&parsed));
        match parsed {
            LoadedProblem::Raw(p) => assert_eq!((p.n(), p.r(), p.q()), (2, 1, 0)),
            LoadedProblem::Transformed(_) => panic!("expected a raw-mode problem"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut text = tracking_file_text();
        text = text.replacen("{", "{\n  \"surprise\": 1,", 1);
        match parse_problem(&text) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("surprise"), "{detail}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_matrix_length_names_the_field() {
        let text = tracking_file_text().replace(
            "\"a\": [\n    0.0,\n    1.0,\n    0.0,\n    0.0\n  ]",
            "\"a\": [0.0, 1.0]",
        );
        match parse_problem(&text) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "a"),
            other => panic!("expected a parse error on field a, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_state_weight_is_a_parse_error() {
        let o = tracking_example_problem(2.0, 2.0, 1.0, 4.0, 3.0).unwrap();
        let text = emit_problem(&LoadedProblem::Raw(
            RawProblem::new(
                o.a().clone(),
                DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
                vec![],
                o.disturbance().clone(),
                o.z0().clone(),
            )
            .unwrap(),
        ));
        let bad = text.replace(
            "\"d\": [\n    2.0,\n    0.0,\n    0.0,\n    1.0\n  ]",
            "\"d\": [2.0, 0.5, 0.0, 1.0]",
        );
        assert_ne!(text, bad, "the test must actually modify the weight");
        match parse_problem(&bad) {
            Err(Error::Parse { field, detail }) => {
                assert_eq!(field, "d");
                assert!(detail.contains("symmetric"), "{detail}");
            }
            other => panic!("expected a parse error on field d, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = tracking_file_text().replace("\"initial_state\"", "\"initial_state_typo\"");
        // the typo makes the real field missing AND introduces an unknown
        // one; serde reports the unknown field first
        match parse_problem(&text) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("initial_state_typo")),
            other => panic!("expected a parse error, got {other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&tracking_file_text()).unwrap();
        v.as_object_mut().unwrap().remove("initial_state");
        match parse_problem(&v.to_string()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "initial_state"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn cross_mode_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&tracking_file_text()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("b".into(), serde_json::json!([0.0, 1.0]));
        match parse_problem(&v.to_string()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "b"),
            other => panic!("expected a parse error on field b, got {other:?}"),
        }
    }

    #[test]
    fn epsilon_lists_are_checked_and_sorted() {
        assert!(prepare_epsilons(Some(vec![0.1])).is_err());
        assert!(prepare_epsilons(Some(vec![0.1, 0.1])).is_err());
        assert!(prepare_epsilons(Some(vec![0.1, -0.2])).is_err());
        assert!(prepare_epsilons(Some(vec![0.1, 1.5])).is_err());
        let eps = prepare_epsilons(Some(vec![0.05, 0.2, 0.1])).unwrap();
        assert_eq!(eps, vec![0.2, 0.1, 0.05]);
        let default = prepare_epsilons(None).unwrap();
        assert_eq!(default, DEFAULT_EPSILONS.to_vec());
    }

    #[test]
    fn ratio_diagnostics_are_quotients_with_spread() {
        let d = ratio_diag("x / epsilon", vec![Some(2.0), Some(4.0), Some(8.0)]);
        assert_abs_diff_eq!(d.spread.unwrap(), 4.0, epsilon = 1e-15);
        let with_hole = ratio_diag("x / epsilon", vec![Some(2.0), None]);
        assert!(with_hole.spread.is_none());
        let with_zero = ratio_diag("x / epsilon", vec![Some(0.0), Some(1.0)]);
        assert!(with_zero.spread.is_none());
    }

    #[test]
    fn json_encoding_is_deterministic() {
        let o = tracking_example_problem(2.0, 2.0, 1.0, 4.0, 3.0).unwrap();
        let rs = solve_reduced(&o).unwrap();
        let out = reduced_out(&rs);
        assert_eq!(to_json(&out), to_json(&reduced_out(&rs)));
    }
}
