//! `charsmooth` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use charsmooth::delta::{delta_wave, DeltaOptions};
use charsmooth::error::{DeltaError, PathError, ProblemError, RegularityError, SolveError};
use charsmooth::paths::{
    build_path_graph, check_iota, check_iota2, compute_tj, det_r_criterion, influence_sets, IotaVerdict, PathOptions,
};
use charsmooth::problem::{check_compatibility, check_growth_certificate, parse_problem, BoundaryLaw, ProblemSpec};
use charsmooth::regularity::{smoothing_report, RegularityOptions};
use charsmooth::report::{svg_lines, to_json_pretty, versioned, Series};
use charsmooth::solver::{picard_solve_opts, residual, SolveOptions};
use charsmooth::wave::lift_wave_solution;
use charsmooth::Expr;

#[derive(Parser, Debug)]
#[command(name = "charsmooth", version, about = "Hyperbolic boundary problems: solve, path analysis, delta waves, smoothing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve on the grid and write solution, boundary trace and residuals.
    Solve(Common),
    /// Path conditions, smoothing times, reflection graph and influence masks.
    Analyze(Common),
    /// Delta-wave decomposition and convergence diagnostics for singular data.
    Delta(Common),
    /// Solve a wave-equation file and write the displacement.
    Wave(Common),
    /// Smoothing criterion plus empirical indicator ladder.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Problem file (TOML).
    input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Grid intervals in x and in t.
    #[arg(long, num_args = 2, value_names = ["NX", "NT"])]
    grid: Option<Vec<usize>>,
    /// Picard stopping tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Mollifier widths, strictly decreasing.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    eps: Option<Vec<f64>>,
    /// Depth cap for path enumeration.
    #[arg(long)]
    depth: Option<usize>,
    /// Horizon at which a path counts as unbounded.
    #[arg(long)]
    horizon: Option<f64>,
    /// Seed for sampled checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treat inconclusive verdicts as errors (exit 4).
    #[arg(long)]
    strict: bool,
    /// Solve even when data violate zero-order compatibility.
    #[arg(long)]
    allow_incompatible: bool,
    /// Number of smoothing times to compute.
    #[arg(long, default_value_t = 2)]
    j: usize,
    /// Indicator ladder, grid points per unit length (coarse to fine).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    ladder: Option<Vec<usize>>,
}

struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
    detail: Value,
}

impl Failure {
    fn new(exit: u8, code: &'static str, message: impl Into<String>) -> Self {
        Failure { exit, code, message: message.into(), detail: Value::Null }
    }

    fn with(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl From<ProblemError> for Failure {
    fn from(e: ProblemError) -> Self {
        Failure::new(2, e.code(), e.to_string())
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NotValidated | SolveError::Incompatible(_) | SolveError::Grid(_) => {
                Failure::new(2, "E_VALIDATION", e.to_string())
            }
            _ => Failure::new(3, "E_SOLVE", e.to_string()),
        }
    }
}

impl From<PathError> for Failure {
    fn from(e: PathError) -> Self {
        match e {
            PathError::Dimension(_) => Failure::new(2, "E_DIMENSION", e.to_string()),
            PathError::NotHolds(_) => Failure::new(2, "E_NOT_HOLDS", e.to_string()),
            PathError::Inconclusive(_) => Failure::new(4, "E_INCONCLUSIVE", e.to_string()),
            _ => Failure::new(3, "E_PATH", e.to_string()),
        }
    }
}

impl From<DeltaError> for Failure {
    fn from(e: DeltaError) -> Self {
        match e {
            DeltaError::UnsupportedBoundary => Failure::new(2, "E_UNSUPPORTED", e.to_string()),
            DeltaError::BadEpsList | DeltaError::UnderResolved { .. } | DeltaError::NoAtoms => {
                Failure::new(2, "E_OPTIONS", e.to_string())
            }
            DeltaError::Solve(s) => s.into(),
            DeltaError::Path(p) => p.into(),
            _ => Failure::new(3, "E_DELTA", e.to_string()),
        }
    }
}

impl From<RegularityError> for Failure {
    fn from(e: RegularityError) -> Self {
        match e {
            RegularityError::Solve(s) => s.into(),
            RegularityError::Path(p) => p.into(),
            _ => Failure::new(2, "E_OPTIONS", e.to_string()),
        }
    }
}

fn io(e: std::io::Error, path: &Path) -> Failure {
    Failure::new(2, "E_IO", format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| io(e, &p))
}

fn load(c: &Common) -> Result<ProblemSpec, Failure> {
    let text = fs::read_to_string(&c.input).map_err(|e| io(e, &c.input))?;
    fs::create_dir_all(&c.out).map_err(|e| io(e, &c.out))?;
    Ok(parse_problem(&text)?)
}

fn solve_options(c: &Common, spec: &ProblemSpec) -> Result<SolveOptions, Failure> {
    let (nx, nt) = match c.grid.as_deref() {
        Some([nx, nt]) => (*nx, *nt),
        _ => (128, (128.0 * spec.t_max).ceil() as usize),
    };
    if nx < 2 || nt < 1 {
        return Err(Failure::new(2, "E_OPTIONS", "grid needs NX >= 2 and NT >= 1"));
    }
    if !(c.tol > 0.0) {
        return Err(Failure::new(2, "E_OPTIONS", "tolerance must be positive"));
    }
    Ok(SolveOptions { tol: c.tol, max_iter: c.max_iter, ..SolveOptions::new(nx, nt) })
}

fn path_options(c: &Common) -> PathOptions {
    let mut o = PathOptions::default();
    if let Some(d) = c.depth {
        o.depth_max = d;
    }
    o.horizon = c.horizon;
    o
}

fn require_compatible(c: &Common, spec: &ProblemSpec) -> Result<(), Failure> {
    let r = check_compatibility(spec);
    if !r.ok && !c.allow_incompatible {
        return Err(Failure::new(2, "E_INCOMPATIBLE", "initial and boundary data are incompatible at a corner")
            .with(serde_json::to_value(&r).unwrap_or(Value::Null)));
    }
    Ok(())
}

fn inconclusive(c: &Common, v: &IotaVerdict) -> Result<(), Failure> {
    if c.strict {
        if let IotaVerdict::Inconclusive { reason, .. } = v {
            return Err(Failure::new(4, "E_INCONCLUSIVE", reason.clone()));
        }
    }
    Ok(())
}

fn cmd_solve(c: &Common, wave: bool) -> Result<(), Failure> {
    let spec = load(c)?;
    if wave && spec.wave.is_none() {
        return Err(Failure::new(2, "E_NOT_WAVE", "input is not a [wave] problem file"));
    }
    require_compatible(c, &spec)?;
    let so = solve_options(c, &spec)?;
    let (sol, trace) = picard_solve_opts(&spec, &so)?;
    let res = residual(&spec, &sol)?;
    write(&c.out, "solution.csv", sol.to_csv())?;
    write(&c.out, "trace.csv", trace.to_csv())?;
    let body = json!({
        "name": spec.name,
        "grid": [so.nx, so.nt],
        "converged": sol.converged,
        "iterations": sol.iterations,
        "final_update": sol.final_update,
        "residual": res,
        "report": sol.report,
    });
    write(&c.out, "residual.json", to_json_pretty(&versioned("solve", &body)))?;
    if wave {
        let u = lift_wave_solution(&sol).map_err(|e| Failure::new(2, "E_NOT_WAVE", e.to_string()))?;
        let mut csv = String::from("t,x,u\n");
        for (q, row) in u.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", sol.t(q), sol.x(p), v));
            }
        }
        write(&c.out, "displacement.csv", csv)?;
    }
    if !sol.converged {
        return Err(Failure::new(3, "E_NOT_CONVERGED", format!("Picard iteration stopped at update {}", sol.final_update)));
    }
    println!("{}: solved on {}x{} grid, residual {:?}", spec.name, so.nx, so.nt, res);
    Ok(())
}

fn cmd_analyze(c: &Common) -> Result<(), Failure> {
    let spec = load(c)?;
    let po = path_options(c);
    let iota = check_iota(&spec, 0.0, &po)?;
    let iota2 = check_iota2(&spec, 0.0, &po)?;
    let tj = if iota.holds() {
        match compute_tj(&spec, c.j, &po) {
            Ok(v) => json!(v),
            Err(e) => json!({ "error": e.to_string() }),
        }
    } else {
        Value::Null
    };
    let det_r = match &spec.boundary {
        BoundaryLaw::LinearReflection { b, c: cm } => Some(det_r_criterion(b, cm)?),
        _ => None,
    };
    let growth = match &spec.boundary {
        BoundaryLaw::LinearNonlocal { .. } | BoundaryLaw::GeneralNonlinear { .. } => {
            check_growth_certificate(&spec, spec.t_max, 10.0, c.seed).ok()
        }
        _ => None,
    };
    let graph = build_path_graph(&spec, &po);
    write(&c.out, "graph.dot", graph.to_dot())?;
    let sets = influence_sets(&spec, spec.t_max, &po)?;
    let mut masks = Vec::new();
    for i in 0..spec.n {
        for strict in [false, true] {
            let m = sets.mask(i, strict);
            let name = format!("influence_{}{}.pgm", i + 1, if strict { "_strict" } else { "" });
            write(&c.out, &name, m.to_pgm())?;
            masks.push(json!({ "component": i + 1, "strict": strict, "file": name, "cells": m.count() }));
        }
    }
    let (subset, closure) = sets.consistency();
    let body = json!({
        "name": spec.name,
        "iota": iota,
        "iota2": iota2,
        "t_j": tj,
        "det_r": det_r,
        "growth": growth,
        "masks": masks,
        "strict_subset": subset,
        "closure": closure,
    });
    write(&c.out, "analysis.json", to_json_pretty(&versioned("analyze", &body)))?;
    println!("{}: iota {}, iota2 {}", spec.name, iota.name(), iota2.name());
    inconclusive(c, &iota)?;
    inconclusive(c, &iota2)
}

fn cmd_delta(c: &Common) -> Result<(), Failure> {
    let spec = load(c)?;
    let so = solve_options(c, &spec)?;
    let mut opts = DeltaOptions::new(so.nx, so.nt);
    opts.solve = so;
    opts.path = path_options(c);
    let eps = c.eps.clone().unwrap_or_else(|| vec![0.1, 0.05, 0.025]);
    let tests = ["1", "x", "sin(3*x) * (1 + t)"]
        .iter()
        .map(|s| Expr::parse(s).map_err(|e| Failure::new(2, "E_INTERNAL", e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let d = delta_wave(&spec, &opts, &eps, &tests)?;
    write(&c.out, "delta.json", to_json_pretty(&versioned("delta", &d)))?;
    let pick = |f: &dyn Fn(&charsmooth::delta::EpsDiagnostic) -> f64| -> Vec<(f64, f64)> {
        d.diagnostics.iter().map(|g| (g.eps, f(g))).collect()
    };
    let series = [
        Series { label: "L1 split".into(), points: pick(&|g| g.l1_split) },
        Series { label: "sup_K regular".into(), points: pick(&|g| g.sup_regular) },
    ];
    write(&c.out, "delta.svg", svg_lines("delta-wave diagnostics", "eps", "norm", &series, true))?;
    println!(
        "{}: {} atoms, L1 slope {:?}, sup monotone {}",
        spec.name,
        d.atoms.len(),
        d.l1_slope,
        d.sup_monotone
    );
    Ok(())
}

fn cmd_report(c: &Common) -> Result<(), Failure> {
    let spec = load(c)?;
    let mut opts = RegularityOptions { tol: c.tol, path: path_options(c), ..Default::default() };
    if let Some(l) = &c.ladder {
        opts.ladder = l.clone();
    }
    let r = smoothing_report(&spec, c.j, &opts)?;
    write(&c.out, "report.json", to_json_pretty(&versioned("report", &r)))?;
    write(&c.out, "report.svg", r.to_svg())?;
    println!("{}: iota {}, bounded above T_j: {:?}", spec.name, r.iota.name(), r.bounded_above);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (c, run) = match &cli.cmd {
        Cmd::Solve(c) => (c, cmd_solve(c, false)),
        Cmd::Wave(c) => (c, cmd_solve(c, true)),
        Cmd::Analyze(c) => (c, cmd_analyze(c)),
        Cmd::Delta(c) => (c, cmd_delta(c)),
        Cmd::Report(c) => (c, cmd_report(c)),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let v = versioned("error", &json!({ "code": f.code, "message": f.message, "detail": f.detail }));
            if c.out.is_dir() {
                let _ = fs::write(c.out.join("error.json"), to_json_pretty(&v));
            }
            eprintln!("{}", serde_json::to_string(&v).unwrap_or_default());
            ExitCode::from(f.exit)
        }
    }
}
