//! `netstab` command line: `run`, `verify`, `probe`, `compare`.

pub mod format;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    chain_check, compare_runs, compute_error_series, stability_report, verify_closed_loop_identity,
};
use crate::dynamics::assemble_from_thetas;
use crate::error::Error;
use crate::seed;
use crate::sim::{run_episode, RunStatus, Scenario, TraceLog};
use crate::sls::{
    controllability_grammians, fir_feasibility_probe, sensitivity_constants, spectral_norm, FamilyBounds,
    ProbeReport, SensitivityConstants,
};

pub use format::{load_run, write_run, Reports};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INCONSISTENT: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;
pub const EXIT_UNSTABLE: u8 = 5;
pub const EXIT_VERIFY_FAILED: u8 = 6;

/// Decay constant used for the post-stop verdict: `λ < −c/H`.
const DECAY_C: f64 = 0.0;

#[derive(Debug, Parser)]
#[command(name = "netstab", version, about = "Distributed stabilization of unknown networked linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one or more scenarios and write trace, columns and reports.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Scenarios simulated concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run the analysis suite on a stored run.
    Verify { dir: PathBuf },
    /// Sample models from the initial parameter boxes and report
    /// synthesis feasibility, sensitivity constants and decay.
    Probe {
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Side-by-side metrics of two stored runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        Error::Inconsistency { .. } | Error::GlobalInconsistency => EXIT_INCONSISTENT,
        Error::SynthesisInfeasible { .. } | Error::NotControllable | Error::IdentificationFailed { .. } => {
            EXIT_INFEASIBLE
        }
        Error::CausalityViolation { .. } | Error::MissingData(_) => EXIT_VERIFY_FAILED,
        Error::InvalidTopology(_)
        | Error::ParameterShape { .. }
        | Error::DimensionMismatch { .. }
        | Error::EmptyPolytope
        | Error::UnboundedPolytope
        | Error::Scenario(_)
        | Error::Parse(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_USAGE,
    }
}

fn fail(context: &Path, e: Error) -> u8 {
    eprintln!("error: {}: {e}", context.display());
    exit_code(&e)
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NETSTAB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    ExitCode::from(dispatch(cli.command))
}

pub fn dispatch(cmd: Command) -> u8 {
    match cmd {
        Command::Run { scenarios, out, jobs } => cmd_run_batch(&scenarios, &out, jobs),
        Command::Verify { dir } => cmd_verify(&dir),
        Command::Probe { scenario, trials } => cmd_probe(&scenario, trials),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, out.as_deref()),
    }
}

/// Analysis reports for a finished run; identity and chain checks only apply
/// to traces carrying closed-loop columns.
pub fn build_reports(trace: &TraceLog) -> crate::Result<Reports> {
    let s = &trace.scenario;
    let stability = stability_report(trace, s.file.t_stop, DECAY_C);
    let (identity, chain, error_series) = if trace.has_columns() {
        let series = compute_error_series(trace)?;
        let chain = chain_check(trace, &series);
        (Some(verify_closed_loop_identity(trace)?), Some(chain), Some(series))
    } else {
        (None, None, None)
    };
    Ok(Reports {
        status: trace.status,
        stability,
        identity,
        chain,
        error_series,
        path_lengths: trace.path_lengths(),
        switch_time: trace.switch_time,
    })
}

pub fn cmd_run(scenario_path: &Path, out_dir: &Path) -> u8 {
    let scenario = match Scenario::load(scenario_path) {
        Ok(s) => Arc::new(s),
        Err(e) => return fail(scenario_path, e),
    };
    let trace = match run_episode(scenario) {
        Ok(t) => t,
        Err(e) => return fail(scenario_path, e),
    };
    let reports = match build_reports(&trace) {
        Ok(r) => r,
        Err(e) => return fail(scenario_path, e),
    };
    if let Err(e) = write_run(out_dir, &trace, &reports) {
        return fail(out_dir, e);
    }
    match trace.status {
        RunStatus::Diverged { t } => {
            eprintln!("{}: state diverged at t={t}", scenario_path.display());
            EXIT_UNSTABLE
        }
        RunStatus::Completed => {
            println!(
                "{}: completed {} steps, sup|x| = {:.6e}, sup|u| = {:.6e} -> {}",
                scenario_path.display(),
                trace.steps(),
                reports.stability.sup_x,
                reports.stability.sup_u,
                out_dir.display()
            );
            EXIT_OK
        }
    }
}

/// One output directory per scenario (named after the file stem) when more
/// than one is given; the batch exit code is the first nonzero in input order.
pub fn cmd_run_batch(scenarios: &[PathBuf], out: &Path, jobs: usize) -> u8 {
    let dirs: Vec<PathBuf> = if scenarios.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        let mut seen = std::collections::BTreeSet::new();
        let mut dirs = Vec::new();
        for p in scenarios {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            if !seen.insert(stem.clone()) {
                eprintln!("error: duplicate scenario name {stem:?} in batch");
                return EXIT_USAGE;
            }
            dirs.push(out.join(stem));
        }
        dirs
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_IO;
        }
    };
    let codes: Vec<u8> = pool.install(|| scenarios.par_iter().zip(&dirs).map(|(s, d)| cmd_run(s, d)).collect());
    codes.into_iter().find(|&c| c != EXIT_OK).unwrap_or(EXIT_OK)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn cmd_verify(dir: &Path) -> u8 {
    let trace = match load_run(dir) {
        Ok(t) => t,
        Err(e) => return fail(dir, e),
    };
    let reports = match build_reports(&trace) {
        Ok(r) => r,
        Err(e) => return fail(dir, e),
    };
    let mut ok = true;
    println!("{:<22} {:<6} detail", "check", "result");
    let stable = reports.stability.diverged_at.is_none();
    ok &= stable;
    println!(
        "{:<22} {:<6} sup|x| = {:.3e}, sup|u| = {:.3e}, final |x| = {:.3e}",
        "bounded state",
        verdict(stable),
        reports.stability.sup_x,
        reports.stability.sup_u,
        reports.stability.final_norm
    );
    if let Some(d) = reports.stability.decay_ok {
        ok &= d;
        let lam = reports.stability.lambda.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<22} {:<6} lambda = {lam}, settled at {:?}", "post-stop decay", verdict(d), reports.stability.settled_at);
    }
    if let Some(id) = &reports.identity {
        let x_ok = id.x_residual <= crate::analysis::IDENTITY_TOL && id.u_residual <= crate::analysis::IDENTITY_TOL;
        let r_ok = id.recursion_max <= id.w_assumed + crate::analysis::IDENTITY_TOL;
        ok &= x_ok && r_ok;
        println!(
            "{:<22} {:<6} x residual = {:.3e} (t={}), u residual = {:.3e}",
            "closed-loop identity",
            verdict(x_ok),
            id.x_residual,
            id.worst_x_t,
            id.u_residual
        );
        println!(
            "{:<22} {:<6} max = {:.6e} vs W = {:.6e} (t={})",
            "disturbance recursion",
            verdict(r_ok),
            id.recursion_max,
            id.w_assumed,
            id.worst_recursion_t
        );
    }
    if let Some(ch) = &reports.chain {
        ok &= ch.passed;
        println!(
            "{:<22} {:<6} L = {:.6e}, max ratio = {:.3e}, violations = {}",
            "convolution bound",
            verdict(ch.passed),
            ch.l_hat,
            ch.max_ratio,
            ch.violations.len()
        );
    }
    if let Some(t) = reports.switch_time {
        println!("{:<22} {:<6} identification baseline switched at t={t}", "switch", "info");
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutput {
    pub feasibility: ProbeReport,
    pub family: Option<FamilyBounds>,
    pub sensitivity: Option<SensitivityConstants>,
    pub sensitivity_error: Option<String>,
}

/// Feasibility probe plus the sensitivity constants of the family of global
/// models sampled uniformly from the initial boxes.
pub fn probe(scenario: &Scenario, trials: usize) -> crate::Result<ProbeOutput> {
    let feasibility = fir_feasibility_probe(
        &scenario.topology,
        &scenario.delay,
        &scenario.sets,
        &scenario.p0,
        scenario.horizon(),
        &scenario.weights,
        trials,
        seed::mix(scenario.file.seed, seed::branch::PROBE),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed::mix(scenario.file.seed, seed::branch::PROBE), 1));
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let thetas: Vec<Vec<f64>> = scenario
            .p0
            .iter()
            .map(|p| {
                let (lo, hi) = (p.lo(), p.hi());
                (0..p.dim()).map(|k| lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>()).collect()
            })
            .collect();
        let g = assemble_from_thetas(&scenario.topology, &thetas)?;
        reports.push((controllability_grammians(&g.a, &g.b, scenario.horizon())?, spectral_norm(&g.b)));
    }
    let refs: Vec<_> = reports.iter().map(|(g, b)| (g, *b)).collect();
    let family = FamilyBounds::envelope(&refs);
    let (sensitivity, sensitivity_error) = match sensitivity_constants(&family, &scenario.weights, scenario.horizon()) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ProbeOutput { feasibility, family: Some(family), sensitivity, sensitivity_error })
}

pub fn cmd_probe(path: &Path, trials: usize) -> u8 {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => return fail(path, e),
    };
    let out = match probe(&scenario, trials) {
        Ok(o) => o,
        Err(e) => return fail(path, e),
    };
    match serde_json::to_string_pretty(&out) {
        Ok(s) => println!("{s}"),
        Err(e) => return fail(path, e.into()),
    }
    if out.feasibility.passes == out.feasibility.trials {
        EXIT_OK
    } else {
        EXIT_INFEASIBLE
    }
}

pub fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> u8 {
    let ta = match load_run(a) {
        Ok(t) => t,
        Err(e) => return fail(a, e),
    };
    let tb = match load_run(b) {
        Ok(t) => t,
        Err(e) => return fail(b, e),
    };
    let cmp = match compare_runs(&ta, &tb) {
        Ok(c) => c,
        Err(e) => return fail(b, e),
    };
    let res = match out {
        Some(p) => std::fs::File::create(p).map_err(Error::from).and_then(|f| cmp.write_csv(f)),
        None => cmp.write_csv(std::io::stdout().lock()),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => fail(out.unwrap_or(Path::new("-")), e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate::{chain_scenario, ChainSpec};
    use crate::sim::scenario::{Algorithm, DisturbancePolicy};

    #[test]
    fn exit_codes_are_distinct_per_verdict() {
        let codes = [
            exit_code(&Error::Inconsistency { owner: 0, t: 1 }),
            exit_code(&Error::NotControllable),
            exit_code(&Error::Parse("x".into())),
            EXIT_UNSTABLE,
            EXIT_VERIFY_FAILED,
        ];
        let set: std::collections::BTreeSet<_> = codes.iter().collect();
        assert_eq!(set.len(), codes.len());
        assert!(!codes.contains(&EXIT_OK));
    }

    #[test]
    fn sign_adversary_zero_control_is_unstable() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = chain_scenario(&ChainSpec { t_final: 300, ..Default::default() });
        f.algorithm = Algorithm::ZeroControl;
        f.disturbance = DisturbancePolicy::SignAdversary { direction: None };
        let path = dir.path().join("s.json");
        std::fs::write(&path, f.to_json().unwrap()).unwrap();
        assert_eq!(cmd_run(&path, &dir.path().join("out")), EXIT_UNSTABLE);
        assert!(dir.path().join("out").join(format::TRACE_CSV).exists());
    }

    #[test]
    fn probe_reports_unit_kappa_for_identity_weights() {
        let s = Scenario::from_file(chain_scenario(&ChainSpec { horizon: 6, ..Default::default() })).unwrap();
        let out = probe(&s, 3).unwrap();
        assert_eq!(out.feasibility.pass_rate, 1.0);
        assert_eq!(out.sensitivity.unwrap().kappa_cd, 1.0);
    }
}
