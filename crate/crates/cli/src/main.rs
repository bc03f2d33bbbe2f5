//! Command-line front end: estimate, ci and test on survey CSV files, and
//! simulate for scenario files.
//!
//! Exit codes: 0 success, 2 input/parse errors, 3 solver non-convergence,
//! 4 configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use svygel::error::Error;
use svygel::estfun::{moment_root, SystemSpec};
use svygel::gel::{FitMethod, RhoFamily};
use svygel::inference::{ci_invert, gel_ratio, CalibrationRule, InferenceOptions};
use svygel::io::{load_sample_csv, ColumnMap};
use svygel::population::{rescale_weights, SurveySample};
use svygel::simulation::{run_scenario, write_tables, Scenario};
use svygel::variance::{bootstrap, variance_report, OmegaMethod, VarianceOptions};

#[derive(Parser)]
#[command(name = "svygel", version, about = "Design-based inequality inference for survey data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimates with design-based standard errors.
    Estimate(AnalysisArgs),
    /// Confidence intervals by ratio-test inversion (optionally bootstrap).
    Ci(CiArgs),
    /// Ratio test of a point null hypothesis.
    Test(TestArgs),
    /// Run a Monte Carlo scenario file and write the result tables.
    Simulate(SimulateArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("variant").required(true).args(["augmented", "conventional"])))]
struct AnalysisArgs {
    /// Input CSV (columns: z, weight|pi, optional stratum/cluster).
    #[arg(long, short = 'i')]
    input: PathBuf,

    /// Measure: gini | lorenz | quantile_share | shares (the four
    /// quarter-cells workflow).
    #[arg(long, default_value = "shares")]
    measure: String,

    /// Quantile level for lorenz.
    #[arg(long)]
    tau: Option<f64>,

    /// Lower quantile level for quantile_share.
    #[arg(long)]
    tau1: Option<f64>,

    /// Upper quantile level for quantile_share.
    #[arg(long)]
    tau2: Option<f64>,

    /// Use the augmented estimating functions.
    #[arg(long)]
    augmented: bool,

    /// Use the conventional (unaugmented) estimating functions.
    #[arg(long)]
    conventional: bool,

    /// GEL family / method: el | et | cu | gmm.
    #[arg(long, default_value = "el")]
    family: String,

    /// Omega estimator: auto | pps_wr | hajek | stratified | cluster.
    #[arg(long, default_value = "auto")]
    omega: String,

    /// Perturbation draws for the Jacobian estimate.
    #[arg(long = "gamma-B", default_value_t = 200)]
    gamma_b: usize,

    /// Bootstrap replicates (for bootstrap intervals and SEs).
    #[arg(long = "boot-B", default_value_t = 500)]
    boot_b: usize,

    /// Rescale weights to sum to n before the analysis (forces the
    /// with-replacement Omega form under auto).
    #[arg(long)]
    rescale_weights: bool,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Worker threads for replicate-level parallelism.
    #[arg(long, default_value_t = 0)]
    jobs: usize,

    /// Output JSON path (stdout when omitted).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    base: AnalysisArgs,

    /// Nominal coverage level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,

    /// Also report bootstrap normal and percentile intervals.
    #[arg(long)]
    with_bootstrap: bool,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    base: AnalysisArgs,

    /// Null hypothesis, e.g. "theta=0.1".
    #[arg(long)]
    null: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long, short = 's')]
    scenario: PathBuf,

    /// Directory for the output tables.
    #[arg(long, short = 'd', default_value = "tables")]
    output_dir: PathBuf,

    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Estimate(args) => run_analysis(args, Mode::Estimate),
        Command::Ci(args) => {
            let mode = Mode::Ci { level: args.level, with_bootstrap: args.with_bootstrap };
            run_analysis(args.base, mode)
        }
        Command::Test(args) => {
            let mode = match parse_null(&args.null) {
                Ok(theta0) => Mode::Test { theta0 },
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(4);
                }
            };
            run_analysis(args.base, mode)
        }
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Csv { .. } | Error::Io(_) => 2,
        Error::NonConvergence(_)
        | Error::RootNotBracketed(_)
        | Error::DomainViolation
        | Error::Singular(_) => 3,
        _ => 4,
    }
}

fn parse_null(raw: &str) -> Result<f64, String> {
    let rest = raw
        .trim()
        .strip_prefix("theta=")
        .ok_or_else(|| format!("cannot parse null `{raw}`; expected theta=<value>"))?;
    rest.trim().parse::<f64>().map_err(|_| format!("cannot parse null value `{rest}`"))
}

enum Mode {
    Estimate,
    Ci { level: f64, with_bootstrap: bool },
    Test { theta0: f64 },
}

fn parse_family(raw: &str) -> Result<FitMethod, Error> {
    match raw {
        "el" => Ok(FitMethod::Gel(RhoFamily::El)),
        "et" => Ok(FitMethod::Gel(RhoFamily::Et)),
        "cu" => Ok(FitMethod::Gel(RhoFamily::Cu)),
        "gmm" => Ok(FitMethod::Gmm),
        other => Err(Error::Config(format!(
            "unknown family `{other}`; valid: el, et, cu, gmm"
        ))),
    }
}

fn parse_omega(raw: &str) -> Result<OmegaMethod, Error> {
    match raw {
        "auto" => Ok(OmegaMethod::Auto),
        "pps_wr" => Ok(OmegaMethod::PpsWr),
        "hajek" => Ok(OmegaMethod::Hajek),
        "stratified" => Ok(OmegaMethod::Stratified),
        "cluster" => Ok(OmegaMethod::ClusterSelfWeighting),
        other => Err(Error::Config(format!(
            "unknown omega `{other}`; valid: auto, pps_wr, hajek, stratified, cluster"
        ))),
    }
}

fn measure_specs(args: &AnalysisArgs) -> Result<Vec<SystemSpec>, Error> {
    let augmented = args.augmented;
    match args.measure.as_str() {
        "gini" => Ok(vec![SystemSpec::gini(augmented)]),
        "lorenz" => {
            let tau = args
                .tau
                .ok_or_else(|| Error::Config("lorenz needs --tau".into()))?;
            Ok(vec![SystemSpec::lorenz(tau, augmented)?])
        }
        "quantile_share" => {
            let t1 = args
                .tau1
                .ok_or_else(|| Error::Config("quantile_share needs --tau1".into()))?;
            let t2 = args
                .tau2
                .ok_or_else(|| Error::Config("quantile_share needs --tau2".into()))?;
            Ok(vec![SystemSpec::quantile_share(t1, t2, augmented)?])
        }
        "shares" => [0.0, 0.25, 0.5, 0.75]
            .iter()
            .map(|&a| SystemSpec::quantile_share(a, a + 0.25, augmented))
            .collect(),
        other => Err(Error::Config(format!(
            "unknown measure `{other}`; valid: gini, lorenz, quantile_share, shares"
        ))),
    }
}

#[derive(Serialize)]
struct FitDiag {
    converged: bool,
    objective: f64,
    inner_iters: usize,
    outer_evals: usize,
    n: usize,
}

#[derive(Serialize)]
struct CellReport {
    measure: serde_json::Value,
    estimate: f64,
    se: f64,
    omega_method: OmegaMethod,
    gamma_b: usize,
    fit: FitDiag,
    #[serde(skip_serializing_if = "Option::is_none")]
    interval: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct Report {
    config: serde_json::Value,
    results: Vec<CellReport>,
}

fn run_analysis(args: AnalysisArgs, mode: Mode) -> Result<(), Error> {
    svygel::set_parallelism(args.jobs);
    let method = parse_family(&args.family)?;
    let mut omega = parse_omega(&args.omega)?;
    let specs = measure_specs(&args)?;

    let mut sample: SurveySample = load_sample_csv(&args.input, &ColumnMap::default())?;
    if args.rescale_weights {
        sample = rescale_weights(&sample);
        if omega == OmegaMethod::Auto {
            omega = OmegaMethod::PpsWr;
        }
    }

    let var_opts = VarianceOptions { omega, gamma_b: args.gamma_b, seed: args.seed, ..Default::default() };
    let infer_opts =
        InferenceOptions { calibration: CalibrationRule::Auto, variance: var_opts.clone() };

    let mut results = Vec::new();
    for spec in &specs {
        let system = spec.fit(&sample)?;
        let estimate = moment_root(&sample, &system)?;
        let report = variance_report(&sample, &system, &[estimate], &var_opts)?;

        let fit = match method {
            FitMethod::Gel(f) => svygel::gel::fit_gel(&sample, &system, f, Some(&[estimate]))?,
            FitMethod::Gmm => svygel::gel::fit_gmm(&sample, &system, Some(&[estimate]))?,
        };

        let mut cell = CellReport {
            measure: serde_json::to_value(spec).map_err(|e| Error::Config(e.to_string()))?,
            estimate,
            se: report.se[0],
            omega_method: report.omega_method,
            gamma_b: report.resample_b,
            fit: FitDiag {
                converged: fit.converged,
                objective: fit.objective,
                inner_iters: fit.inner_iters,
                outer_evals: fit.outer_evals,
                n: sample.n(),
            },
            interval: None,
            bootstrap: None,
            test: None,
        };

        match &mode {
            Mode::Estimate => {}
            Mode::Ci { level, with_bootstrap } => {
                let ci = ci_invert(&sample, &system, method, *level, &infer_opts)?;
                cell.interval =
                    Some(serde_json::to_value(&ci).map_err(|e| Error::Config(e.to_string()))?);
                if *with_bootstrap {
                    let boot = bootstrap(&sample, spec, args.boot_b, *level, args.seed)?;
                    cell.bootstrap = Some(serde_json::json!({
                        "se": boot.se,
                        "normal": boot.normal,
                        "percentile": boot.percentile,
                        "replicates": boot.used,
                        "failed": boot.failed,
                    }));
                }
            }
            Mode::Test { theta0 } => {
                let rt = gel_ratio(&sample, &system, method, &[*theta0], &infer_opts)?;
                cell.test = Some(serde_json::json!({
                    "null": theta0,
                    "statistic": rt.statistic,
                    "df": rt.df,
                    "p_value": rt.p_value,
                    "calibration": rt.calibration,
                }));
            }
        }
        results.push(cell);
    }

    let config = serde_json::json!({
        "input": args.input,
        "measure": args.measure,
        "tau": args.tau,
        "tau1": args.tau1,
        "tau2": args.tau2,
        "augmented": args.augmented,
        "family": args.family,
        "omega": args.omega,
        "gamma_b": args.gamma_b,
        "boot_b": args.boot_b,
        "rescale_weights": args.rescale_weights,
        "seed": args.seed,
        "level": match &mode { Mode::Ci { level, .. } => Some(*level), _ => None },
        "null": match &mode { Mode::Test { theta0 } => Some(*theta0), _ => None },
    });
    let report = Report { config, results };
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    match &args.output {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<(), Error> {
    svygel::set_parallelism(args.jobs);
    let raw = std::fs::read_to_string(&args.scenario)?;
    let scenario: Scenario =
        serde_json::from_str(&raw).map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
    scenario.validate()?;
    eprintln!(
        "running design {} with {} replicates ...",
        scenario.design.label(),
        scenario.replicates
    );
    let result = run_scenario(&scenario)?;
    write_tables(&result, &args.output_dir)?;
    eprintln!(
        "done in {:.1}s -> {}",
        result.meta.runtime_seconds,
        args.output_dir.display()
    );
    Ok(())
}
