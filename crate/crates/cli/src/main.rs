//! `vlaplace`: fit generative models, compute GLM evidence, simulate data and
//! run the evidence experiment from the command line.
//!
//! Exit status is 0 on success, 1 on input or validation errors and 2 when a
//! fit does not converge or a check fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use vlaplace::experiments::{run_figure1, simulate, simulate_glm, write_figure1, Figure1Config};
use vlaplace::glm::{exact_log_evidence, log_evidence_by_quadrature, pseudo_evidence_offset, pseudo_free_energy_limit};
use vlaplace::gradcheck::{check_gradients, GradientCheckOptions, GRADIENT_TOLERANCE};
use vlaplace::io::{self, ReportFile};
use vlaplace::optimizer::{fit, FitOptions, Init};
use vlaplace::quadrature::QuadratureOptions;
use vlaplace::Error;

#[derive(Parser)]
#[command(name = "vlaplace", version, about = "Variational Laplace model inversion")]
struct Cli {
    /// Directory for reports and generated files.
    #[arg(long, global = true, env = "VLAPLACE_OUT_DIR", default_value = "vlaplace-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to data and write a JSON report.
    Fit(FitArgs),
    /// Exact log evidence and pseudo free-energy limit of a GLM problem.
    Evidence(EvidenceArgs),
    /// Simulate data from a model file, or a random GLM problem.
    Simulate(SimulateArgs),
    /// Compare log evidence with the pseudo free-energy limit over a grid.
    Figure1(Figure1Args),
    /// Compare analytic derivatives with finite differences.
    CheckGradients(CheckArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; defaults to `<out-dir>/<model stem>.fit.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = FitOptions::default().max_iter)]
    max_iter: usize,
    /// Gradient tolerance, relative to 1 + |I|.
    #[arg(long, default_value_t = FitOptions::default().grad_tol)]
    grad_tol: f64,
    /// Free-energy change tolerance.
    #[arg(long, default_value_t = FitOptions::default().fe_tol)]
    fe_tol: f64,
    /// `prior-mean` or a comma-separated vector such as `[0.5, -1]`.
    #[arg(long, default_value = "prior-mean", value_parser = parse_init)]
    init: Init,
    /// Outer sweeps for models with hyperpriors.
    #[arg(long, default_value_t = FitOptions::default().max_sweeps)]
    max_sweeps: usize,
    /// Relative change in hyperparameter means counted as converged.
    #[arg(long, default_value_t = FitOptions::default().precision_tol)]
    precision_tol: f64,
}

#[derive(Args)]
struct EvidenceArgs {
    /// GLM problem file (TOML with `design`, `data` and optional `noise_basis`).
    #[arg(long)]
    problem: PathBuf,
    /// Also evaluate the evidence by adaptive quadrature over log λ.
    #[arg(long)]
    quadrature: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to simulate observations from (writes CSV).
    #[arg(long, conflicts_with_all = ["n_theta", "n_y"])]
    model: Option<PathBuf>,
    /// Parameters of a random GLM problem (writes TOML).
    #[arg(long, requires = "n_y")]
    n_theta: Option<usize>,
    #[arg(long, requires = "n_theta")]
    n_y: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Figure1Args {
    /// Grid configuration; the default grid when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Observations; simulated from the model when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = GradientCheckOptions::default().draws)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GRADIENT_TOLERANCE)]
    tolerance: f64,
}

fn parse_init(text: &str) -> Result<Init, String> {
    if text == "prior-mean" {
        return Ok(Init::PriorMean);
    }
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let values = inner
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad init entry {v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Init::Vector(DVector::from_vec(values)))
}

enum Failure {
    Input(Error),
    Numerical(Error),
    Unsuccessful(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericalFailure(_) | Error::Evaluation { .. } => Failure::Numerical(e),
            _ => Failure::Input(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn cmd_fit(args: &FitArgs, out_dir: &Path) -> Outcome {
    let model = io::load_model(&args.model)?;
    let data = io::load_data(&args.data, model.family.data_columns())?;
    let options = FitOptions {
        max_iter: args.max_iter,
        grad_tol: args.grad_tol,
        fe_tol: args.fe_tol,
        init: args.init.clone(),
        max_sweeps: args.max_sweeps,
        precision_tol: args.precision_tol,
    };
    let report = fit(&model, &data, &options)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir.join(format!("{}.fit.json", stem(&args.model))));
    write_file(&out, &ReportFile::new(&model, &report).to_json()?)?;

    let score = match report.corrected_free_energy {
        Some(f) if report.pseudo_free_energy => format!("F~ (pseudo) = {f}"),
        Some(f) => format!("F~ = {f}"),
        None => format!("F = {}", report.free_energy),
    };
    println!(
        "{}: converged={} iterations={} {score} report={}",
        model.family.name(),
        report.converged,
        report.iterations,
        out.display()
    );
    if report.converged {
        Ok(())
    } else {
        Err(Failure::Unsuccessful("fit did not converge".into()))
    }
}

fn cmd_evidence(args: &EvidenceArgs) -> Outcome {
    let problem = io::load_glm(&args.problem)?;
    let log_evidence = exact_log_evidence(&problem)?;
    println!("log_evidence = {log_evidence}");
    if args.quadrature {
        println!(
            "log_evidence_quadrature = {}",
            log_evidence_by_quadrature(&problem, QuadratureOptions::default())?
        );
    }
    println!("f_infinity = {}", pseudo_free_energy_limit(&problem)?);
    println!(
        "f_infinity_minus_log_evidence = {}",
        pseudo_evidence_offset(problem.n_y(), problem.n_theta())
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, out_dir: &Path) -> Outcome {
    let out_name = |ext: &str| {
        args.out
            .clone()
            .unwrap_or_else(|| out_dir.join(format!("simulated-{}.{ext}", args.seed)))
    };
    if let Some(path) = &args.model {
        let model = io::load_model(path)?;
        let sim = simulate(&model, args.seed)?;
        let out = out_name("csv");
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        io::write_data(&out, &sim.data)?;
        let theta: Vec<String> = sim.theta_true.iter().map(f64::to_string).collect();
        println!("theta_true = [{}] data={}", theta.join(", "), out.display());
        return Ok(());
    }
    let (Some(n_theta), Some(n_y)) = (args.n_theta, args.n_y) else {
        return Err(Failure::Input(Error::Domain("simulate needs --model or --n-theta with --n-y".into())));
    };
    let sim = simulate_glm(n_theta, n_y, args.seed)?;
    let out = out_name("toml");
    write_file(&out, &io::glm_to_toml(&sim.problem)?)?;
    println!("problem={}", out.display());
    Ok(())
}

fn cmd_figure1(args: &Figure1Args, out_dir: &Path) -> Outcome {
    let config = match &args.config {
        Some(path) => io::load_figure1_config(path)?,
        None => Figure1Config::default(),
    };
    let (rows, summary) = run_figure1(&config)?;
    let dir = out_dir.join("figure1");
    write_figure1(&dir, &rows, &summary)?;
    for (name, bucket) in [("small", &summary.small), ("big", &summary.big)] {
        if let Some(b) = bucket {
            println!(
                "{name} n_y in [{}, {}]: slope = {} intercept = {}",
                b.n_y_min, b.n_y_max, b.slope, b.intercept
            );
        }
    }
    println!(
        "rows = {} failed = {} max_cell_std = {:e} output={}",
        summary.rows,
        summary.failed_rows,
        summary.max_cell_std,
        dir.display()
    );
    if summary.failed_rows > 0 {
        return Err(Failure::Unsuccessful(format!("{} rows failed", summary.failed_rows)));
    }
    Ok(())
}

fn cmd_check_gradients(args: &CheckArgs) -> Outcome {
    let model = io::load_model(&args.model)?;
    let data = match &args.data {
        Some(path) => io::load_data(path, model.family.data_columns())?,
        None => simulate(&model, args.seed)?.data,
    };
    let options = GradientCheckOptions {
        draws: args.draws,
        seed: args.seed,
        tolerance: args.tolerance,
        ..GradientCheckOptions::default()
    };
    let report = check_gradients(&model, &data, &options)?;
    println!("max_jacobian_error = {:e}", report.max_jacobian_error);
    println!("max_gradient_error = {:e}", report.max_gradient_error);
    match report.max_hessian_error {
        Some(e) => println!("max_hessian_error = {e:e}"),
        None => println!("max_hessian_error = n/a (Gauss-Newton Hessian)"),
    }
    if report.passed() {
        println!("passed (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        Err(Failure::Unsuccessful(format!("derivative check failed (tolerance {:e})", report.tolerance)))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args, &cli.out_dir),
        Command::Evidence(args) => cmd_evidence(args),
        Command::Simulate(args) => cmd_simulate(args, &cli.out_dir),
        Command::Figure1(args) => cmd_figure1(args, &cli.out_dir),
        Command::CheckGradients(args) => cmd_check_gradients(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Unsuccessful(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
