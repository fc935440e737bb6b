use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fvicm::error::{FvicmError, Result};
use fvicm::io::{delimiter_for, ingest, run_analysis, write_dataset, PenaltyChoice, RunConfig};
use fvicm::lmm::LrtConfig;
use fvicm::qif::WorkingBasis;
use fvicm::sim::{
    generate_dataset, power_study, simulation_study, write_curve_tsv, write_estimation_tsv, write_power_tsv,
    SelectionPolicy, StudyConfig,
};

#[derive(Parser)]
#[command(name = "fvicm", version, about = "Varying index coefficient models for longitudinal G×E data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select and fit the model, write estimates and curves.
    Fit(AnalysisArgs),
    /// Fit, then test whether the interaction curve is linear.
    Test(AnalysisArgs),
    /// Monte Carlo estimation and curve recovery study.
    Simulate(SimulateArgs),
    /// Size and power of the linearity test along the nonlinearity dial.
    Power(PowerArgs),
}

#[derive(Args)]
struct AnalysisArgs {
    /// Input table (CSV, or TSV by extension).
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    knots: Option<usize>,
    /// Fixed penalty instead of the GCV search.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_basis)]
    basis: Option<WorkingBasis>,
    #[arg(long)]
    n_null: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct DesignArgs {
    /// TOML study configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    times: Option<usize>,
    #[arg(long)]
    maf: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pin the spline degree, knot count and penalty instead of selecting per replicate.
    #[arg(long, requires_all = ["knots", "lambda"])]
    degree: Option<usize>,
    #[arg(long, requires = "degree")]
    knots: Option<usize>,
    #[arg(long, requires = "degree")]
    lambda: Option<f64>,
    #[arg(long, default_value = "fvicm_out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    tau: Option<f64>,
    /// Write one simulated dataset in the input format to this path and stop.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct PowerArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    taus: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[arg(long, default_value_t = 2000)]
    n_null: usize,
}

fn parse_basis(s: &str) -> std::result::Result<WorkingBasis, String> {
    match s {
        "exchangeable" => Ok(WorkingBasis::Exchangeable),
        "ar1" => Ok(WorkingBasis::Ar1),
        "independence" => Ok(WorkingBasis::Independence),
        _ => Err(format!("unknown working basis `{s}` (exchangeable, ar1, independence)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => analysis(a, false),
        Command::Test(a) => analysis(a, true),
        Command::Simulate(a) => simulate(a),
        Command::Power(a) => power(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(2)
        }
    }
}

fn analysis(a: AnalysisArgs, test: bool) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.test_linearity = test;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(q) = a.degree {
        cfg.degrees = vec![q];
    }
    if let Some(k) = a.knots {
        cfg.knot_counts = vec![k];
    }
    if let Some(l) = a.lambda {
        cfg.penalty = PenaltyChoice::Fixed(l);
    }
    if let Some(b) = a.basis {
        cfg.basis = b;
    }
    if let Some(n) = a.n_null {
        cfg.n_null = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_standardize {
        cfg.standardize = false;
    }
    cfg.validate()?;
    let ingested = ingest(&a.data, cfg.standardize)?;
    let rep = run_analysis(&ingested, &cfg)?;
    println!(
        "q = {}, K = {}, lambda = {:.3e}, Q = {:.4}, MSE = {:.6}",
        rep.degree, rep.num_knots, rep.lambda, rep.q_value, rep.mse
    );
    for r in rep.parameters.iter().filter(|r| r.name.starts_with("beta")) {
        println!("{:<8} {:>10.5} (se {:.5}, p {:.3e})", r.name, r.estimate, r.se, r.p_value);
    }
    if let Some(t) = &rep.linearity {
        println!("linearity: LRT = {:.4}, p = {:.4}", t.lrt_obs, t.p_value);
    }
    println!("reports in {}", cfg.output_dir.display());
    Ok(())
}

fn study_config(d: &DesignArgs) -> Result<StudyConfig> {
    let mut cfg: StudyConfig = match &d.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| FvicmError::Config(e.to_string()))?,
        None => StudyConfig::default(),
    };
    if let Some(v) = d.subjects {
        cfg.design.n_subjects = v;
    }
    if let Some(v) = d.times {
        cfg.design.n_times = v;
    }
    if let Some(v) = d.maf {
        cfg.design.maf = v;
    }
    if let Some(v) = d.rho {
        cfg.design.rho = v;
    }
    if let Some(v) = d.reps {
        cfg.reps = v;
    }
    if let Some(v) = d.seed {
        cfg.seed = v;
    }
    if let (Some(degree), Some(num_knots), Some(lambda)) = (d.degree, d.knots, d.lambda) {
        cfg.policy = SelectionPolicy::Pinned { degree, num_knots, lambda };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = study_config(&a.design)?;
    if let Some(t) = a.tau {
        cfg.design.tau = t;
    }
    if let Some(path) = a.dataset {
        let data = generate_dataset(&cfg.design, cfg.seed)?;
        write_dataset(BufWriter::new(File::create(&path)?), &data, delimiter_for(&path))?;
        println!("wrote {} subjects to {}", data.n_subjects(), path.display());
        return Ok(());
    }
    let (est, curves) = simulation_study(&cfg)?;
    let out = &a.design.out;
    fs::create_dir_all(out)?;
    write_estimation_tsv(&mut BufWriter::new(File::create(out.join("estimation.tsv"))?), &est)?;
    write_curve_tsv(&mut BufWriter::new(File::create(out.join("curves_m0.tsv"))?), &curves.curve0)?;
    write_curve_tsv(&mut BufWriter::new(File::create(out.join("curves_m1.tsv"))?), &curves.curve1)?;
    write_estimation_tsv(&mut std::io::stdout().lock(), &est)?;
    println!("MISE m0 {:.6}, m1 {:.6}; {} failed", curves.mise0, curves.mise1, est.failed);
    Ok(())
}

fn power(a: PowerArgs) -> Result<()> {
    let cfg = study_config(&a.design)?;
    let lrt = LrtConfig {
        n_null: a.n_null,
        seed: cfg.seed,
        ..LrtConfig::default()
    };
    let study = power_study(&cfg, &a.taus, a.level, &lrt)?;
    let out = &a.design.out;
    fs::create_dir_all(out)?;
    write_power_tsv(&mut BufWriter::new(File::create(out.join("power.tsv"))?), &study)?;
    write_power_tsv(&mut std::io::stdout().lock(), &study)?;
    Ok(())
}
