//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for invalid input, 2 for runtime failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::census::{default_profiles, generate_synthetic_census, load_census, load_profiles};
use crate::closed_form::{cluster_size, power, power_curve, power_plateau_limit, write_curve_csv, PowerInputs};
use crate::engine::{
    closed_form_rows, compare_report, read_results, run_study, FormulaParams, RunOptions, Scale, StudyConfig,
};
use crate::error::{Error, Result};
use crate::glmm::{fit_random_intercept, Level};
use crate::randomization::{build_pool, DEFAULT_SMD_THRESHOLD};

#[derive(Debug, Parser)]
#[command(name = "crtsim", version, about = "Cluster randomized trial planning: census, randomization, power and simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic baseline census from health-area profiles.
    GenerateCensus(GenerateCensusArgs),
    /// Build a covariate-constrained randomization pool.
    BuildPool(BuildPoolArgs),
    /// Closed-form power for a two-arm cluster trial.
    PowerFormula(PowerFormulaArgs),
    /// Run a simulation study from a JSON config.
    Simulate(SimulateArgs),
    /// Join simulated rejection rates with closed-form power.
    Compare(CompareArgs),
    /// Estimate the ICC of baseline coverage with a random-intercept logistic model.
    FitIcc(FitIccArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["profiles", "default"])))]
pub struct GenerateCensusArgs {
    /// JSON file with 12 health-area profiles.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Use the built-in profiles.
    #[arg(long)]
    pub default: bool,
    #[arg(long)]
    pub seed: u64,
    /// Census CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildPoolArgs {
    #[arg(long)]
    pub census: PathBuf,
    #[arg(long)]
    pub n_per_arm: usize,
    /// Candidate draws to evaluate.
    #[arg(long)]
    pub attempts: usize,
    /// Maximum average |SMD| of an accepted draw.
    #[arg(long, default_value_t = DEFAULT_SMD_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub seed: u64,
    /// Pool CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("size").required(true).args(["m", "villages_per_arm"])))]
pub struct PowerFormulaArgs {
    /// Children per cluster.
    #[arg(long)]
    pub m: Option<f64>,
    /// Villages per arm; converted to children per cluster.
    #[arg(long)]
    pub villages_per_arm: Option<usize>,
    #[arg(long, default_value_t = crate::closed_form::DEFAULT_CHILDREN_PER_VILLAGE)]
    pub children_per_village: f64,
    /// Health areas the villages are spread over (both arms).
    #[arg(long, default_value_t = crate::closed_form::DEFAULT_CLUSTERS)]
    pub n_clusters: usize,
    /// Clusters per arm.
    #[arg(long, default_value_t = 6)]
    pub c: usize,
    #[arg(long)]
    pub pi0: f64,
    #[arg(long)]
    pub pi1: f64,
    #[arg(long)]
    pub icc: f64,
    /// One-sided level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Also write a power-vs-cluster-size CSV (m from 1 to 10^6).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Use desk-scale replicate budgets for anything the config leaves unset.
    #[arg(long)]
    pub desk_scale: bool,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Results CSV from `simulate`.
    #[arg(long)]
    pub sim: PathBuf,
    /// Health-area level ICC for the formula.
    #[arg(long, default_value_t = 0.048)]
    pub icc: f64,
    #[arg(long, default_value_t = 6)]
    pub c: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = crate::closed_form::DEFAULT_CHILDREN_PER_VILLAGE)]
    pub children_per_village: f64,
    #[arg(long, default_value_t = crate::closed_form::DEFAULT_CLUSTERS)]
    pub n_clusters: usize,
    /// Villages per arm to evaluate the formula at (default: those simulated).
    #[arg(long, value_delimiter = ',')]
    pub villages_per_arm: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitIccArgs {
    #[arg(long)]
    pub census: PathBuf,
    /// `village` or `health_zone`.
    #[arg(long, default_value = "village")]
    pub level: Level,
    /// Gauss–Hermite nodes per cluster.
    #[arg(long, default_value_t = 21)]
    pub n_quad: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn generate_census(args: &GenerateCensusArgs) -> Result<()> {
    let profiles = match &args.profiles {
        Some(p) => load_profiles(p)?,
        None => default_profiles(),
    };
    let census = generate_synthetic_census(&profiles, args.seed)?;
    census.write_csv(create(&args.out)?)?;
    println!("wrote {} villages in {} health areas to {}", census.villages().len(), census.n_areas(), args.out.display());
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?.install(f)
}

fn build_pool_cmd(args: &BuildPoolArgs) -> Result<()> {
    let census = load_census(&args.census)?.analysis_view()?;
    let pool = with_workers(args.workers, || build_pool(&census, args.n_per_arm, args.attempts, args.threshold, args.seed))?;
    pool.write_csv(&census, create(&args.out)?)?;
    println!(
        "accepted {} of {} draws ({} infeasible), acceptance rate {:.4}",
        pool.draws.len(),
        pool.n_attempted,
        pool.n_infeasible,
        pool.acceptance_rate()
    );
    Ok(())
}

/// Cluster sizes for the plotted curve: about 20 points per decade up to 10^6.
pub fn curve_sizes() -> Vec<f64> {
    let mut sizes: Vec<f64> = (0..=120).map(|k| 10f64.powf(k as f64 / 20.0).round()).collect();
    sizes.dedup();
    sizes
}

fn power_formula(args: &PowerFormulaArgs) -> Result<()> {
    let m = match (args.m, args.villages_per_arm) {
        (Some(m), None) => m,
        (None, Some(v)) => cluster_size(v, args.children_per_village, args.n_clusters),
        _ => return Err(Error::invalid("give exactly one of --m and --villages-per-arm")),
    };
    let inputs = PowerInputs { m, c: args.c, pi0: args.pi0, pi1: args.pi1, icc: args.icc, alpha: args.alpha };
    println!("{:.3}", power(&inputs)?);
    if let Some(path) = &args.curve {
        let curve = power_curve(&inputs, &curve_sizes())?;
        write_curve_csv(&inputs, &curve, create(path)?)?;
        let limit = power_plateau_limit(args.c, args.pi0, args.pi1, args.icc, args.alpha)?;
        if limit.unbounded {
            eprintln!("no plateau: power tends to 1 as m grows");
        } else {
            eprintln!("plateau limit {:.4}", limit.power);
        }
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = StudyConfig::load(&args.config)?;
    if args.desk_scale {
        config.scale = Scale::Desk;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::invalid("no output directory: pass --out or set output_dir"))?;
    let study = config.resolve()?;
    let census = study.census.load()?;
    let report = run_study(&study, &census, &RunOptions { workers: args.workers, output_dir: Some(out.clone()) })?;
    println!("{} scenarios written to {}", report.scenarios.len(), out.display());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let f = File::open(&args.sim).map_err(|e| Error::io(&args.sim, e))?;
    let summaries = read_results(f)?;
    let mut keys: Vec<(usize, f64, f64)> = Vec::new();
    for s in &summaries {
        let sizes = if args.villages_per_arm.is_empty() { vec![s.n_per_arm] } else { args.villages_per_arm.clone() };
        for n in sizes {
            if !keys.iter().any(|k| k.0 == n && k.1 == s.cer && k.2 == s.delta) {
                keys.push((n, s.cer, s.delta));
            }
        }
    }
    let params = FormulaParams {
        icc_h: args.icc,
        c: args.c,
        alpha: args.alpha,
        children_per_village: args.children_per_village,
        n_clusters: args.n_clusters,
    };
    let table = compare_report(&summaries, &closed_form_rows(&keys, &params)?);
    for id in &table.unmatched_simulations {
        eprintln!("warning: no closed-form row for simulated scenario {id}");
    }
    for (n, cer, delta) in &table.unmatched_formula {
        eprintln!("warning: no simulated scenario for n_per_arm={n} cer={cer} delta={delta}");
    }
    table.write_csv(create(&args.out)?)?;
    println!("{} rows written to {}", table.rows.len(), args.out.display());
    Ok(())
}

fn fit_icc(args: &FitIccArgs) -> Result<()> {
    let census = load_census(&args.census)?.analysis_view()?;
    let fit = fit_random_intercept(&census, args.level, args.n_quad)?;
    let json = serde_json::to_string_pretty(&fit).expect("fit serializes");
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateCensus(a) => generate_census(a),
        Command::BuildPool(a) => build_pool_cmd(a),
        Command::PowerFormula(a) => power_formula(a),
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::FitIcc(a) => fit_icc(a),
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
