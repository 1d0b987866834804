mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{pool_config, simulate_config, ConfigError, FileConfig, RunSection, ShrinkSection};
use seqgee::harness::{run_experiment, Report, CSV_HEADER};
use seqgee::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "seqgee", version, about = "Sequential GEE estimation with adaptive shrinkage and D-optimal recruitment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicate a synthetic design.
    Simulate(SimulateArgs),
    /// Run the sequential procedure on a CSV pool.
    RunPool(PoolArgs),
    /// Print the aggregate table of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args, Default)]
struct Common {
    /// Config file with [run], [shrinkage] and [schema] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// oracle, ase-d, ase-r or gee
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    conf_level: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fit_structure: Option<String>,
    #[arg(long)]
    fixed_dispersion: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    rate_alpha: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// continuous or logistic
    #[arg(long)]
    scenario: Option<String>,
    /// Error correlation (continuous) or response correlation (logistic).
    #[arg(long)]
    alpha: Option<f64>,
    /// ind, exch or ar1
    #[arg(long)]
    structure: Option<String>,
    /// Number of zero coefficients.
    #[arg(long)]
    pk: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args)]
struct PoolArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Schema file; its [schema] section maps CSV columns.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    standardize: bool,
    /// identity or logit
    #[arg(long)]
    link: Option<String>,
}

impl Common {
    fn run_flags(&self) -> RunSection {
        RunSection {
            method: self.method.clone(),
            d: self.d,
            reps: self.reps,
            seed: self.seed,
            n0: self.n0,
            conf_level: self.conf_level,
            out: self.out.clone(),
            fit_structure: self.fit_structure.clone(),
            fixed_dispersion: self.fixed_dispersion,
            ..Default::default()
        }
    }

    fn shrink_flags(&self) -> ShrinkSection {
        ShrinkSection {
            gamma: self.gamma,
            delta: self.delta,
            theta: self.theta,
            epsilon: self.epsilon,
            rate_alpha: self.rate_alpha,
        }
    }

    fn file(&self) -> Result<FileConfig, ConfigError> {
        match &self.config {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }
}

enum Failure {
    Config(String),
    Data(String),
    Numerical(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::Dimension(_) => Failure::Config(e.to_string()),
            e if e.is_numerical() => Failure::Numerical(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

fn execute(config: seqgee::harness::ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let report = run_experiment(&config)?;
    report.write_dir(out)?;
    print_table(&report);
    if report.succeeded == 0 {
        let first = report.failures.first().map(|f| f.message.clone()).unwrap_or_default();
        return Err(Failure::Numerical(format!("all {} replications failed; first: {first}", report.replications)));
    }
    Ok(())
}

fn print_table(report: &Report) {
    let row = report.csv_row();
    let widths: Vec<usize> = CSV_HEADER.iter().zip(&row).map(|(h, v)| h.len().max(v.len())).collect();
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
    };
    println!("{}", line(CSV_HEADER.to_vec()));
    println!("{}", line(row.iter().map(|s| s.as_str()).collect()));
    if !report.failures.is_empty() {
        println!("failed replications: {}", report.failures.len());
        for f in &report.failures {
            println!("  #{} (seed {}): {}", f.index, f.seed, f.message);
        }
    }
    if report.selection_counts.iter().any(|&c| c > 0) && report.coverage.is_none() {
        println!("selection counts: {:?}", report.selection_counts);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(a) => {
            let file = a.common.file()?;
            let mut run = file.run;
            let mut flags = a.common.run_flags();
            flags.scenario = a.scenario;
            flags.alpha = a.alpha;
            flags.structure = a.structure;
            flags.pk = a.pk;
            flags.pool_size = a.pool_size;
            run.overlay(&flags);
            let mut shrink = file.shrinkage;
            shrink.overlay(&a.common.shrink_flags());
            let (config, out) = simulate_config(&run, &shrink)?;
            execute(config, &out)
        }
        Command::RunPool(a) => {
            let file = a.common.file()?;
            let mut schema = file.schema;
            if let Some(p) = &a.schema {
                let s = FileConfig::load(p)?.schema;
                schema = config::SchemaSection {
                    cluster: s.cluster.or(schema.cluster),
                    order: s.order.or(schema.order),
                    response: s.response.or(schema.response),
                    covariates: s.covariates.or(schema.covariates),
                    standardize: s.standardize.or(schema.standardize),
                    intercept: s.intercept.or(schema.intercept),
                };
            }
            let mut run = file.run;
            let mut flags = a.common.run_flags();
            flags.data = a.data;
            flags.standardize = a.standardize.then_some(true);
            flags.link = a.link;
            run.overlay(&flags);
            let mut shrink = file.shrinkage;
            shrink.overlay(&a.common.shrink_flags());
            let (config, out) = pool_config(&run, &shrink, &schema)?;
            execute(config, &out)
        }
        Command::Report { input } => {
            let path = input.join("report.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
            let report: Report = serde_json::from_str(&text)
                .map_err(|e| Failure::Data(format!("{} is not a report: {e}", path.display())))?;
            print_table(&report);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
