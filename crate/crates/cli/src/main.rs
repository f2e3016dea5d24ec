use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spatial_bias_cli::commands;
use spatial_bias_cli::config::RunConfig;
use spatial_bias_cli::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "spatial-bias",
    version,
    about = "Bias of treatment-effect estimates under spatial interference and confounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replicates per Monte Carlo cell.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "SPATIALBIAS_OUT")]
    output: Option<PathBuf>,
    /// Input CSV (point data, or results.json for `tables`).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Treat coordinates as lon/lat degrees and use great-circle distances.
    #[arg(long, global = true)]
    geodesic: bool,
    #[arg(long, global = true)]
    col_x: Option<String>,
    #[arg(long, global = true)]
    col_y: Option<String>,
    #[arg(long, global = true)]
    col_outcome: Option<String>,
    #[arg(long, global = true)]
    col_treatment: Option<String>,
    #[arg(long, global = true)]
    col_confounder: Option<String>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one data set from a model and write data.csv and spec.json.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        /// Model terms, e.g. T+I or M6.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        weights: Option<String>,
    },
    /// Write the weight matrix of the input locations to weights.csv.
    Weights {
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Closed-form interference bias for the input treatment, to bias.json.
    Bias {
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        beta_at: Option<f64>,
        #[arg(long)]
        error_range: Option<f64>,
        /// Use the literal ratio without centring the treatment.
        #[arg(long)]
        no_intercept: bool,
    },
    /// Fit one model to the input data, to fit.json.
    Fit {
        #[arg(long)]
        model: Option<String>,
        /// ols, gls-known or gls-ml.
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        error_range: Option<f64>,
    },
    /// Run the Monte Carlo cells of a table.
    Experiment {
        /// T1, T2, T3, T4, B1 or B2.
        #[arg(long)]
        table: Option<String>,
        /// Keep only cells whose id contains this text.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        estimator: Option<String>,
        /// Keep one treatment draw for all replicates.
        #[arg(long)]
        fixed_treatment: bool,
        /// Keep one set of locations for all replicates.
        #[arg(long)]
        fixed_locations: bool,
    },
    /// Re-render results.json as results.csv and tables.md.
    Tables,
    /// Fit the seven-model comparison to observed data.
    Apply {
        /// Weight schemes, e.g. knn4,dist50.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<String>,
    },
}

fn configure(cli: &Cli) -> CliResult<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.seed = g.seed.or(cfg.seed);
    cfg.replicates = g.replicates.or(cfg.replicates);
    cfg.threads = g.threads.or(cfg.threads);
    cfg.output = g.output.clone().or(cfg.output);
    cfg.data.input = g.input.clone().or(cfg.data.input);
    if g.geodesic {
        cfg.data.geodesic = Some(true);
    }
    let d = &mut cfg.data;
    for (flag, key) in [
        (&g.col_x, &mut d.x),
        (&g.col_y, &mut d.y),
        (&g.col_outcome, &mut d.outcome),
        (&g.col_treatment, &mut d.treatment),
        (&g.col_confounder, &mut d.confounder),
    ] {
        if flag.is_some() {
            key.clone_from(flag);
        }
    }
    match &cli.command {
        Command::Simulate { n, model, weights } => {
            let s = &mut cfg.simulate;
            s.n = n.unwrap_or(s.n);
            if let Some(m) = model {
                s.model.clone_from(m);
            }
            if let Some(w) = weights {
                s.weights.clone_from(w);
            }
        }
        Command::Weights { scheme } => {
            if let Some(s) = scheme {
                cfg.weights.scheme.clone_from(s);
            }
        }
        Command::Bias { weights, beta_at, error_range, no_intercept } => {
            let b = &mut cfg.bias;
            if let Some(w) = weights {
                b.weights.clone_from(w);
            }
            b.beta_at = beta_at.unwrap_or(b.beta_at);
            b.error_range = error_range.or(b.error_range);
            if *no_intercept {
                b.intercept = false;
            }
        }
        Command::Fit { model, estimator, weights, error_range } => {
            let f = &mut cfg.fit;
            for (flag, key) in [(model, &mut f.model), (estimator, &mut f.estimator), (weights, &mut f.weights)] {
                if let Some(v) = flag {
                    key.clone_from(v);
                }
            }
            f.error_range = error_range.or(f.error_range);
        }
        Command::Experiment { table, filter, estimator, fixed_treatment, fixed_locations } => {
            let e = &mut cfg.experiment;
            e.table = table.clone().or(e.table.take());
            e.filter = filter.clone().or(e.filter.take());
            e.estimator = estimator.clone().or(e.estimator.take());
            if *fixed_treatment {
                e.redraw_treatment = Some(false);
            }
            if *fixed_locations {
                e.redraw_locations = Some(false);
            }
        }
        Command::Tables => {}
        Command::Apply { weights } => {
            if !weights.is_empty() {
                cfg.apply.weights.clone_from(weights);
            }
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let cfg = configure(cli)?;
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Weights { .. } => commands::weights(&cfg),
        Command::Bias { .. } => commands::bias(&cfg),
        Command::Fit { .. } => commands::fit(&cfg),
        Command::Experiment { .. } => commands::experiment(&cfg),
        Command::Tables => commands::tables(&cfg),
        Command::Apply { .. } => commands::apply(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
