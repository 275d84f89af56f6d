use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elasto_cli::commands;
use elasto_cli::config::{ConfigError, PipelineConfig};
use elasto_cli::PipelineError;

#[derive(Parser, Debug)]
#[command(name = "elasto", version, about = "Ultrasound strain imaging from RF frame pairs")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set glue.alpha_axial=10`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Phantom scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// ELDF flow to use instead of the coarse block matcher.
    #[arg(long, global = true)]
    external_flow: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render phantom pre/post frames and the true displacement.
    Simulate,
    /// Coarse displacement of a frame pair.
    Coarse {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
    },
    /// Refine an initial displacement field.
    Refine {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// Axial strain of a displacement field.
    Strain {
        #[arg(long)]
        field: PathBuf,
        /// Frame whose acquisition goes into the strain header.
        #[arg(long)]
        like: Option<PathBuf>,
    },
    /// SNRe, CNRe and MSSIM of a strain image.
    Evaluate {
        #[arg(long)]
        strain: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Full pipeline on configured inputs or on simulated phantoms.
    Run {
        #[arg(long)]
        pre: Option<PathBuf>,
        #[arg(long)]
        post: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Full pipeline on every pair of a `name,pre,post[,truth]` list.
    Batch {
        #[arg(long)]
        pairs: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.phantom.seed = seed;
    }
    if let Some(dir) = &cli.output {
        cfg.output.dir = dir.clone();
    }
    if let Some(flow) = &cli.external_flow {
        cfg.coarse.external_flow = Some(flow.clone());
    }
    if let Command::Run { pre, post, truth } = &cli.command {
        if pre.is_some() || post.is_some() {
            cfg.input.pre = pre.clone();
            cfg.input.post = post.clone();
            cfg.input.truth = truth.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Simulate => {
            commands::simulate(cfg)?;
        }
        Command::Coarse { pre, post } => {
            commands::coarse(cfg, pre, post)?;
        }
        Command::Refine { pre, post, init } => {
            commands::refine(cfg, pre, post, init)?;
        }
        Command::Strain { field, like } => {
            commands::strain(cfg, field, like.as_deref())?;
        }
        Command::Evaluate { strain, truth } => {
            let m = commands::evaluate(cfg, strain, truth.as_deref())?;
            print!("{}", elasto_cli::artifacts::metrics_text("evaluate", None, &m));
        }
        Command::Run { .. } => {
            for case in commands::run(cfg)? {
                let label = case.applied_strain.map(commands::pair_dir_name).unwrap_or_else(|| "input".into());
                print!("{}", elasto_cli::artifacts::metrics_text(&label, case.applied_strain, &case.result.metrics));
            }
        }
        Command::Batch { pairs } => {
            let list = commands::read_pair_list(pairs)?;
            let report = commands::batch(cfg, &list)?;
            if !report.failures.is_empty() {
                eprintln!("warning: {} of {} pairs failed", report.failures.len(), list.len());
                for (name, msg) in &report.failures {
                    eprintln!("  {name}: {msg}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(PipelineError::Config(e).exit_code() as u8);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    };
    match pool.install(|| execute(&cli, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
