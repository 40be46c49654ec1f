use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use convrec::config::{ConfigError, RunConfig};
use convrec::eval::Variant;
use convrec::pipeline::{self, PipelineError};
use convrec::session;

#[derive(Parser, Debug)]
#[command(name = "convrec", version, about = "Train, evaluate and serve the conversational recommender")]
struct Cli {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset (skipped when data paths are set).
    GenData,
    /// Stage 1: pretrain the FM recommender.
    PretrainFm,
    /// Stage 2: pretrain the attribute sampler.
    PretrainActive,
    /// Stage 2: pretrain the negative sampler.
    PretrainNegative,
    /// Stage 3: train the ask/recommend policy for each learned variant.
    TrainPolicy,
    /// Evaluate the configured variants on the test split. With `--seeds`,
    /// run the whole pipeline once per seed and aggregate.
    Eval {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Serve live sessions over HTTP.
    Serve,
    /// Play one simulated test session and print its transcript.
    Simulate {
        #[arg(long, default_value = "full")]
        variant: String,
        /// Test interaction to play; drawn from the seed by default.
        #[arg(long)]
        index: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.run.output_dir = d.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(rows: &[std::result::Result<convrec::eval::MetricsReport, String>]) {
    println!("variant\tcohort\tsr@T\tat");
    for r in rows {
        match r {
            Ok(m) => println!("{}\t{}\t{:.4}\t{:.4}", m.variant, m.cohort, m.final_success(), m.average_turns),
            Err(e) => println!("{e}"),
        }
    }
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::GenData => match pipeline::gen_data(cfg)? {
            Some(p) => println!("wrote {}", p.display()),
            None => println!("using data from {}", cfg.data.interactions),
        },
        Command::PretrainFm => {
            let log = pipeline::pretrain_fm(cfg)?;
            if let Some(l) = log.last() {
                println!("epoch {} valid item auc {:.4} attribute auc {:.4}", l.epoch, l.valid_item_auc, l.valid_attr_auc);
            }
        }
        Command::PretrainActive => {
            let log = pipeline::pretrain_active(cfg)?;
            println!("{} episodes", log.len());
        }
        Command::PretrainNegative => {
            let log = pipeline::pretrain_negative(cfg)?;
            println!("{} episodes", log.len());
        }
        Command::TrainPolicy => {
            for (v, log) in pipeline::train_policy(cfg)? {
                let wins = log.iter().filter(|l| l.success).count();
                println!("{v}: {} sessions, {wins} successes", log.len());
            }
        }
        Command::Eval { seeds } if seeds.is_empty() => print_reports(&pipeline::evaluate(cfg)?),
        Command::Eval { seeds } => {
            let (_, rows) = pipeline::run_grid(cfg, seeds)?;
            print!("{}", pipeline::grid_table(&rows));
        }
        Command::Serve => {
            let rt = tokio::runtime::Runtime::new().context("starting the runtime")?;
            rt.block_on(convrec_service::serve(cfg))?;
        }
        Command::Simulate { variant, index } => {
            let v = Variant::parse(variant).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let lines = pipeline::simulate(cfg, v, *index)?;
            let mut out = std::io::stdout().lock();
            session::write_transcript(&mut out, &lines)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<PipelineError>() {
        Some(p) if p.is_precondition() => 3,
        Some(PipelineError::Config(_)) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
