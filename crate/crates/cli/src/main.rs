use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctrsim::config::{DataSource, Mode, SimConfig, Strategy};
use ctrsim::experiments;
use ctrsim::Simulator;

/// Desk-scale simulator of cached-embedding distributed CTR training.
#[derive(Debug, Parser)]
#[command(name = "ctrsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one training job and write its JSON report.
    Train(SimArgs),
    /// Run the host, prefetch and cache strategies and write their loss curves as CSV.
    CompareStrategies(SimArgs),
    /// Run the cache strategy at several buffer capacities and write swap metrics as CSV.
    CacheSweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated capacities; defaults to 0.25x, 0.5x and 2x of
        /// vocabulary / workers.
        #[arg(long, value_delimiter = ',')]
        capacities: Vec<usize>,
    },
    /// Write per-step traffic with and without batch deduplication as CSV.
    VsiReport(SimArgs),
}

#[derive(Debug, Args)]
struct SimArgs {
    /// key = value config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    /// Output file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    workers: Option<usize>,
    /// Rows per worker.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    fields: Option<usize>,
    #[arg(long)]
    vocab: Option<u64>,
    #[arg(long)]
    zipf: Option<f64>,
    #[arg(long)]
    cache_capacity: Option<usize>,
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// `synthetic` or `criteo:<path>`.
    #[arg(long)]
    data: Option<DataSource>,
    /// Also record the traffic each step would cause without deduplication.
    #[arg(long)]
    no_vsi: bool,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(path) => SimConfig::from_file(path)?,
            None => SimConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        apply! {
            strategy => c.strategy,
            workers => c.num_workers,
            batch_size => c.batch_size_per_worker,
            dim => c.embedding_dim,
            fields => c.num_fields,
            vocab => c.vocabulary_size,
            zipf => c.zipf_exponent,
            cache_capacity => c.cache_capacity,
            lookahead => c.lookahead_depth,
            seed => c.seed,
            mode => c.mode,
            data => c.data,
        }
        c.track_no_vsi |= self.no_vsi;
        c.validate()?;
        Ok(c)
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        open_output(self.out.as_deref())
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SFCTR_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let report = Simulator::new(args.config()?)?.run(args.steps)?;
            let mut out = args.output()?;
            writeln!(out, "{}", report.to_json())?;
            out.flush()?;
        }
        Command::CompareStrategies(args) => {
            let cmp = experiments::compare_strategies(&args.config()?, args.steps)?;
            match cmp.prefetch_divergence() {
                Some(step) => log::info!("prefetch loss first differs from cache loss at step {step}"),
                None => log::info!("prefetch and cache loss traces are identical"),
            }
            let mut out = args.output()?;
            cmp.write_csv(&mut out)?;
            out.flush()?;
        }
        Command::CacheSweep { sim, capacities } => {
            let config = sim.config()?;
            let capacities = if capacities.is_empty() {
                let scale = experiments::working_set_scale(&config);
                vec![scale / 4, scale / 2, 2 * scale]
            } else {
                capacities
            };
            let rows = experiments::cache_sweep(&config, &capacities, sim.steps)?;
            let mut out = sim.output()?;
            experiments::write_sweep_csv(&rows, &mut out)?;
            out.flush()?;
        }
        Command::VsiReport(args) => {
            let rows = experiments::vsi_report(&args.config()?, args.steps)?;
            let mut out = args.output()?;
            experiments::write_vsi_csv(&rows, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
