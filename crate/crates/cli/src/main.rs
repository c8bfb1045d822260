mod commands;
mod convert;
mod heatmap;
mod run_config;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m3net::config::parse_kv;
use m3net::verify::VerifyOptions;
use m3net::{Error, Variant};

use commands::{CmdResult, Failure, EXIT_INPUT};
use convert::{ConvertOptions, Format};
use run_config::RunConfig;

/// Traffic forecasting with grouped spatial mixing and mixture-of-experts
/// channel mixing.
#[derive(Parser)]
#[command(name = "m3net", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_moe, no_spatial or no_grouping.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Raw container (see `convert-raw`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    device_threads: Option<usize>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and report test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ablation variant and tabulate Avg. test metrics.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Consecutive seeds per variant, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write each layer's grouping matrix as CSV and SVG heatmap.
    ExportGrouping {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, oracle and determinism property suite.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: u64,
        /// Scale analytic gradients by 1.01 so the gradient groups must fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
        #[arg(long)]
        device_threads: Option<usize>,
    },
    /// Convert an .npz/.npy/.csv dump into the raw container.
    ConvertRaw {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// npz, npy or csv; inferred from the extension by default.
        #[arg(long)]
        format: Option<String>,
        /// Array name inside an .npz archive.
        #[arg(long, default_value = "data")]
        key: String,
        /// Leading channels to keep (channel 0 is flow).
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Builtin card (PEMS03/04/07/08) or card file; sets interval and
        /// start weekday and checks the shape.
        #[arg(long)]
        card: Option<String>,
        #[arg(long, default_value_t = 5)]
        interval: u16,
        /// 0 = Monday.
        #[arg(long, default_value_t = 0)]
        start_weekday: u8,
        #[arg(long)]
        name: Option<String>,
    },
}

/// Config file, then `--set` pairs, then the dedicated flags. Returns the
/// config and the keys that were set explicitly.
fn resolve(args: &RunArgs) -> CmdResult<(RunConfig, BTreeSet<String>)> {
    let mut cfg = RunConfig::default();
    let mut pinned = BTreeSet::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("config {}: {e}", path.display())))?;
        let map = parse_kv(&text)?;
        cfg.apply(&map)?;
        pinned.extend(map.into_keys());
    }
    if !args.set.is_empty() {
        let map = parse_kv(&args.set.join("\n"))?;
        cfg.apply(&map)?;
        pinned.extend(map.into_keys());
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(t) = args.device_threads {
        cfg.device_threads = t;
    }
    set_threads(cfg.device_threads)?;
    Ok((cfg, pinned))
}

fn set_threads(n: usize) -> CmdResult {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: EXIT_INPUT,
                message: format!("cannot start {n} worker threads: {e}"),
            })?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(args) => {
            let (cfg, pinned) = resolve(&args)?;
            commands::train(cfg, &pinned)
        }
        Command::Evaluate { run, checkpoint, split } => {
            let write_out = run.out.is_some();
            let (cfg, _) = resolve(&run)?;
            commands::evaluate_checkpoint(cfg, &checkpoint, &split, write_out)
        }
        Command::Ablate { run, seeds } => {
            let (cfg, pinned) = resolve(&run)?;
            commands::ablate(cfg, &pinned, seeds)
        }
        Command::ExportGrouping { checkpoint, out } => commands::export_grouping(&checkpoint, &out).map(|_| ()),
        Command::Verify {
            instances,
            corrupt_backward,
            device_threads,
        } => {
            set_threads(device_threads.unwrap_or(0))?;
            commands::verify(VerifyOptions {
                instances,
                corrupt_backward,
            })
        }
        Command::ConvertRaw {
            input,
            out,
            format,
            key,
            channels,
            card,
            interval,
            start_weekday,
            name,
        } => {
            let opts = ConvertOptions {
                format: format.as_deref().map(Format::parse).transpose()?,
                key,
                channels,
                interval_minutes: interval,
                start_weekday,
                name,
            };
            commands::convert_raw(&input, &out, &opts, card.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
