use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use m3net::data::make_windows;
use m3net::model::{load_checkpoint, save_checkpoint};
use m3net::trainer::{evaluate, lr_at, train_with, EpochRecord};
use m3net::verify::{run_suite, VerifyOptions};
use m3net::{Checkpoint, Error, M3Net, MetricsReport, RawSeries, TrainOutcome, Variant};

use crate::convert::{convert, ConvertOptions};
use crate::heatmap::{heatmap_svg, matrix_csv};
use crate::run_config::RunConfig;

/// Process exit status plus a one-line cause.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CORRUPT: u8 = 3;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Corrupt(_) | Error::Incompatible(_) => EXIT_CORRUPT,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => EXIT_VERIFY,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub const CHECKPOINT_FILE: &str = "checkpoint.m3ckpt";

pub struct RunSummary {
    pub test: MetricsReport,
    pub outcome: TrainOutcome,
}

fn report_text(title: &str, report: &MetricsReport) -> String {
    format!("# {title}\n{report}")
}

/// One complete training run into `cfg.out`.
pub fn train_run(cfg: &RunConfig, series: &RawSeries) -> CmdResult<RunSummary> {
    let out = &cfg.out;
    cfg.save(out)?;
    let splits = m3net::data::prepare(series, cfg.model.input_len, cfg.model.horizon, &cfg.split)?;
    log::info!(
        "{}: {} train / {} val / {} test windows, variant {}",
        series.name,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.model.variant
    );
    let mut model = M3Net::<f32>::new(cfg.model.clone())?;

    let mut history = BufWriter::new(File::create(out.join("history.jsonl"))?);
    let mut costs = BufWriter::new(File::create(out.join("costs.jsonl"))?);
    let mut io_error = None;
    let mut on_epoch = |r: &EpochRecord| {
        println!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  {:.2}s  peak {:.1} MiB",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_mae,
            r.val_rmse,
            r.val_mape,
            r.epoch_seconds,
            r.peak_bytes as f64 / (1024.0 * 1024.0)
        );
        let written = writeln!(history, "{}", r.history_line())
            .and_then(|_| writeln!(costs, "{}", r.cost_line()))
            .and_then(|_| history.flush())
            .and_then(|_| costs.flush());
        if let Err(e) = written {
            io_error.get_or_insert(e);
        }
    };
    let outcome = train_with(&mut model, &splits, &cfg.train, |e| lr_at(e, &cfg.train), &mut on_epoch)?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    save_checkpoint(&model, Some(&splits.stats), &out.join(CHECKPOINT_FILE))?;

    let test = evaluate(
        &model,
        &splits.test,
        &splits.stats,
        cfg.train.batch_size,
        cfg.train.mape_mask_threshold,
    )?;
    let title = format!(
        "test split, variant {}, seed {}, best epoch {} of {}",
        cfg.model.variant,
        cfg.model.seed,
        outcome.best_epoch,
        outcome.history.len()
    );
    fs::write(out.join("report.txt"), report_text(&title, &test))?;
    fs::write(out.join("metrics.csv"), test.to_csv())?;

    let n = outcome.history.len() as f64;
    let mean_secs = outcome.history.iter().map(|r| r.epoch_seconds).sum::<f64>() / n;
    let peak = outcome.history.iter().map(|r| r.peak_bytes).max().unwrap_or(0);
    fs::write(
        out.join("costs.txt"),
        format!(
            "epochs={}\nmean_epoch_seconds={mean_secs:.4}\npeak_resident_bytes={peak}\nparameters={}\n",
            outcome.history.len(),
            model.store().num_elements()
        ),
    )?;
    Ok(RunSummary { test, outcome })
}

pub fn train(mut cfg: RunConfig, pinned: &BTreeSet<String>) -> CmdResult {
    let series = cfg.load_dataset(pinned)?;
    cfg.validate()?;
    let summary = train_run(&cfg, &series)?;
    println!(
        "\nbest epoch {} (val MAE {:.4}); test metrics:\n{}",
        summary.outcome.best_epoch, summary.outcome.best_val.mae, summary.test
    );
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

pub fn evaluate_checkpoint(mut cfg: RunConfig, checkpoint: &Path, split: &str, write_out: bool) -> CmdResult {
    let (model, stats) = load_checkpoint::<f32>(checkpoint)?;
    let pinned: BTreeSet<String> = ["nodes", "channels", "steps_per_day"].map(String::from).into();
    cfg.model = model.config().clone();
    let series = cfg.load_dataset(&pinned)?;
    cfg.validate()?;
    if write_out {
        cfg.save(&cfg.out)?;
    }
    let stats = match stats {
        Some(s) => s,
        None => {
            let (train_len, _, _) = cfg.split.lengths(series.frames());
            m3net::NormStats::from_frames(&series, train_len)
        }
    };
    let splits = make_windows(&series, cfg.model.input_len, cfg.model.horizon, &stats, &cfg.split)?;
    let samples = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(Error::Config(format!("unknown split `{other}`")).into()),
    };
    let report = evaluate(
        &model,
        samples,
        &stats,
        cfg.train.batch_size,
        cfg.train.mape_mask_threshold,
    )?;
    let title = format!("{split} split, checkpoint {}", checkpoint.display());
    println!("{}", report_text(&title, &report));
    if write_out {
        fs::write(cfg.out.join("report.txt"), report_text(&title, &report))?;
        fs::write(cfg.out.join("metrics.csv"), report.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub avg: m3net::MetricCell,
}

/// Mean Avg. metrics per variant, in [`Variant::ALL`] order.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(Variant, m3net::MetricCell)> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let runs: Vec<_> = rows.iter().filter(|r| r.variant == v).collect();
            if runs.is_empty() {
                return None;
            }
            let n = runs.len() as f64;
            let mean = |f: fn(&m3net::MetricCell) -> f64| runs.iter().map(|r| f(&r.avg)).sum::<f64>() / n;
            Some((
                v,
                m3net::MetricCell {
                    mae: mean(|c| c.mae),
                    rmse: mean(|c| c.rmse),
                    mape: mean(|c| c.mape),
                },
            ))
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow], seeds: u64) -> String {
    let mut s = format!("# test Avg. over {seeds} seed(s)\n");
    let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>10}", "Variant", "MAE", "RMSE", "MAPE");
    let means = ablation_means(rows);
    for (v, c) in &means {
        let _ = writeln!(
            s,
            "{:<12} {:>10.2} {:>10.2} {:>9.2}%",
            v.to_string(),
            c.mae,
            c.rmse,
            c.mape
        );
    }
    if let Some((_, full)) = means.iter().find(|(v, _)| *v == Variant::Full) {
        for (v, c) in means.iter().filter(|(v, _)| *v != Variant::Full) {
            let diff = c.mae - full.mae;
            let verdict = if diff.abs() <= 0.05 {
                "tie"
            } else if diff > 0.0 {
                "full better"
            } else {
                "full worse"
            };
            let _ = writeln!(s, "# {v} - full = {diff:+.4} MAE ({verdict})");
        }
    }
    s
}

pub fn ablate(mut cfg: RunConfig, pinned: &BTreeSet<String>, seeds: u64) -> CmdResult {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let series = cfg.load_dataset(pinned)?;
    cfg.validate()?;
    let root = cfg.out.clone();
    cfg.save(&root)?;
    let base = cfg.model.seed;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for k in 0..seeds {
            let seed = base + k;
            let mut run = cfg.clone();
            run.model.variant = variant;
            run.model.seed = seed;
            run.train.seed = seed;
            run.out = root.join(variant.as_str()).join(format!("seed{seed}"));
            println!("== {variant}, seed {seed}");
            let summary = train_run(&run, &series)?;
            rows.push(AblationRow {
                variant,
                seed,
                avg: summary.test.average,
            });
        }
    }
    let mut csv = String::from("variant,seed,mae,rmse,mape\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6}",
            r.variant, r.seed, r.avg.mae, r.avg.rmse, r.avg.mape
        );
    }
    fs::write(root.join("ablation.csv"), csv)?;
    let table = ablation_table(&rows, seeds);
    fs::write(root.join("ablation.txt"), &table)?;
    println!("\n{table}");
    Ok(())
}

pub fn export_grouping(checkpoint: &Path, out: &Path) -> CmdResult<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    if matches!(model.config().variant, Variant::NoSpatial | Variant::NoGrouping) {
        log::warn!(
            "variant {} does not use its grouping matrices; exporting them anyway",
            model.config().variant
        );
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (i, g) in model.grouping_matrices().iter().enumerate() {
        let (n, groups) = g.dims2();
        let csv = out.join(format!("grouping_layer{i}.csv"));
        fs::write(&csv, matrix_csv(g.data(), groups))?;
        let svg = out.join(format!("grouping_layer{i}.svg"));
        let title = format!("grouping matrix, layer {i} ({n} nodes x {groups} groups)");
        fs::write(&svg, heatmap_svg(g.data(), groups, &title))?;
        written.extend([csv, svg]);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

pub fn verify(opts: VerifyOptions) -> CmdResult {
    let report = run_suite(&opts);
    print!("{report}");
    match report.groups.iter().find(|g| !g.passed()) {
        None => {
            println!("all {} groups passed", report.groups.len());
            Ok(())
        }
        Some(g) => Err(Failure {
            code: EXIT_VERIFY,
            message: format!(
                "verification failed: {}: {}",
                g.name,
                g.failure.as_deref().unwrap_or("")
            ),
        }),
    }
}

pub fn convert_raw(input: &Path, out: &Path, opts: &ConvertOptions, card: Option<&str>) -> CmdResult {
    let mut opts = opts.clone();
    let card = match card {
        None => None,
        Some(name) => {
            let cfg = RunConfig {
                dataset_card: name.to_string(),
                ..Default::default()
            };
            cfg.card()?
        }
    };
    if let Some(card) = &card {
        opts.interval_minutes = card.interval_minutes;
        opts.start_weekday = card.start_weekday;
        opts.name.get_or_insert_with(|| card.name.clone());
    }
    let series = convert(input, &opts)?;
    if let Some(card) = &card {
        series.check_card(card)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    series.save(out)?;
    println!(
        "{}: {} frames x {} nodes x {} channels, {}-minute interval, start weekday {} -> {}",
        series.name,
        series.frames(),
        series.nodes(),
        series.channels(),
        series.interval_minutes,
        series.start_weekday,
        out.display()
    );
    Ok(())
}
