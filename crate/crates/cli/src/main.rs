//! `dainv`: train, evaluate and compare data augmentation invariance runs.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 missing or unreadable input,
//! 4 artifact mismatch, 5 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dainv::artifacts::{
    epoch_checkpoint_path, final_checkpoint_path, MetricsWriter, CHECKPOINT_DIR, EVAL_META, INVARIANCE,
    INVARIANCE_SUMMARY, RUN_META,
};
use dainv::config::RunConfig;
use dainv::dataset::{dataset_files_present, Dataset, TEST_FILE};
use dainv::evaluator::{
    evaluate_accuracy, evaluate_invariance, write_eval_meta, write_invariance_csv, write_summary_csv,
};
use dainv::network::{checkpoint_id, load_checkpoint_for, save_checkpoint};
use dainv::report::{load_run, render_comparison, write_report};
use dainv::trainer::train_with;
use dainv::Error;

#[derive(Parser)]
#[command(name = "dainv", version, about = "Data augmentation invariance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Measure per-layer invariance and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration file; defaults to the run.meta of the checkpoint's run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to the checkpoint's run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare run directories and emit plot-ready tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run the convolution, objective and gradient verification suites.
    Gradcheck,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::MissingInput(_)
        | Error::MalformedFile(_)
        | Error::CorruptRecord { .. }
        | Error::EmptyInput(_)
        | Error::UnknownSeed(_)
        | Error::Cache { .. }
        | Error::Csv(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Checkpoint { .. } | Error::ShapeMismatch(_) => 4,
        Error::NonFiniteLoss { .. }
        | Error::NumericOverflow { .. }
        | Error::DegenerateBatch
        | Error::DegenerateFeatures { .. }
        | Error::DegenerateChannel { .. } => 5,
        Error::Io { .. } => 1,
    }
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()).into());
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn resolve_config(base: Option<RunConfig>, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut config = base.unwrap_or_default();
    if let Some(path) = file {
        let text = read_input(path)?;
        config.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    config.apply_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

fn load_dataset(config: &RunConfig) -> anyhow::Result<Dataset> {
    if !dataset_files_present(&config.data_dir) {
        return Err(Error::MissingInput(config.data_dir.join(TEST_FILE)))
            .with_context(|| format!("CIFAR-10 binary files not found in {}", config.data_dir.display()));
    }
    let dataset = Dataset::load_dir(&config.data_dir)?;
    Ok(dataset.subset(config.train_subset, config.test_subset)?)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn cmd_train(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<()> {
    let config = resolve_config(None, file, overrides)?;
    let dataset = load_dataset(&config)?;
    let run_dir = config.run_dir();
    if run_dir.join(RUN_META).exists() {
        return Err(
            Error::Config { line: 0, message: format!("run directory {} already exists", run_dir.display()) }.into()
        );
    }
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;

    let t = &config.train;
    let stats = &dataset.channel_stats;
    let fmt3 = |v: &[f64; 3]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let monitoring = if t.invariance_mode {
        "in_objective"
    } else if t.monitor_invariance && !t.inv_layers.is_empty() {
        "probe_batches"
    } else {
        "off"
    };
    let meta: Vec<(String, String)> = [
        ("param_count", t.architecture().param_count().to_string()),
        ("reduced", config.is_reduced().to_string()),
        ("dataset_official", dataset.is_official().to_string()),
        ("train_images", dataset.train.len().to_string()),
        ("test_images", dataset.test.len().to_string()),
        ("channel_mean", fmt3(&stats.mean)),
        ("channel_std", fmt3(&stats.std)),
        ("init", "he_normal".to_string()),
        ("worker_mode", "single".to_string()),
        ("invariance_monitoring", monitoring.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let meta_path = run_dir.join(RUN_META);
    fs::write(&meta_path, config.snapshot(&meta)).map_err(|e| io_err(&meta_path, e))?;

    eprintln!(
        "training {} ({} mode, {} parameters, {} train / {} test images)",
        config.run_id,
        if t.invariance_mode { "invariance" } else { "baseline" },
        t.architecture().param_count(),
        dataset.train.len(),
        dataset.test.len()
    );
    let mut writer = MetricsWriter::create(&run_dir, &t.inv_layers)?;
    let (params, _) = train_with(t, &dataset, |log, params| {
        writer.append(log, &run_dir)?;
        if config.checkpoint_every > 0 && log.epoch % config.checkpoint_every == 0 {
            save_checkpoint(params, &epoch_checkpoint_path(&run_dir, log.epoch))?;
        }
        eprintln!(
            "epoch {:>4}  lr {:.5}  ce {:.4}  total {:.4}  acc {:.4}  {:.1}s",
            log.epoch, log.learning_rate, log.cross_entropy, log.total_loss, log.train_accuracy, log.seconds
        );
        Ok(())
    })?;
    let final_path = final_checkpoint_path(&run_dir);
    save_checkpoint(&params, &final_path)?;
    println!("{}", final_path.display());
    Ok(())
}

/// Run directory owning a checkpoint: `<run>/checkpoints/x.ckpt` or `<run>/x.ckpt`.
fn owning_run_dir(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == CHECKPOINT_DIR) {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn cmd_eval(checkpoint: &Path, file: Option<&Path>, overrides: &[String], output: Option<&Path>) -> anyhow::Result<()> {
    if !checkpoint.is_file() {
        return Err(Error::MissingInput(checkpoint.to_path_buf()).into());
    }
    let run_dir = owning_run_dir(checkpoint);
    let base = match file {
        Some(_) => None,
        None => {
            let path = run_dir.join(RUN_META);
            let text = read_input(&path).context("no --config given and the checkpoint has no run.meta")?;
            Some(RunConfig::from_snapshot(&text).with_context(|| format!("in {}", path.display()))?)
        }
    };
    let config = resolve_config(base, file, overrides)?;
    let params = load_checkpoint_for(checkpoint, &config.train.architecture())?;
    let dataset = load_dataset(&config)?;
    let out = output.map_or(run_dir, Path::to_path_buf);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let id = checkpoint_id(checkpoint)?;
    eprintln!(
        "evaluating {id} on {} test images, {} transforms, {} references",
        dataset.test.len(),
        config.eval.transforms,
        config.eval.references
    );
    let report = evaluate_invariance(&params, &dataset.test, &dataset.channel_stats, &config.eval, &id)?;
    let accuracy = evaluate_accuracy(&params, &dataset.test, &dataset.channel_stats)?;
    write_invariance_csv(&report, &out.join(INVARIANCE))?;
    write_summary_csv(&report, &out.join(INVARIANCE_SUMMARY))?;
    write_eval_meta(&report, accuracy, &out.join(EVAL_META))?;
    let meta_path = out.join(RUN_META);
    if !meta_path.exists() {
        fs::write(&meta_path, config.snapshot(&[])).map_err(|e| io_err(&meta_path, e))?;
    }
    println!("accuracy {accuracy:.4}");
    for layer in &report.layers {
        println!("layer {:>2}  median sigma {:.4}", layer.layer, layer.summary.median);
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let loaded = runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_report(&loaded, out)?;
    print!("{}", render_comparison(&loaded));
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck() -> anyhow::Result<bool> {
    let checks = dainv::verify::run_all()?;
    let mut ok = true;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    println!("{} of {} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, overrides } => cmd_train(config.as_deref(), overrides),
        Command::Eval { checkpoint, config, overrides, output } => {
            cmd_eval(checkpoint, config.as_deref(), overrides, output.as_deref())
        }
        Command::Report { runs, out } => cmd_report(runs, out),
        Command::Gradcheck => match cmd_gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(5),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
