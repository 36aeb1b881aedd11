use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ciml::config::RunConfig;
use ciml::dataset::{make_splits, save_dataset, MatrixFormat, MultiViewDataset, SplitIndices};
use ciml::evaluation::{self, accuracy_spread, MetricsReport, TrialResult, Variant, TABLE_HEADER};
use ciml::trainer::{self, EpochRecord, PreparedData, TrainHistory};
use ciml::{CimlError, Result};

/// Multi-view representation learning with common and unique information.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
/// 5 I/O error.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Root for all output directories.
    #[arg(long, env = "CIML_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, relative to the output root. Overrides `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `trials`.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the matrix format (`text` or `binary`).
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its oracle report.
    Synth(Common),
    /// Train one model and write a checkpoint and per-epoch history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Trial index choosing the split and model seed.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on its test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full model against the variants without the common or unique loss.
    Ablate(Common),
    /// Grid over the `[sweep]` table of the config.
    Sweep(Common),
    /// Independence audit and predictive sufficiency check of a checkpoint.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the joint representation of every sample as a dataset.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    if let Some(e) = common.epochs {
        config.train.epochs = e;
    }
    if let Some(t) = common.trials {
        config.trials = t;
    }
    if let Some(f) = &common.format {
        config.format = match f.as_str() {
            "text" => MatrixFormat::Text,
            "binary" => MatrixFormat::Binary,
            other => return Err(CimlError::Config(format!("unknown format `{other}`"))),
        };
    }
    config.validate()?;
    Ok(config)
}

fn prepare_output(root: &Path, common: &Common, config: &RunConfig, fallback: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(o) => root.join(o),
        None => config.output_dir(root, fallback),
    };
    fs::create_dir_all(&dir).map_err(|e| CimlError::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &config.to_toml()?)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CimlError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CimlError::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CimlError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CimlError::io(path, e))
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CimlError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CimlError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn splits_for(dataset: &MultiViewDataset, state: &trainer::TrainState) -> Result<SplitIndices> {
    make_splits(dataset, state.config.train_fraction, state.config.seed)
}

fn cmd_synth(root: &Path, common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let spec = config
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CimlError::Config("synth needs a [data.synthetic] table".into()))?;
    let (dataset, oracle) = ciml::dataset::generate_synthetic(spec)?;
    let dir = prepare_output(root, common, &config, "synth")?;
    let manifest = save_dataset(&dataset, &dir.join("dataset"), config.format)?;
    write_json(&dir.join("oracle.json"), &oracle.report(spec, &dataset))?;
    println!("wrote {}", manifest.display());
    println!(
        "bayes accuracy: common {:.4}, unique {:.4}, joint {:.4}",
        oracle.bayes_common, oracle.bayes_unique, oracle.bayes_joint
    );
    Ok(())
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wall_seconds: f64,
}

fn cmd_train(root: &Path, common: &Common, trial: usize, resume: bool) -> Result<()> {
    let config = load_config(common)?;
    let (dataset, _) = config.dataset()?;
    let dir = prepare_output(root, common, &config, "train")?;
    let checkpoint = dir.join("checkpoint.ckpt");
    let history_path = dir.join("history.jsonl");
    let timing_path = dir.join("timing.jsonl");

    let seed = evaluation::trial_seed(config.train.seed, trial);
    let train_config = trainer::TrainConfig {
        seed,
        ..config.train.clone()
    };
    let splits = make_splits(&dataset, train_config.train_fraction, seed)?;
    let mut history = TrainHistory::default();
    let mut state = if resume && checkpoint.exists() {
        let mut state = trainer::load_checkpoint(&checkpoint)?;
        if state.train_indices != splits.train {
            return Err(CimlError::Data("checkpoint was trained on a different split".into()));
        }
        history.records = read_history(&history_path)?;
        history.records.truncate(state.epoch);
        state.config.epochs = train_config.epochs;
        state
    } else {
        for p in [&history_path, &timing_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| CimlError::io(p, e))?;
            }
        }
        trainer::init_state(&train_config, &dataset, &splits)?
    };
    // Rewrite the history so a resumed log never holds epochs past the checkpoint.
    let lines: Vec<String> = history
        .records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serialisable"))
        .collect();
    write_text(&history_path, &lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    write_json(&dir.join("split.json"), &splits)?;

    let data = PreparedData::new(&dataset, &splits, &state.standardizer);
    let target = state.config.epochs;
    while state.epoch < target {
        state.config.epochs = state.epoch + 1;
        let before = history.len();
        trainer::fit_from(&mut state, &data, &mut history)?;
        let record = &history.records[before];
        append_line(&history_path, &serde_json::to_string(record).expect("serialisable"))?;
        let timing = TimingRecord {
            epoch: record.epoch,
            wall_seconds: history.wall_seconds[history.wall_seconds.len() - 1],
        };
        append_line(&timing_path, &serde_json::to_string(&timing).expect("serialisable"))?;
        state.config.epochs = target;
        trainer::save_checkpoint(&state, &checkpoint)?;
        eprintln!(
            "epoch {:>4}  loss {:>10.4}  ce {:>8.4}  train {:>6.2}%  test {:>6.2}%",
            record.epoch,
            record.loss.total,
            record.loss.ce,
            100.0 * record.train_acc,
            100.0 * record.test_acc
        );
        if let Some(rule) = &state.config.early_stop {
            if trainer::stop_early(rule, &history.records) {
                break;
            }
        }
    }
    trainer::save_checkpoint(&state, &checkpoint)?;
    let metrics = evaluation::evaluate_state(&state, &dataset, &splits.test)?;
    let report = MetricsReport::from_trials(vec![TrialResult {
        trial,
        trial_seed: seed,
        metrics,
        epochs: history.len(),
        final_loss: history.records.last().map(|r| r.loss.total),
    }]);
    write_json(&dir.join("metrics.json"), &report)?;
    println!("test accuracy {:.2}%  ({})", metrics.acc, checkpoint.display());
    Ok(())
}

fn cmd_eval(root: &Path, common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let (dataset, _) = config.dataset()?;
    let state = trainer::load_checkpoint(checkpoint)?;
    let splits = splits_for(&dataset, &state)?;
    let metrics = evaluation::evaluate_state(&state, &dataset, &splits.test)?;
    let report = MetricsReport::from_trials(vec![TrialResult {
        trial: 0,
        trial_seed: state.config.seed,
        metrics,
        epochs: state.epoch,
        final_loss: None,
    }]);
    let dir = prepare_output(root, common, &config, "eval")?;
    write_json(&dir.join("eval.json"), &report)?;
    println!("{TABLE_HEADER}\n{}", report.table_row());
    Ok(())
}

fn cmd_ablate(root: &Path, common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let (dataset, _) = config.dataset()?;
    let dir = prepare_output(root, common, &config, "ablate")?;
    let results = evaluation::run_ablation(&config.train, &dataset, config.trials)?;
    let mut table = format!("{:<8}  {TABLE_HEADER}\n", "variant");
    for r in &results {
        table += &format!("{:<8}  {}\n", r.variant.name(), r.report.table_row());
    }
    write_json(&dir.join("ablation.json"), &results)?;
    write_text(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    debug_assert_eq!(results.len(), Variant::ALL.len());
    Ok(())
}

fn cmd_sweep(root: &Path, common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let grid = config
        .sweep
        .clone()
        .ok_or_else(|| CimlError::Config("sweep needs a [sweep] table".into()))?;
    let (dataset, _) = config.dataset()?;
    let dir = prepare_output(root, common, &config, "sweep")?;
    let cells = evaluation::sweep(&config.train, &dataset, &grid, config.trials)?;
    let mut table = String::new();
    for c in &cells {
        let coords: Vec<String> = c.params.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
        table += &format!("{:<32}  {}\n", coords.join(" "), c.report.table_row());
    }
    table += &format!("accuracy spread {:.2}\n", accuracy_spread(&cells));
    write_json(&dir.join("sweep.json"), &cells)?;
    write_text(&dir.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct AuditOutput {
    trained: evaluation::AuditReport,
    untrained: evaluation::AuditReport,
    sufficiency: evaluation::SufficiencyReport,
    common_consistency: f64,
}

fn cmd_audit(root: &Path, common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let (dataset, _) = config.dataset()?;
    let state = trainer::load_checkpoint(checkpoint)?;
    let splits = splits_for(&dataset, &state)?;
    let fresh = trainer::init_state(&state.config, &dataset, &splits)?;
    let seed = state.config.seed;
    let out = AuditOutput {
        trained: evaluation::independence_audit(&state, &dataset, &splits, &config.audit, seed)?,
        untrained: evaluation::independence_audit(&fresh, &dataset, &splits, &config.audit, seed)?,
        sufficiency: evaluation::sufficiency_check(&state, &dataset, &splits, &config.probe)?,
        common_consistency: trainer::common_consistency(&state, &dataset)?,
    };
    let dir = prepare_output(root, common, &config, "audit")?;
    write_json(&dir.join("audit.json"), &out)?;
    for ((name, t), (_, u)) in out.trained.entries().iter().zip(out.untrained.entries()) {
        println!("{name:<14} trained {t:>8.4}  untrained {u:>8.4}");
    }
    let s = &out.sufficiency;
    println!(
        "sufficiency: ce(Z) {:.4}  ce(X) {:.4}  gap {:.4}",
        s.ce_representation, s.ce_views, s.gap
    );
    Ok(())
}

fn cmd_export(root: &Path, common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let (dataset, _) = config.dataset()?;
    let state = trainer::load_checkpoint(checkpoint)?;
    let dir = prepare_output(root, common, &config, "embeddings")?;
    let manifest = evaluation::export_embeddings(&state, &dataset, &dir.join("embeddings"), config.format)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = &cli.output_root;
    match &cli.command {
        Command::Synth(c) => cmd_synth(root, c),
        Command::Train { common, trial, resume } => cmd_train(root, common, *trial, *resume),
        Command::Eval { common, checkpoint } => cmd_eval(root, common, checkpoint),
        Command::Ablate(c) => cmd_ablate(root, c),
        Command::Sweep(c) => cmd_sweep(root, c),
        Command::Audit { common, checkpoint } => cmd_audit(root, common, checkpoint),
        Command::ExportEmbeddings { common, checkpoint } => cmd_export(root, common, checkpoint),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
