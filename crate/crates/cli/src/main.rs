//! `msstnet`: synthetic data, training, evaluation, FLOPs accounting and
//! feature/attention dumps.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 runtime failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use msstnet_core::analysis::{count_flops, dump_maps, flops_scaling, scaling_csv, scaling_table};
use msstnet_core::checkpoint::{load_model, save_model};
use msstnet_core::metrics::{read_predictions, write_predictions, Prediction};
use msstnet_core::training::{
    calibrate_backbone, make_synthetic_dataset, predict_labels, read_dataset, read_split, train, write_dataset,
    write_log_csv, ClipBatch,
};
use msstnet_core::{ConfusionMatrix, Error, Msstnet, Rng, RunConfig};

const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "msstnet", version, about = "Multi-scale temporal transformer for facial expression clips")]
struct Cli {
    /// Worker threads for per-clip parallelism [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset whose labels depend only on frame order
    Synth(SynthArgs),
    /// Train with step-decayed SGD; writes the log, config and checkpoints
    Train(TrainArgs),
    /// Report the confusion matrix, WAR and UAR of a checkpoint or a predictions file
    #[command(
        after_help = "UAR averages recall over classes that have at least one true sample; \
                      classes with zero support are left out of the mean."
    )]
    Eval(EvalArgs),
    /// Print the closed-form FLOPs of one forward pass
    Flops(FlopsArgs),
    /// Write token-magnitude grids and attention weights for one clip
    Dump(DumpArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; unknown keys are rejected
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Preset used when no config file is given: paper, desk or tiny
    #[arg(long, default_value = "desk")]
    preset: String,

    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Total number of clips across both splits
    #[arg(long, required = true)]
    clips: Option<usize>,

    /// Output directory; receives train/ and val/
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Dataset directory containing train/ and val/
    #[arg(long, value_name = "DIR")]
    data: PathBuf,

    /// Output directory for config.txt, train_log.csv, best.ckpt and final.ckpt
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Overrides the epoch count; decay epochs at or beyond it are dropped
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint to evaluate; its directory's config.txt is used when --config is absent
    #[arg(long, value_name = "FILE", required_unless_present = "from_predictions")]
    checkpoint: Option<PathBuf>,

    /// Split directory with manifest.csv, or a dataset directory holding the split
    #[arg(long, value_name = "DIR", required_unless_present = "from_predictions")]
    data: Option<PathBuf>,

    /// Split to read from a dataset directory
    #[arg(long, default_value = "val")]
    split: String,

    /// Score an existing predictions CSV (clip_id,true_label,pred_label) instead of running a model
    #[arg(long, value_name = "FILE", conflicts_with_all = ["checkpoint", "data"])]
    from_predictions: Option<PathBuf>,

    /// Number of classes when scoring a predictions file [default: from the config]
    #[arg(long)]
    classes: Option<usize>,

    /// Write per-clip predictions as CSV
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,

    /// Write the report CSV to a file as well as stdout
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Frame counts to sweep, e.g. 4,8,12,16; prints a per-component breakdown when absent
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,

    /// Emit CSV instead of an aligned table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint to load [default: freshly initialized weights]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Split directory or dataset directory to take the clip from [default: a random clip]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Split to read from a dataset directory
    #[arg(long, default_value = "val")]
    split: String,

    /// Index of the clip within the split
    #[arg(long, default_value_t = 0)]
    index: usize,

    /// Output directory for the grids and attention CSVs
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Record intermediate tokens and attention weights (required)
    #[arg(long)]
    capture: bool,
}

/// An error paired with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

trait ExitContext<T> {
    fn or_input(self, what: impl Display) -> Outcome<T>;
    fn or_runtime(self, what: impl Display) -> Outcome<T>;
}

impl<T> ExitContext<T> for msstnet_core::Result<T> {
    fn or_input(self, what: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::input(anyhow!(e).context(what.to_string())))
    }

    fn or_runtime(self, what: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::runtime(anyhow!(e).context(what.to_string())))
    }
}

fn load_config(args: &ConfigArgs, fallback: Option<&Path>, command: &str) -> Outcome<RunConfig> {
    load_config_with(args, fallback, command, |_| Ok(()))
}

fn load_config_with(
    args: &ConfigArgs,
    fallback: Option<&Path>,
    command: &str,
    adjust: impl FnOnce(&mut RunConfig) -> Outcome,
) -> Outcome<RunConfig> {
    let path = args
        .config
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.is_file()));
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p).or_input(format!("reading config {}", p.display()))?,
        None => RunConfig::preset(&args.preset).or_input("selecting preset")?,
    };
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    adjust(&mut cfg)?;
    let source = path.map_or_else(|| format!("preset {}", args.preset), |p| p.display().to_string());
    eprintln!("# msstnet {command}: configuration from {source}");
    for line in cfg.to_text().lines() {
        eprintln!("#   {line}");
    }
    Ok(cfg)
}

fn read_clips(dir: &Path, split: &str) -> Outcome<ClipBatch> {
    let dir = if dir.join("manifest.csv").is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    };
    read_split(&dir).or_input(format!("reading clips from {}", dir.display()))
}

fn check_clip_shape(cfg: &RunConfig, batch: &ClipBatch, what: &str) -> Outcome {
    let m = &cfg.model;
    let (h, w) = m.backbone.input_size;
    let want = [m.frames, m.backbone.in_channels, h, w];
    if batch.clip_shape() != want {
        return Err(Failure::input(anyhow!(
            "{what} clips have shape {:?} but the config expects {want:?}",
            batch.clip_shape()
        )));
    }
    batch.check_labels(m.classes).or_input(format!("{what} labels"))
}

fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Outcome<Msstnet> {
    let mut model = Msstnet::new(cfg.model.clone()).or_input("building model")?;
    if let Some(path) = checkpoint {
        load_model(path, &mut model).or_input(format!("loading checkpoint {}", path.display()))?;
    }
    Ok(model)
}

fn cmd_synth(args: SynthArgs) -> Outcome {
    let cfg = load_config(&args.config, None, "synth")?;
    let clips = args.clips.expect("clap enforces --clips");
    let data = make_synthetic_dataset(clips, &cfg.model, cfg.model.seed).or_input("generating dataset")?;
    write_dataset(&args.out, &data).or_runtime(format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} training and {} validation clips to {}",
        data.train.len(),
        data.val.len(),
        args.out.display()
    );
    Ok(())
}

fn override_epochs(cfg: &mut RunConfig, epochs: usize) -> Outcome {
    cfg.schedule.epochs = epochs;
    cfg.schedule.decay_epochs.retain(|&e| e < epochs);
    cfg.validate().or_input("--epochs")
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let cfg = load_config_with(&args.config, None, "train", |cfg| match args.epochs {
        Some(epochs) => override_epochs(cfg, epochs),
        None => Ok(()),
    })?;
    let data = read_dataset(&args.data).or_input(format!("reading dataset {}", args.data.display()))?;
    check_clip_shape(&cfg, &data.train, "training")?;
    check_clip_shape(&cfg, &data.val, "validation")?;

    std::fs::create_dir_all(&args.out).map_err(|e| Failure::runtime(anyhow!(e).context("creating output directory")))?;
    cfg.save(&args.out.join("config.txt")).or_runtime("writing config")?;
    let log_path = args.out.join("train_log.csv");

    let mut model = build_model(&cfg, None)?;
    calibrate_backbone(&mut model, &data.train).or_runtime("calibrating backbone")?;
    let mut rows = Vec::new();
    let mut write_error = None;
    let result = train(&mut model, &data.train, &data.val, &cfg.schedule, cfg.model.seed, |row| {
        println!(
            "epoch {:>3}/{}  lr {:<6}  loss {:.4}  train acc {:6.2}  val WAR {:6.2}  val UAR {:6.2}",
            row.epoch + 1,
            cfg.schedule.epochs,
            row.lr,
            row.train_loss,
            row.train_acc,
            row.val_war,
            row.val_uar
        );
        rows.push(row.clone());
        if let Err(e) = write_log_csv(&log_path, &rows) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(Failure::runtime(anyhow!(e).context("writing training log")));
    }
    let report = result.or_runtime("training")?;
    save_model(&args.out.join("best.ckpt"), &report.best).or_runtime("writing best checkpoint")?;
    save_model(&args.out.join("final.ckpt"), &model).or_runtime("writing final checkpoint")?;
    println!(
        "best val WAR {:.2} at epoch {}; checkpoints in {}",
        report.best_val_war,
        report.best_epoch + 1,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let fallback = args.checkpoint.as_ref().and_then(|p| p.parent()).map(|d| d.join("config.txt"));
    let cfg = load_config(&args.config, fallback.as_deref(), "eval")?;

    let rows = if let Some(path) = &args.from_predictions {
        read_predictions(path).or_input(format!("reading {}", path.display()))?
    } else {
        let data = args.data.as_ref().expect("clap enforces --data");
        let batch = read_clips(data, &args.split)?;
        check_clip_shape(&cfg, &batch, "evaluation")?;
        let model = build_model(&cfg, args.checkpoint.as_deref())?;
        let preds = predict_labels(&model, &batch).or_runtime("predicting")?;
        (0..batch.len())
            .map(|i| Prediction {
                clip_id: batch.ids[i].clone(),
                true_label: batch.labels[i],
                pred_label: preds[i],
            })
            .collect()
    };
    if rows.is_empty() {
        return Err(Failure::input(anyhow!("no clips to evaluate")));
    }

    let classes = args.classes.unwrap_or(cfg.model.classes);
    let preds: Vec<usize> = rows.iter().map(|r| r.pred_label).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
    let cm = ConfusionMatrix::compute(&preds, &labels, classes).or_input("building confusion matrix")?;
    let report = cm.report_csv().or_input("summarizing")?;
    if let Some(path) = &args.predictions {
        write_predictions(path, &rows).or_runtime(format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.report {
        std::fs::write(path, &report).map_err(|e| Failure::runtime(anyhow!(e).context(format!("writing {}", path.display()))))?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> Outcome {
    let cfg = load_config(&args.config, None, "flops")?;
    let text = match &args.frames {
        Some(frames) => {
            let rows = flops_scaling(&cfg.model, frames).or_input("--frames")?;
            if args.csv {
                scaling_csv(&rows)
            } else {
                scaling_table(&rows)
            }
        }
        None => {
            let report = count_flops(&cfg.model).or_input("counting FLOPs")?;
            if args.csv {
                report.to_csv()
            } else {
                report.to_table()
            }
        }
    };
    print!("{text}");
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Outcome {
    if !args.capture {
        return Err(Failure::input(anyhow!(Error::Config(
            "dumping maps requires --capture".into()
        ))));
    }
    let fallback = args.checkpoint.as_ref().and_then(|p| p.parent()).map(|d| d.join("config.txt"));
    let cfg = load_config(&args.config, fallback.as_deref(), "dump")?;
    let model = build_model(&cfg, args.checkpoint.as_deref())?;
    let clip = match &args.data {
        Some(dir) => {
            let batch = read_clips(dir, &args.split)?;
            check_clip_shape(&cfg, &batch, "dump")?;
            if args.index >= batch.len() {
                return Err(Failure::input(anyhow!(
                    "--index {} out of range for {} clips",
                    args.index,
                    batch.len()
                )));
            }
            batch.clip(args.index)
        }
        None => {
            let m = &cfg.model;
            let (h, w) = m.backbone.input_size;
            Rng::new(m.seed).uniform_tensor(&[m.frames, m.backbone.in_channels, h, w], 0.0, 1.0)
        }
    };
    let files = dump_maps(&model, &clip, &args.out, args.capture).or_runtime(format!("dumping to {}", args.out.display()))?;
    println!(
        "wrote {} grids and {} attention files to {}",
        files.grids.len(),
        files.attention.len(),
        args.out.display()
    );
    Ok(())
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Dump(a) => cmd_dump(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.workers {
        Some(0) => Err(Failure::input(anyhow!("--workers must be at least 1"))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli.command)),
            Err(e) => Err(Failure::runtime(anyhow!(e).context("starting worker pool"))),
        },
        None => run(cli.command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn frame_lists_split_on_commas() {
        let cli = Cli::try_parse_from(["msstnet", "flops", "--frames", "4,8,12"]).unwrap();
        match cli.command {
            Command::Flops(a) => assert_eq!(a.frames, Some(vec![4, 8, 12])),
            _ => panic!("expected flops"),
        }
    }

    #[test]
    fn workers_flag_is_global() {
        let cli = Cli::try_parse_from(["msstnet", "synth", "--clips", "8", "--out", "d", "--workers", "2"]).unwrap();
        assert_eq!(cli.workers, Some(2));
    }

    #[test]
    fn epoch_override_drops_later_decays() {
        let args = ConfigArgs { config: None, preset: "desk".into(), seed: Some(3) };
        let cfg = load_config_with(&args, None, "test", |cfg| override_epochs(cfg, 25)).unwrap();
        assert_eq!(cfg.schedule.epochs, 25);
        assert_eq!(cfg.schedule.decay_epochs, vec![20]);
        assert_eq!(cfg.model.seed, 3);
        let mut cfg = RunConfig::preset("desk").unwrap();
        assert_eq!(override_epochs(&mut cfg, 0).unwrap_err().code, EXIT_INPUT);
    }

    #[test]
    fn input_failures_map_to_exit_two() {
        let err: msstnet_core::Result<()> = Err(Error::Config("bad".into()));
        assert_eq!(err.or_input("x").unwrap_err().code, EXIT_INPUT);
        let err: msstnet_core::Result<()> = Err(Error::Config("bad".into()));
        assert_eq!(err.or_runtime("x").unwrap_err().code, EXIT_RUNTIME);
    }
}
