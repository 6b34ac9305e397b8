//! Command-line interface: `synth`, `train`, `predict` and `eval`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, synth_generate, write_dataset, write_manifest};
use crate::error::{Error, Result};
use crate::infer::{evaluate_predictions, predict_batch, EnsembleConfig, EnsembleMode};
use crate::metrics::EvalReport;
use crate::model::{CpnetModel, ModelConfig, DEFAULT_DROPOUT};
use crate::train::{load_checkpoint, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cpnet", version, about = "Shadow segmentation with CPNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shadow dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Predict shadow masks for every image in a manifest.
    Predict(PredictArgs),
    /// Score previously predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Scene size as HxW; both sides must be multiples of 32.
    #[arg(long, default_value = "192x192", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Also write train.tsv / val.tsv with the last N scenes held out.
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    /// Validation set used to pick the best epoch (optional).
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub base_width: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Square training resolution, a multiple of 32.
    #[arg(long, default_value_t = 192)]
    pub input_size: usize,
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    pub dropout: f64,
    /// Disable flip / rotation / zoom augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Train the plain U-Net without summation shortcuts.
    #[arg(long)]
    pub baseline: bool,
    /// History CSV path [default: checkpoint path with .history.csv].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Stop once the epoch train loss reaches this value.
    #[arg(long, allow_hyphen_values = true)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub quiet: bool,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EnsembleArg {
    Or,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Kv,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated square input sizes.
    #[arg(long, value_delimiter = ',', default_value = "192,256,384,480")]
    pub scales: Vec<usize>,
    #[arg(long, value_enum, default_value_t = EnsembleArg::Or)]
    pub ensemble: EnsembleArg,
    /// Binarization threshold (a pixel is shadow when p >= threshold).
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Output directory for `<stem>_mask.png` files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size `{s}`"));
    Ok((parse(h)?, parse(w)?))
}

fn print_report(report: &EvalReport, format: ReportFormat) {
    match format {
        ReportFormat::Table => println!("{report}"),
        ReportFormat::Kv => print!("{}", report.to_key_value()),
    }
}

/// Whether an error stems from bad input rather than a bug or divergence.
pub fn is_user_error(e: &Error) -> bool {
    !matches!(
        e,
        Error::Graph(_) | Error::MissingGradient(_) | Error::NonFiniteLoss { .. }
    )
}

fn configure_threads() {
    if let Some(n) = std::env::var("CPNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_user_error(&e) {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => {
            let report = evaluate_predictions(&a.pred_dir, &a.manifest)?;
            print_report(&report, a.format);
            Ok(EXIT_OK)
        }
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let samples = synth_generate(a.seed, a.count, a.size)?;
    let entries = write_dataset(&samples, &a.out, "manifest.tsv")?;
    if let Some(v) = a.val_count {
        if v >= entries.len() {
            return Err(Error::InvalidArgument(format!(
                "--val-count {v} leaves no training scenes out of {}",
                entries.len()
            )));
        }
        let split = entries.len() - v;
        write_manifest(&a.out.join("train.tsv"), &entries[..split])?;
        write_manifest(&a.out.join("val.tsv"), &entries[split..])?;
    }
    println!("wrote {} scenes to {}", entries.len(), a.out.display());
    Ok(EXIT_OK)
}

fn default_history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let train_set = load_dataset(&a.train_manifest)?;
    let val_set = match &a.val_manifest {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let model_config = ModelConfig {
        base_width: a.base_width,
        dropout_rate: a.dropout,
        seed: a.seed,
        summation_shortcuts: !a.baseline,
    };
    let mut model = CpnetModel::build(&model_config)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        global_seed: a.seed,
        lr: a.lr,
        input_size: a.input_size,
        augment: !a.no_augment,
        history_path: Some(a.history.clone().unwrap_or_else(|| default_history_path(&a.out))),
        checkpoint_path: Some(a.out.clone()),
        target_loss: a.target_loss,
        verbose: !a.quiet,
    };
    let outcome = train(&mut model, &train_set, &val_set, &config)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!("final_train_loss={}", last.train_loss);
    println!("best_epoch={}", outcome.best_epoch);
    match outcome.best_val_ber {
        Some(b) => println!("best_val_ber={b}"),
        None => println!("best_val_ber=undefined"),
    }
    println!("checkpoint={}", a.out.display());
    Ok(EXIT_OK)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let model = load_checkpoint(&a.ckpt)?;
    let config = EnsembleConfig {
        scales: a.scales,
        mode: match a.ensemble {
            EnsembleArg::Or => EnsembleMode::OrOfMasks,
            EnsembleArg::Mean => EnsembleMode::ThresholdOfMean,
        },
        threshold: a.threshold,
    };
    let outcome = predict_batch(&model, &a.manifest, &config, &a.out)?;
    eprintln!("wrote {} masks to {}", outcome.written.len(), a.out.display());
    match &outcome.report {
        Some(r) => print_report(r, a.format),
        None => println!("no ground truth"),
    }
    if outcome.skipped.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} image(s) skipped", outcome.skipped.len());
        Ok(EXIT_USER)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("192x96"), Ok((192, 96)));
        assert_eq!(parse_size("64×64"), Ok((64, 64)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn default_scales() {
        let cli = Cli::try_parse_from(["cpnet", "predict", "--ckpt", "c", "--manifest", "m", "--out", "o"]).unwrap();
        match cli.command {
            Command::Predict(p) => {
                assert_eq!(p.scales, vec![192, 256, 384, 480]);
                assert_eq!(p.ensemble, EnsembleArg::Or);
                assert_eq!(p.threshold, 0.5);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["cpnet", "train"]), EXIT_USER);
        assert_eq!(run(["cpnet", "synth", "--out", "x", "--bogus"]), EXIT_USER);
        assert_eq!(run(["cpnet", "frobnicate"]), EXIT_USER);
        assert_eq!(run(["cpnet", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_files_are_user_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.tsv");
        let code = run([
            "cpnet".as_ref(),
            "eval".as_ref(),
            "--pred-dir".as_ref(),
            dir.path().as_os_str(),
            "--manifest".as_ref(),
            missing.as_os_str(),
        ]);
        assert_eq!(code, EXIT_USER);
    }

    #[test]
    fn error_classification() {
        assert!(is_user_error(&Error::InvalidArgument("x".into())));
        assert!(!is_user_error(&Error::NonFiniteLoss { epoch: 1, batch: 1 }));
    }
}
