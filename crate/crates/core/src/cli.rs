//! Command-line front end.
//!
//! Every subcommand also accepts `--config FILE`, a flat `key=value` file
//! whose keys are flag names without the leading dashes. Flags given on the
//! command line win over values from the file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::check::{run_gradient_suite, SuiteOptions};
use crate::data::{center_crop_to_multiple, load_dir, load_image, save_pgm};
use crate::error::{Error, Result};
use crate::eval::{blockiness_index, emit_diff_image, evaluate_suite, psnr, EvalCell};
use crate::model::{AnyModel, CsModel, Method, ModelConfig};
use crate::train::{loss_csv, Checkpoint, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "blockcs", version, about = "Learned block compressive sensing with full-image reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a full or baseline model on a directory of images.
    Train(TrainArgs),
    /// Evaluate checkpoints on a test directory and write CSV + Markdown reports.
    Eval(EvalArgs),
    /// Measure and reconstruct one image with a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write the measurement operator as an M x B^2 CSV matrix.
    ExportMatrix(ExportArgs),
}

fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must be in (0, 1], got {v}"))
    }
}

fn parse_non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and >= 0, got {s}"))
    }
}

fn parse_positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and > 0, got {s}"))
    }
}

fn parse_block(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 2 {
        Ok(v)
    } else {
        Err(format!("must be at least 2, got {v}"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

fn parse_positive_u64(s: &str) -> std::result::Result<u64, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Measurement rate M / B^2.
    #[arg(long, default_value_t = 0.25, value_parser = parse_rate)]
    pub rate: f64,
    /// Block size B.
    #[arg(long, default_value_t = 16, value_parser = parse_block)]
    pub block: usize,
    /// Channels of the reconstruction trunk.
    #[arg(long, default_value_t = 32, value_parser = parse_positive)]
    pub channels: usize,
    /// Number of residual blocks.
    #[arg(long = "res-blocks", default_value_t = 5, value_parser = parse_positive)]
    pub res_blocks: usize,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.block, self.rate, self.channels, self.res_blocks)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Reconstruction pipeline.
    #[arg(long, default_value = "full", value_parser = parse_method)]
    pub method: Method,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4, value_parser = parse_non_negative)]
    pub lr: f64,
    #[arg(long, default_value_t = 200, value_parser = parse_positive_u64)]
    pub epochs: u64,
    /// Crops per batch.
    #[arg(long, default_value_t = 8, value_parser = parse_positive)]
    pub batch: usize,
    /// Square crop size; must be a multiple of --block.
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub crop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Batches per epoch [default: ceil(images / batch)].
    #[arg(long = "steps-per-epoch", value_parser = parse_positive_u64)]
    pub steps_per_epoch: Option<u64>,
    /// Cap on the global gradient L2 norm [default: no clipping].
    #[arg(long = "clip-grad-norm", value_parser = parse_positive_f64)]
    pub clip_grad_norm: Option<f64>,
    /// Training image directory (.pgm / .png).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and loss.csv.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Checkpoint path [default: OUT/<method>-r<rate>.bcs].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Log every N steps (0 disables).
    #[arg(long = "log-every", default_value_t = 50)]
    pub log_every: u64,
    /// Flat key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Test image directory.
    #[arg(long)]
    pub test: PathBuf,
    /// Directory holding <method>-r<rate>.bcs checkpoints.
    #[arg(long = "checkpoint-dir", default_value = "runs")]
    pub checkpoint_dir: PathBuf,
    /// Measurement rates to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.04,0.1,0.25", value_parser = parse_rate)]
    pub rates: Vec<f64>,
    /// Methods to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "full,baseline", value_parser = parse_method)]
    pub methods: Vec<Method>,
    /// Output directory for report.csv and report.md.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// Flat key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image to measure and reconstruct.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for the reconstruction and difference images.
    #[arg(long, default_value = "recon")]
    pub out: PathBuf,
    /// Flat key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Largest accepted relative error (exclusive).
    #[arg(long, default_value_t = 1e-5, value_parser = parse_non_negative)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one op's analytic gradient (suite self-test).
    #[arg(long = "inject-sign-flip", hide = true)]
    pub inject_sign_flip: Option<String>,
    /// Flat key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Trained checkpoint [default: a fresh model from --seed].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output path.
    #[arg(long, default_value = "measurement.csv")]
    pub out: PathBuf,
    /// Flat key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Command {
    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Train(a) => a.config.as_deref(),
            Command::Eval(a) => a.config.as_deref(),
            Command::Reconstruct(a) => a.config.as_deref(),
            Command::Gradcheck(a) => a.config.as_deref(),
            Command::ExportMatrix(a) => a.config.as_deref(),
        }
    }
}

/// Reads a `key=value` file into `(flag, value)` pairs, `flag` with dashes.
pub fn config_file_args(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
        let key = key.trim().trim_start_matches("--");
        if key == "config" {
            return Err(Error::Config(format!("config line {}: nested config files are not supported", n + 1)));
        }
        out.push((format!("--{key}"), value.trim().to_string()));
    }
    Ok(out)
}

/// Parses the command line, folding in `--config` values behind explicit flags.
pub fn parse_args(args: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let cli = Cli::try_parse_from(&args)?;
    let Some(path) = cli.command.config_path() else {
        return Ok(cli);
    };
    let text = fs::read_to_string(path).map_err(|e| {
        clap::Error::raw(
            clap::error::ErrorKind::Io,
            format!("--config {}: {e}\n", path.display()),
        )
    })?;
    let file_args = config_file_args(&text)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("--config: {e}\n")))?;
    let explicit: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let split = 2.min(args.len());
    let mut merged = args[..split].to_vec();
    for (flag, value) in file_args {
        if !explicit.contains(&flag) {
            merged.push(flag.into());
            merged.push(value.into());
        }
    }
    merged.extend_from_slice(&args[split..]);
    Cli::try_parse_from(merged)
}

/// Default checkpoint file name for one rate x method cell.
pub fn checkpoint_name(method: Method, rate: f64) -> String {
    format!("{method}-r{rate}.bcs")
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let model = args.model.config()?;
    if args.crop % args.model.block != 0 {
        return Err(Error::Config(format!(
            "--crop {} must be a multiple of --block {}",
            args.crop, args.model.block
        )));
    }
    fs::create_dir_all(&args.out)?;
    let checkpoint_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join(checkpoint_name(args.method, args.model.rate)));
    let config = TrainConfig {
        model,
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        crop_size: args.crop,
        seed: args.seed,
        steps_per_epoch: args.steps_per_epoch,
        checkpoint_path: Some(checkpoint_path.clone()),
        log_every: args.log_every,
        clip_grad_norm: args.clip_grad_norm,
    };
    let dataset = load_dir(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!("--data {}: no .pgm or .png images", args.data.display())));
    }
    let dataset = Arc::new(dataset);
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.method != args.method {
                return Err(Error::Config(format!(
                    "--resume {} holds a {} model but --method is {}",
                    path.display(),
                    ck.method,
                    args.method
                )));
            }
            Trainer::resume(config, ck, dataset)?
        }
        None => Trainer::new(config, args.method, dataset)?,
    };
    log::info!(
        "training {} model, M={}, {} steps",
        args.method,
        model.measurements(),
        trainer.total_steps()
    );
    let history = trainer.run_to_end()?;
    trainer.checkpoint().save(&checkpoint_path)?;
    fs::write(args.out.join("loss.csv"), loss_csv(&history))?;
    println!("checkpoint: {}", checkpoint_path.display());
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("loss: {} -> {} over {} steps", first.loss, last.loss, history.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut cells = Vec::new();
    for &rate in &args.rates {
        for &method in &args.methods {
            cells.push(EvalCell {
                rate,
                method,
                checkpoint: args.checkpoint_dir.join(checkpoint_name(method, rate)),
            });
        }
    }
    let report = evaluate_suite(&cells, &args.test).map_err(|e| match e {
        Error::EmptyDataset => Error::Config(format!("--test {}: no .pgm or .png images", args.test.display())),
        other => other,
    })?;
    report.write(&args.out)?;
    print!("{}", report.to_markdown());
    Ok(ExitCode::SUCCESS)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<ExitCode> {
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let block = model.config().block_size;
    let record = load_image(&args.input)?;
    let (image, cropped) = center_crop_to_multiple(&record.pixels, block)?;
    if cropped {
        log::warn!(
            "{} center-cropped from {}x{} to {}x{}",
            args.input.display(),
            record.height(),
            record.width(),
            image.height(),
            image.width()
        );
    }
    let recon = model.reconstruct(&image)?;
    fs::create_dir_all(&args.out)?;
    let stem = record.name();
    save_pgm(&recon, args.out.join(format!("{stem}_recon.pgm")))?;
    emit_diff_image(&image, &recon, args.out.join(format!("{stem}_diff.pgm")))?;
    let psnr_db = psnr(&image, &recon)?;
    print!("{stem}: {}x{} psnr {psnr_db:.4} dB", image.height(), image.width());
    match blockiness_index(&recon, block) {
        Ok(bi) => println!(" blockiness {bi:.4}"),
        Err(_) => println!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let options = SuiteOptions {
        seed: args.seed,
        flip_sign: args.inject_sign_flip,
    };
    let results = run_gradient_suite(&options, args.tolerance)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{:<16} max rel error {:.3e}  {verdict}", r.op, r.max_rel_error);
        ok &= r.passed;
    }
    if ok {
        println!("gradient check passed (tolerance {:e})", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op).collect();
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_export(args: ExportArgs) -> Result<ExitCode> {
    let model = match &args.checkpoint {
        Some(path) => Checkpoint::load(path)?.to_model()?,
        None => AnyModel::<f32>::init(Method::Full, args.model.config()?, args.seed)?,
    };
    let op = model.measurement();
    fs::write(&args.out, op.to_matrix_csv())?;
    println!(
        "{}: {} x {} matrix",
        args.out.display(),
        op.measurements(),
        op.block_size() * op.block_size()
    );
    Ok(ExitCode::SUCCESS)
}

fn init_threads() {
    if let Some(n) = std::env::var("BLOCKCS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportMatrix(a) => cmd_export(a),
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = match parse_args(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
