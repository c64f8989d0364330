use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmsr::data::{self, BitDepth, ImagePair};
use dmsr::model::ModelConfig;
use dmsr::train::{self, Checkpoint, EvalSource, TrainConfig, Trainer};
use dmsr::verify;

#[derive(Parser)]
#[command(name = "dmsr", version, about = "Deform-Mamba MRI super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of HR images; LR inputs are synthesized in k-space.
    Train(TrainArgs),
    /// Super-resolve LR images with a trained checkpoint.
    Infer(InferArgs),
    /// PSNR/SSIM of a checkpoint on a directory of HR images.
    Eval(EvalArgs),
    /// Train and score the four ablation variants.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks for one module, or all of them.
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; fields left out take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset used when no config file is given.
    #[arg(long, default_value = "tiny", value_parser = ["tiny", "paper-full"])]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Upsampling factor, 2 or 4.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("scale must be 2 or 4, got {s}")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_json_file(path)?,
            None => TrainConfig {
                model: ModelConfig::preset(&self.preset)?,
                ..TrainConfig::default()
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(scale) = self.scale {
            cfg.model.scale = scale;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of PNG/PGM ground-truth images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh; config flags
    /// other than --iterations are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Reuse (or create) prepared pairs in this directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An LR image or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "16")]
    bit_depth: Depth,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless --bypass is given.
    #[arg(long, required_unless_present = "bypass")]
    checkpoint: Option<PathBuf>,
    /// Directory of ground-truth images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score the ground truth against itself (scale 1), no network involved.
    #[arg(long)]
    bypass: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out images; defaults to the training directory.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Module name, or `all`.
    #[arg(default_value = "all")]
    module: String,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_pairs(dir: &Path, model: &ModelConfig, cache: Option<&Path>) -> Result<Vec<ImagePair>> {
    let pairs = match cache {
        Some(c) if c.join("manifest.json").exists() => data::read_cache(c)?,
        _ => data::load_pairs(dir, model.scale, model.divisibility())?,
    };
    if let Some(c) = cache {
        if !c.join("manifest.json").exists() {
            data::write_cache(&pairs, c)?;
        }
    }
    Ok(pairs)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            if let Some(n) = a.config.iterations {
                t.config.iterations = n;
            }
            t
        }
        None => Trainer::new(a.config.resolve()?)?,
    };
    let pairs = load_pairs(&a.data, &trainer.config.model, a.cache.as_deref())?;
    create_dir(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&trainer.config)?)?;

    let log_path = a.out.join("train_log.jsonl");
    let file = if a.resume.is_some() {
        File::options().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(file.with_context(|| format!("opening {}", log_path.display()))?);
    let stdout = std::io::stdout();
    trainer.run(&pairs, Some(&a.out), |r| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}")
            .and_then(|_| writeln!(stdout.lock(), "{line}"))
            .map_err(|source| dmsr::Error::Io { path: log_path.clone(), source })
    })?;
    log.flush()?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (net, params) = ckpt.network()?;
    let inputs = if a.input.is_dir() {
        data::list_images(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    create_dir(&a.out)?;
    for path in inputs {
        let lr = data::load_image(&path)?;
        let sr = net.infer(&params, &lr).with_context(|| format!("{}", path.display()))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        let ext = if ext == "pgm" { "pgm" } else { "png" };
        let dest = a.out.join(format!("{stem}_sr.{ext}"));
        data::save_image(&sr, &dest, a.bit_depth.into())?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let maps = a.out.join("error_maps");
    create_dir(&maps)?;
    let report = if a.bypass {
        let pairs = data::load_pairs(&a.data, 1, 1)?;
        train::evaluate(EvalSource::Bypass, &pairs, Some(&maps))?
    } else {
        let ckpt = Checkpoint::load(a.checkpoint.as_ref().expect("required by clap"))?;
        let (net, params) = ckpt.network()?;
        let pairs = load_pairs(&a.data, &ckpt.config.model, None)?;
        train::evaluate(EvalSource::Model(&net, &params), &pairs, Some(&maps))?
    };
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let table = report.table();
    fs::write(a.out.join("metrics.txt"), &table)?;
    for r in &report.records {
        println!("{}", serde_json::to_string(r)?);
    }
    print!("{table}");
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let train_pairs = load_pairs(&a.data, &cfg.model, None)?;
    let eval_pairs = match &a.eval_data {
        Some(dir) => load_pairs(dir, &cfg.model, None)?,
        None => train_pairs.clone(),
    };
    let rows = train::ablate(&cfg, &train_pairs, &eval_pairs)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    let table = train::ablation_table(&rows);
    fs::write(a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_check_grad(a: CheckGradArgs) -> Result<()> {
    let reports = if a.module == "all" {
        verify::check_all()?
    } else {
        vec![verify::check_module(&a.module)?]
    };
    for r in &reports {
        print!("{r}");
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.module.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
