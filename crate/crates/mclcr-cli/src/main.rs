//! Command-line entry point: dataset generation, spectral analysis,
//! training, evaluation, and gradient verification as reproducible runs.
//!
//! Exit codes: 0 on success, 2 for usage/config problems, 3 for numeric
//! failures. Every run writes a `run.txt` into its output directory
//! echoing the fully resolved configuration.

mod cfgfile;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mclcr_core::dataset::{patch_mask, read_manifest, Region};
use mclcr_core::gradsuite::{gradient_suite, GRAD_CHECK_TOLERANCE};
use mclcr_core::losses::METRICS_CSV_HEADER;
use mclcr_core::spectral::{
    render_residual_map, render_spectrum_map, residual_csv, residual_report, SpectrumView,
};
use mclcr_core::train::scores_csv;
use mclcr_core::{
    evaluate, gen_dataset, load_checkpoint, patch_spectra, save_checkpoint, to_grayscale, train,
    write_pnm, AttnScale, DatasetConfig, ModelConfig, ModelError, Split, SupconDenominator,
    TrainConfig,
};

use cfgfile::FileConfig;

#[derive(Parser)]
#[command(
    name = "mclcr",
    version,
    about = "Multi-modal contrastive image-forgery detection: synthetic benchmarks, \
             patch-spectrum analysis, training, evaluation, and gradient checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a balanced synthetic real/fake split with tamper ground truth
    Gen(GenArgs),
    /// Patch-spectrum residual analysis between a real and a fake image
    Analyze(AnalyzeArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Finite-difference verification of every differentiable subsystem
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of pristine images
    #[arg(long)]
    real: Option<usize>,
    /// Number of tampered images
    #[arg(long)]
    fake: Option<usize>,
    /// Square image extent in pixels [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Patch size the extents must tile [default: 8]
    #[arg(long)]
    patch: Option<usize>,
    /// Master seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Which split to generate: train, val, or test [default: train]
    #[arg(long)]
    split: Option<Split>,
    /// Percentage of fakes using the upsample-artifact kind [default: 50]
    #[arg(long)]
    mix: Option<u32>,
    /// Tamper strength in (0, 1] [default: 1.0]
    #[arg(long)]
    strength: Option<f64>,
    /// key=value file supplying defaults for any of the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (required)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Pristine image (PNM)
    #[arg(long)]
    real: PathBuf,
    /// Tampered image (PNM), same extents
    #[arg(long)]
    fake: PathBuf,
    /// Patch size [default: 8]
    #[arg(long)]
    patch: Option<usize>,
    /// Ground-truth tamper rectangle `x,y,w,h` for group statistics
    #[arg(long)]
    region: Option<String>,
    /// Output directory (required)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding train.manifest and val.manifest
    #[arg(long)]
    data: PathBuf,
    /// Output directory [default: train_out]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Total batch size, half real half fake [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Epochs without val-loss improvement before halving the LR [default: 5]
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image extent [default: 64]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Backbone channel-plan divisor [default: 4]
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Frequency embedding width [default: patch²]
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encode_dim: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Contrastive temperature [default: 0.1]
    #[arg(long)]
    tau: Option<f64>,
    /// Loss trade-off weight [default: 0.5]; 0 disables the contrastive term
    #[arg(long)]
    alpha: Option<f64>,
    /// Ablation: zero the style-feature segments
    #[arg(long)]
    no_ssrb: bool,
    /// Ablation: zero the frequency-feature segments
    #[arg(long)]
    no_papda: bool,
    /// Attention logit scaling: sqrt_d (per head) or sqrt_D (model width)
    #[arg(long)]
    attention_scale: Option<String>,
    /// Contrastive denominator: negatives or all
    #[arg(long)]
    supcon_denominator: Option<String>,
    /// key=value file supplying defaults for any of the flags above
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory holding `<split>.manifest`
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate [default: test]
    #[arg(long)]
    split: Option<Split>,
    /// Output directory [default: eval_out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the randomized check points [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: gradcheck_out]
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(m) => CliError::Numeric(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn write_run_txt(dir: &Path, subcommand: &str, settings: &[(&str, String)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(usage)?;
    let mut lines: Vec<String> = settings
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    lines.sort();
    let mut text = format!("subcommand={subcommand}\n");
    text.push_str(&lines.join("\n"));
    text.push('\n');
    fs::write(dir.join("run.txt"), text).map_err(usage)?;
    Ok(())
}

fn resolve<T>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => file.get(key).map_err(usage)?.map_or(Ok(default), Ok),
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref()).map_err(usage)?;
    let cfg = DatasetConfig {
        real: resolve(args.real, &file, "real", 64)?,
        fake: resolve(args.fake, &file, "fake", 64)?,
        height: resolve(args.size, &file, "size", 64)?,
        width: resolve(args.size, &file, "size", 64)?,
        patch: resolve(args.patch, &file, "patch", 8)?,
        upsample_percent: resolve(args.mix, &file, "mix", 50)?,
        strength: resolve(args.strength, &file, "strength", 1.0)?,
        seed: resolve(args.seed, &file, "seed", 7)?,
        split: resolve(args.split, &file, "split", Split::Train)?,
    };
    let manifest = gen_dataset(&cfg, &args.out).map_err(ModelError::from)?;
    write_run_txt(
        &args.out,
        "gen",
        &[
            ("real", cfg.real.to_string()),
            ("fake", cfg.fake.to_string()),
            ("size", cfg.height.to_string()),
            ("patch", cfg.patch.to_string()),
            ("mix", cfg.upsample_percent.to_string()),
            ("strength", cfg.strength.to_string()),
            ("seed", cfg.seed.to_string()),
            ("split", cfg.split.to_string()),
            ("out", args.out.display().to_string()),
        ],
    )?;
    println!(
        "wrote {} images and {} to {}",
        manifest.entries.len(),
        cfg.split.manifest_name(),
        args.out.display()
    );
    Ok(())
}

fn parse_region(text: &str) -> Result<Region, CliError> {
    let nums: Vec<usize> = text
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad region {text:?}, expected x,y,w,h")))?;
    if nums.len() != 4 {
        return Err(CliError::Usage(format!(
            "region {text:?} needs exactly x,y,w,h"
        )));
    }
    Ok(Region {
        x: nums[0],
        y: nums[1],
        w: nums[2],
        h: nums[3],
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let patch = args.patch.unwrap_or(8);
    let real = mclcr_core::read_pnm(&args.real).map_err(usage)?;
    let fake = mclcr_core::read_pnm(&args.fake).map_err(usage)?;
    if real.height != fake.height || real.width != fake.width {
        return Err(CliError::Usage(format!(
            "extent mismatch: real {}x{} vs fake {}x{}",
            real.height, real.width, fake.height, fake.width
        )));
    }
    let sr = patch_spectra(&to_grayscale(&real), patch).map_err(ModelError::from)?;
    let sf = patch_spectra(&to_grayscale(&fake), patch).map_err(ModelError::from)?;

    let mask = args
        .region
        .as_deref()
        .map(parse_region)
        .transpose()?
        .map(|r| patch_mask(r, real.height, real.width, patch));
    let report =
        residual_report(&sr, &sf, mask.as_deref()).map_err(ModelError::from)?;

    fs::create_dir_all(&args.out).map_err(usage)?;
    let maps = [
        ("real_amplitude.pnm", render_spectrum_map(&sr, SpectrumView::Amplitude)),
        ("real_phase.pnm", render_spectrum_map(&sr, SpectrumView::Phase)),
        ("fake_amplitude.pnm", render_spectrum_map(&sf, SpectrumView::Amplitude)),
        ("fake_phase.pnm", render_spectrum_map(&sf, SpectrumView::Phase)),
        (
            "amplitude_residual.pnm",
            render_residual_map(&sr, &sf, SpectrumView::Amplitude).map_err(ModelError::from)?,
        ),
        (
            "phase_residual.pnm",
            render_residual_map(&sr, &sf, SpectrumView::Phase).map_err(ModelError::from)?,
        ),
    ];
    for (name, img) in &maps {
        write_pnm(img, args.out.join(name)).map_err(usage)?;
    }
    fs::write(args.out.join("residuals.csv"), residual_csv(&report)).map_err(usage)?;

    write_run_txt(
        &args.out,
        "analyze",
        &[
            ("real", args.real.display().to_string()),
            ("fake", args.fake.display().to_string()),
            ("patch", patch.to_string()),
            (
                "region",
                args.region.clone().unwrap_or_else(|| "-".into()),
            ),
            ("out", args.out.display().to_string()),
        ],
    )?;

    let top = report.argmax_amp();
    println!(
        "max amplitude residual at patch {top} (row {}, col {}): {:.6}",
        top / report.grid_w,
        top % report.grid_w,
        report.amp[top]
    );
    if let Some(g) = report.group {
        println!(
            "tampered mean amp residual {:.6} vs untouched {:.6}",
            g.tampered_amp, g.untouched_amp
        );
    }
    Ok(())
}

fn parse_attn_scale(text: &str) -> Result<AttnScale, CliError> {
    match text {
        "sqrt_d" => Ok(AttnScale::SqrtHead),
        "sqrt_D" => Ok(AttnScale::SqrtModel),
        other => Err(CliError::Usage(format!(
            "attention-scale must be sqrt_d or sqrt_D, got {other:?}"
        ))),
    }
}

fn parse_denominator(text: &str) -> Result<SupconDenominator, CliError> {
    match text {
        "negatives" => Ok(SupconDenominator::Negatives),
        "all" => Ok(SupconDenominator::All),
        other => Err(CliError::Usage(format!(
            "supcon-denominator must be negatives or all, got {other:?}"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref()).map_err(usage)?;
    let patch = resolve(args.patch, &file, "patch", 8)?;
    let attention_scale = match args.attention_scale {
        Some(t) => parse_attn_scale(&t)?,
        None => match file.get::<String>("attention-scale").map_err(usage)? {
            Some(t) => parse_attn_scale(&t)?,
            None => AttnScale::SqrtHead,
        },
    };
    let supcon_denominator = match args.supcon_denominator {
        Some(t) => parse_denominator(&t)?,
        None => match file.get::<String>("supcon-denominator").map_err(usage)? {
            Some(t) => parse_denominator(&t)?,
            None => SupconDenominator::Negatives,
        },
    };
    let alpha = resolve(args.alpha, &file, "alpha", 0.5)?;
    let model_cfg = ModelConfig {
        image_extent: resolve(args.size, &file, "size", 64)?,
        patch,
        embed_dim: resolve(args.embed_dim, &file, "embed-dim", patch * patch)?,
        heads: resolve(args.heads, &file, "heads", 4)?,
        backbone_divisor: resolve(args.scale, &file, "scale", 4)?,
        encode_dim: resolve(args.encode_dim, &file, "encode-dim", 1024)?,
        projection_dim: resolve(args.proj_dim, &file, "proj-dim", 128)?,
        dropout: resolve(args.dropout, &file, "dropout", 0.5)?,
        tau: resolve(args.tau, &file, "tau", 0.1)?,
        alpha,
        use_ssrb: !(args.no_ssrb
            || file.get::<bool>("no-ssrb").map_err(usage)?.unwrap_or(false)),
        use_papda: !(args.no_papda
            || file.get::<bool>("no-papda").map_err(usage)?.unwrap_or(false)),
        use_scloss: alpha > 0.0,
        attention_scale,
        supcon_denominator,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: resolve(args.epochs, &file, "epochs", 50)?,
        batch_size: resolve(args.batch, &file, "batch", 16)?,
        lr: resolve(args.lr, &file, "lr", 1e-3)?,
        weight_decay: resolve(args.weight_decay, &file, "weight-decay", 1e-4)?,
        plateau_patience: resolve(args.patience, &file, "patience", 5)?,
        lr_factor: resolve(args.lr_factor, &file, "lr-factor", 0.5)?,
        seed: resolve(args.seed, &file, "seed", 7)?,
    };
    let out = args.out.unwrap_or_else(|| PathBuf::from("train_out"));

    let train_manifest = read_manifest(
        args.data.join(Split::Train.manifest_name()),
        Split::Train,
        train_cfg.seed,
    )
    .map_err(ModelError::from)?;
    let val_manifest = read_manifest(
        args.data.join(Split::Val.manifest_name()),
        Split::Val,
        train_cfg.seed,
    )
    .map_err(ModelError::from)?;

    let result = train(&args.data, &train_manifest, &val_manifest, &model_cfg, &train_cfg)?;

    fs::create_dir_all(&out).map_err(usage)?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for row in &result.metrics {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), csv).map_err(usage)?;
    save_checkpoint(&result.state, out.join("model.ckpt"))?;

    write_run_txt(
        &out,
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("epochs", train_cfg.epochs.to_string()),
            ("batch", train_cfg.batch_size.to_string()),
            ("lr", train_cfg.lr.to_string()),
            ("weight-decay", train_cfg.weight_decay.to_string()),
            ("patience", train_cfg.plateau_patience.to_string()),
            ("lr-factor", train_cfg.lr_factor.to_string()),
            ("seed", train_cfg.seed.to_string()),
            ("size", model_cfg.image_extent.to_string()),
            ("patch", model_cfg.patch.to_string()),
            ("scale", model_cfg.backbone_divisor.to_string()),
            ("heads", model_cfg.heads.to_string()),
            ("embed-dim", model_cfg.embed_dim.to_string()),
            ("encode-dim", model_cfg.encode_dim.to_string()),
            ("proj-dim", model_cfg.projection_dim.to_string()),
            ("dropout", model_cfg.dropout.to_string()),
            ("tau", model_cfg.tau.to_string()),
            ("alpha", model_cfg.alpha.to_string()),
            ("no-ssrb", (!model_cfg.use_ssrb).to_string()),
            ("no-papda", (!model_cfg.use_papda).to_string()),
            (
                "attention-scale",
                match model_cfg.attention_scale {
                    AttnScale::SqrtHead => "sqrt_d".to_string(),
                    AttnScale::SqrtModel => "sqrt_D".to_string(),
                },
            ),
            (
                "supcon-denominator",
                match model_cfg.supcon_denominator {
                    SupconDenominator::Negatives => "negatives".to_string(),
                    SupconDenominator::All => "all".to_string(),
                },
            ),
            ("out", out.display().to_string()),
        ],
    )?;
    println!(
        "best epoch {} with val acc {:.4}; checkpoint and metrics in {}",
        result.state.epoch,
        result.state.best_val_acc,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let split = args.split.unwrap_or(Split::Test);
    let out = args.out.unwrap_or_else(|| PathBuf::from("eval_out"));
    let state = load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(args.data.join(split.manifest_name()), split, 0)
        .map_err(ModelError::from)?;
    let eval = evaluate(&args.data, &manifest, &state)?;

    fs::create_dir_all(&out).map_err(usage)?;
    fs::write(out.join("scores.csv"), scores_csv(&eval.rows)).map_err(usage)?;
    write_run_txt(
        &out,
        "eval",
        &[
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("split", split.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    println!("ACC: {:.4}", eval.acc);
    println!("AUC: {:.4}", eval.auc);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(7);
    let out = args.out.unwrap_or_else(|| PathBuf::from("gradcheck_out"));
    let results = gradient_suite(seed)?;
    write_run_txt(
        &out,
        "gradcheck",
        &[
            ("seed", seed.to_string()),
            ("tolerance", GRAD_CHECK_TOLERANCE.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    println!("{:<18} {:>14}  status", "module", "max rel err");
    let mut worst = 0.0f64;
    for (name, err) in &results {
        let status = if *err <= GRAD_CHECK_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!("{name:<18} {err:>14.3e}  {status}");
        worst = worst.max(*err);
    }
    if worst > GRAD_CHECK_TOLERANCE {
        return Err(CliError::Numeric(format!(
            "gradient check exceeded tolerance: {worst:.3e} > {GRAD_CHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}
