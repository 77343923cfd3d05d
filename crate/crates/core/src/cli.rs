//! Command-line front end. Exit codes: 0 success, 1 verification failure,
//! 2 usage error, 3 I/O or file-format error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{labelled_images, load_bundle, save_bundle, synth_generate, SynthConfig};
use crate::error::{Error, Result};
use crate::evalkit::{extract_features, fine_tune, linear_probe, EvalRecord, FeatureSource, FineTuneConfig, ProbeConfig};
use crate::gradcheck::GradCheckOptions;
use crate::model::{ModelConfig, ModelParams};
use crate::patcher::PatchGrid;
use crate::trainer::{train_loop, RunPaths, TrainConfig, TrainState, Variant};
use crate::verify::{value_suite, Probe};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Relative-error bound used by `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "maskedclip", version, about = "Masked image modeling plus label-guided contrastive pre-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired/unpaired image bundle.
    GenData(GenDataArgs),
    /// Pre-train a model on a bundle.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint with a linear probe or fine-tuning.
    Eval(EvalArgs),
    /// Finite-difference check of every loss through a random model.
    Gradcheck(GradcheckArgs),
    /// Closed-form and oracle checks of the loss values.
    Losscheck(LosscheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of image-text-label triplets.
    #[arg(long)]
    pub paired: usize,
    /// Number of image-only items.
    #[arg(long)]
    pub unpaired: usize,
    /// Number of classes (at least 2).
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(2..))]
    pub classes: u32,
    /// Image size as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Square patch side; must divide both image sides.
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    /// Image channels.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Caption length in tokens after padding.
    #[arg(long, default_value_t = 16)]
    pub max_text_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output bundle path; a manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// 4-block, 128-wide encoder and bridge.
    Desk,
    /// 2-block, 64-wide encoder and bridge.
    Compact,
    /// 1-block, 8-wide stacks for smoke runs.
    Tiny,
}

impl ModelPreset {
    pub fn build(self, grid: PatchGrid, vocab_size: usize, max_text_len: usize) -> ModelConfig {
        let mut cfg = match self {
            ModelPreset::Desk => {
                let mut c = ModelConfig::desk(vocab_size);
                c.grid = grid;
                c
            }
            ModelPreset::Compact => ModelConfig::compact(grid, vocab_size),
            ModelPreset::Tiny => ModelConfig::tiny(grid, vocab_size),
        };
        cfg.max_text_len = max_text_len;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Bundle written by gen-data.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory for checkpoint.mclp, train_log.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file whose keys mirror these flag names; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Fraction of patches hidden from the encoder.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Momentum-encoder decay.
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub lambda_clip: Option<f64>,
    #[arg(long)]
    pub lambda_mfd: Option<f64>,
    /// maskedclip, mae_clip_shared, mae_clip_bridge, mae_only or clip_only.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paired_batch: Option<usize>,
    #[arg(long)]
    pub unpaired_batch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Save an intermediate checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Model size.
    #[arg(long, value_enum)]
    pub model: Option<ModelPreset>,
    /// Only print the final summary.
    #[arg(long)]
    pub quiet: bool,
}

/// Keys accepted in a `--config` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PretrainFile {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub ema: Option<f64>,
    pub lambda_clip: Option<f64>,
    pub lambda_mfd: Option<f64>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub paired_batch: Option<usize>,
    pub unpaired_batch: Option<usize>,
    pub weight_decay: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub model: Option<ModelPreset>,
}

impl PretrainFile {
    /// Later layers win, field by field.
    fn overlay(self, top: PretrainFile) -> PretrainFile {
        PretrainFile {
            epochs: top.epochs.or(self.epochs),
            lr: top.lr.or(self.lr),
            warmup_epochs: top.warmup_epochs.or(self.warmup_epochs),
            mask_ratio: top.mask_ratio.or(self.mask_ratio),
            ema: top.ema.or(self.ema),
            lambda_clip: top.lambda_clip.or(self.lambda_clip),
            lambda_mfd: top.lambda_mfd.or(self.lambda_mfd),
            variant: top.variant.or(self.variant),
            seed: top.seed.or(self.seed),
            paired_batch: top.paired_batch.or(self.paired_batch),
            unpaired_batch: top.unpaired_batch.or(self.unpaired_batch),
            weight_decay: top.weight_decay.or(self.weight_decay),
            checkpoint_every: top.checkpoint_every.or(self.checkpoint_every),
            model: top.model.or(self.model),
        }
    }

    /// Apply on top of the built-in defaults. An unset warmup shrinks to a
    /// fifth of the run when the default would not fit.
    pub fn resolve(&self) -> Result<(TrainConfig, ModelPreset)> {
        let mut c = TrainConfig::default();
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.base_lr = self.lr.unwrap_or(c.base_lr);
        c.warmup_epochs = match self.warmup_epochs {
            Some(w) => w,
            None if c.warmup_epochs >= c.epochs => c.epochs / 5,
            None => c.warmup_epochs,
        };
        c.mask_ratio = self.mask_ratio.unwrap_or(c.mask_ratio);
        c.ema_decay = self.ema.unwrap_or(c.ema_decay);
        c.lambda_clip = self.lambda_clip.unwrap_or(c.lambda_clip);
        c.lambda_mfd = self.lambda_mfd.unwrap_or(c.lambda_mfd);
        c.variant = self.variant.unwrap_or(c.variant);
        c.seed = self.seed.unwrap_or(c.seed);
        c.paired_batch = self.paired_batch.unwrap_or(c.paired_batch);
        c.unpaired_batch = self.unpaired_batch.unwrap_or(c.unpaired_batch);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.checkpoint_every = self.checkpoint_every.unwrap_or(c.checkpoint_every);
        c.validate()?;
        Ok((c, self.model.unwrap_or(ModelPreset::Desk)))
    }
}

impl PretrainArgs {
    fn flags(&self) -> PretrainFile {
        PretrainFile {
            epochs: self.epochs,
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            mask_ratio: self.mask_ratio,
            ema: self.ema,
            lambda_clip: self.lambda_clip,
            lambda_mfd: self.lambda_mfd,
            variant: self.variant,
            seed: self.seed,
            paired_batch: self.paired_batch,
            unpaired_batch: self.unpaired_batch,
            weight_decay: self.weight_decay,
            checkpoint_every: self.checkpoint_every,
            model: self.model,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Probe,
    Finetune,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bundle whose paired images and labels form the evaluation task.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum, default_value = "probe")]
    pub mode: EvalMode,
    /// Share of the training split used, in (0, 1].
    #[arg(long, default_value_t = 1.0, value_parser = parse_fraction)]
    pub label_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Representation read by the probe.
    #[arg(long, value_enum, default_value = "encoder")]
    pub features: FeatureArg,
    /// Fine-tuning epochs.
    #[arg(long, default_value_t = 20)]
    pub finetune_epochs: usize,
    /// JSON results file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Encoder,
    Bridge,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Model widths to check; desk runs on 8x8 inputs to stay fast.
    #[arg(long, value_enum, default_value = "tiny")]
    pub model: ModelPreset,
    /// Scale analytic gradients before comparing (fault injection).
    #[arg(long, hide = true)]
    pub corrupt_gradient: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(h)?, num(w)?))
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must be in (0, 1], got {v}"))
    }
}

/// Written before a command does its work and completed afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            artifacts: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn to_json<S: Serialize>(v: &S) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::ConfigMismatch { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) | Error::KeyMismatch(_) => EXIT_IO,
        _ => EXIT_VERIFY,
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| EXIT_OK),
        Command::Pretrain(a) => pretrain(a).map(|_| EXIT_OK),
        Command::Eval(a) => eval(a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Losscheck(a) => losscheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let grid = PatchGrid::new(a.size.0, a.size.1, a.channels, a.patch)?;
    let cfg = SynthConfig {
        n_paired: a.paired,
        n_unpaired: a.unpaired,
        n_classes: a.classes as usize,
        grid,
        max_text_len: a.max_text_len,
        seed: a.seed,
    };
    let manifest_path = a.out.with_extension("manifest.json");
    let mut manifest = RunManifest::new(
        "gen-data",
        a.seed,
        serde_json::json!({
            "paired": a.paired,
            "unpaired": a.unpaired,
            "classes": a.classes,
            "grid": grid,
            "max_text_len": a.max_text_len,
        }),
    );
    manifest.artifacts.insert("bundle".into(), a.out.clone());
    manifest.artifacts.insert("manifest".into(), manifest_path.clone());
    let bundle = synth_generate(&cfg)?;
    save_bundle(&bundle, &a.out)?;
    manifest.finished_unix = Some(now());
    manifest.write(&manifest_path)?;
    println!(
        "wrote {} ({} paired, {} unpaired, {} classes)",
        a.out.display(),
        bundle.paired.len(),
        bundle.unpaired.len(),
        bundle.num_classes()
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<PretrainFile>(&text)
                .map_err(|e| Error::invalid(format!("{}: {}", path.display(), e.message())))?
        }
        None => PretrainFile::default(),
    };
    let (train, preset) = file.overlay(a.flags()).resolve()?;
    let bundle = load_bundle(&a.bundle)?;
    let model = preset.build(bundle.grid, bundle.vocab.size(), bundle.vocab.max_len);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let paths = RunPaths::in_dir(&a.out_dir);
    let manifest_path = a.out_dir.join("manifest.json");
    let mut manifest = RunManifest::new(
        "pretrain",
        train.seed,
        serde_json::json!({ "train": to_json(&train)?, "model": to_json(&model)?, "preset": preset }),
    );
    manifest.artifacts.insert("bundle".into(), a.bundle.clone());
    manifest.artifacts.insert("checkpoint".into(), paths.checkpoint.clone());
    manifest.artifacts.insert("log".into(), paths.log.clone());
    manifest.artifacts.insert("manifest".into(), manifest_path.clone());
    manifest.write(&manifest_path)?;

    let mut state = TrainState::new(train, model)?;
    let per_epoch = state.steps_per_epoch(&bundle)?;
    let quiet = a.quiet;
    let records = train_loop(&mut state, &bundle, &paths, |r| {
        if !quiet && (r.step as usize + 1).is_multiple_of(per_epoch) {
            let l = &r.losses;
            eprintln!(
                "epoch {:>4}  step {:>6}  lr {:.3e}  mim {:.4}  lg_clip {:.4}  mfd {:.4}  total {:.5}",
                (r.step as usize + 1) / per_epoch,
                r.step + 1,
                r.lr,
                l.mim,
                l.lg_clip,
                l.mfd,
                l.total
            );
        }
    })?;
    manifest.finished_unix = Some(now());
    manifest.write(&manifest_path)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} steps ({}), final total loss {:.6}; checkpoint {}",
            records.len(),
            state.config.variant,
            last.losses.total,
            paths.checkpoint.display()
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model: ModelParams<f32> = checkpoint::load_model(&a.checkpoint)?;
    let bundle = load_bundle(&a.bundle)?;
    if bundle.grid != model.config.grid {
        return Err(Error::invalid(format!(
            "bundle images {:?} do not match the checkpoint's {:?}",
            bundle.grid, model.config.grid
        )));
    }
    let (images, labels) = labelled_images(&bundle)?;
    let k = bundle.num_classes();
    let source = match a.features {
        FeatureArg::Encoder => FeatureSource::Encoder,
        FeatureArg::Bridge => FeatureSource::Bridge,
    };
    let (mode, result, probe, finetune) = match a.mode {
        EvalMode::Probe => {
            let cfg = ProbeConfig::default();
            let feats = extract_features(&model, &images, source)?;
            let r = linear_probe(&feats, &labels, k, a.label_fraction, a.seed, &cfg)?;
            ("probe", r, Some(cfg), None)
        }
        EvalMode::Finetune => {
            let cfg = FineTuneConfig {
                epochs: a.finetune_epochs,
                warmup_epochs: FineTuneConfig::default().warmup_epochs.min(a.finetune_epochs.saturating_sub(1)),
                ..Default::default()
            };
            let (r, _) = fine_tune(&model, &images, &labels, k, a.label_fraction, a.seed, &cfg)?;
            ("finetune", r, None, Some(cfg))
        }
    };
    let record = EvalRecord {
        mode: mode.into(),
        checkpoint: a.checkpoint.display().to_string(),
        bundle: a.bundle.display().to_string(),
        seed: a.seed,
        label_fraction: a.label_fraction,
        feature_source: source,
        probe,
        finetune,
        result,
    };
    write_json(&a.out, &record)?;
    let r = &record.result;
    println!(
        "{mode}: macro ROC-AUC {:.4}  macro PR-AUC {:.4}  accuracy {:.4}  (train {}, test {})",
        r.macro_roc_auc, r.macro_pr_auc, r.accuracy, r.train_size, r.test_size
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let (grid, vocab) = match a.model {
        ModelPreset::Tiny => (PatchGrid::new(8, 8, 1, 4)?, 12),
        _ => (PatchGrid::new(8, 8, 3, 4)?, 40),
    };
    let text_len = if a.model == ModelPreset::Tiny { 4 } else { 16 };
    let config = a.model.build(grid, vocab, text_len);
    let probe = Probe::random(config, 3, 2, 0.5, a.seed)?;
    let options = GradCheckOptions {
        samples_per_param: a.samples,
        analytic_scale: a.corrupt_gradient.unwrap_or(1.0),
        ..Default::default()
    };
    let mut failed = false;
    for (term, report) in probe.check_all(&options, a.seed)? {
        let ok = report.max_rel_error <= GRAD_TOLERANCE;
        failed |= !ok;
        let worst = report.worst().map_or("-", |w| w.0);
        println!(
            "{:<8} max rel err {:.3e}  coords {:>6}  worst {:<44} {}",
            term.name(),
            report.max_rel_error,
            report.coords_checked,
            worst,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if failed { EXIT_VERIFY } else { EXIT_OK })
}

pub fn losscheck(a: &LosscheckArgs) -> Result<i32> {
    let mut failed = false;
    for check in value_suite(a.seed)? {
        let ok = check.passed();
        failed |= !ok;
        println!(
            "{:<42} got {:>12.8}  expected {:>12.8}  err {:.2e}  {}",
            check.name,
            check.got,
            check.expected,
            check.error(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if failed { EXIT_VERIFY } else { EXIT_OK })
}
