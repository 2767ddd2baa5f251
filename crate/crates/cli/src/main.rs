mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ooc_core::checkpoint::{load_checkpoint, save_checkpoint};
use ooc_core::data::{generate_synthetic, Split};
use ooc_core::explain::{
    client_for_endpoint, generate_warning, resolve_endpoint, select_attended_pages, ExplainError,
    HttpClient, GenerationClient, STUB_ENDPOINT,
};
use ooc_core::metrics::evaluate;
use ooc_core::model::{forward, ConsistencyScores};
use ooc_core::training::{train_with_progress, OptimizerKind, SINGLE_DEVICE_RESCALE};
use ooc_core::{count_parameters, load_dataset, save_dataset, ModelConfig, ModelParams, Mode, Sample, SynthSpec, Verdict};
use serde::Serialize;

use config::{pick_path, RunConfig};

#[derive(Parser)]
#[command(name = "ooc", version, about = "Out-of-context image/caption detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset archive.
    Synth(SynthArgs),
    /// Train a detector and save the best checkpoint.
    Train(TrainArgs),
    /// Report accuracy, ROC AUC and EER of a checkpoint.
    Eval(EvalArgs),
    /// Score every sample of one split as JSON lines.
    Predict(PredictArgs),
    /// Build warning prompts and query the generation service.
    Explain(ExplainArgs),
    /// Count the trainable parameters of a model configuration.
    Params(ParamsArgs),
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Validation,
    Test,
    /// An 80/10/10 partition written to OUT/train, OUT/validation, OUT/test.
    All,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5, value_parser = parse_fraction)]
    falsified_fraction: f64,
    /// Alignment of pristine evidence with the query.
    #[arg(long, default_value_t = 0.8, value_parser = parse_fraction)]
    correlation: f64,
    #[arg(long, default_value_t = 64)]
    d_v: usize,
    #[arg(long, default_value_t = 64)]
    d_t: usize,
    #[arg(long, default_value_t = 128)]
    d_mm: usize,
    /// Fewest evidence items per kind.
    #[arg(long, default_value_t = 0)]
    evidence_min: usize,
    /// Most evidence items per kind.
    #[arg(long, default_value_t = 5)]
    evidence_max: usize,
    #[arg(long, value_enum, default_value_t = SplitChoice::Train)]
    split: SplitChoice,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data root with train/ and validation/ archives [default: paths.data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write [default: paths.checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training history JSON [default: <checkpoint>.history.json].
    #[arg(long)]
    history: Option<PathBuf>,
    /// Mini-batch size [default: train.batch_size, else 64].
    #[arg(long)]
    batch_size: Option<usize>,
    /// `single-device` (1/√3), `none`, or a positive factor [default: train.lr_rescale, else none].
    #[arg(long)]
    lr_rescale: Option<String>,
    /// [default: train.max_epochs, else 100]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// [default: train.patience, else 5]
    #[arg(long)]
    patience: Option<usize>,
    /// [default: train.seed, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Plain SGD instead of Adam.
    #[arg(long)]
    sgd: bool,
    /// Attention heads [default: model.n_heads, else 8].
    #[arg(long)]
    heads: Option<usize>,
    /// Drop the label-label block.
    #[arg(long)]
    drop_labels: bool,
    /// Drop the page-page block.
    #[arg(long)]
    drop_pages: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: paths.checkpoint]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Data root with validation/ and test/ archives [default: paths.data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the metrics JSON here [default: paths.report, else stdout only].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: paths.checkpoint]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// [default: paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    /// JSONL output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: paths.checkpoint]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// [default: paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    /// Samples to explain; repeat for several [default: all].
    #[arg(long = "sample-id")]
    sample_ids: Vec<String>,
    /// Generation service URL or `stub` [default: $OOC_VLM_ENDPOINT, then vlm_endpoint, then stub].
    #[arg(long)]
    endpoint: Option<String>,
    /// Refuse samples without an image_ref.
    #[arg(long)]
    require_image: bool,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// JSONL output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoder {
    Std,
    Alt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Multimodal {
    Clip,
    Minigpt4,
}

#[derive(Args)]
struct ParamsArgs {
    /// Use the [model] table of this run configuration instead of the presets.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vision encoder (both produce 768 dims).
    #[arg(long, value_enum, default_value_t = Encoder::Std)]
    vision: Encoder,
    /// Sentence encoder: std is 768 dims, alt is 384.
    #[arg(long, value_enum, default_value_t = Encoder::Std)]
    text: Encoder,
    /// Pair encoder: clip is 512 dims, minigpt4 is 4096.
    #[arg(long, value_enum, default_value_t = Multimodal::Minigpt4)]
    multimodal: Multimodal,
    #[arg(long)]
    drop_labels: bool,
    #[arg(long)]
    drop_pages: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.evidence_min > a.evidence_max {
        bail!("--evidence-min must not exceed --evidence-max");
    }
    let single = match a.split {
        SplitChoice::Train => Some(Split::Train),
        SplitChoice::Validation => Some(Split::Validation),
        SplitChoice::Test => Some(Split::Test),
        SplitChoice::All => None,
    };
    let spec = SynthSpec {
        n_samples: a.n,
        falsified_fraction: a.falsified_fraction,
        d_v: a.d_v,
        d_t: a.d_t,
        d_mm: a.d_mm,
        evidence_count_range: (a.evidence_min, a.evidence_max),
        correlation: a.correlation,
        seed: a.seed,
        split: single.unwrap_or(Split::Train),
    };
    let (manifest, samples) = generate_synthetic(&spec)?;
    if single.is_none() {
        let n_train = a.n * 8 / 10;
        let n_val = a.n / 10;
        let parts = [
            (Split::Train, &samples[..n_train]),
            (Split::Validation, &samples[n_train..n_train + n_val]),
            (Split::Test, &samples[n_train + n_val..]),
        ];
        for (split, part) in parts {
            let dir = a.out.join(split.as_str());
            let m = ooc_core::DatasetManifest {
                split,
                sample_count: part.len(),
                ..manifest.clone()
            };
            save_dataset(&dir, &m, part).with_context(|| format!("cannot write {}", dir.display()))?;
            eprintln!("wrote {} samples to {}", part.len(), dir.display());
        }
        return Ok(());
    }
    save_dataset(&a.out, &manifest, &samples).with_context(|| format!("cannot write {}", a.out.display()))?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn parse_rescale(s: &str) -> Result<f64> {
    match s {
        "single-device" => Ok(SINGLE_DEVICE_RESCALE),
        "none" => Ok(1.0),
        other => match other.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
            _ => bail!("--lr-rescale expects `single-device`, `none` or a positive number, got `{other}`"),
        },
    }
}

fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        bail!("missing {split} split: {} does not exist", dir.display());
    }
    let (manifest, samples) = load_dataset(&dir).with_context(|| format!("cannot load {}", dir.display()))?;
    if manifest.split != split {
        bail!("{} declares split `{}`, expected `{split}`", dir.display(), manifest.split);
    }
    Ok(samples)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let root = pick_path(a.data, &run.paths.data, "data root")?;
    let out = pick_path(a.out, &run.paths.checkpoint, "checkpoint path")?;

    let mut tc = run.train.clone();
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(s) = &a.lr_rescale {
        tc.lr_rescale = parse_rescale(s)?;
    }
    if let Some(v) = a.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if a.sgd {
        tc.optimizer = OptimizerKind::Sgd;
    }

    let train_set = load_split(&root, Split::Train)?;
    let val_set = load_split(&root, Split::Validation).context("early stopping needs a validation split")?;
    let dims = load_dataset(root.join("train"))?.0.dims();

    let mut model = run
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::new(dims.d_v, dims.d_t, dims.d_mm));
    if (model.d_v, model.d_t, model.d_mm) != (dims.d_v, dims.d_t, dims.d_mm) {
        bail!(
            "model dimensions ({}, {}, {}) do not match the archive ({}, {}, {})",
            model.d_v, model.d_t, model.d_mm, dims.d_v, dims.d_t, dims.d_mm
        );
    }
    if let Some(h) = a.heads {
        model.n_heads = h;
    }
    model.use_label_block &= !a.drop_labels;
    model.use_page_block &= !a.drop_pages;

    let quiet = a.quiet;
    let (params, history) = train_with_progress(&train_set, &val_set, &model, &tc, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train loss {:.5}  val loss {:.5}  val acc {:.4}  lr {:.3e}",
                r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.learning_rate
            );
        }
    })?;
    save_checkpoint(&params, &model, &out)?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".history.json");
        PathBuf::from(p)
    });
    fs::write(&history_path, serde_json::to_string_pretty(&history)? + "\n")
        .with_context(|| format!("cannot write {}", history_path.display()))?;

    // the effective configuration, so the run can be repeated with --config
    let effective = RunConfig {
        model: Some(model),
        train: tc,
        paths: config::Paths {
            data: Some(root),
            checkpoint: Some(out.clone()),
            report: run.paths.report.clone(),
        },
        vlm_endpoint: run.vlm_endpoint.clone(),
    };
    let mut config_path = out.clone().into_os_string();
    config_path.push(".config.toml");
    fs::write(&config_path, effective.to_toml()?)?;
    eprintln!(
        "best epoch {} of {}; checkpoint {}",
        history.best_epoch,
        history.stopped_epoch,
        out.display()
    );
    Ok(())
}

fn load_model(flag: Option<PathBuf>, run: &RunConfig) -> Result<(ModelParams, ModelConfig)> {
    let path = pick_path(flag, &run.paths.checkpoint, "checkpoint")?;
    load_checkpoint(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn check_dims(model: &ModelConfig, samples: &[Sample]) -> Result<()> {
    if let Some(s) = samples.first() {
        let got = (s.image_embedding.len(), s.caption_embedding.len(), s.pair_embedding.len());
        if got != (model.d_v, model.d_t, model.d_mm) {
            bail!(
                "checkpoint expects dimensions ({}, {}, {}) but the data has {got:?}",
                model.d_v, model.d_t, model.d_mm
            );
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let (params, model) = load_model(a.checkpoint, &run)?;
    let root = pick_path(a.data, &run.paths.data, "data root")?;
    let val = load_split(&root, Split::Validation)?;
    let test = load_split(&root, Split::Test)?;
    check_dims(&model, &val)?;
    check_dims(&model, &test)?;
    let metrics = evaluate(&params, &model, &val, &test)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(path) = a.report.or(run.paths.report) {
        fs::write(&path, json.clone() + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", metrics.to_table());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    sample_id: &'a str,
    label: u8,
    p_class: f64,
    verdict: Verdict,
    threshold: f64,
    scores: &'a ConsistencyScores,
    attended_page_ids: &'a [String],
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let (params, model) = load_model(a.checkpoint, &run)?;
    let root = pick_path(a.data, &run.paths.data, "data root")?;
    let samples = load_split(&root, a.split)?;
    check_dims(&model, &samples)?;
    let mut out = output(a.out.as_deref())?;
    for s in &samples {
        let f = forward(s, &params, &model, Mode::Eval)?;
        let record = PredictionRecord {
            sample_id: &s.sample_id,
            label: s.label,
            p_class: f.prediction.p_class,
            verdict: f.prediction.verdict,
            threshold: f.prediction.threshold_used,
            scores: &f.scores,
            attended_page_ids: &f.ranking.attended_page_ids,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let (params, model) = load_model(a.checkpoint, &run)?;
    let root = pick_path(a.data, &run.paths.data, "data root")?;
    let samples = load_split(&root, a.split)?;
    check_dims(&model, &samples)?;

    let chosen: Vec<&Sample> = if a.sample_ids.is_empty() {
        samples.iter().collect()
    } else {
        a.sample_ids
            .iter()
            .map(|id| {
                samples
                    .iter()
                    .find(|s| &s.sample_id == id)
                    .with_context(|| format!("unknown sample id `{id}` in the {} split", a.split))
            })
            .collect::<Result<_>>()?
    };

    let endpoint = resolve_endpoint(a.endpoint.as_deref(), run.vlm_endpoint.as_deref());
    let timeout = Duration::from_secs(a.timeout_secs);
    let client: Box<dyn GenerationClient> = if a.require_image && endpoint != STUB_ENDPOINT {
        Box::new(HttpClient::new(endpoint, timeout).requiring_image(true))
    } else {
        client_for_endpoint(&endpoint, timeout)
    };

    let mut out = output(a.out.as_deref())?;
    let mut failures = 0;
    for s in chosen {
        let f = forward(s, &params, &model, Mode::Eval)?;
        let pages = select_attended_pages(&f.ranking, s);
        let report = match generate_warning(s, &f.prediction, &pages, client.as_ref()) {
            Ok(r) => r,
            Err(ExplainError::Generation { report, message }) => {
                eprintln!("sample {}: generation failed: {message}", s.sample_id);
                failures += 1;
                *report
            }
            Err(e) => {
                eprintln!("sample {}: {e}", s.sample_id);
                failures += 1;
                continue;
            }
        };
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    }
    out.flush()?;
    if failures > 0 {
        bail!("{failures} sample(s) could not be explained");
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let model = match &a.config {
        Some(path) => {
            let run = RunConfig::load(path)?;
            let mut m = run.model.with_context(|| format!("{} has no [model] table", path.display()))?;
            m.use_label_block &= !a.drop_labels;
            m.use_page_block &= !a.drop_pages;
            m
        }
        None => {
            let d_v = match a.vision {
                Encoder::Std | Encoder::Alt => 768,
            };
            let d_t = match a.text {
                Encoder::Std => 768,
                Encoder::Alt => 384,
            };
            let d_mm = match a.multimodal {
                Multimodal::Clip => 512,
                Multimodal::Minigpt4 => 4096,
            };
            ModelConfig::new(d_v, d_t, d_mm).with_blocks(!a.drop_labels, !a.drop_pages)
        }
    };
    model.validate()?;
    let n = count_parameters(&model);
    println!("{n} ({:.1} M)", (n as f64 / 1e5).round() / 10.0);
    Ok(())
}
