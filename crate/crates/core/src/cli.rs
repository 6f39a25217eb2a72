//! Command-line entry points.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{HashTextEncoder, Model, ModelConfig, TextEncoder};
use crate::data::{read_manifest, resolve_ref, write_manifest};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_retrieval, sample_gallery};
use crate::synthetic::{generate, write_dataset, SyntheticSpec, LATENT_DIM};
use crate::trainer::{
    ablation_table, eval_pairs_of, evaluate_classification, finetune, infer_n_classes, load_eval_pairs,
    load_labeled_set, load_training_set, load_training_sets, pretrain, run_ablation_filter_k, run_ablation_lambda2,
    EvalPair, FilterSweep, FrameChoice, Task, TrainConfig, TrainMode,
};
use crate::tripletgen::{
    build_triplets, captioner_by_name, filter_top_k, random_subsample, score_quantiles, scorer_by_name, BuildOptions,
    Corpus, RetryPolicy,
};

pub const LAMBDA2_GRID: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];
pub const FILTER_K_GRID: [f64; 4] = [10.0, 30.0, 50.0, 100.0];

#[derive(Debug, Parser)]
#[command(name = "lgcav", version, about = "Language-guided contrastive audio-visual masked autoencoder")]
pub struct Cli {
    /// Seed for every random choice of the command (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption, score and filter a video corpus into a triplet manifest.
    GenerateTriplets(GenerateArgs),
    /// Pretrain on one or more triplet manifests.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint on labeled pairs, then report the metric.
    Finetune(FinetuneArgs),
    /// Audio-to-visual and visual-to-audio recall@K of a checkpoint.
    EvalRetrieval(EvalRetrievalArgs),
    /// Accuracy or mAP of a fine-tuned checkpoint.
    EvalClassify(EvalClassifyArgs),
    /// Pretrain and evaluate once per language-loss weight.
    AblateLambda2(AblateLambda2Args),
    /// Pretrain and evaluate once per top-k% filter.
    AblateFilterK(AblateFilterKArgs),
    /// Check a manifest file and print its record count.
    ValidateManifest(ValidateArgs),
    /// Write a synthetic corpus, manifest, label files and matching config.
    MakeSynthetic(SyntheticArgs),
}

/// Run configuration file: `[model]` and `[train]` tables, every key optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// best_caption or random.
    #[arg(long)]
    pub frame_choice: Option<FrameChoice>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut rc = RunConfig::load(self.config.as_deref())?;
        let t = &mut rc.train;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.lambda1 {
            t.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            t.lambda2 = v;
        }
        if let Some(v) = self.tau {
            t.tau = v;
        }
        if let Some(v) = self.frame_choice {
            t.frame_choice = v;
        }
        if let Some(v) = self.warmup_steps {
            t.warmup_steps = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(s) = seed {
            t.seed = s;
            rc.model.seed = s;
        }
        rc.model.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Args)]
pub struct TextFlags {
    /// Frozen text encoder: stub-hash.
    #[arg(long, default_value = "stub-hash")]
    pub text_encoder: String,
    /// Seed of the stub text encoder's parameters.
    #[arg(long, default_value_t = 0)]
    pub text_seed: u64,
}

pub fn text_encoder_by_name(name: &str, dim: usize, seed: u64) -> Result<Box<dyn TextEncoder>> {
    match name {
        "stub-hash" => Ok(Box::new(HashTextEncoder::new(dim, seed))),
        other => Err(Error::Config(format!("unknown text encoder '{other}' (known: stub-hash)"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} value '{x}'")))
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Corpus file: one JSON object per line with video_id, audio, frames, frame_rate.
    #[arg(long)]
    pub corpus: PathBuf,
    /// stub-stats, stub-timestamp or cmd:<program> [args].
    #[arg(long, default_value = "stub-stats")]
    pub captioner: String,
    /// stub-hash or cmd:<program> [args].
    #[arg(long, default_value = "stub-hash")]
    pub scorer: String,
    #[arg(long, default_value_t = 100.0)]
    pub k_percent: f64,
    /// Keep a uniform random subset of the same size instead of the top scores.
    #[arg(long)]
    pub random_subset: bool,
    /// Frames captioned per second of video.
    #[arg(long, default_value_t = 1.0)]
    pub fps: f64,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the manifest before filtering.
    #[arg(long)]
    pub unfiltered_output: Option<PathBuf>,
    /// Progress journal; completed videos listed there are not reprocessed.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Dataset name recorded in the manifest (default: corpus file stem).
    #[arg(long)]
    pub source_dataset: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    pub adapter_timeout_s: f64,
    #[arg(long, default_value_t = 2)]
    pub adapter_retries: u32,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Triplet manifest; repeat to concatenate datasets.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// pretrain_lg or pretrain_cavmae (overrides the config file).
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training log, one JSON record per step (default: <checkpoint>.log.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub text: TextFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled pairs: JSON lines with id, audio, frame, frame_index and label or labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// multiclass or multilabel.
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub output: PathBuf,
    /// Class count (default: inferred from the labels).
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Labeled pairs to report the metric on (default: the training labels).
    #[arg(long)]
    pub eval_labels: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated K values.
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    /// Config whose [model] table the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate on a seeded random subset of this many pairs (default: all).
    #[arg(long)]
    pub gallery_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub task: Task,
}

#[derive(Debug, Args)]
pub struct AblateLambda2Args {
    /// Training manifest; repeat to concatenate datasets.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Retrieval evaluation manifest (default: the training set).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    /// Comma-separated lambda2 values.
    #[arg(long, default_value = "0.001,0.005,0.01,0.05,0.1")]
    pub values: String,
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub text: TextFlags,
}

#[derive(Debug, Args)]
pub struct AblateFilterKArgs {
    /// Unfiltered triplet manifest to filter.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest mixed in full into every run.
    #[arg(long)]
    pub base_manifest: Option<PathBuf>,
    /// Retrieval evaluation manifest (default: the unfiltered manifest).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    /// Comma-separated k percentages.
    #[arg(long, default_value = "10,30,50,100")]
    pub k_values: String,
    /// Add a random-subset row per k, drawn with this seed.
    #[arg(long)]
    pub random_baseline_seed: Option<u64>,
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub text: TextFlags,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub manifest: PathBuf,
    /// Also check that every referenced file exists.
    #[arg(long)]
    pub check_refs: bool,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Side length of the square spectrograms and frames.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn default_ks(s: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = parse_list(s, "K")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("K list '{s}' must hold positive integers")));
    }
    Ok(ks)
}

fn cmd_generate(args: &GenerateArgs, seed: u64, workers: Option<usize>) -> Result<String> {
    let policy = RetryPolicy {
        timeout: Duration::from_secs_f64(args.adapter_timeout_s),
        retries: args.adapter_retries,
    };
    let captioner = captioner_by_name(&args.captioner, policy)?;
    let scorer = scorer_by_name(&args.scorer, seed, policy)?;
    if !(args.k_percent > 0.0 && args.k_percent <= 100.0) {
        return Err(Error::Parameter(format!("k_percent {} outside (0, 100]", args.k_percent)));
    }
    let corpus = Corpus::load(&args.corpus)?;
    let source = args.source_dataset.clone().unwrap_or_else(|| {
        args.corpus
            .file_stem()
            .map_or("corpus".into(), |s| s.to_string_lossy().into_owned())
    });
    let mut opts = BuildOptions {
        source_dataset: source,
        fps: args.fps,
        journal: args.journal.clone(),
        ..BuildOptions::default()
    };
    if let Some(w) = workers {
        opts.workers = w;
    }
    let out = build_triplets(&corpus, captioner.as_ref(), scorer.as_ref(), &opts)?;
    if let Some(p) = &args.unfiltered_output {
        write_manifest(&out.manifest, p)?;
    }
    let filtered = if args.random_subset {
        random_subsample(&out.manifest, args.k_percent, seed)?
    } else {
        filter_top_k(&out.manifest, args.k_percent)?
    };
    write_manifest(&filtered, &args.output)?;
    let q = score_quantiles(&filtered).expect("filtered manifest is nonempty");
    Ok(format!(
        "videos_in\trecords_unfiltered\trecords_out\tfailed\tscore_min\tscore_q25\tscore_median\tscore_q75\tscore_max\n{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        corpus.entries.len(),
        out.manifest.len(),
        filtered.len(),
        out.failed.len(),
        q[0],
        q[1],
        q[2],
        q[3],
        q[4]
    ))
}

fn cmd_pretrain(args: &PretrainArgs, seed: Option<u64>) -> Result<String> {
    let mut rc = args.train.resolve(seed)?;
    if let Some(m) = args.mode {
        rc.train.mode = m;
    }
    if rc.train.mode == TrainMode::Finetune {
        return Err(Error::Config("pretrain needs mode pretrain_lg or pretrain_cavmae".into()));
    }
    rc.train.validate()?;
    let samples = load_training_sets(&args.manifest)?;
    let encoder = match rc.train.mode {
        TrainMode::PretrainLg => Some(text_encoder_by_name(&args.text.text_encoder, rc.model.d_t, args.text.text_seed)?),
        _ => None,
    };
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", args.checkpoint.display())));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut model = Model::new(rc.model.clone())?;
    let records = pretrain(&mut model, &samples, encoder.as_deref(), &rc.train, |r| {
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(dir) = args.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.save(&args.checkpoint)?;
    let first = records.first().map_or(f64::NAN, |r| r.loss.total);
    let last = records.last().map_or(f64::NAN, |r| r.loss.total);
    Ok(format!(
        "samples\tsteps\tloss_first\tloss_final\tcheckpoint_sha256\n{}\t{}\t{first:.6}\t{last:.6}\t{}\n",
        samples.len(),
        records.len(),
        sha256_hex(&model.checkpoint_bytes())
    ))
}

fn cmd_finetune(args: &FinetuneArgs, seed: Option<u64>) -> Result<String> {
    let mut rc = args.train.resolve(seed)?;
    rc.train.mode = TrainMode::Finetune;
    let samples = load_labeled_set(&args.labels)?;
    let n_classes = args.n_classes.unwrap_or_else(|| infer_n_classes(&samples));
    if n_classes == 0 {
        return Err(Error::Validation("labels name no classes".into()));
    }
    let pretrained = Model::load(&args.checkpoint, None)?;
    let mut model = if pretrained.config().n_classes == Some(n_classes) {
        pretrained
    } else {
        pretrained.with_classifier(n_classes, rc.train.seed)?
    };
    let records = finetune(&mut model, &samples, args.task, &rc.train, |_| Ok(()))?;
    model.save(&args.output)?;
    let eval = match &args.eval_labels {
        Some(p) => load_labeled_set(p)?,
        None => samples,
    };
    let report = evaluate_classification(&model, &eval, args.task)?;
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "steps\tloss_final\tmetric\tvalue\n{}\t{last:.6}\t{}\t{:.4}\n",
        records.len(),
        report.metric_name(),
        report.value
    ))
}

fn cmd_eval_retrieval(args: &EvalRetrievalArgs, seed: Option<u64>) -> Result<String> {
    let ks = default_ks(&args.k)?;
    let expected = match &args.config {
        Some(p) => Some(RunConfig::load(Some(p))?.model),
        None => None,
    };
    let model = Model::load(&args.checkpoint, expected.as_ref())?;
    let mut pairs = load_eval_pairs(&args.manifest)?;
    if let Some(n) = args.gallery_size {
        pairs = sample_gallery(&pairs, n, seed.unwrap_or(0))?;
    }
    Ok(evaluate_retrieval(&model, &pairs, &ks)?.to_tsv())
}

fn cmd_eval_classify(args: &EvalClassifyArgs) -> Result<String> {
    let model = Model::load(&args.checkpoint, None)?;
    let samples = load_labeled_set(&args.labels)?;
    Ok(evaluate_classification(&model, &samples, args.task)?.to_tsv())
}

fn eval_set(path: Option<&Path>, fallback: impl FnOnce() -> Result<Vec<EvalPair>>) -> Result<Vec<EvalPair>> {
    match path {
        Some(p) => load_eval_pairs(p),
        None => fallback(),
    }
}

fn cmd_ablate_lambda2(args: &AblateLambda2Args, seed: Option<u64>) -> Result<String> {
    let mut rc = args.train.resolve(seed)?;
    rc.train.mode = TrainMode::PretrainLg;
    rc.train.validate()?;
    let values: Vec<f64> = parse_list(&args.values, "lambda2")?;
    let ks = default_ks(&args.k)?;
    let train = load_training_sets(&args.manifest)?;
    let eval = eval_set(args.eval_manifest.as_deref(), || Ok(eval_pairs_of(&train)))?;
    let encoder = text_encoder_by_name(&args.text.text_encoder, rc.model.d_t, args.text.text_seed)?;
    let rows = run_ablation_lambda2(&values, &rc.model, &rc.train, &train, &eval, encoder.as_ref(), &ks)?;
    Ok(ablation_table("lambda2", &rows, &ks))
}

fn cmd_ablate_filter_k(args: &AblateFilterKArgs, seed: Option<u64>) -> Result<String> {
    let mut rc = args.train.resolve(seed)?;
    rc.train.mode = TrainMode::PretrainLg;
    rc.train.validate()?;
    let ks = default_ks(&args.k)?;
    let sweep = FilterSweep {
        k_values: parse_list(&args.k_values, "k")?,
        manifest: args.manifest.clone(),
        base_manifest: args.base_manifest.clone(),
        random_seed: args.random_baseline_seed,
    };
    let eval = eval_set(args.eval_manifest.as_deref(), || {
        Ok(eval_pairs_of(&load_training_set(&args.manifest)?))
    })?;
    let encoder = text_encoder_by_name(&args.text.text_encoder, rc.model.d_t, args.text.text_seed)?;
    let rows = run_ablation_filter_k(&sweep, &rc.model, &rc.train, &eval, encoder.as_ref(), &ks)?;
    Ok(ablation_table("training_set", &rows, &ks))
}

fn cmd_validate(args: &ValidateArgs) -> Result<String> {
    let m = read_manifest(&args.manifest)?;
    m.validate()?;
    if args.check_refs {
        for r in &m.records {
            for reference in [&r.audio_ref, &r.frame_ref.path] {
                let p = resolve_ref(&args.manifest, reference);
                if !p.is_file() {
                    return Err(Error::Validation(format!(
                        "record '{}': missing file {}",
                        r.video_id,
                        p.display()
                    )));
                }
            }
        }
    }
    Ok(format!(
        "status\trecords\tsource_dataset\tfilter_k_percent\nok\t{}\t{}\t{}\n",
        m.len(),
        m.header.source_dataset,
        m.header.filter_k_percent.map_or("-".to_string(), |k| k.to_string())
    ))
}

fn cmd_make_synthetic(args: &SyntheticArgs, seed: u64) -> Result<String> {
    let spec = SyntheticSpec {
        n: args.n,
        audio_shape: (args.size, args.size),
        frame_shape: (args.size, args.size, 3),
        frames_per_video: args.frames,
        seed,
    };
    let samples = generate(&spec)?;
    let written = write_dataset(&samples, &args.out, &args.name)?;
    let mut single = String::new();
    let mut multi = String::new();
    for s in &samples {
        let tercile = |z: f64| if z < -0.43 { 0 } else if z > 0.43 { 2 } else { 1 };
        let base = serde_json::json!({
            "id": s.id,
            "audio": format!("arrays/{}.audio.arr", s.id),
            "frame": format!("arrays/{}.frames.arr", s.id),
            "frame_index": 0,
        });
        let mut one = base.clone();
        one["label"] = tercile(s.latent[1]).into();
        single.push_str(&format!("{one}\n"));
        let mut many = base;
        let present: Vec<usize> = (0..LATENT_DIM).filter(|&i| s.latent[i] > 0.0).collect();
        many["labels"] = present.into();
        multi.push_str(&format!("{many}\n"));
    }
    write_text(&args.out.join("labels.jsonl"), &single)?;
    write_text(&args.out.join("multilabels.jsonl"), &multi)?;
    let patch = (args.size / 4).max(1);
    let rc = RunConfig {
        model: ModelConfig {
            audio_shape: spec.audio_shape,
            frame_shape: spec.frame_shape,
            audio_patch: (patch, patch),
            visual_patch: (patch, patch),
            ..ModelConfig::toy()
        },
        train: TrainConfig::default(),
    };
    let config = args.out.join("config.toml");
    write_text(&config, &toml::to_string(&rc).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(format!(
        "samples\tcorpus\tmanifest\tconfig\n{}\t{}\t{}\t{}\n",
        samples.len(),
        written.corpus.display(),
        written.manifest.display(),
        config.display()
    ))
}

/// Execute a parsed command and return the text it prints.
pub fn execute(cli: &Cli) -> Result<String> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let seed = cli.seed;
    match &cli.command {
        Command::GenerateTriplets(a) => cmd_generate(a, seed.unwrap_or(0), cli.workers),
        Command::Pretrain(a) => cmd_pretrain(a, seed),
        Command::Finetune(a) => cmd_finetune(a, seed),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a, cli.seed),
        Command::EvalClassify(a) => cmd_eval_classify(a),
        Command::AblateLambda2(a) => cmd_ablate_lambda2(a, seed),
        Command::AblateFilterK(a) => cmd_ablate_filter_k(a, seed),
        Command::ValidateManifest(a) => cmd_validate(a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a, seed.unwrap_or(0)),
    }
}

/// Exit status of an error: 1 for invalid input or configuration, 2 for
/// runtime failures.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_user_error() {
        1
    } else {
        2
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
