//! Triplet generation: caption sampled frames, score each caption against
//! the video's audio, keep the best caption per video, then filter the
//! corpus to its top-k% by score.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::text::{gaussian_vector, seed_for, tokenize};
use crate::data::{
    filtered_count, read_frame_stack, read_spectrogram, resolve_ref, write_array, FrameImage, FrameRef, Manifest,
    ManifestHeader, Selection, Spectrogram, TripletRecord,
};
use crate::error::{Error, Result};
use crate::synthetic::CorpusEntry;

pub const GENERATOR_VERSION: &str = concat!("lgcav-tripletgen/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCaption {
    pub caption: String,
    pub frame_timestamp_s: f64,
    pub score: f64,
}

impl ScoredCaption {
    pub fn new(caption: impl Into<String>, frame_timestamp_s: f64, score: f64) -> Result<Self> {
        if !(score.is_finite() && (-1.0..=1.0).contains(&score)) {
            return Err(Error::Validation(format!("score {score} outside [-1, 1]")));
        }
        Ok(Self {
            caption: caption.into(),
            frame_timestamp_s,
            score,
        })
    }
}

/// Image captioning model.
pub trait Captioner: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn caption(&self, frame: &FrameImage) -> Result<String>;
}

/// Audio clip handed to a scorer. `path` is set when the spectrogram lives
/// in a file an external process can read.
#[derive(Debug, Clone, Copy)]
pub struct AudioClip<'a> {
    pub id: &'a str,
    pub spectrogram: &'a Spectrogram,
    pub path: Option<&'a Path>,
}

/// Audio-text similarity model; scores lie in [-1, 1].
pub trait AudioTextScorer: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn score(&self, audio: &AudioClip<'_>, caption: &str) -> Result<f64>;
}

// ---- stub adapters -----------------------------------------------------------

/// Describes a frame by brightness, dominant channel, contrast and left/right
/// balance.
#[derive(Debug, Clone, Default)]
pub struct StatsCaptioner;

impl Captioner for StatsCaptioner {
    fn name(&self) -> &str {
        "stub-stats"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn caption(&self, frame: &FrameImage) -> Result<String> {
        let v = frame.values();
        let (_, w, c) = v.dim();
        let n = v.len() as f64;
        let mean = v.sum() / n;
        let std = (v.mapv(|x| (x - mean) * (x - mean)).sum() / n).sqrt();
        let brightness = if mean > 0.6 {
            "bright"
        } else if mean > 0.4 {
            "dim"
        } else {
            "dark"
        };
        let tint = if c >= 3 {
            let means: Vec<f64> = (0..3)
                .map(|ch| v.index_axis(ndarray::Axis(2), ch).mean().unwrap_or(0.0))
                .collect();
            let best = (0..3).fold(0, |b, i| if means[i] > means[b] { i } else { b });
            ["reddish", "greenish", "bluish"][best]
        } else {
            "gray"
        };
        let contrast = if std > 0.15 { "high" } else { "low" };
        let half = w / 2;
        let left = v.slice(ndarray::s![.., ..half, ..]).mean().unwrap_or(0.0);
        let right = v.slice(ndarray::s![.., half.., ..]).mean().unwrap_or(0.0);
        let side = if left > right { "left" } else { "right" };
        Ok(format!(
            "a {brightness} {tint} scene with {contrast} contrast, brighter on the {side}"
        ))
    }
}

/// Captions every frame as `frame at <timestamp>`.
#[derive(Debug, Clone, Default)]
pub struct TimestampCaptioner;

impl Captioner for TimestampCaptioner {
    fn name(&self) -> &str {
        "stub-timestamp"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn caption(&self, frame: &FrameImage) -> Result<String> {
        Ok(format!("frame at {}", frame.timestamp_s()))
    }
}

/// Cosine similarity of seeded hash embeddings of the audio id and the
/// caption.
#[derive(Debug, Clone)]
pub struct HashScorer {
    pub seed: u64,
    pub dim: usize,
}

impl HashScorer {
    pub fn new(seed: u64) -> Self {
        Self { seed, dim: 64 }
    }

    fn embed(&self, text: &str) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.dim);
        for t in tokenize(text) {
            acc += &gaussian_vector(seed_for(self.seed, "scorer-token", &t), self.dim);
        }
        acc
    }
}

impl AudioTextScorer for HashScorer {
    fn name(&self) -> &str {
        "stub-hash"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn score(&self, audio: &AudioClip<'_>, caption: &str) -> Result<f64> {
        let a = self.embed(audio.id);
        let t = self.embed(caption);
        let denom = a.dot(&a).sqrt() * t.dot(&t).sqrt();
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((a.dot(&t) / denom).clamp(-1.0, 1.0))
    }
}

// ---- subprocess adapters -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub timeout: Duration,
    pub retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

fn run_once(program: &str, args: &[String], timeout: Duration) -> std::result::Result<String, String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start {program}: {e}"))?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        stdout.read_to_string(&mut s).map(|_| s)
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {:?}", timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.to_string()),
        }
    };
    let out = out_reader
        .join()
        .map_err(|_| "stdout reader panicked".to_string())?
        .map_err(|e| e.to_string())?;
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(format!("exited with {status}: {}", err.trim()));
    }
    Ok(out)
}

fn run_with_retries(name: &str, program: &str, args: &[String], policy: RetryPolicy) -> Result<String> {
    let mut last = String::new();
    for attempt in 0..=policy.retries {
        match run_once(program, args, policy.timeout) {
            Ok(out) => return Ok(out),
            Err(e) => {
                log::warn!("{name}: attempt {} failed: {e}", attempt + 1);
                last = e;
            }
        }
    }
    Err(Error::adapter(name, last))
}

fn split_command(spec: &str) -> Result<(String, Vec<String>)> {
    let mut parts = spec.split_whitespace().map(str::to_string);
    let program = parts
        .next()
        .ok_or_else(|| Error::Config("empty adapter command".into()))?;
    Ok((program, parts.collect()))
}

/// Runs `<command> <frame-file>` and reads the caption from stdout. The
/// frame is written in the array file format.
#[derive(Debug, Clone)]
pub struct SubprocessCaptioner {
    name: String,
    program: String,
    args: Vec<String>,
    pub policy: RetryPolicy,
}

impl SubprocessCaptioner {
    pub fn new(command: &str, policy: RetryPolicy) -> Result<Self> {
        let (program, args) = split_command(command)?;
        Ok(Self {
            name: format!("cmd:{command}"),
            program,
            args,
            policy,
        })
    }
}

impl Captioner for SubprocessCaptioner {
    fn name(&self) -> &str {
        &self.name
    }

    fn version(&self) -> &str {
        "external"
    }

    fn caption(&self, frame: &FrameImage) -> Result<String> {
        let tmp = tempfile::Builder::new()
            .suffix(".arr")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        write_array(tmp.path(), &frame.values().clone().into_dyn())?;
        let mut args = self.args.clone();
        args.push(tmp.path().display().to_string());
        Ok(run_with_retries(&self.name, &self.program, &args, self.policy)?
            .trim()
            .to_string())
    }
}

/// Runs `<command> <audio-file> <caption>` and parses a score from stdout.
#[derive(Debug, Clone)]
pub struct SubprocessScorer {
    name: String,
    program: String,
    args: Vec<String>,
    pub policy: RetryPolicy,
}

impl SubprocessScorer {
    pub fn new(command: &str, policy: RetryPolicy) -> Result<Self> {
        let (program, args) = split_command(command)?;
        Ok(Self {
            name: format!("cmd:{command}"),
            program,
            args,
            policy,
        })
    }
}

impl AudioTextScorer for SubprocessScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn version(&self) -> &str {
        "external"
    }

    fn score(&self, audio: &AudioClip<'_>, caption: &str) -> Result<f64> {
        let tmp;
        let path = match audio.path {
            Some(p) => p.to_path_buf(),
            None => {
                tmp = tempfile::Builder::new()
                    .suffix(".arr")
                    .tempfile()
                    .map_err(|e| Error::io(std::env::temp_dir(), e))?;
                write_array(tmp.path(), &audio.spectrogram.values().clone().into_dyn())?;
                tmp.path().to_path_buf()
            }
        };
        let mut args = self.args.clone();
        args.push(path.display().to_string());
        args.push(caption.to_string());
        let out = run_with_retries(&self.name, &self.program, &args, self.policy)?;
        out.trim()
            .parse::<f64>()
            .map_err(|e| Error::adapter(&self.name, format!("bad score '{}': {e}", out.trim())))
    }
}

/// Resolve a captioner by registry name: `stub-stats`, `stub-timestamp` or
/// `cmd:<program> [args...]`.
pub fn captioner_by_name(name: &str, policy: RetryPolicy) -> Result<Box<dyn Captioner>> {
    match name {
        "stub-stats" => Ok(Box::new(StatsCaptioner)),
        "stub-timestamp" => Ok(Box::new(TimestampCaptioner)),
        _ => match name.strip_prefix("cmd:") {
            Some(cmd) => Ok(Box::new(SubprocessCaptioner::new(cmd, policy)?)),
            None => Err(Error::Config(format!(
                "unknown captioner '{name}' (known: stub-stats, stub-timestamp, cmd:<command>)"
            ))),
        },
    }
}

/// Resolve a scorer by registry name: `stub-hash` or `cmd:<program> [args...]`.
pub fn scorer_by_name(name: &str, seed: u64, policy: RetryPolicy) -> Result<Box<dyn AudioTextScorer>> {
    match name {
        "stub-hash" => Ok(Box::new(HashScorer::new(seed))),
        _ => match name.strip_prefix("cmd:") {
            Some(cmd) => Ok(Box::new(SubprocessScorer::new(cmd, policy)?)),
            None => Err(Error::Config(format!(
                "unknown scorer '{name}' (known: stub-hash, cmd:<command>)"
            ))),
        },
    }
}

// ---- pipeline ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedFrames {
    /// `(timestamp, caption)` in frame order.
    pub captions: Vec<(f64, String)>,
    /// `(timestamp, reason)` of every frame that produced no caption.
    pub skipped: Vec<(f64, String)>,
}

pub fn caption_frames(frames: &[FrameImage], captioner: &dyn Captioner) -> Result<CaptionedFrames> {
    if frames.is_empty() {
        return Err(Error::Parameter("no frames to caption".into()));
    }
    let mut captions = Vec::with_capacity(frames.len());
    let mut skipped = Vec::new();
    for f in frames {
        let t = f.timestamp_s();
        match captioner.caption(f) {
            Ok(c) if c.trim().is_empty() => {
                log::warn!("{}: empty caption for '{}' at {t}s dropped", captioner.name(), f.sample_id());
                skipped.push((t, "empty caption".into()));
            }
            Ok(c) => captions.push((t, c)),
            Err(e) => {
                log::warn!("{}: frame of '{}' at {t}s skipped: {e}", captioner.name(), f.sample_id());
                skipped.push((t, e.to_string()));
            }
        }
    }
    if captions.is_empty() {
        return Err(Error::adapter(
            captioner.name(),
            format!("all {} frames failed to caption", frames.len()),
        ));
    }
    Ok(CaptionedFrames { captions, skipped })
}

/// Highest-scoring candidate; ties go to the earliest timestamp, then the
/// lexicographically smallest caption.
pub fn select_best_caption(
    audio: &AudioClip<'_>,
    candidates: &[(f64, String)],
    scorer: &dyn AudioTextScorer,
) -> Result<ScoredCaption> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no caption candidates".into()));
    }
    let mut best: Option<ScoredCaption> = None;
    for (t, caption) in candidates {
        let s = scorer.score(audio, caption)?;
        let scored = ScoredCaption::new(caption.clone(), *t, s)
            .map_err(|e| Error::adapter(scorer.name(), e.to_string()))?;
        let better = match &best {
            None => true,
            Some(b) => {
                s > b.score
                    || (s == b.score
                        && (t.total_cmp(&b.frame_timestamp_s).is_lt()
                            || (*t == b.frame_timestamp_s && *caption < b.caption)))
            }
        };
        if better {
            best = Some(scored);
        }
    }
    Ok(best.expect("nonempty candidates"))
}

/// Stack indices sampled at `fps` from frames recorded at `native_rate`.
pub fn sample_frame_indices(n_frames: usize, native_rate: f64, fps: f64) -> Result<Vec<(usize, f64)>> {
    if !(fps > 0.0 && fps.is_finite()) || !(native_rate > 0.0 && native_rate.is_finite()) {
        return Err(Error::Parameter(format!("invalid rates: fps {fps}, native {native_rate}")));
    }
    let duration = n_frames as f64 / native_rate;
    let mut out = Vec::new();
    let mut j = 0usize;
    loop {
        let t = j as f64 / fps;
        if t >= duration - 1e-9 {
            break;
        }
        let idx = ((t * native_rate + 1e-9).floor() as usize).min(n_frames - 1);
        out.push((idx, t));
        j += 1;
    }
    Ok(out)
}

/// A corpus file and the directory its references resolve against.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub path: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CorpusEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert(e.video_id.clone()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate video_id '{}'", e.video_id),
                });
            }
            entries.push(e);
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn absolute(&self, reference: &str) -> PathBuf {
        let p = resolve_ref(&self.path, reference);
        p.canonicalize().unwrap_or(p)
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub source_dataset: String,
    pub fps: f64,
    pub workers: usize,
    pub journal: Option<PathBuf>,
    /// Stop after this many newly processed videos (simulated interrupt).
    pub stop_after: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            source_dataset: "corpus".into(),
            fps: 1.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            journal: None,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JournalEntry {
    Ok { video_id: String, record: TripletRecord },
    Failed { video_id: String, error: String },
}

impl JournalEntry {
    pub fn video_id(&self) -> &str {
        match self {
            JournalEntry::Ok { video_id, .. } | JournalEntry::Failed { video_id, .. } => video_id,
        }
    }
}

/// Completed videos recorded in a journal. A truncated final line (from an
/// interrupted write) is ignored.
pub fn read_journal(path: &Path) -> Result<BTreeMap<String, JournalEntry>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => {
                out.insert(e.video_id().to_string(), e);
            }
            Err(e) if i == last => log::warn!("ignoring truncated journal line {}: {e}", i + 1),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub manifest: Manifest,
    /// `(video_id, reason)` of excluded videos.
    pub failed: Vec<(String, String)>,
    /// Videos processed in this invocation (not taken from the journal).
    pub newly_processed: usize,
}

fn process_video(corpus: &Corpus, entry: &CorpusEntry, captioner: &dyn Captioner, scorer: &dyn AudioTextScorer, fps: f64) -> Result<TripletRecord> {
    let audio_path = corpus.absolute(&entry.audio);
    let frames_path = corpus.absolute(&entry.frames);
    let audio = read_spectrogram(&audio_path, &entry.video_id)?;
    let stack = read_frame_stack(&frames_path)?;
    if stack.is_empty() {
        return Err(Error::Parameter(format!("video '{}' has no frames", entry.video_id)));
    }
    let picks = sample_frame_indices(stack.len(), entry.frame_rate, fps)?;
    let frames = picks
        .iter()
        .map(|&(i, t)| FrameImage::new(stack[i].clone(), t, entry.video_id.clone()))
        .collect::<Result<Vec<_>>>()?;
    let captioned = caption_frames(&frames, captioner)?;
    let clip = AudioClip {
        id: &entry.video_id,
        spectrogram: &audio,
        path: Some(&audio_path),
    };
    let best = select_best_caption(&clip, &captioned.captions, scorer)?;
    let index = picks
        .iter()
        .find(|&&(_, t)| t == best.frame_timestamp_s)
        .map(|&(i, _)| i)
        .expect("selected timestamp comes from the sampled frames");
    Ok(TripletRecord {
        video_id: entry.video_id.clone(),
        audio_ref: audio_path.display().to_string(),
        frame_ref: FrameRef {
            path: frames_path.display().to_string(),
            timestamp_s: best.frame_timestamp_s,
            index: Some(index),
        },
        caption: best.caption,
        score: best.score,
    })
}

/// Caption, score and select per video on a bounded worker pool. Records
/// are merged in canonical order, so the result does not depend on
/// scheduling. With a journal, completed videos are appended as they finish
/// and skipped on a rerun.
pub fn build_triplets(
    corpus: &Corpus,
    captioner: &dyn Captioner,
    scorer: &dyn AudioTextScorer,
    opts: &BuildOptions,
) -> Result<BuildOutcome> {
    if corpus.entries.is_empty() {
        return Err(Error::Parameter("corpus is empty".into()));
    }
    if !(opts.fps > 0.0 && opts.fps.is_finite()) {
        return Err(Error::Parameter(format!("fps {} must be > 0", opts.fps)));
    }
    let done = match &opts.journal {
        Some(p) => read_journal(p)?,
        None => BTreeMap::new(),
    };
    let journal = match &opts.journal {
        Some(p) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let todo: Vec<&CorpusEntry> = corpus
        .entries
        .iter()
        .filter(|e| !done.contains_key(&e.video_id))
        .collect();
    let started = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Option<Result<JournalEntry>>> = pool.install(|| {
        todo.par_iter()
            .map(|entry| {
                if let Some(limit) = opts.stop_after {
                    if started.fetch_add(1, Ordering::SeqCst) >= limit {
                        return None;
                    }
                }
                let je = match process_video(corpus, entry, captioner, scorer, opts.fps) {
                    Ok(record) => JournalEntry::Ok {
                        video_id: entry.video_id.clone(),
                        record,
                    },
                    Err(e) => {
                        log::warn!("video '{}' excluded: {e}", entry.video_id);
                        JournalEntry::Failed {
                            video_id: entry.video_id.clone(),
                            error: e.to_string(),
                        }
                    }
                };
                if let Some(j) = &journal {
                    let mut line = serde_json::to_string(&je).expect("journal entry serializes");
                    line.push('\n');
                    let mut f = j.lock().expect("journal lock");
                    if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                        return Some(Err(Error::io(opts.journal.clone().unwrap_or_default(), e)));
                    }
                }
                Some(Ok(je))
            })
            .collect()
    });
    let mut newly_processed = 0;
    let mut entries: Vec<JournalEntry> = done.into_values().collect();
    let mut interrupted = false;
    for r in results {
        match r {
            None => interrupted = true,
            Some(r) => {
                entries.push(r?);
                newly_processed += 1;
            }
        }
    }
    if interrupted {
        return Err(Error::Interrupted(newly_processed));
    }
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for e in entries {
        match e {
            JournalEntry::Ok { record, .. } => records.push(record),
            JournalEntry::Failed { video_id, error } => failed.push((video_id, error)),
        }
    }
    failed.sort();
    if records.is_empty() {
        return Err(Error::adapter(
            captioner.name(),
            format!("all {} videos failed", corpus.entries.len()),
        ));
    }
    let mut header = ManifestHeader::new(&opts.source_dataset, GENERATOR_VERSION);
    header.fps = Some(opts.fps);
    let manifest = Manifest::new(header, records)?;
    Ok(BuildOutcome {
        manifest,
        failed,
        newly_processed,
    })
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Parameter(format!("k_percent {k_percent} outside (0, 100]")));
    }
    Ok(())
}

/// Keep the `floor(N * k / 100)` highest-scoring records (at least one),
/// ties resolved by video_id ascending.
pub fn filter_top_k(manifest: &Manifest, k_percent: f64) -> Result<Manifest> {
    check_k(k_percent)?;
    let mut records = manifest.records.clone();
    records.sort_by(crate::data::canonical_order);
    let n = records.len();
    records.truncate(filtered_count(n, k_percent));
    let mut header = manifest.header.clone();
    header.filter_k_percent = Some(k_percent);
    header.pre_filter_count = Some(n);
    header.selection = Some(Selection::TopScore);
    Manifest::new(header, records)
}

/// Uniform random subset of the same size `filter_top_k` would keep.
pub fn random_subsample(manifest: &Manifest, k_percent: f64, seed: u64) -> Result<Manifest> {
    check_k(k_percent)?;
    let mut records = manifest.records.clone();
    records.sort_by(crate::data::canonical_order);
    let n = records.len();
    let keep = filtered_count(n, k_percent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let chosen = idx.into_iter().map(|i| records[i].clone()).collect();
    let mut header = manifest.header.clone();
    header.filter_k_percent = Some(k_percent);
    header.pre_filter_count = Some(n);
    header.selection = Some(Selection::Random { seed });
    Manifest::new(header, chosen)
}

/// Summary line data for a finished manifest.
pub fn score_quantiles(manifest: &Manifest) -> Option<[f64; 5]> {
    let mut s: Vec<f64> = manifest.records.iter().map(|r| r.score).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
    Some([q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)])
}

#[cfg(test)]
mod tests;
