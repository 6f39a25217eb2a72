//! Pretraining and fine-tuning loops, the Adam optimizer, dataset loading
//! and the ablation harnesses.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{text_encode, CrossMode, Model, ModelConfig, Params, TextEncoder};
use crate::data::{
    read_frame_ref, read_frame_stack, read_manifest, read_spectrogram, resolve_ref, FrameImage, FrameRef, MaskSpec,
    Modality, PatchSequence, Spectrogram,
};
use crate::error::{Error, Result};
use crate::evalkit::{accuracy, argmax, evaluate_retrieval, mean_average_precision, RetrievalReport};
use crate::objectives::{
    binary_cross_entropy_with_grad, check_unit_rows, info_nce_with_grad, masked_patch_mse,
    softmax_cross_entropy_with_grad, total_loss, LossBreakdown, LossParts, DEFAULT_TAU,
};
use crate::patchwork::{apply_mask, sample_mask};
use crate::synthetic::SyntheticSample;
use crate::tape::Tape;

pub type Gradients = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainLg,
    PretrainCavmae,
    Finetune,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_lg" | "pretrain-lg" => Ok(Self::PretrainLg),
            "pretrain_cavmae" | "pretrain-cavmae" => Ok(Self::PretrainCavmae),
            "finetune" => Ok(Self::Finetune),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected pretrain_lg, pretrain_cavmae or finetune)"
            ))),
        }
    }
}

/// Which frame of a sample a training step sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameChoice {
    BestCaption,
    Random,
}

impl FromStr for FrameChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_caption" | "best-caption" => Ok(Self::BestCaption),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown frame choice '{other}' (expected best_caption or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Multiclass,
    Multilabel,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(Self::Multiclass),
            "multilabel" => Ok(Self::Multilabel),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected multiclass or multilabel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    /// Steps of linear learning-rate warmup; 0 disables it.
    pub warmup_steps: usize,
    /// Decoupled weight decay applied with each Adam update.
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub frame_choice: FrameChoice,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            batch_size: 8,
            steps: 200,
            lambda1: 0.01,
            lambda2: 0.01,
            tau: DEFAULT_TAU,
            warmup_steps: 0,
            weight_decay: 0.0,
            seed: 0,
            mode: TrainMode::PretrainLg,
            frame_choice: FrameChoice::BestCaption,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} < 2: contrastive losses need negatives",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }

    /// The language weight actually applied: zero in the baseline mode.
    pub fn effective_lambda2(&self) -> f64 {
        match self.mode {
            TrainMode::PretrainLg => self.lambda2,
            _ => 0.0,
        }
    }
}

/// Adam with bias correction, optional linear warmup and decoupled weight
/// decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            weight_decay: 0.0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            warmup_steps: cfg.warmup_steps,
            weight_decay: cfg.weight_decay,
            ..Self::new(cfg.learning_rate)
        }
    }

    /// Learning rate used by update number `t` (1-based).
    pub fn lr_at(&self, t: i32) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (f64::from(t) / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Apply one update; parameters without a gradient are untouched.
    /// Returns how many tensors changed.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<usize> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let lr = self.lr_at(self.t);
        let decay = lr * self.weight_decay;
        let mut changed = 0;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Parameter(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::Dimension(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let before = p.clone();
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    if decay != 0.0 {
                        *p -= decay * *p;
                    }
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
            if *p != before {
                changed += 1;
            }
        }
        Ok(changed)
    }
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One audio-visual-caption training unit.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub audio: Spectrogram,
    pub frames: Vec<FrameImage>,
    pub best_frame: usize,
    pub caption: String,
}

impl TrainingSample {
    pub fn from_synthetic(s: &SyntheticSample) -> Self {
        Self {
            id: s.id.clone(),
            audio: s.audio.clone(),
            frames: s.frames.clone(),
            best_frame: 0,
            caption: s.caption.clone(),
        }
    }

    pub fn best(&self) -> &FrameImage {
        &self.frames[self.best_frame]
    }
}

/// Patchified targets and masks of one sample for one step.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub audio: PatchSequence,
    pub visual: PatchSequence,
    pub mask_audio: MaskSpec,
    pub mask_visual: MaskSpec,
}

pub fn prepare_sample(model: &Model, audio: &Spectrogram, frame: &FrameImage, mask_seed: u64) -> Result<PreparedSample> {
    let (ta, tv) = model.patch_targets(audio, frame)?;
    let (ra, rv) = model.mask_ratios();
    Ok(PreparedSample {
        mask_audio: sample_mask(ta.len(), ra, mix_seed(mask_seed, 1, 0))?,
        mask_visual: sample_mask(tv.len(), rv, mix_seed(mask_seed, 2, 0))?,
        audio: ta,
        visual: tv,
    })
}

fn recon_target(patches: &Array2<f64>, normalize: bool) -> Array2<f64> {
    if !normalize {
        return patches.clone();
    }
    let mut t = patches.clone();
    for mut row in t.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.mapv(|x| (x - mean) * (x - mean)).sum() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|x| (x - mean) * inv);
    }
    t
}

fn check_gradients(grads: &Gradients) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                detail: "non-finite entries".into(),
            });
        }
    }
    Ok(())
}

/// Pretraining objective and its parameter gradients for one batch.
///
/// `text` holds the frozen caption embeddings (one unit row per sample) and
/// is required in `pretrain_lg` mode; the baseline mode never looks at it.
pub fn pretrain_loss_and_grads(
    model: &Model,
    batch: &[PreparedSample],
    text: Option<&Array2<f64>>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Parameter(format!("batch of {b} has no negatives")));
    }
    let lg = match cfg.mode {
        TrainMode::PretrainLg => true,
        TrainMode::PretrainCavmae => false,
        TrainMode::Finetune => return Err(Error::Config("pretraining step called in finetune mode".into())),
    };
    let norm_pix = model.config().norm_pix_loss;
    let mut tape = Tape::new();
    let mut rec_terms = Vec::with_capacity(b);
    let mut pools_a = Vec::with_capacity(b);
    let mut pools_v = Vec::with_capacity(b);
    for s in batch {
        let va = apply_mask(&s.audio, &s.mask_audio)?;
        let vv = apply_mask(&s.visual, &s.mask_visual)?;
        let ea = model.encode_graph(&mut tape, &va)?;
        let ev = model.encode_graph(&mut tape, &vv)?;

        let joint_in = tape.concat_rows(&[ev, ea]);
        let z = model.cross_graph(&mut tape, joint_in, CrossMode::Joint);
        let zv = tape.slice_rows(z, 0, vv.len());
        let za = tape.slice_rows(z, vv.len(), va.len());
        let pa = model.pad_graph(&mut tape, za, &va.positions, Modality::Audio)?;
        let pv = model.pad_graph(&mut tape, zv, &vv.positions, Modality::Visual)?;
        let (ya, yv) = model.decode_graph(&mut tape, pa, pv);
        let (la, ga) = masked_patch_mse(&recon_target(s.audio.patches(), norm_pix), tape.value(ya), &s.mask_audio)?;
        let (lv, gv) = masked_patch_mse(&recon_target(s.visual.patches(), norm_pix), tape.value(yv), &s.mask_visual)?;
        rec_terms.push(tape.fused(la + lv, vec![(ya, ga), (yv, gv)]));

        let ca = model.cross_graph(&mut tape, ea, CrossMode::Audio);
        let cv = model.cross_graph(&mut tape, ev, CrossMode::Visual);
        pools_a.push(tape.mean_rows(ca));
        pools_v.push(tape.mean_rows(cv));
    }
    let weights: Vec<_> = rec_terms.iter().map(|&r| (r, 1.0 / b as f64)).collect();
    let rec = tape.weighted_sum(&weights);

    let a_pool = tape.concat_rows(&pools_a);
    let v_pool = tape.concat_rows(&pools_v);
    let a_n = tape.l2_normalize_rows(a_pool);
    let v_n = tape.l2_normalize_rows(v_pool);
    check_unit_rows(tape.value(a_n), "audio embeddings")?;
    check_unit_rows(tape.value(v_n), "visual embeddings")?;
    let cg = info_nce_with_grad(tape.value(a_n), tape.value(v_n), cfg.tau)?;
    let c = tape.fused(cg.loss, vec![(a_n, cg.grad_x), (v_n, cg.grad_y)]);

    let mut parts = LossParts {
        rec: tape.scalar(rec),
        c: cg.loss,
        a2t: 0.0,
        v2t: 0.0,
    };
    let lambda2 = cfg.effective_lambda2();
    let mut terms = vec![(rec, 1.0), (c, cfg.lambda1)];
    if lg {
        let text = text.ok_or_else(|| Error::Config("pretrain_lg mode needs caption embeddings".into()))?;
        if text.nrows() != b || text.ncols() != model.config().d_t {
            return Err(Error::Dimension(format!(
                "caption embeddings {:?}, expected ({b}, {})",
                text.dim(),
                model.config().d_t
            )));
        }
        check_unit_rows(text, "caption embeddings")?;
        for (modality, pool) in [(Modality::Audio, a_pool), (Modality::Visual, v_pool)] {
            let p = model.project_graph(&mut tape, pool, modality);
            let p_n = tape.l2_normalize_rows(p);
            check_unit_rows(tape.value(p_n), "projected embeddings")?;
            let g = info_nce_with_grad(tape.value(p_n), text, cfg.tau)?;
            match modality {
                Modality::Audio => parts.a2t = g.loss,
                Modality::Visual => parts.v2t = g.loss,
            }
            let node = tape.fused(g.loss, vec![(p_n, g.grad_x)]);
            terms.push((node, lambda2));
        }
    }
    let breakdown = total_loss(parts, cfg.lambda1, lambda2)?;
    let root = tape.weighted_sum(&terms);
    let grads = tape.backward(root).for_params(&tape);
    check_gradients(&grads)?;
    Ok((breakdown, grads))
}

/// One optimizer update on a prepared batch.
pub fn pretrain_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[PreparedSample],
    text: Option<&Array2<f64>>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = pretrain_loss_and_grads(model, batch, text, cfg)?;
    adam.step(model.params_mut(), &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

/// Per-epoch shuffled batches without replacement. A trailing partial
/// batch is dropped.
#[derive(Debug)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("training set of {n} samples has no negatives")));
        }
        let batch = batch_size.min(n);
        let mut s = Self {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0xe90c, self.epoch));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Frozen caption embeddings, one row per sample.
pub fn caption_embeddings(encoder: &dyn TextEncoder, samples: &[TrainingSample], d_t: usize) -> Result<Array2<f64>> {
    if encoder.dim() != d_t {
        return Err(Error::Config(format!(
            "text encoder '{}' has width {}, model expects d_t = {d_t}",
            encoder.name(),
            encoder.dim()
        )));
    }
    let mut out = Array2::<f64>::zeros((samples.len(), d_t));
    for (i, s) in samples.iter().enumerate() {
        out.row_mut(i).assign(&text_encode(encoder, &s.caption)?.vector);
    }
    Ok(out)
}

/// Run `cfg.steps` pretraining steps. `on_step` sees every log record as it
/// is produced.
pub fn pretrain(
    model: &mut Model,
    samples: &[TrainingSample],
    text_encoder: Option<&dyn TextEncoder>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<Vec<TrainLogRecord>> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Finetune {
        return Err(Error::Config("pretrain called with mode finetune".into()));
    }
    let text = match cfg.mode {
        TrainMode::PretrainLg => {
            let enc = text_encoder.ok_or_else(|| Error::Config("pretrain_lg mode needs a text encoder".into()))?;
            Some(caption_embeddings(enc, samples, model.config().d_t)?)
        }
        _ => None,
    };
    let mut sampler = EpochSampler::new(samples.len(), cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::from_config(cfg);
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch();
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &samples[i];
            let frame = match cfg.frame_choice {
                FrameChoice::BestCaption => s.best(),
                FrameChoice::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64, 0xf4a3 + i as u64));
                    &s.frames[rng.random_range(0..s.frames.len())]
                }
            };
            batch.push(prepare_sample(model, &s.audio, frame, mix_seed(cfg.seed, step as u64, i as u64))?);
        }
        let text_batch = text.as_ref().map(|t| t.select(ndarray::Axis(0), &idx));
        let loss = pretrain_step(model, &mut adam, &batch, text_batch.as_ref(), cfg)?;
        let rec = TrainLogRecord {
            step,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!("step {step}: total {:.5}", loss.total);
        on_step(&rec)?;
        log.push(rec);
    }
    Ok(log)
}

// ---- dataset loading -------------------------------------------------------

/// Load every record of a manifest as a training sample. All frames of a
/// referenced stack are kept so that random frame choice has candidates.
pub fn load_training_set(manifest_path: &Path) -> Result<Vec<TrainingSample>> {
    let manifest = read_manifest(manifest_path)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let audio = read_spectrogram(&resolve_ref(manifest_path, &r.audio_ref), &r.video_id)?;
            let stack = read_frame_stack(&resolve_ref(manifest_path, &r.frame_ref.path))?;
            let best = r.frame_ref.index.unwrap_or(0);
            if best >= stack.len() {
                return Err(Error::Validation(format!(
                    "record '{}': frame index {best} out of range ({} frames)",
                    r.video_id,
                    stack.len()
                )));
            }
            let frames = stack
                .into_iter()
                .enumerate()
                .map(|(j, f)| {
                    let ts = if j == best { r.frame_ref.timestamp_s } else { j as f64 };
                    FrameImage::new(f, ts, r.video_id.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingSample {
                id: r.video_id.clone(),
                audio,
                frames,
                best_frame: best,
                caption: r.caption.clone(),
            })
        })
        .collect()
}

/// Concatenate several (already filtered) manifests into one training set.
pub fn load_training_sets(paths: &[PathBuf]) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_training_set(p)?);
    }
    Ok(out)
}

pub type EvalPair = (String, Spectrogram, FrameImage);

/// `(id, audio, best frame)` of every manifest record.
pub fn load_eval_pairs(manifest_path: &Path) -> Result<Vec<EvalPair>> {
    let manifest = read_manifest(manifest_path)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let audio = read_spectrogram(&resolve_ref(manifest_path, &r.audio_ref), &r.video_id)?;
            let frame = read_frame_ref(manifest_path, &r.frame_ref, &r.video_id)?;
            Ok((r.video_id.clone(), audio, frame))
        })
        .collect()
}

pub fn eval_pairs_of(samples: &[TrainingSample]) -> Vec<EvalPair> {
    samples
        .iter()
        .map(|s| (s.id.clone(), s.audio.clone(), s.best().clone()))
        .collect()
}

// ---- fine-tuning -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub audio: Spectrogram,
    pub frame: FrameImage,
    pub label: Label,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledLine {
    id: String,
    audio: String,
    frame: String,
    #[serde(default)]
    frame_index: Option<usize>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    labels: Option<Vec<usize>>,
}

/// Labeled set: one JSON object per line with `id`, `audio`, `frame`,
/// optional `frame_index`, and either `label` (one class) or `labels` (a
/// class list).
pub fn load_labeled_set(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let l: LabeledLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let label = match (l.label, l.labels) {
            (Some(c), None) => Label::Class(c),
            (None, Some(cs)) => Label::Classes(cs),
            _ => return Err(parse("exactly one of 'label' or 'labels' is required".into())),
        };
        let audio = read_spectrogram(&resolve_ref(path, &l.audio), &l.id)?;
        let fref = FrameRef {
            path: l.frame,
            timestamp_s: 0.0,
            index: l.frame_index,
        };
        let frame = read_frame_ref(path, &fref, &l.id)?;
        out.push(LabeledSample {
            id: l.id,
            audio,
            frame,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Parameter(format!("labeled set {} is empty", path.display())));
    }
    Ok(out)
}

/// Check that every label has the shape `task` expects and lies below
/// `n_classes`.
pub fn check_labels(samples: &[LabeledSample], task: Task, n_classes: usize) -> Result<()> {
    for s in samples {
        let classes: &[usize] = match (&s.label, task) {
            (Label::Class(c), Task::Multiclass) => std::slice::from_ref(c),
            (Label::Classes(cs), Task::Multilabel) => cs,
            (Label::Class(_), Task::Multilabel) => {
                return Err(Error::Validation(format!(
                    "sample '{}' has a single-class label but the task is multilabel",
                    s.id
                )))
            }
            (Label::Classes(_), Task::Multiclass) => {
                return Err(Error::Validation(format!(
                    "sample '{}' has a label list but the task is multiclass",
                    s.id
                )))
            }
        };
        if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Validation(format!(
                "sample '{}' has class {bad} but there are only {n_classes} classes",
                s.id
            )));
        }
    }
    Ok(())
}

/// Number of classes implied by the labels.
pub fn infer_n_classes(samples: &[LabeledSample]) -> usize {
    samples
        .iter()
        .flat_map(|s| match &s.label {
            Label::Class(c) => vec![*c],
            Label::Classes(cs) => cs.clone(),
        })
        .max()
        .map_or(0, |m| m + 1)
}

fn n_classes_of(model: &Model) -> Result<usize> {
    model
        .config()
        .n_classes
        .ok_or_else(|| Error::Config("model has no classifier head (n_classes unset)".into()))
}

/// Classification loss and gradients for a batch of full (unmasked) inputs.
pub fn finetune_loss_and_grads(model: &Model, batch: &[&LabeledSample], task: Task) -> Result<(f64, Gradients)> {
    let c = n_classes_of(model)?;
    let owned: Vec<LabeledSample> = batch.iter().map(|s| (*s).clone()).collect();
    check_labels(&owned, task, c)?;
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(batch.len());
    for s in batch {
        rows.push(model.classify_sample_graph(&mut tape, &s.audio, &s.frame)?);
    }
    let logits = tape.concat_rows(&rows);
    let (loss, grad) = match task {
        Task::Multiclass => {
            let targets: Vec<usize> = batch
                .iter()
                .map(|s| match s.label {
                    Label::Class(c) => c,
                    Label::Classes(_) => unreachable!("checked above"),
                })
                .collect();
            softmax_cross_entropy_with_grad(tape.value(logits), &targets)?
        }
        Task::Multilabel => {
            let mut t = Array2::<f64>::zeros((batch.len(), c));
            for (i, s) in batch.iter().enumerate() {
                if let Label::Classes(cs) = &s.label {
                    for &k in cs {
                        t[[i, k]] = 1.0;
                    }
                }
            }
            binary_cross_entropy_with_grad(tape.value(logits), &t)?
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            term: "classification".into(),
            detail: format!("{loss}"),
        });
    }
    let root = tape.fused(loss, vec![(logits, grad)]);
    let grads = tape.backward(root).for_params(&tape);
    check_gradients(&grads)?;
    Ok((loss, grads))
}

pub fn finetune_step(model: &mut Model, adam: &mut Adam, batch: &[&LabeledSample], task: Task) -> Result<f64> {
    let (loss, grads) = finetune_loss_and_grads(model, batch, task)?;
    adam.step(model.params_mut(), &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Full fine-tune of all model parameters on labeled pairs.
pub fn finetune(
    model: &mut Model,
    samples: &[LabeledSample],
    task: Task,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&FinetuneLogRecord) -> Result<()>,
) -> Result<Vec<FinetuneLogRecord>> {
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning_rate {} must be > 0", cfg.learning_rate)));
    }
    if cfg.batch_size == 0 || samples.is_empty() {
        return Err(Error::Parameter("fine-tuning needs samples and a positive batch size".into()));
    }
    check_labels(samples, task, n_classes_of(model)?)?;
    let mut adam = Adam::from_config(cfg);
    let batch = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut pos = samples.len();
    let mut epoch = 0u64;
    let mut log = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        if pos + batch > samples.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xf17e, epoch));
            order.shuffle(&mut rng);
            epoch += 1;
            pos = 0;
        }
        let refs: Vec<&LabeledSample> = order[pos..pos + batch].iter().map(|&i| &samples[i]).collect();
        pos += batch;
        let loss = finetune_step(model, &mut adam, &refs, task)?;
        let rec = FinetuneLogRecord {
            step,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_step(&rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Logits of every sample, one row each.
pub fn classification_scores(model: &Model, samples: &[LabeledSample]) -> Result<Array2<f64>> {
    use rayon::prelude::*;
    let c = n_classes_of(model)?;
    let rows: Vec<Array1<f64>> = samples
        .par_iter()
        .map(|s| model.classify(&s.audio, &s.frame))
        .collect::<Result<_>>()?;
    let mut out = Array2::<f64>::zeros((samples.len(), c));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub task: Task,
    /// Accuracy for multiclass, mAP for multilabel.
    pub value: f64,
}

impl ClassificationReport {
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Multiclass => "accuracy",
            Task::Multilabel => "mAP",
        }
    }

    pub fn to_tsv(&self) -> String {
        format!("task\tmetric\tvalue\n{:?}\t{}\t{:.4}\n", self.task, self.metric_name(), self.value).to_lowercase()
    }
}

pub fn evaluate_classification(model: &Model, samples: &[LabeledSample], task: Task) -> Result<ClassificationReport> {
    let c = n_classes_of(model)?;
    check_labels(samples, task, c)?;
    let scores = classification_scores(model, samples)?;
    let value = match task {
        Task::Multiclass => {
            let preds: Vec<usize> = scores.outer_iter().map(|r| argmax(&r.to_owned())).collect();
            let labels: Vec<usize> = samples
                .iter()
                .map(|s| match s.label {
                    Label::Class(c) => c,
                    Label::Classes(_) => unreachable!("checked above"),
                })
                .collect();
            accuracy(&preds, &labels)?
        }
        Task::Multilabel => {
            let mut labels = Array2::<u8>::zeros(scores.dim());
            for (i, s) in samples.iter().enumerate() {
                if let Label::Classes(cs) = &s.label {
                    for &k in cs {
                        labels[[i, k]] = 1;
                    }
                }
            }
            mean_average_precision(&scores, &labels)?
        }
    };
    Ok(ClassificationReport { task, value })
}

// ---- ablations ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub records: usize,
    pub outcome: std::result::Result<RetrievalReport, String>,
}

/// Delimiter-separated table: one row per setting, R@K columns for each
/// retrieval direction.
pub fn ablation_table(key: &str, rows: &[AblationRow], ks: &[usize]) -> String {
    let mut cols = vec![key.to_string(), "records".into(), "status".into()];
    for dir in ["a2v", "v2a"] {
        cols.extend(ks.iter().map(|k| format!("{dir}_R@{k}")));
    }
    let mut out = cols.join("\t");
    out.push('\n');
    for r in rows {
        let mut line = vec![r.label.clone(), r.records.to_string()];
        match &r.outcome {
            Ok(rep) => {
                line.push("ok".into());
                line.extend(rep.a2v.iter().chain(&rep.v2a).map(|v| format!("{v:.4}")));
            }
            Err(e) => {
                line.push("failed".into());
                line.extend(std::iter::repeat_n("nan".to_string(), 2 * ks.len()));
                log::warn!("ablation row {} failed: {e}", r.label);
            }
        }
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

fn train_and_eval(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[TrainingSample],
    eval: &[EvalPair],
    text_encoder: Option<&dyn TextEncoder>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut model = Model::new(model_cfg.clone())?;
    pretrain(&mut model, train, text_encoder, train_cfg, |_| Ok(()))?;
    evaluate_retrieval(&model, eval, ks)
}

/// One pretrain-and-evaluate run per language weight, all with the same
/// seed. A failing run yields a failed row and the sweep continues.
pub fn run_ablation_lambda2(
    values: &[f64],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    train: &[TrainingSample],
    eval: &[EvalPair],
    text_encoder: &dyn TextEncoder,
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Parameter("no lambda2 values given".into()));
    }
    Ok(values
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                lambda2: v,
                mode: TrainMode::PretrainLg,
                ..base.clone()
            };
            AblationRow {
                label: format!("{v}"),
                records: train.len(),
                outcome: train_and_eval(model_cfg, &cfg, train, eval, Some(text_encoder), ks).map_err(|e| e.to_string()),
            }
        })
        .collect())
}

/// Settings of a top-k% filter sweep.
#[derive(Debug, Clone)]
pub struct FilterSweep {
    pub k_values: Vec<f64>,
    /// Unfiltered triplet manifest that the filters select from.
    pub manifest: PathBuf,
    /// Manifest added in full to every run (dataset mixing).
    pub base_manifest: Option<PathBuf>,
    /// When set, each k also gets a row trained on a random subset of the
    /// same size drawn with this seed.
    pub random_seed: Option<u64>,
}

/// One pretrain-and-evaluate run per top-k% filter of the manifest (and
/// per random subset, when requested). A failing run yields a failed row.
pub fn run_ablation_filter_k(
    sweep: &FilterSweep,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    eval: &[EvalPair],
    text_encoder: &dyn TextEncoder,
    ks: &[usize],
) -> Result<Vec<AblationRow>> {
    if sweep.k_values.is_empty() {
        return Err(Error::Parameter("no k values given".into()));
    }
    let manifest = read_manifest(&sweep.manifest)?;
    let all = load_training_set(&sweep.manifest)?;
    let (prefix, mixed) = match &sweep.base_manifest {
        Some(p) => {
            let m = read_manifest(p)?;
            (format!("{} + ", m.header.source_dataset), load_training_set(p)?)
        }
        None => (String::new(), Vec::new()),
    };
    let name = &manifest.header.source_dataset;
    let mut rows = Vec::new();
    for &k in &sweep.k_values {
        let mut variants = vec![(format!("{prefix}{name} ({k}%)"), crate::tripletgen::filter_top_k(&manifest, k))];
        if let Some(seed) = sweep.random_seed {
            variants.push((
                format!("{prefix}{name} (rand. {k}%)"),
                crate::tripletgen::random_subsample(&manifest, k, seed),
            ));
        }
        for (label, filtered) in variants {
            let filtered = match filtered {
                Ok(f) => f,
                Err(e) => {
                    rows.push(AblationRow {
                        label,
                        records: 0,
                        outcome: Err(e.to_string()),
                    });
                    continue;
                }
            };
            let mut train = mixed.clone();
            train.extend(
                filtered
                    .records
                    .iter()
                    .filter_map(|r| all.iter().find(|s| s.id == r.video_id).cloned()),
            );
            let outcome = train_and_eval(model_cfg, base, &train, eval, Some(text_encoder), ks).map_err(|e| e.to_string());
            rows.push(AblationRow {
                label,
                records: train.len(),
                outcome,
            });
        }
    }
    Ok(rows)
}
