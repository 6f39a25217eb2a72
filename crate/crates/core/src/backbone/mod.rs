//! Model architecture: per-modality encoders, the shared cross-modal encoder
//! with its three pass modes, the cross-modal decoder, the text-space
//! projection heads and the classification head.
//!
//! All forward passes are expressed as graphs on a [`Tape`] so the same code
//! serves inference and training. The public per-operation methods build a
//! fresh tape and return plain values.

pub mod params;
pub mod text;

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FrameImage, MaskSpec, Modality, PatchSequence, Spectrogram};
use crate::error::{Error, Result};
use crate::patchwork::{patchify, unpatchify, VisiblePatches};
use crate::tape::{Tape, Var};
pub use params::Params;
use params::{read_checkpoint, write_checkpoint, Init};
pub use text::{text_encode, HashTextEncoder, TextEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// Text embedding width.
    pub d_t: usize,
    pub decoder_width: usize,
    pub encoder_depth: usize,
    pub cross_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spectrogram shape `(T_a, F)`.
    pub audio_shape: (usize, usize),
    /// Frame shape `(H, W, C)`.
    pub frame_shape: (usize, usize, usize),
    pub audio_patch: (usize, usize),
    pub visual_patch: (usize, usize),
    pub mask_ratio_audio: f64,
    pub mask_ratio_visual: f64,
    pub n_classes: Option<usize>,
    /// Skip the projection nonlinearity (test mode).
    pub linear_projection: bool,
    /// Normalize each target patch to zero mean and unit variance before
    /// the reconstruction loss.
    pub norm_pix_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_t: 32,
            decoder_width: 64,
            encoder_depth: 2,
            cross_depth: 1,
            decoder_depth: 1,
            heads: 4,
            mlp_ratio: 2,
            audio_shape: crate::data::DEFAULT_AUDIO_SHAPE,
            frame_shape: crate::data::DEFAULT_FRAME_SHAPE,
            audio_patch: (16, 16),
            visual_patch: (16, 16),
            mask_ratio_audio: 0.75,
            mask_ratio_visual: 0.75,
            n_classes: None,
            linear_projection: false,
            norm_pix_loss: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale widths and depths with small inputs (64x64 spectrograms,
    /// 64x64x3 frames).
    pub fn toy() -> Self {
        Self {
            audio_shape: (64, 64),
            frame_shape: (64, 64, 3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_t", self.d_t),
            ("decoder_width", self.decoder_width),
            ("encoder_depth", self.encoder_depth),
            ("cross_depth", self.cross_depth),
            ("decoder_depth", self.decoder_depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) || !self.decoder_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "widths d={} and decoder_width={} must be divisible by heads={}",
                self.d, self.decoder_width, self.heads
            )));
        }
        if !self.d.is_multiple_of(4) || !self.decoder_width.is_multiple_of(4) {
            return Err(Error::Config("widths must be divisible by 4 for 2-D positional encodings".into()));
        }
        let (t, f) = self.audio_shape;
        let (h, w, c) = self.frame_shape;
        let (ah, aw) = self.audio_patch;
        let (vh, vw) = self.visual_patch;
        if [t, f, h, w, c, ah, aw, vh, vw].contains(&0) {
            return Err(Error::Config("input and patch shapes must be positive".into()));
        }
        if t % ah != 0 || f % aw != 0 {
            return Err(Error::Config(format!(
                "audio shape {t}x{f} not divisible by patch {ah}x{aw}"
            )));
        }
        if h % vh != 0 || w % vw != 0 {
            return Err(Error::Config(format!(
                "frame shape {h}x{w} not divisible by patch {vh}x{vw}"
            )));
        }
        for (name, r) in [
            ("mask_ratio_audio", self.mask_ratio_audio),
            ("mask_ratio_visual", self.mask_ratio_visual),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if self.n_classes == Some(0) {
            return Err(Error::Config("n_classes must be positive when set".into()));
        }
        Ok(())
    }

    pub fn audio_grid(&self) -> (usize, usize) {
        (self.audio_shape.0 / self.audio_patch.0, self.audio_shape.1 / self.audio_patch.1)
    }

    pub fn visual_grid(&self) -> (usize, usize) {
        (self.frame_shape.0 / self.visual_patch.0, self.frame_shape.1 / self.visual_patch.1)
    }

    pub fn n_audio_patches(&self) -> usize {
        let (r, c) = self.audio_grid();
        r * c
    }

    pub fn n_visual_patches(&self) -> usize {
        let (r, c) = self.visual_grid();
        r * c
    }

    pub fn audio_patch_len(&self) -> usize {
        self.audio_patch.0 * self.audio_patch.1
    }

    pub fn visual_patch_len(&self) -> usize {
        self.visual_patch.0 * self.visual_patch.1 * self.frame_shape.2
    }

    pub fn patch_shapes(&self) -> crate::objectives::PatchShapes {
        crate::objectives::PatchShapes {
            audio: self.audio_patch,
            visual: self.visual_patch,
        }
    }
}

/// Fixed 2-D sine-cosine positional table for a `rows x cols` grid.
pub fn sincos_2d(rows: usize, cols: usize, width: usize) -> Array2<f64> {
    let q = width / 4;
    let mut out = Array2::<f64>::zeros((rows * cols, width));
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            for k in 0..q {
                let omega = 1.0 / 10000f64.powf(k as f64 / q as f64);
                out[[idx, k]] = (r as f64 * omega).sin();
                out[[idx, q + k]] = (r as f64 * omega).cos();
                out[[idx, 2 * q + k]] = (c as f64 * omega).sin();
                out[[idx, 3 * q + k]] = (c as f64 * omega).cos();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenModality {
    Audio,
    Visual,
    Joint,
}

impl From<Modality> for TokenModality {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Audio => TokenModality::Audio,
            Modality::Visual => TokenModality::Visual,
        }
    }
}

/// Encoder output: one token per input patch, tagged with its source
/// modality and original grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub modality: TokenModality,
    pub tags: Vec<Modality>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingModality {
    Audio,
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Array1<f64>,
    pub modality: EmbeddingModality,
    pub normalized: bool,
}

impl PooledEmbedding {
    pub fn new(vector: Array1<f64>, modality: EmbeddingModality) -> Self {
        Self {
            vector,
            modality,
            normalized: false,
        }
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.vector.dot(&self.vector).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::NonFinite {
                term: "embedding norm".into(),
                detail: format!("{n}"),
            });
        }
        Ok(Self {
            vector: self.vector / n,
            modality: self.modality,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Stack normalized embeddings into a batch matrix (one row each).
pub fn stack_embeddings(embs: &[PooledEmbedding]) -> Result<Array2<f64>> {
    let d = embs.first().map(|e| e.dim()).unwrap_or(0);
    let mut out = Array2::<f64>::zeros((embs.len(), d));
    for (i, e) in embs.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::Dimension("embeddings have different widths".into()));
        }
        if !e.normalized {
            return Err(Error::Validation(format!("embedding {i} is not normalized")));
        }
        out.row_mut(i).assign(&e.vector);
    }
    Ok(out)
}

/// Pass mode of the shared cross-modal encoder. Selects which set of
/// normalization parameters is used; all other weights are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    Audio,
    Visual,
    Joint,
}

impl CrossMode {
    fn suffix(self) -> &'static str {
        match self {
            CrossMode::Audio => "audio",
            CrossMode::Visual => "visual",
            CrossMode::Joint => "joint",
        }
    }
}

fn modality_key(m: Modality) -> &'static str {
    match m {
        Modality::Audio => "audio",
        Modality::Visual => "visual",
    }
}

/// Reconstructions in input space. These are raw model outputs and are not
/// constrained to the input value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub audio: Array2<f64>,
    pub visual: Array3<f64>,
}

struct PosTables {
    audio: Array2<f64>,
    visual: Array2<f64>,
    dec_audio: Array2<f64>,
    dec_visual: Array2<f64>,
}

impl PosTables {
    fn new(cfg: &ModelConfig) -> Self {
        let (ar, ac) = cfg.audio_grid();
        let (vr, vc) = cfg.visual_grid();
        Self {
            audio: sincos_2d(ar, ac, cfg.d),
            visual: sincos_2d(vr, vc, cfg.d),
            dec_audio: sincos_2d(ar, ac, cfg.decoder_width),
            dec_visual: sincos_2d(vr, vc, cfg.decoder_width),
        }
    }
}

pub struct Model {
    config: ModelConfig,
    params: Params,
    pos: PosTables,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl Model {
    /// Randomly initialized model, seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        let pos = PosTables::new(&config);
        Ok(Self { config, params, pos })
    }

    /// Assemble a model from existing parameters; names and shapes must match
    /// what `config` requires.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let template = init_params(&config);
        for (name, t) in template.iter() {
            match params.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(p) if p.dim() != t.dim() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, config needs {:?}",
                        p.dim(),
                        t.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| template.get(n).is_none()) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        let pos = PosTables::new(&config);
        Ok(Self { config, params, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Attach (or replace) a classification head with `n_classes` outputs.
    pub fn with_classifier(self, n_classes: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.n_classes = Some(n_classes);
        config.validate()?;
        let mut params = self.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Init {
            rng: &mut rng,
            params: &mut params,
        }
        .linear("cls", config.d, n_classes);
        Model::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.config, &self.params)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        params::checkpoint_bytes(&self.config, &self.params)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let (config, params) = read_checkpoint(path, expected)?;
        Model::from_params(config, params)
    }

    pub fn positional_table(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Audio => &self.pos.audio,
            Modality::Visual => &self.pos.visual,
        }
    }

    fn n_patches(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.config.n_audio_patches(),
            Modality::Visual => self.config.n_visual_patches(),
        }
    }

    fn patch_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.config.audio_patch_len(),
            Modality::Visual => self.config.visual_patch_len(),
        }
    }

    // ---- graph building blocks -------------------------------------------

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, self.params.expect(name))
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let w = self.p(tape, &format!("{prefix}.weight"));
        let b = self.p(tape, &format!("{prefix}.bias"));
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let g = self.p(tape, &format!("{prefix}.gamma"));
        let b = self.p(tape, &format!("{prefix}.beta"));
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }

    fn attention(&self, tape: &mut Tape, x: Var, prefix: &str, width: usize) -> Var {
        let heads = self.config.heads;
        let dh = width / heads;
        let qkv = self.linear(tape, x, &format!("{prefix}.qkv"));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * dh, dh);
            let k = tape.slice_cols(qkv, width + h * dh, dh);
            let v = tape.slice_cols(qkv, 2 * width + h * dh, dh);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, v));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, cat, &format!("{prefix}.proj"))
    }

    fn mlp(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.linear(tape, x, &format!("{prefix}.fc1"));
        let h = tape.gelu(h);
        self.linear(tape, h, &format!("{prefix}.fc2"))
    }

    /// Pre-norm transformer block.
    fn block(&self, tape: &mut Tape, x: Var, prefix: &str, norm1: &str, norm2: &str, width: usize) -> Var {
        let h = self.norm(tape, x, &format!("{prefix}.{norm1}"));
        let a = self.attention(tape, h, &format!("{prefix}.attn"), width);
        let x = tape.add(x, a);
        let h = self.norm(tape, x, &format!("{prefix}.{norm2}"));
        let m = self.mlp(tape, h, &format!("{prefix}.mlp"));
        tape.add(x, m)
    }

    // ---- graphs -----------------------------------------------------------

    /// Modality encoder over visible patches.
    pub(crate) fn encode_graph(&self, tape: &mut Tape, visible: &VisiblePatches) -> Result<Var> {
        let m = visible.modality;
        if visible.n_total != self.n_patches(m) {
            return Err(Error::Dimension(format!(
                "{m} input has {} patches, model expects {}",
                visible.n_total,
                self.n_patches(m)
            )));
        }
        if visible.patches.ncols() != self.patch_len(m) || visible.patches.nrows() != visible.positions.len() {
            return Err(Error::Dimension(format!(
                "{m} visible patches {:?} inconsistent with {} positions of length {}",
                visible.patches.dim(),
                visible.positions.len(),
                self.patch_len(m)
            )));
        }
        if visible.is_empty() {
            return Err(Error::Dimension(format!("no visible {m} patches")));
        }
        if let Some(&bad) = visible.positions.iter().find(|&&p| p >= visible.n_total) {
            return Err(Error::Dimension(format!("position {bad} outside the {m} grid")));
        }
        let key = modality_key(m);
        let prefix = format!("{key}_encoder");
        let x = tape.constant(visible.patches.clone());
        let x = self.linear(tape, x, &format!("{prefix}.patch_embed"));
        let pos = tape.constant(self.positional_table(m).select(Axis(0), &visible.positions));
        let x = tape.add(x, pos);
        let me = self.p(tape, &format!("{prefix}.modality"));
        let mut x = tape.add_row(x, me);
        for i in 0..self.config.encoder_depth {
            x = self.block(tape, x, &format!("{prefix}.blocks.{i}"), "norm1", "norm2", self.config.d);
        }
        Ok(x)
    }

    /// Shared cross-modal encoder.
    pub(crate) fn cross_graph(&self, tape: &mut Tape, x: Var, mode: CrossMode) -> Var {
        let s = mode.suffix();
        let mut x = x;
        for i in 0..self.config.cross_depth {
            x = self.block(
                tape,
                x,
                &format!("cross.blocks.{i}"),
                &format!("norm1_{s}"),
                &format!("norm2_{s}"),
                self.config.d,
            );
        }
        x
    }

    /// Scatter visible tokens to full length with the modality's mask token.
    pub(crate) fn pad_graph(&self, tape: &mut Tape, tokens: Var, positions: &[usize], modality: Modality) -> Result<Var> {
        let fill = self.p(tape, &format!("decoder.mask_token_{}", modality_key(modality)));
        tape.scatter_rows(tokens, fill, positions, self.n_patches(modality))
    }

    /// Cross-modal decoder over full-length padded sequences; returns patch
    /// predictions `(audio N_a x P_a, visual N_v x P_v)`.
    pub(crate) fn decode_graph(&self, tape: &mut Tape, padded_audio: Var, padded_visual: Var) -> (Var, Var) {
        let dw = self.config.decoder_width;
        let embed = |tape: &mut Tape, x: Var, m: Modality| {
            let key = modality_key(m);
            let x = self.linear(tape, x, "decoder.embed");
            let table = match m {
                Modality::Audio => &self.pos.dec_audio,
                Modality::Visual => &self.pos.dec_visual,
            };
            let pos = tape.constant(table.clone());
            let x = tape.add(x, pos);
            let me = self.p(tape, &format!("decoder.modality_{key}"));
            tape.add_row(x, me)
        };
        let v = embed(tape, padded_visual, Modality::Visual);
        let a = embed(tape, padded_audio, Modality::Audio);
        let n_v = self.config.n_visual_patches();
        let n_a = self.config.n_audio_patches();
        let mut x = tape.concat_rows(&[v, a]);
        for i in 0..self.config.decoder_depth {
            x = self.block(tape, x, &format!("decoder.blocks.{i}"), "norm1", "norm2", dw);
        }
        let x = self.norm(tape, x, "decoder.norm");
        let xv = tape.slice_rows(x, 0, n_v);
        let xa = tape.slice_rows(x, n_v, n_a);
        let pa = self.linear(tape, xa, "decoder.pred_audio");
        let pv = self.linear(tape, xv, "decoder.pred_visual");
        (pa, pv)
    }

    /// Two-layer projection into text-embedding width (unnormalized).
    pub(crate) fn project_graph(&self, tape: &mut Tape, x: Var, modality: Modality) -> Var {
        let prefix = format!("proj_{}", modality_key(modality));
        let h = self.linear(tape, x, &format!("{prefix}.fc1"));
        let h = if self.config.linear_projection { h } else { tape.gelu(h) };
        self.linear(tape, h, &format!("{prefix}.fc2"))
    }

    /// Mean-pool the joint tokens and apply the classification layer.
    pub(crate) fn classify_graph(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if self.config.n_classes.is_none() {
            return Err(Error::Config("classifier head requested but n_classes is unset".into()));
        }
        let pooled = tape.mean_rows(z);
        Ok(self.linear(tape, pooled, "cls"))
    }

    // ---- public operations ----------------------------------------------

    fn encode_checked(&self, visible: &VisiblePatches, expected: Modality) -> Result<TokenSequence> {
        if visible.modality != expected {
            return Err(Error::Modality(format!(
                "{expected} encoder received {} patches",
                visible.modality
            )));
        }
        let mut tape = Tape::new();
        let out = self.encode_graph(&mut tape, visible)?;
        Ok(TokenSequence {
            tokens: tape.value(out).clone(),
            modality: expected.into(),
            tags: vec![expected; visible.len()],
            positions: visible.positions.clone(),
        })
    }

    pub fn encode_audio(&self, visible: &VisiblePatches) -> Result<TokenSequence> {
        self.encode_checked(visible, Modality::Audio)
    }

    pub fn encode_visual(&self, visible: &VisiblePatches) -> Result<TokenSequence> {
        self.encode_checked(visible, Modality::Visual)
    }

    /// Run the cross-modal encoder on a single-modality sequence and
    /// mean-pool over tokens. The result is not yet normalized.
    pub fn cross_modal_pool(&self, tokens: &TokenSequence) -> Result<PooledEmbedding> {
        let (mode, modality) = match tokens.modality {
            TokenModality::Audio => (CrossMode::Audio, EmbeddingModality::Audio),
            TokenModality::Visual => (CrossMode::Visual, EmbeddingModality::Visual),
            TokenModality::Joint => {
                return Err(Error::Modality("cross_modal_pool expects a single-modality sequence".into()))
            }
        };
        self.check_width(&tokens.tokens)?;
        if tokens.is_empty() {
            return Err(Error::Dimension("cannot pool an empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(tokens.tokens.clone());
        let y = self.cross_graph(&mut tape, x, mode);
        let pooled = tape.mean_rows(y);
        Ok(PooledEmbedding::new(tape.value(pooled).row(0).to_owned(), modality))
    }

    fn check_width(&self, tokens: &Array2<f64>) -> Result<()> {
        if tokens.ncols() != self.config.d {
            return Err(Error::Dimension(format!(
                "tokens have width {}, model width is {}",
                tokens.ncols(),
                self.config.d
            )));
        }
        Ok(())
    }

    /// Joint pass over `[v; a]`.
    pub fn cross_modal_joint(&self, v: &TokenSequence, a: &TokenSequence) -> Result<TokenSequence> {
        if v.modality != TokenModality::Visual || a.modality != TokenModality::Audio {
            return Err(Error::Modality("joint pass needs one visual and one audio sequence".into()));
        }
        self.check_width(&v.tokens)?;
        self.check_width(&a.tokens)?;
        let mut tape = Tape::new();
        let vv = tape.constant(v.tokens.clone());
        let av = tape.constant(a.tokens.clone());
        let x = tape.concat_rows(&[vv, av]);
        let z = self.cross_graph(&mut tape, x, CrossMode::Joint);
        Ok(TokenSequence {
            tokens: tape.value(z).clone(),
            modality: TokenModality::Joint,
            tags: v.tags.iter().chain(a.tags.iter()).copied().collect(),
            positions: v.positions.iter().chain(a.positions.iter()).copied().collect(),
        })
    }

    /// Decode full-length padded token sequences into input-space
    /// reconstructions.
    pub fn decode(&self, z_padded_audio: &Array2<f64>, z_padded_visual: &Array2<f64>) -> Result<Reconstruction> {
        let (n_a, n_v) = (self.config.n_audio_patches(), self.config.n_visual_patches());
        if z_padded_audio.nrows() != n_a || z_padded_visual.nrows() != n_v {
            return Err(Error::Dimension(format!(
                "decoder needs {n_a} audio and {n_v} visual tokens, got {} and {}",
                z_padded_audio.nrows(),
                z_padded_visual.nrows()
            )));
        }
        self.check_width(z_padded_audio)?;
        self.check_width(z_padded_visual)?;
        let mut tape = Tape::new();
        let a = tape.constant(z_padded_audio.clone());
        let v = tape.constant(z_padded_visual.clone());
        let (pa, pv) = self.decode_graph(&mut tape, a, v);
        self.patches_to_reconstruction(tape.value(pa), tape.value(pv))
    }

    pub fn patches_to_reconstruction(&self, audio: &Array2<f64>, visual: &Array2<f64>) -> Result<Reconstruction> {
        let cfg = &self.config;
        let aseq = PatchSequence::new(audio.clone(), cfg.audio_grid(), cfg.audio_patch, 1, Modality::Audio)?;
        let vseq = PatchSequence::new(
            visual.clone(),
            cfg.visual_grid(),
            cfg.visual_patch,
            cfg.frame_shape.2,
            Modality::Visual,
        )?;
        Ok(Reconstruction {
            audio: unpatchify(&aseq)?.index_axis_move(Axis(2), 0),
            visual: unpatchify(&vseq)?,
        })
    }

    /// Learned mask token of a modality.
    pub fn mask_token(&self, modality: Modality) -> Array1<f64> {
        self.params
            .expect(&format!("decoder.mask_token_{}", modality_key(modality)))
            .row(0)
            .to_owned()
    }

    /// Two-layer projection of an audio or visual embedding into the text
    /// embedding space, L2-normalized.
    pub fn project_to_text_space(&self, emb: &PooledEmbedding) -> Result<PooledEmbedding> {
        let modality = match emb.modality {
            EmbeddingModality::Audio => Modality::Audio,
            EmbeddingModality::Visual => Modality::Visual,
            EmbeddingModality::Text => {
                return Err(Error::Modality("text embeddings are not projected".into()))
            }
        };
        if emb.dim() != self.config.d {
            return Err(Error::Dimension(format!(
                "embedding width {} != model width {}",
                emb.dim(),
                self.config.d
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(emb.vector.clone().insert_axis(Axis(0)));
        let y = self.project_graph(&mut tape, x, modality);
        PooledEmbedding::new(tape.value(y).row(0).to_owned(), EmbeddingModality::Text).normalized()
    }

    pub fn classifier_head(&self, z: &TokenSequence) -> Result<Array1<f64>> {
        if z.modality != TokenModality::Joint {
            return Err(Error::Modality("classifier head expects joint tokens".into()));
        }
        self.check_width(&z.tokens)?;
        let mut tape = Tape::new();
        let x = tape.constant(z.tokens.clone());
        let logits = self.classify_graph(&mut tape, x)?;
        Ok(tape.value(logits).row(0).to_owned())
    }

    /// Unmasked pooled embeddings `(audio, visual)` for retrieval, both
    /// L2-normalized.
    pub fn embed_pair(&self, audio: &Spectrogram, frame: &FrameImage) -> Result<(PooledEmbedding, PooledEmbedding)> {
        audio.check_shape(self.config.audio_shape)?;
        frame.check_shape(self.config.frame_shape)?;
        let a = VisiblePatches::all(&patchify(audio, self.config.audio_patch)?);
        let v = VisiblePatches::all(&patchify(frame, self.config.visual_patch)?);
        let mut tape = Tape::new();
        let at = self.encode_graph(&mut tape, &a)?;
        let vt = self.encode_graph(&mut tape, &v)?;
        let ac = self.cross_graph(&mut tape, at, CrossMode::Audio);
        let vc = self.cross_graph(&mut tape, vt, CrossMode::Visual);
        let ap = tape.mean_rows(ac);
        let vp = tape.mean_rows(vc);
        let a_emb = PooledEmbedding::new(tape.value(ap).row(0).to_owned(), EmbeddingModality::Audio).normalized()?;
        let v_emb = PooledEmbedding::new(tape.value(vp).row(0).to_owned(), EmbeddingModality::Visual).normalized()?;
        Ok((a_emb, v_emb))
    }

    /// Classification logits from the unmasked joint pass.
    pub fn classify(&self, audio: &Spectrogram, frame: &FrameImage) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let logits = self.classify_sample_graph(&mut tape, audio, frame)?;
        Ok(tape.value(logits).row(0).to_owned())
    }

    pub(crate) fn classify_sample_graph(&self, tape: &mut Tape, audio: &Spectrogram, frame: &FrameImage) -> Result<Var> {
        audio.check_shape(self.config.audio_shape)?;
        frame.check_shape(self.config.frame_shape)?;
        let a = VisiblePatches::all(&patchify(audio, self.config.audio_patch)?);
        let v = VisiblePatches::all(&patchify(frame, self.config.visual_patch)?);
        let at = self.encode_graph(tape, &a)?;
        let vt = self.encode_graph(tape, &v)?;
        let x = tape.concat_rows(&[vt, at]);
        let z = self.cross_graph(tape, x, CrossMode::Joint);
        self.classify_graph(tape, z)
    }

    /// Mask ratios of both modalities.
    pub fn mask_ratios(&self) -> (f64, f64) {
        (self.config.mask_ratio_audio, self.config.mask_ratio_visual)
    }

    /// Decoder target layout of `audio` and `frame`.
    pub fn patch_targets(&self, audio: &Spectrogram, frame: &FrameImage) -> Result<(PatchSequence, PatchSequence)> {
        audio.check_shape(self.config.audio_shape)?;
        frame.check_shape(self.config.frame_shape)?;
        Ok((
            patchify(audio, self.config.audio_patch)?,
            patchify(frame, self.config.visual_patch)?,
        ))
    }
}

/// Mask helper: no masking for a full sequence.
pub fn full_mask(n: usize) -> MaskSpec {
    MaskSpec::none(n)
}

fn init_params(cfg: &ModelConfig) -> Params {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init {
        rng: &mut rng,
        params: &mut params,
    };
    let d = cfg.d;
    let dw = cfg.decoder_width;

    let block = |init: &mut Init, prefix: &str, width: usize, norms: &[&str]| {
        for n in norms {
            init.norm(&format!("{prefix}.{n}"), width);
        }
        init.linear(&format!("{prefix}.attn.qkv"), width, 3 * width);
        init.linear(&format!("{prefix}.attn.proj"), width, width);
        init.linear(&format!("{prefix}.mlp.fc1"), width, width * cfg.mlp_ratio);
        init.linear(&format!("{prefix}.mlp.fc2"), width * cfg.mlp_ratio, width);
    };

    for (key, p) in [("audio", cfg.audio_patch_len()), ("visual", cfg.visual_patch_len())] {
        let prefix = format!("{key}_encoder");
        init.linear(&format!("{prefix}.patch_embed"), p, d);
        init.normal_row(&format!("{prefix}.modality"), d, 0.02);
        for i in 0..cfg.encoder_depth {
            block(&mut init, &format!("{prefix}.blocks.{i}"), d, &["norm1", "norm2"]);
        }
    }
    for i in 0..cfg.cross_depth {
        block(
            &mut init,
            &format!("cross.blocks.{i}"),
            d,
            &[
                "norm1_audio",
                "norm1_visual",
                "norm1_joint",
                "norm2_audio",
                "norm2_visual",
                "norm2_joint",
            ],
        );
    }
    init.normal_row("decoder.mask_token_audio", d, 0.02);
    init.normal_row("decoder.mask_token_visual", d, 0.02);
    init.linear("decoder.embed", d, dw);
    init.normal_row("decoder.modality_audio", dw, 0.02);
    init.normal_row("decoder.modality_visual", dw, 0.02);
    for i in 0..cfg.decoder_depth {
        block(&mut init, &format!("decoder.blocks.{i}"), dw, &["norm1", "norm2"]);
    }
    init.norm("decoder.norm", dw);
    init.linear("decoder.pred_audio", dw, cfg.audio_patch_len());
    init.linear("decoder.pred_visual", dw, cfg.visual_patch_len());
    for key in ["audio", "visual"] {
        init.linear(&format!("proj_{key}.fc1"), d, d);
        init.linear(&format!("proj_{key}.fc2"), d, cfg.d_t);
    }
    if let Some(c) = cfg.n_classes {
        init.linear("cls", d, c);
    }
    params
}
