//! Shared domain types and manifest persistence.
//!
//! Manifests are line-delimited JSON: the first line is a header object,
//! every following line is one [`TripletRecord`]. Records are always kept in
//! canonical order (score descending, then `video_id` ascending).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "lgcav-manifest/1";

/// Default spectrogram shape `(T_a, F)`.
pub const DEFAULT_AUDIO_SHAPE: (usize, usize) = (1024, 128);
/// Default frame shape `(H, W, C)`.
pub const DEFAULT_FRAME_SHAPE: (usize, usize, usize) = (224, 224, 3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Audio => write!(f, "audio"),
            Modality::Visual => write!(f, "visual"),
        }
    }
}

/// Log-mel spectrogram of one clip, `T_a x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array2<f64>,
    sample_id: String,
}

impl Spectrogram {
    pub fn new(values: Array2<f64>, sample_id: impl Into<String>) -> Result<Self> {
        let sample_id = sample_id.into();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "spectrogram '{sample_id}' contains non-finite value {bad}"
            )));
        }
        Ok(Self { values, sample_id })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::Dimension(format!(
                "spectrogram '{}' has shape {:?}, expected {:?}",
                self.sample_id,
                self.shape(),
                expected
            )));
        }
        Ok(())
    }
}

/// A single decoded video frame, `H x W x C`, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    values: Array3<f64>,
    timestamp_s: f64,
    sample_id: String,
}

impl FrameImage {
    pub fn new(values: Array3<f64>, timestamp_s: f64, sample_id: impl Into<String>) -> Result<Self> {
        let sample_id = sample_id.into();
        if !(timestamp_s.is_finite() && timestamp_s >= 0.0) {
            return Err(Error::Validation(format!(
                "frame '{sample_id}' has invalid timestamp {timestamp_s}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "frame '{sample_id}' has pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            values,
            timestamp_s,
            sample_id,
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn timestamp_s(&self) -> f64 {
        self.timestamp_s
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn check_shape(&self, expected: (usize, usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::Dimension(format!(
                "frame '{}' has shape {:?}, expected {:?}",
                self.sample_id,
                self.shape(),
                expected
            )));
        }
        Ok(())
    }
}

/// Patchified input: `N x P` with row-major grid ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    patches: Array2<f64>,
    grid: (usize, usize),
    patch_shape: (usize, usize),
    channels: usize,
    modality: Modality,
}

impl PatchSequence {
    pub fn new(
        patches: Array2<f64>,
        grid: (usize, usize),
        patch_shape: (usize, usize),
        channels: usize,
        modality: Modality,
    ) -> Result<Self> {
        let seq = Self {
            patches,
            grid,
            patch_shape,
            channels,
            modality,
        };
        seq.check_consistent()?;
        Ok(seq)
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let (n, p) = self.patches.dim();
        if n != self.grid.0 * self.grid.1 {
            return Err(Error::Dimension(format!(
                "{} patch sequence has {n} patches but grid {}x{}",
                self.modality, self.grid.0, self.grid.1
            )));
        }
        let expected_p = self.patch_shape.0 * self.patch_shape.1 * self.channels;
        if p != expected_p {
            return Err(Error::Dimension(format!(
                "{} patches have {p} elements, patch shape {:?} x {} channels needs {expected_p}",
                self.modality, self.patch_shape, self.channels
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        self.patch_shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patches.ncols()
    }

    /// Replace the patch values, keeping the geometry. Used to express
    /// decoder outputs in the same layout as their targets.
    pub fn with_patches(&self, patches: Array2<f64>) -> Result<Self> {
        Self::new(
            patches,
            self.grid,
            self.patch_shape,
            self.channels,
            self.modality,
        )
    }

    /// Test hook: overwrite the grid without validation.
    #[doc(hidden)]
    pub fn set_grid_unchecked(&mut self, grid: (usize, usize)) {
        self.grid = grid;
    }
}

/// Number of masked patches for `ratio` of `n_total`, rounding half up.
pub fn masked_count(n_total: usize, ratio: f64) -> usize {
    ((ratio * n_total as f64) + 0.5).floor() as usize
}

/// The masked index set Ω. The binary mask M is derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    masked: Vec<usize>,
    n_total: usize,
    ratio: f64,
}

impl MaskSpec {
    pub fn new(mut masked: Vec<usize>, n_total: usize, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Parameter(format!("mask ratio {ratio} outside [0, 1)")));
        }
        masked.sort_unstable();
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("masked indices are not unique".into()));
        }
        if let Some(&bad) = masked.iter().find(|&&i| i >= n_total) {
            return Err(Error::Validation(format!(
                "masked index {bad} outside [0, {n_total})"
            )));
        }
        let expected = masked_count(n_total, ratio);
        if masked.len() != expected {
            return Err(Error::Validation(format!(
                "{} masked indices, ratio {ratio} of {n_total} requires {expected}",
                masked.len()
            )));
        }
        Ok(Self {
            masked,
            n_total,
            ratio,
        })
    }

    /// An empty mask over `n_total` positions.
    pub fn none(n_total: usize) -> Self {
        Self {
            masked: Vec::new(),
            n_total,
            ratio: 0.0,
        }
    }

    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn n_visible(&self) -> usize {
        self.n_total - self.masked.len()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.binary_search(&index).is_ok()
    }

    /// Sorted complement of Ω.
    pub fn visible_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_visible());
        let mut it = self.masked.iter().peekable();
        for i in 0..self.n_total {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    /// Binary mask M: 0 at masked positions, 1 elsewhere.
    pub fn binary(&self) -> Vec<u8> {
        let mut m = vec![1u8; self.n_total];
        for &i in &self.masked {
            m[i] = 0;
        }
        m
    }
}

/// Canonical score resolution of manifests.
pub const SCORE_DECIMALS: i32 = 6;

pub fn quantize_score(score: f64) -> f64 {
    let scale = 10f64.powi(SCORE_DECIMALS);
    let q = (score * scale).round() / scale;
    // avoid writing "-0"
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub path: String,
    pub timestamp_s: f64,
    /// Frame index when `path` holds a stack of frames (`n x H x W x C`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub video_id: String,
    pub audio_ref: String,
    pub frame_ref: FrameRef,
    pub caption: String,
    pub score: f64,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Validation("record with empty video_id".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record '{}': caption is empty",
                self.video_id
            )));
        }
        if !self.score.is_finite() || !(-1.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "record '{}': score {} outside [-1, 1]",
                self.video_id, self.score
            )));
        }
        if !(self.frame_ref.timestamp_s.is_finite() && self.frame_ref.timestamp_s >= 0.0) {
            return Err(Error::Validation(format!(
                "record '{}': invalid frame timestamp {}",
                self.video_id, self.frame_ref.timestamp_s
            )));
        }
        Ok(())
    }
}

/// Canonical record order: score descending, then video_id ascending.
pub fn canonical_order(a: &TripletRecord, b: &TripletRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// How a filtered manifest was selected from its input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    TopScore,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub source_dataset: String,
    pub generator_version: String,
    pub filter_k_percent: Option<f64>,
    /// Record count of the input to the most recent filter.
    pub pre_filter_count: Option<usize>,
    pub selection: Option<Selection>,
    /// Frame sampling rate used when captioning.
    pub fps: Option<f64>,
}

impl ManifestHeader {
    pub fn new(source_dataset: impl Into<String>, generator_version: impl Into<String>) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            source_dataset: source_dataset.into(),
            generator_version: generator_version.into(),
            filter_k_percent: None,
            pre_filter_count: None,
            selection: None,
            fps: None,
        }
    }
}

/// Number of records kept by a k-percent filter over `n` records:
/// `floor(n * k / 100)`, at least one for a nonempty input.
pub fn filtered_count(n: usize, k_percent: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // tolerance keeps exact products like 10 * 30 / 100 from landing on 2.999..
    let raw = (n as f64 * k_percent / 100.0 + 1e-9).floor() as usize;
    raw.clamp(1, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<TripletRecord>,
}

impl Manifest {
    /// Build a manifest, quantizing scores and sorting into canonical order.
    pub fn new(header: ManifestHeader, mut records: Vec<TripletRecord>) -> Result<Self> {
        for r in &mut records {
            r.score = quantize_score(r.score);
        }
        records.sort_by(canonical_order);
        let m = Self { header, records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.format != MANIFEST_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported manifest format '{}'",
                self.header.format
            )));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            r.validate()?;
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::Validation(format!(
                    "record '{}': duplicate video_id",
                    r.video_id
                )));
            }
            if i > 0 && canonical_order(&self.records[i - 1], r) != Ordering::Less {
                return Err(Error::Validation(format!(
                    "record '{}': out of order (records must be sorted by score descending, video_id ascending)",
                    r.video_id
                )));
            }
        }
        if let Some(k) = self.header.filter_k_percent {
            if !(k > 0.0 && k <= 100.0) {
                return Err(Error::Validation(format!(
                    "filter_k_percent {k} outside (0, 100]"
                )));
            }
            if let Some(pre) = self.header.pre_filter_count {
                let expected = filtered_count(pre, k);
                if self.records.len() != expected {
                    return Err(Error::Validation(format!(
                        "{} records, but k={k}% of {pre} keeps {expected}",
                        self.records.len()
                    )));
                }
            }
        }
        if let Some(fps) = self.header.fps {
            if !(fps.is_finite() && fps > 0.0) {
                return Err(Error::Validation(format!("invalid fps {fps}")));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &Manifest, destination: &Path) -> Result<()> {
    manifest.validate()?;
    let file = File::create(destination).map_err(|e| Error::io(destination, e))?;
    let mut w = BufWriter::new(file);
    write_manifest_to(manifest, &mut w).map_err(|e| Error::io(destination, e))?;
    w.flush().map_err(|e| Error::io(destination, e))
}

fn write_manifest_to<W: Write>(manifest: &Manifest, w: &mut W) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &manifest.header)?;
    w.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Serialize to the on-disk byte representation.
pub fn manifest_to_bytes(manifest: &Manifest) -> Result<Vec<u8>> {
    manifest.validate()?;
    let mut buf = Vec::new();
    write_manifest_to(manifest, &mut buf).expect("writing to a Vec cannot fail");
    Ok(buf)
}

pub fn read_manifest(source: &Path) -> Result<Manifest> {
    let file = File::open(source).map_err(|e| Error::io(source, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            return Err(parse_err(lineno, "blank line".into()));
        }
        match header {
            None => {
                header = Some(
                    serde_json::from_str(&line)
                        .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?,
                );
            }
            Some(_) => {
                let r: TripletRecord = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("bad record: {e}")))?;
                records.push(r);
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let m = Manifest { header, records };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Pre-decoded array files.
//
// Layout: 8-byte magic, u32 rank, rank x u64 dims, then f64 values, all
// little-endian, row-major.

const ARRAY_MAGIC: &[u8; 8] = b"LGCAVARR";

pub fn write_array(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(ARRAY_MAGIC)?;
        w.write_all(&(array.ndim() as u32).to_le_bytes())?;
        for &d in array.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in array.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    io(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<ArrayD<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != ARRAY_MAGIC {
        return Err(bad("not an array file"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let end = off + 8;
        if bytes.len() < end {
            return Err(bad("truncated shape"));
        }
        shape.push(u64::from_le_bytes(bytes[off..end].try_into().unwrap()) as usize);
        off = end;
    }
    let count: usize = shape.iter().product();
    if bytes.len() != off + count * 8 {
        return Err(bad("payload length does not match shape"));
    }
    let values: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| bad(&e.to_string()))
}

pub fn read_spectrogram(path: &Path, sample_id: &str) -> Result<Spectrogram> {
    let arr = read_array(path)?;
    let arr = arr.into_dimensionality::<ndarray::Ix2>().map_err(|_| {
        Error::Dimension(format!("{} is not a 2-D spectrogram", path.display()))
    })?;
    Spectrogram::new(arr, sample_id)
}

pub fn read_frame(path: &Path, timestamp_s: f64, sample_id: &str) -> Result<FrameImage> {
    let arr = read_array(path)?;
    let arr = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Dimension(format!("{} is not a 3-D frame", path.display())))?;
    FrameImage::new(arr, timestamp_s, sample_id)
}

/// Resolve a manifest reference: absolute paths are kept, relative ones
/// are taken relative to the manifest's directory.
pub fn resolve_ref(manifest_path: &Path, reference: &str) -> std::path::PathBuf {
    let r = Path::new(reference);
    if r.is_absolute() {
        r.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(r)
    }
}

/// All frames stored at `path`: a single `H x W x C` frame or an
/// `n x H x W x C` stack.
pub fn read_frame_stack(path: &Path) -> Result<Vec<Array3<f64>>> {
    let arr = read_array(path)?;
    match arr.ndim() {
        3 => Ok(vec![arr.into_dimensionality::<ndarray::Ix3>().expect("rank checked")]),
        4 => {
            let arr = arr.into_dimensionality::<ndarray::Ix4>().expect("rank checked");
            Ok(arr.outer_iter().map(|f| f.to_owned()).collect())
        }
        r => Err(Error::Dimension(format!(
            "{} has rank {r}, expected a frame or a frame stack",
            path.display()
        ))),
    }
}

/// Load the frame a [`FrameRef`] points at.
pub fn read_frame_ref(manifest_path: &Path, frame: &FrameRef, sample_id: &str) -> Result<FrameImage> {
    let path = resolve_ref(manifest_path, &frame.path);
    let mut stack = read_frame_stack(&path)?;
    let i = frame.index.unwrap_or(0);
    if i >= stack.len() {
        return Err(Error::Validation(format!(
            "frame index {i} out of range for {} ({} frames)",
            path.display(),
            stack.len()
        )));
    }
    FrameImage::new(stack.swap_remove(i), frame.timestamp_s, sample_id)
}
