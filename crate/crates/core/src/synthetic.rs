//! Synthetic audio-visual-caption corpora for tests and desk-scale runs.
//!
//! Each sample draws a latent vector. The spectrogram and the frames render
//! that latent through fixed, modality-specific random smooth fields (an
//! offset plus a few plane waves), and the caption names the latent's
//! quantized coordinates. Audio, frames and caption therefore carry the same
//! information in different forms.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_array, FrameImage, FrameRef, Manifest, ManifestHeader, Spectrogram, TripletRecord};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 6;

const VOCAB: [[&str; 3]; LATENT_DIM] = [
    ["quiet", "steady", "loud"],
    ["dog", "engine", "guitar"],
    ["kitchen", "street", "forest"],
    ["morning", "noon", "night"],
    ["slow", "calm", "fast"],
    ["red", "green", "blue"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub audio_shape: (usize, usize),
    pub frame_shape: (usize, usize, usize),
    pub frames_per_video: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn toy(n: usize, seed: u64) -> Self {
        Self {
            n,
            audio_shape: (64, 64),
            frame_shape: (64, 64, 3),
            frames_per_video: 3,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub latent: Vec<f64>,
    pub audio: Spectrogram,
    pub frames: Vec<FrameImage>,
    pub caption: String,
}

fn smooth_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let offset: f64 = rng.random_range(-1.0..1.0);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (y, x) = (r as f64 / rows as f64, c as f64 / cols as f64);
        offset
            + waves
                .iter()
                .map(|&(a, fy, fx, ph)| a * (2.0 * PI * (fy * y + fx * x) + ph).sin())
                .sum::<f64>()
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Caption for a latent vector: one word per coordinate, chosen by tercile.
pub fn caption_for(latent: &[f64]) -> String {
    let w: Vec<&str> = latent
        .iter()
        .zip(VOCAB.iter())
        .map(|(&z, words)| {
            if z < -0.43 {
                words[0]
            } else if z > 0.43 {
                words[2]
            } else {
                words[1]
            }
        })
        .collect();
    format!(
        "a {} {} in the {} at {}, {} and {}",
        w[0], w[1], w[2], w[3], w[4], w[5]
    )
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    if spec.n == 0 || spec.frames_per_video == 0 {
        return Err(Error::Parameter("synthetic corpus needs samples and frames".into()));
    }
    let (t, f) = spec.audio_shape;
    let (h, w, c) = spec.frame_shape;
    let mut basis_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_ba5e);
    let audio_basis: Vec<Array2<f64>> = (0..LATENT_DIM).map(|_| smooth_field(&mut basis_rng, t, f)).collect();
    let visual_basis: Vec<Vec<Array2<f64>>> = (0..LATENT_DIM)
        .map(|_| (0..c).map(|_| smooth_field(&mut basis_rng, h, w)).collect())
        .collect();
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();

    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let latent: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let id = format!("vid{i:04}");
        let mut audio = Array2::<f64>::zeros((t, f));
        for (z, b) in latent.iter().zip(&audio_basis) {
            audio.scaled_add(z * scale, b);
        }
        let mut base = Array3::<f64>::zeros((h, w, c));
        for (z, bs) in latent.iter().zip(&visual_basis) {
            for (ch, b) in bs.iter().enumerate() {
                let mut plane = base.index_axis_mut(Axis(2), ch);
                plane.scaled_add(z * scale, b);
            }
        }
        let mut frames = Vec::with_capacity(spec.frames_per_video);
        for j in 0..spec.frames_per_video {
            let mut frame = base.clone();
            for ch in 0..c {
                let noise = smooth_field(&mut rng, h, w);
                let mut plane = frame.index_axis_mut(Axis(2), ch);
                plane.scaled_add(0.15, &noise);
            }
            frames.push(FrameImage::new(frame.mapv(sigmoid), j as f64, id.clone())?);
        }
        out.push(SyntheticSample {
            caption: caption_for(&latent),
            audio: Spectrogram::new(audio, id.clone())?,
            id,
            latent,
            frames,
        });
    }
    Ok(out)
}

/// One line of a corpus file consumed by triplet generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub video_id: String,
    /// Spectrogram array file.
    pub audio: String,
    /// Frame stack array file (`n x H x W x C`).
    pub frames: String,
    /// Native frame rate of the stack.
    #[serde(default = "default_rate")]
    pub frame_rate: f64,
}

fn default_rate() -> f64 {
    1.0
}

pub struct WrittenDataset {
    pub corpus: PathBuf,
    pub manifest: PathBuf,
}

/// Write arrays, a corpus file and a ground-truth manifest (true captions,
/// best frame index 0) into `dir`.
pub fn write_dataset(samples: &[SyntheticSample], dir: &Path, name: &str) -> Result<WrittenDataset> {
    let arrays = dir.join("arrays");
    fs::create_dir_all(&arrays).map_err(|e| Error::io(&arrays, e))?;
    let mut corpus_lines = String::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let audio_rel = format!("arrays/{}.audio.arr", s.id);
        let frames_rel = format!("arrays/{}.frames.arr", s.id);
        write_array(&dir.join(&audio_rel), &s.audio.values().clone().into_dyn())?;
        let (h, w, c) = s.frames[0].shape();
        let mut stack = Array4::<f64>::zeros((s.frames.len(), h, w, c));
        for (j, fr) in s.frames.iter().enumerate() {
            stack.index_axis_mut(Axis(0), j).assign(fr.values());
        }
        write_array(&dir.join(&frames_rel), &stack.into_dyn())?;
        let entry = CorpusEntry {
            video_id: s.id.clone(),
            audio: audio_rel.clone(),
            frames: frames_rel.clone(),
            frame_rate: 1.0,
        };
        corpus_lines.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        corpus_lines.push('\n');
        records.push(TripletRecord {
            video_id: s.id.clone(),
            audio_ref: audio_rel,
            frame_ref: FrameRef {
                path: frames_rel,
                timestamp_s: 0.0,
                index: Some(0),
            },
            caption: s.caption.clone(),
            score: 1.0,
        });
    }
    let corpus = dir.join("corpus.jsonl");
    fs::write(&corpus, corpus_lines).map_err(|e| Error::io(&corpus, e))?;
    let mut header = ManifestHeader::new(name, "synthetic/1");
    header.fps = Some(1.0);
    let manifest = Manifest::new(header, records)?;
    let manifest_path = dir.join("manifest.jsonl");
    crate::data::write_manifest(&manifest, &manifest_path)?;
    Ok(WrittenDataset {
        corpus,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = generate(&SyntheticSpec::toy(4, 3)).unwrap();
        let b = generate(&SyntheticSpec::toy(4, 3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.frames.len(), 3);
        }
        assert!(a[0].frames[0].values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn captions_mostly_distinct() {
        let s = generate(&SyntheticSpec::toy(16, 0)).unwrap();
        let mut caps: Vec<_> = s.iter().map(|x| x.caption.clone()).collect();
        caps.sort();
        caps.dedup();
        assert!(caps.len() >= 14, "{caps:?}");
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SyntheticSpec::toy(3, 1)).unwrap();
        let w = write_dataset(&s, dir.path(), "toy").unwrap();
        let m = crate::data::read_manifest(&w.manifest).unwrap();
        assert_eq!(m.len(), 3);
        let r = &m.records[0];
        let f = crate::data::read_frame_ref(&w.manifest, &r.frame_ref, &r.video_id).unwrap();
        let orig = s.iter().find(|x| x.id == r.video_id).unwrap();
        assert_eq!(f.values(), orig.frames[0].values());
    }
}
