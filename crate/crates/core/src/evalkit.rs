//! Retrieval and classification metrics.
//!
//! Ranking ties are broken by column (or sample) index ascending, so every
//! metric is a deterministic function of its inputs.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{EmbeddingModality, Model, PooledEmbedding};
use crate::data::{FrameImage, Spectrogram};
use crate::error::{Error, Result};
use crate::objectives::UNIT_NORM_TOL;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Embeddings with their sample ids, in a fixed order.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub embeddings: Vec<PooledEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// Rows index queries, columns index the gallery.
    pub values: Array2<f64>,
    pub row_modality: EmbeddingModality,
    pub col_modality: EmbeddingModality,
    pub sample_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(
        values: Array2<f64>,
        row_modality: EmbeddingModality,
        col_modality: EmbeddingModality,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() != sample_ids.len() {
            return Err(Error::Dimension(format!(
                "similarity matrix {:?} with {} ids",
                values.dim(),
                sample_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "similarity".into(),
                detail: "matrix has non-finite entries".into(),
            });
        }
        Ok(Self {
            values,
            row_modality,
            col_modality,
            sample_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Apply `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.values.mapv(f),
            self.row_modality,
            self.col_modality,
            self.sample_ids.clone(),
        )
    }
}

fn set_modality(set: &EmbeddingSet, what: &str) -> Result<EmbeddingModality> {
    let first = set
        .embeddings
        .first()
        .ok_or_else(|| Error::Parameter(format!("{what} set is empty")))?;
    if set.ids.len() != set.embeddings.len() {
        return Err(Error::Validation(format!(
            "{what}: {} ids for {} embeddings",
            set.ids.len(),
            set.embeddings.len()
        )));
    }
    for (id, e) in set.ids.iter().zip(&set.embeddings) {
        if e.modality != first.modality {
            return Err(Error::Modality(format!("{what} set mixes modalities")));
        }
        if e.dim() != first.dim() {
            return Err(Error::Dimension(format!("{what} embedding '{id}' has width {}", e.dim())));
        }
        let norm = e.vector.dot(&e.vector).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "{what} embedding '{id}' has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(first.modality)
}

/// Cosine similarities between aligned query and gallery sets.
pub fn build_similarity(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<SimilarityMatrix> {
    let rm = set_modality(queries, "query")?;
    let cm = set_modality(gallery, "gallery")?;
    if queries.ids != gallery.ids {
        return Err(Error::Validation("query and gallery sample ids are not aligned".into()));
    }
    if queries.embeddings[0].dim() != gallery.embeddings[0].dim() {
        return Err(Error::Dimension("query and gallery widths differ".into()));
    }
    let stack = |set: &EmbeddingSet| {
        let d = set.embeddings[0].dim();
        let mut m = Array2::<f64>::zeros((set.embeddings.len(), d));
        for (i, e) in set.embeddings.iter().enumerate() {
            m.row_mut(i).assign(&e.vector);
        }
        m
    };
    let values = stack(queries).dot(&stack(gallery).t());
    SimilarityMatrix::new(values, rm, cm, queries.ids.clone())
}

/// Rank (0-based) of the ground-truth column in row `i`.
fn truth_rank(values: &Array2<f64>, i: usize) -> usize {
    let row = values.row(i);
    let truth = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > truth || (v == truth && j < i))
        .count()
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    let n = sim.n();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("K = {k} outside [1, {n}]")));
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| usize::from(truth_rank(&sim.values, i) < k))
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Average precision of one class; `None` when the class has no positives.
fn average_precision(scores: ndarray::ArrayView1<f64>, labels: ndarray::ArrayView1<u8>) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Macro-averaged average precision over classes with at least one
/// positive.
pub fn mean_average_precision(scores: &Array2<f64>, labels: &Array2<u8>) -> Result<f64> {
    if scores.dim() != labels.dim() {
        return Err(Error::Validation(format!(
            "scores {:?} and labels {:?} differ in shape",
            scores.dim(),
            labels.dim()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("labels must be binary".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "scores".into(),
            detail: "non-finite classification score".into(),
        });
    }
    let aps: Vec<f64> = (0..scores.ncols())
        .filter_map(|c| average_precision(scores.column(c), labels.column(c)))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive label".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub n: usize,
    pub ks: Vec<usize>,
    pub a2v: Vec<f64>,
    pub v2a: Vec<f64>,
}

impl RetrievalReport {
    pub fn header(ks: &[usize]) -> String {
        let cols: Vec<String> = ks.iter().map(|k| format!("R@{k}")).collect();
        format!("direction\t{}", cols.join("\t"))
    }

    pub fn to_tsv(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("\t");
        format!(
            "{}\na2v\t{}\nv2a\t{}\n",
            Self::header(&self.ks),
            fmt(&self.a2v),
            fmt(&self.v2a)
        )
    }
}

/// Unmasked, normalized `(audio, visual)` embeddings of every pair.
pub fn embed_pairs(model: &Model, pairs: &[(String, Spectrogram, FrameImage)]) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let embs: Vec<(PooledEmbedding, PooledEmbedding)> = pairs
        .par_iter()
        .map(|(_, a, v)| model.embed_pair(a, v))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = pairs.iter().map(|(id, _, _)| id.clone()).collect();
    let (audio, visual): (Vec<_>, Vec<_>) = embs.into_iter().unzip();
    Ok((
        EmbeddingSet {
            ids: ids.clone(),
            embeddings: audio,
        },
        EmbeddingSet { ids, embeddings: visual },
    ))
}

/// Seeded subset of `size` pairs, kept in their original order.
pub fn sample_gallery<T: Clone>(pairs: &[T], size: usize, seed: u64) -> Result<Vec<T>> {
    if size == 0 || size > pairs.len() {
        return Err(Error::Parameter(format!(
            "gallery size {size} outside [1, {}]",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pairs.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Audio-to-visual and visual-to-audio recall@K over `pairs`.
pub fn evaluate_retrieval(model: &Model, pairs: &[(String, Spectrogram, FrameImage)], ks: &[usize]) -> Result<RetrievalReport> {
    if pairs.is_empty() {
        return Err(Error::Parameter("retrieval set is empty".into()));
    }
    let (audio, visual) = embed_pairs(model, pairs)?;
    let a2v = build_similarity(&audio, &visual)?;
    let v2a = build_similarity(&visual, &audio)?;
    Ok(RetrievalReport {
        n: pairs.len(),
        ks: ks.to_vec(),
        a2v: ks.iter().map(|&k| recall_at_k(&a2v, k)).collect::<Result<_>>()?,
        v2a: ks.iter().map(|&k| recall_at_k(&v2a, k)).collect::<Result<_>>()?,
    })
}
