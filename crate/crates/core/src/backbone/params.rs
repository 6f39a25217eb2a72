//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is one JSON header line (format version, model config, seed
//! and the tensor table) followed by the raw little-endian `f64` payload of
//! every tensor in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lgcav-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic parameter initialization helpers.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub params: &'a mut Params,
}

impl Init<'_> {
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-limit..limit));
        self.params.insert(format!("{prefix}.weight"), w);
        self.params.insert(format!("{prefix}.bias"), Array2::zeros((1, fan_out)));
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.params.insert(format!("{prefix}.gamma"), Array2::ones((1, width)));
        self.params.insert(format!("{prefix}.beta"), Array2::zeros((1, width)));
    }

    pub fn normal_row(&mut self, name: &str, width: usize, std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let v = Array2::from_shape_fn((1, width), |_| dist.sample(self.rng));
        self.params.insert(name, v);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<(String, usize, usize)>,
}

pub fn checkpoint_bytes(config: &ModelConfig, params: &Params) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        seed: config.seed,
        config: config.clone(),
        tensors: params
            .iter()
            .map(|(n, t)| (n.clone(), t.nrows(), t.ncols()))
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, t) in params.iter() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &Params) -> Result<()> {
    let bytes = checkpoint_bytes(config, params);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Read a checkpoint. When `expected` is given, the stored config must match
/// it exactly.
pub fn read_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelConfig, Params)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("not a checkpoint (format '{}')", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model config:\n  checkpoint: {}\n  requested:  {}",
                path.display(),
                serde_json::to_string(&header.config).unwrap_or_default(),
                serde_json::to_string(exp).unwrap_or_default()
            )));
        }
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let total: usize = header.tensors.iter().map(|(_, r, c)| r * c).sum();
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload has {} bytes, tensor table needs {}",
            payload.len(),
            total * 8
        )));
    }
    let mut params = Params::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (name, r, c) in &header.tensors {
        let v: Vec<f64> = values.by_ref().take(r * c).collect();
        params.insert(name.clone(), Array2::from_shape_vec((*r, *c), v).expect("sized above"));
    }
    Ok((header.config, params))
}
