//! Linear adapter over frozen base embeddings, trained with the squared
//! error between predicted pair similarity and a hard or soft target.
//!
//! The adapter maps a base embedding `x` to `Wᵀx` (optionally L2-normalized),
//! where `W` is `d_in × d_out`. For a batch of `n` samples the loss is
//!
//! ```text
//! L(W) = 1/n · Σ (f(q)ᵀ f(p) − target)²
//! ```
//!
//! With normalized outputs `a = u/‖u‖`, `b = v/‖v‖`, `s = aᵀb` (`u = Wᵀq`,
//! `v = Wᵀp`), the per-sample gradient is
//!
//! ```text
//! ∂s/∂u = (b − s·a)/‖u‖      ∂s/∂v = (a − s·b)/‖v‖
//! ∂L/∂W = 2/n · Σ (s − target) · (q ⊗ ∂s/∂u + p ⊗ ∂s/∂v)
//! ```
//!
//! and without normalization `∂s/∂u = v`, `∂s/∂v = u`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, EmbeddingMatrix};
use crate::pairgen::PairRecord;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("collapsed embedding")]
    CollapsedEmbedding,
    #[error("non-finite target")]
    NonFiniteTarget,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("diverged at step {0}")]
    Diverged(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("base matrix has no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("record ({query_id}, {passage_id}) has no {kind} target")]
    MissingTarget { kind: TargetKind, query_id: String, passage_id: String },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Hard,
    Soft1,
    Soft2,
    Soft3,
}

impl TargetKind {
    pub const ALL: [TargetKind; 4] = [Self::Hard, Self::Soft1, Self::Soft2, Self::Soft3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hard => "hard",
            Self::Soft1 => "soft1",
            Self::Soft2 => "soft2",
            Self::Soft3 => "soft3",
        }
    }

    /// The regression target this kind selects from a record.
    pub fn target(self, record: &PairRecord) -> Result<f64> {
        let value = match self {
            Self::Hard => Some(f64::from(record.hard_label)),
            Self::Soft1 => record.soft1,
            Self::Soft2 => record.soft2,
            Self::Soft3 => record.soft3,
        };
        value.ok_or_else(|| TrainError::MissingTarget {
            kind: self,
            query_id: record.query_id.clone(),
            passage_id: record.passage_id.clone(),
        })
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown target `{s}` (expected hard, soft1, soft2 or soft3)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::adam()),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_kind: TargetKind,
    pub optimizer: Optimizer,
    /// Standard deviation of the Gaussian noise added to the identity init.
    pub init_noise: f64,
    pub normalize_output: bool,
    /// Adapter output dimension; defaults to the base dimension.
    pub output_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 64,
            epochs: 2,
            seed: 0,
            target_kind: TargetKind::Soft1,
            optimizer: Optimizer::adam(),
            init_noise: 0.01,
            normalize_output: true,
            output_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return Err(TrainError::InvalidConfig("init_noise must be finite and non-negative".into()));
        }
        if self.output_dim == Some(0) {
            return Err(TrainError::InvalidConfig("output_dim must be positive".into()));
        }
        Ok(())
    }
}

/// `W` stored row-major as `d_in` rows of `d_out` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    d_in: usize,
    d_out: usize,
    weights: Vec<f64>,
    pub normalize_output: bool,
    pub base_model_id: String,
}

impl AdapterModel {
    /// Truncated identity: `W[i][i] = 1` for `i < min(d_in, d_out)`.
    pub fn identity(d_in: usize, d_out: usize, normalize_output: bool, base_model_id: impl Into<String>) -> Self {
        let mut weights = vec![0.0; d_in * d_out];
        for i in 0..d_in.min(d_out) {
            weights[i * d_out + i] = 1.0;
        }
        Self { d_in, d_out, weights, normalize_output, base_model_id: base_model_id.into() }
    }

    pub fn from_weights(
        d_in: usize,
        d_out: usize,
        weights: Vec<f64>,
        normalize_output: bool,
        base_model_id: impl Into<String>,
    ) -> Result<Self> {
        if weights.len() != d_in * d_out {
            return Err(TrainError::DimensionMismatch { expected: d_in * d_out, found: weights.len() });
        }
        Ok(Self { d_in, d_out, weights, normalize_output, base_model_id: base_model_id.into() })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// `Wᵀx`.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(TrainError::DimensionMismatch { expected: self.d_in, found: x.len() });
        }
        let mut out = vec![0.0; self.d_out];
        for (&xi, row) in x.iter().zip(self.weights.chunks_exact(self.d_out)) {
            let xi = f64::from(xi);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    /// The adapted embedding `f(x)`.
    pub fn embed(&self, x: &[f32]) -> Result<Vec<f64>> {
        let mut u = self.project(x)?;
        if self.normalize_output {
            let norm = dot(&u, &u).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TrainError::CollapsedEmbedding);
            }
            u.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(u)
    }

    /// Predicted similarity `f(q)ᵀ f(p)`.
    pub fn similarity(&self, q: &[f32], p: &[f32]) -> Result<f64> {
        Ok(dot(&self.embed(q)?, &self.embed(p)?))
    }

    /// Adapts every row of `matrix`.
    pub fn apply(&self, matrix: &EmbeddingMatrix, model_id: impl Into<String>) -> Result<EmbeddingMatrix> {
        let mut out = EmbeddingMatrix::new(model_id, self.d_out)?;
        for (id, x) in matrix.iter() {
            let y = self.embed(x)?;
            out.insert(id, y.into_iter().map(|v| v as f32).collect())?;
        }
        Ok(out)
    }

    /// Writes `W` in the embedding-matrix format (rows `w_<i>`, as f32) and a
    /// JSON sidecar at `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>, config: Option<&TrainConfig>) -> Result<()> {
        let path = path.as_ref();
        let mut matrix = EmbeddingMatrix::new(self.base_model_id.clone(), self.d_out)?;
        for (i, row) in self.weights.chunks_exact(self.d_out).enumerate() {
            matrix.insert(format!("w_{i}"), row.iter().map(|&w| w as f32).collect())?;
        }
        matrix.save(path)?;
        let sidecar = Sidecar {
            base_model_id: self.base_model_id.clone(),
            normalize_output: self.normalize_output,
            d_in: self.d_in,
            d_out: self.d_out,
            config: config.cloned(),
        };
        let mut file = BufWriter::new(File::create(sidecar_path(path)).map_err(CorpusError::from)?);
        serde_json::to_writer_pretty(&mut file, &sidecar).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        file.write_all(b"\n").map_err(CorpusError::from)?;
        file.flush().map_err(CorpusError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let matrix = EmbeddingMatrix::load(path)?;
        let file = BufReader::new(File::open(sidecar_path(path)).map_err(CorpusError::from)?);
        let sidecar: Sidecar = serde_json::from_reader(file).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if matrix.dim() != sidecar.d_out || matrix.len() != sidecar.d_in {
            return Err(TrainError::Checkpoint(format!(
                "matrix is {}x{}, sidecar declares {}x{}",
                matrix.len(),
                matrix.dim(),
                sidecar.d_in,
                sidecar.d_out
            )));
        }
        let mut weights = Vec::with_capacity(sidecar.d_in * sidecar.d_out);
        for i in 0..sidecar.d_in {
            let row =
                matrix.get(&format!("w_{i}")).ok_or_else(|| TrainError::Checkpoint(format!("missing row w_{i}")))?;
            weights.extend(row.iter().map(|&w| f64::from(w)));
        }
        Self::from_weights(sidecar.d_in, sidecar.d_out, weights, sidecar.normalize_output, sidecar.base_model_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    base_model_id: String,
    normalize_output: bool,
    d_in: usize,
    d_out: usize,
    config: Option<TrainConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// One training sample: base embeddings of query and passage plus target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub query: &'a [f32],
    pub passage: &'a [f32],
    pub target: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Forward {
    u: Vec<f64>,
    v: Vec<f64>,
    similarity: f64,
    norm_u: f64,
    norm_v: f64,
}

fn forward(model: &AdapterModel, sample: &Sample<'_>) -> Result<Forward> {
    if !sample.target.is_finite() {
        return Err(TrainError::NonFiniteTarget);
    }
    let u = model.project(sample.query)?;
    let v = model.project(sample.passage)?;
    if !model.normalize_output {
        let similarity = dot(&u, &v);
        return Ok(Forward { u, v, similarity, norm_u: 1.0, norm_v: 1.0 });
    }
    let norm_u = dot(&u, &u).sqrt();
    let norm_v = dot(&v, &v).sqrt();
    if norm_u == 0.0 || norm_v == 0.0 || !norm_u.is_finite() || !norm_v.is_finite() {
        return Err(TrainError::CollapsedEmbedding);
    }
    let similarity = dot(&u, &v) / (norm_u * norm_v);
    Ok(Forward { u, v, similarity, norm_u, norm_v })
}

pub fn loss(model: &AdapterModel, batch: &[Sample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for sample in batch {
        let r = forward(model, sample)?.similarity - sample.target;
        total += r * r;
    }
    Ok(total / batch.len() as f64)
}

pub fn gradient(model: &AdapterModel, batch: &[Sample<'_>]) -> Result<Vec<f64>> {
    loss_and_gradient(model, batch).map(|(_, g)| g)
}

/// Mean squared error and its gradient with respect to `W` (row-major,
/// same layout as the weights).
pub fn loss_and_gradient(model: &AdapterModel, batch: &[Sample<'_>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let d_out = model.d_out;
    let mut grad = vec![0.0; model.weights.len()];
    let mut total = 0.0;
    let mut ds_du = vec![0.0; d_out];
    let mut ds_dv = vec![0.0; d_out];
    for sample in batch {
        let fw = forward(model, sample)?;
        let residual = fw.similarity - sample.target;
        total += residual * residual;
        if model.normalize_output {
            let s = fw.similarity;
            for j in 0..d_out {
                let a = fw.u[j] / fw.norm_u;
                let b = fw.v[j] / fw.norm_v;
                ds_du[j] = (b - s * a) / fw.norm_u;
                ds_dv[j] = (a - s * b) / fw.norm_v;
            }
        } else {
            ds_du.copy_from_slice(&fw.v);
            ds_dv.copy_from_slice(&fw.u);
        }
        let scale = 2.0 * residual / n;
        for (i, row) in grad.chunks_exact_mut(d_out).enumerate() {
            let qi = scale * f64::from(sample.query[i]);
            let pi = scale * f64::from(sample.passage[i]);
            for j in 0..d_out {
                row[j] += qi * ds_du[j] + pi * ds_dv[j];
            }
        }
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over the whole dataset at initialization.
    pub initial_loss: f64,
    /// Mean of the per-batch losses of each epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
    /// Loss over the whole dataset after the last update.
    pub final_loss: f64,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub config: TrainConfig,
}

/// Resolves base embeddings and targets for `pairs`.
pub fn samples<'a>(base: &'a EmbeddingMatrix, pairs: &[PairRecord], kind: TargetKind) -> Result<Vec<Sample<'a>>> {
    pairs
        .iter()
        .map(|record| {
            let lookup = |id: &str| base.get(id).ok_or_else(|| TrainError::MissingEmbedding(id.to_owned()));
            Ok(Sample {
                query: lookup(&record.query_id)?,
                passage: lookup(&record.passage_id)?,
                target: kind.target(record)?,
            })
        })
        .collect()
}

pub fn initial_model(d_in: usize, config: &TrainConfig, base_model_id: &str) -> Result<AdapterModel> {
    let d_out = config.output_dim.unwrap_or(d_in);
    let mut model = AdapterModel::identity(d_in, d_out, config.normalize_output, base_model_id);
    if config.init_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/init"));
        let noise = Normal::new(0.0, config.init_noise).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        for w in model.weights.iter_mut() {
            *w += noise.sample(&mut rng);
        }
    }
    Ok(model)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

pub fn train(
    base: &EmbeddingMatrix,
    pairs: &[PairRecord],
    config: &TrainConfig,
) -> Result<(AdapterModel, TrainReport)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let data = samples(base, pairs, config.target_kind)?;
    let mut model = initial_model(base.dim(), config, &base.model_id)?;
    let initial_loss = loss(&model, &data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = AdamState { m: vec![0.0; model.weights.len()], v: vec![0.0; model.weights.len()], t: 0 };
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let mut batch = Vec::with_capacity(config.batch_size);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let (batch_loss, grad) = loss_and_gradient(&model, &batch)?;
            steps += 1;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged(steps));
            }
            weighted += batch_loss * batch.len() as f64;
            update(&mut model, &grad, config, &mut adam);
            if model.weights.iter().any(|w| !w.is_finite()) {
                return Err(TrainError::Diverged(steps));
            }
        }
        epoch_losses.push(weighted / data.len() as f64);
    }

    let final_loss = loss(&model, &data)?;
    if !final_loss.is_finite() {
        return Err(TrainError::Diverged(steps));
    }
    let report = TrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
        steps,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    Ok((model, report))
}

fn update(model: &mut AdapterModel, grad: &[f64], config: &TrainConfig, adam: &mut AdamState) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (w, g) in model.weights.iter_mut().zip(grad) {
                *w -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            for (((w, g), m), v) in model.weights.iter_mut().zip(grad).zip(&mut adam.m).zip(&mut adam.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
