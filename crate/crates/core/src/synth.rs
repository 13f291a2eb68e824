//! Seeded synthetic Q&A worlds for self-contained runs.
//!
//! Each group gets an orthonormal centroid. Questions are unit-normalized
//! jittered copies of their centroid, passages tighter copies, and every
//! ordered concatenation of two train questions embeds as the normalized sum
//! of its parts. Experts see a random rotation of this ground truth plus
//! Gaussian noise; the base model is one more such view with heavier noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetSplit, EmbeddingMatrix, GroupSplit, TextCollection, TextItem};
use crate::pairgen::{concat_id, concat_text};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dimension {dim} is smaller than the number of groups {groups}")]
    DimTooSmall { dim: usize, groups: usize },
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorld {
    pub groups: usize,
    pub train: usize,
    pub heldout: usize,
    pub dim: usize,
    pub experts: usize,
    /// Per-coordinate noise standard deviation of each expert view.
    pub expert_noise: f64,
    /// Per-coordinate noise standard deviation of the base view.
    pub base_noise: f64,
    /// Per-coordinate spread of questions around their centroid.
    pub question_jitter: f64,
    /// Per-coordinate spread of passages around their centroid.
    pub passage_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            groups: 8,
            train: 12,
            heldout: 6,
            dim: 32,
            experts: 4,
            expert_noise: 0.05,
            base_noise: 0.25,
            question_jitter: 0.15,
            passage_jitter: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.groups < 2 {
            return Err(SynthError::Invalid("need at least 2 groups".into()));
        }
        if self.train < 1 {
            return Err(SynthError::Invalid("need at least 1 train question per group".into()));
        }
        if self.experts < 1 {
            return Err(SynthError::Invalid("need at least 1 expert".into()));
        }
        if self.dim < self.groups {
            return Err(SynthError::DimTooSmall { dim: self.dim, groups: self.groups });
        }
        for (name, v) in [
            ("expert_noise", self.expert_noise),
            ("base_noise", self.base_noise),
            ("question_jitter", self.question_jitter),
            ("passage_jitter", self.passage_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::Invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Questions, passages and every train concatenation.
    pub collection: TextCollection,
    pub split: DatasetSplit,
    pub base: EmbeddingMatrix,
    pub experts: Vec<EmbeddingMatrix>,
    pub ground_truth: EmbeddingMatrix,
}

pub fn question_id(group: usize, index: usize) -> String {
    format!("g{group:02}q{index:02}")
}

pub fn passage_id(group: usize) -> String {
    format!("g{group:02}p")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Random orthogonal matrix (rows orthonormal) by Gram-Schmidt on a
/// Gaussian draw.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v = gaussian(rng, dim);
        for _ in 0..2 {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Rotated, noised, re-normalized view of the ground truth.
fn view(
    model_id: String,
    ground_truth: &[(String, Vec<f64>)],
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<EmbeddingMatrix, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_orthogonal(&mut rng, dim);
    let mut matrix = EmbeddingMatrix::new(model_id, dim)?;
    for (id, x) in ground_truth {
        let mut y: Vec<f64> = rotation.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        if noise > 0.0 {
            for (v, n) in y.iter_mut().zip(gaussian(&mut rng, dim)) {
                *v += noise * n;
            }
            normalize(&mut y);
        }
        matrix.insert(id.clone(), to_f32(&y))?;
    }
    Ok(matrix)
}

pub fn synth(world: &SyntheticWorld) -> Result<SynthOutput, SynthError> {
    world.validate()?;
    let dim = world.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world.seed, "synth/centroids"));
    let centroids: Vec<Vec<f64>> = random_orthogonal(&mut rng, dim).into_iter().take(world.groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world.seed, "synth/texts"));

    let mut collection = TextCollection::new();
    let mut split = DatasetSplit::default();
    let mut truth: Vec<(String, Vec<f64>)> = Vec::new();
    let jittered = |rng: &mut ChaCha8Rng, centroid: &[f64], spread: f64| {
        let mut v: Vec<f64> = centroid.iter().zip(gaussian(rng, dim)).map(|(c, n)| c + spread * n).collect();
        normalize(&mut v);
        v
    };

    for (g, centroid) in centroids.iter().enumerate() {
        let group = g as u32;
        let mut questions = Vec::with_capacity(world.train + world.heldout);
        for i in 0..world.train + world.heldout {
            let id = question_id(g, i);
            collection.insert(TextItem {
                text_id: id.clone(),
                text: format!("Group {g} question, phrasing {i}?"),
                group_id: group,
            })?;
            truth.push((id.clone(), jittered(&mut rng, centroid, world.question_jitter)));
            questions.push(id);
        }
        let passage = passage_id(g);
        collection.insert(TextItem {
            text_id: passage.clone(),
            text: format!("Group {g} answer."),
            group_id: group,
        })?;
        truth.push((passage.clone(), jittered(&mut rng, centroid, world.passage_jitter)));
        let heldout = questions.split_off(world.train);
        split.groups.insert(
            group,
            GroupSplit { train_question_ids: questions, heldout_question_ids: heldout, passage_text_id: passage },
        );
    }

    // concatenations of every ordered train pair
    let mut concats = Vec::new();
    for (&group, group_split) in &split.groups {
        for a in &group_split.train_question_ids {
            for b in &group_split.train_question_ids {
                let id = concat_id(a, b);
                let text = concat_text(&collection.get(a).unwrap().text, &collection.get(b).unwrap().text);
                collection.insert(TextItem { text_id: id.clone(), text, group_id: group })?;
                concats.push((id, a.clone(), b.clone()));
            }
        }
    }
    let lookup: std::collections::HashMap<&str, &Vec<f64>> = truth.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let concat_truth: Vec<(String, Vec<f64>)> = concats
        .into_iter()
        .map(|(id, a, b)| {
            let mut v: Vec<f64> = lookup[a.as_str()].iter().zip(lookup[b.as_str()]).map(|(x, y)| x + y).collect();
            normalize(&mut v);
            (id, v)
        })
        .collect();
    truth.extend(concat_truth);

    let mut ground_truth = EmbeddingMatrix::new("ground_truth", dim)?;
    for (id, v) in &truth {
        ground_truth.insert(id.clone(), to_f32(v))?;
    }
    let experts = (0..world.experts)
        .map(|k| {
            view(
                format!("expert_{k}"),
                &truth,
                dim,
                world.expert_noise,
                derive_seed(world.seed, &format!("synth/expert/{k}")),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let base = view("base".into(), &truth, dim, world.base_noise, derive_seed(world.seed, "synth/base"))?;
    Ok(SynthOutput { collection, split, base, experts, ground_truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{cosine, write_matrix};

    fn small() -> SyntheticWorld {
        SyntheticWorld { groups: 3, train: 3, heldout: 2, dim: 8, experts: 2, seed: 5, ..SyntheticWorld::default() }
    }

    #[test]
    fn shapes() {
        let out = synth(&small()).unwrap();
        // 3 groups x (5 questions + passage + 9 concatenations)
        assert_eq!(out.collection.len(), 45);
        assert_eq!(out.ground_truth.len(), 45);
        assert_eq!(out.base.len(), 45);
        assert_eq!(out.experts.len(), 2);
        out.split.validate(&out.collection).unwrap();
        assert_eq!(out.split.groups[&1].heldout_question_ids, vec!["g01q03", "g01q04"]);
        assert!(out.collection.get("g02q00+g02q01").is_some());
    }

    #[test]
    fn noiseless_experts_preserve_cosines() {
        let world = SyntheticWorld { expert_noise: 0.0, ..small() };
        let out = synth(&world).unwrap();
        let ids: Vec<&str> = out.ground_truth.iter().map(|(id, _)| id).take(20).collect();
        for expert in &out.experts {
            for a in &ids {
                for b in &ids {
                    let truth = cosine(out.ground_truth.get(a).unwrap(), out.ground_truth.get(b).unwrap()).unwrap();
                    let seen = cosine(expert.get(a).unwrap(), expert.get(b).unwrap()).unwrap();
                    assert!((truth - seen).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let bytes = |m: &EmbeddingMatrix| {
            let mut buf = Vec::new();
            write_matrix(m, &mut buf).unwrap();
            buf
        };
        let a = synth(&small()).unwrap();
        let b = synth(&small()).unwrap();
        assert_eq!(bytes(&a.base), bytes(&b.base));
        for (x, y) in a.experts.iter().zip(&b.experts) {
            assert_eq!(bytes(x), bytes(y));
        }
        assert_eq!(a.collection, b.collection);
        let c = synth(&SyntheticWorld { seed: 6, ..small() }).unwrap();
        assert_ne!(bytes(&a.base), bytes(&c.base));
    }

    #[test]
    fn invalid_worlds() {
        assert!(matches!(
            synth(&SyntheticWorld { dim: 2, ..small() }),
            Err(SynthError::DimTooSmall { dim: 2, groups: 3 })
        ));
        assert!(synth(&SyntheticWorld { groups: 1, ..small() }).is_err());
        assert!(synth(&SyntheticWorld { experts: 0, ..small() }).is_err());
    }

    #[test]
    fn groups_are_separated() {
        let out = synth(&small()).unwrap();
        let q = out.ground_truth.get("g00q00").unwrap();
        let own = cosine(q, out.ground_truth.get("g00p").unwrap()).unwrap();
        let other = cosine(q, out.ground_truth.get("g01p").unwrap()).unwrap();
        assert!(own > other);
    }
}
