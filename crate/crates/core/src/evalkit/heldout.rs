//! Held-out query analysis: every held-out query is compared against every
//! group's passage. Same-group comparisons are intra samples, the rest are
//! inter samples.

use serde::Serialize;

use super::{EvalError, QrelSet, Result, RunRanking};
use crate::corpus::{cosine, DatasetSplit, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilaritySample {
    pub kind: SampleKind,
    pub query_id: String,
    pub passage_id: String,
    pub query_group: u32,
    pub passage_group: u32,
    pub value: f64,
}

impl SimilaritySample {
    /// `(score, is_positive)` for PR analysis; intra samples are positives.
    pub fn scored(&self) -> (f64, bool) {
        (self.value, self.kind == SampleKind::Intra)
    }
}

/// With `G` groups of `H` held-out queries each, returns `G·H·G` samples of
/// which `G·H` are intra.
pub fn intra_inter(
    queries: &EmbeddingMatrix,
    passages: &EmbeddingMatrix,
    split: &DatasetSplit,
) -> Result<Vec<SimilaritySample>> {
    let lookup = |m: &'_ EmbeddingMatrix, id: &str| -> Result<Vec<f32>> {
        m.get(id).map(<[f32]>::to_vec).ok_or_else(|| EvalError::MissingEmbedding(id.to_owned()))
    };
    let passage_vectors = split
        .groups
        .iter()
        .map(|(&g, s)| Ok((g, s.passage_text_id.as_str(), lookup(passages, &s.passage_text_id)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    for (&query_group, group_split) in &split.groups {
        for query_id in &group_split.heldout_question_ids {
            let q = lookup(queries, query_id)?;
            for (passage_group, passage_id, p) in &passage_vectors {
                let kind = if query_group == *passage_group { SampleKind::Intra } else { SampleKind::Inter };
                samples.push(SimilaritySample {
                    kind,
                    query_id: query_id.clone(),
                    passage_id: (*passage_id).to_owned(),
                    query_group,
                    passage_group: *passage_group,
                    value: cosine(&q, p)?,
                });
            }
        }
    }
    Ok(samples)
}

/// Ranks each held-out query's passages by similarity; the query's own
/// group passage is its single relevant passage.
pub fn heldout_run(samples: &[SimilaritySample]) -> Result<(RunRanking, QrelSet)> {
    let mut qrels = QrelSet::new();
    for sample in samples.iter().filter(|s| s.kind == SampleKind::Intra) {
        qrels.insert(sample.query_id.clone(), sample.passage_id.clone());
    }
    let run = RunRanking::from_scores(samples.iter().map(|s| (s.query_id.clone(), s.passage_id.clone(), s.value)))?;
    Ok((run, qrels))
}

/// Cosine similarity of every unordered pair of `ids` (in the given order).
pub fn pairwise_similarities(matrix: &EmbeddingMatrix, ids: &[&str]) -> Result<Vec<f64>> {
    let vectors = ids
        .iter()
        .map(|id| matrix.get(id).ok_or_else(|| EvalError::MissingEmbedding((*id).to_owned())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            out.push(cosine(vectors[i], vectors[j])?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GroupSplit;
    use crate::evalkit::{map_at_k, mrr_at_k};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world(groups: u32, heldout: usize, rng: &mut ChaCha8Rng) -> (EmbeddingMatrix, DatasetSplit) {
        let mut m = EmbeddingMatrix::new("m", 6).unwrap();
        let mut split = DatasetSplit::default();
        for g in 0..groups {
            let ids: Vec<String> = (0..heldout).map(|i| format!("g{g}h{i}")).collect();
            for id in &ids {
                m.insert(id.clone(), (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            }
            m.insert(format!("g{g}p"), (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            split.groups.insert(
                g,
                GroupSplit { train_question_ids: vec![], heldout_question_ids: ids, passage_text_id: format!("g{g}p") },
            );
        }
        (m, split)
    }

    #[test]
    fn counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (g, h) in [(2u32, 1usize), (26, 21), (3, 0)] {
            let (m, split) = world(g, h, &mut rng);
            let samples = intra_inter(&m, &m, &split).unwrap();
            let g = g as usize;
            assert_eq!(samples.len(), g * h * g);
            assert_eq!(samples.iter().filter(|s| s.kind == SampleKind::Intra).count(), g * h);
            for s in &samples {
                assert_eq!(s.kind == SampleKind::Intra, s.query_group == s.passage_group);
            }
        }
    }

    #[test]
    fn identical_embeddings_give_unit_intra() {
        let mut m = EmbeddingMatrix::new("m", 2).unwrap();
        let mut split = DatasetSplit::default();
        for g in 0..3u32 {
            let v = vec![(g as f32).cos(), (g as f32).sin()];
            m.insert(format!("q{g}"), v.clone()).unwrap();
            m.insert(format!("p{g}"), v).unwrap();
            split.groups.insert(
                g,
                GroupSplit {
                    train_question_ids: vec![],
                    heldout_question_ids: vec![format!("q{g}")],
                    passage_text_id: format!("p{g}"),
                },
            );
        }
        let samples = intra_inter(&m, &m, &split).unwrap();
        for s in samples.iter().filter(|s| s.kind == SampleKind::Intra) {
            assert!((s.value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heldout_map_equals_mrr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, split) = world(5, 4, &mut rng);
        let samples = intra_inter(&m, &m, &split).unwrap();
        let (run, qrels) = heldout_run(&samples).unwrap();
        assert_eq!(qrels.len(), 20);
        let map = map_at_k(&run, &qrels, 10).unwrap();
        let mrr = mrr_at_k(&run, &qrels, 10).unwrap();
        assert_eq!(map.per_query, mrr.per_query);
    }

    #[test]
    fn pairwise_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, _) = world(1, 5, &mut rng);
        let ids: Vec<&str> = m.iter().map(|(id, _)| id).collect();
        assert_eq!(pairwise_similarities(&m, &ids).unwrap().len(), 15);
        assert!(pairwise_similarities(&m, &["nope"]).is_err());
    }
}
