//! Expert scoring and soft-label derivation.
//!
//! Every expert scores a pair by the cosine of its own embeddings of the
//! query and passage. The scores are cached on the record; the soft targets
//! are pure functions of that score vector and the hard label:
//!
//! * `soft1`: the largest expert score for positives, the smallest for negatives.
//! * `soft2`: the mean expert score, ignoring the hard label.
//! * `soft3`: the mean of the two largest (positives) or two smallest
//!   (negatives) scores.

use thiserror::Error;

use crate::corpus::{cosine, CorpusError, EmbeddingMatrix};
use crate::pairgen::PairRecord;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("empty scores")]
    EmptyScores,
    #[error("soft3 requires K ≥ 2, got {0}")]
    Soft3NeedsTwo(usize),
    #[error("expert panel is empty")]
    EmptyPanel,
    #[error("expert `{expert}` (position {position}) has no embedding for `{text_id}`")]
    MissingEmbedding { expert: String, position: usize, text_id: String },
    #[error("expert `{expert}` on pair ({query_id}, {passage_id}): {source}")]
    Score {
        expert: String,
        query_id: String,
        passage_id: String,
        #[source]
        source: CorpusError,
    },
    #[error("record ({0}, {1}) has not been scored")]
    Unscored(String, String),
    #[error("record ({query_id}, {passage_id}) has {found} scores, expected {expected}")]
    ScoreCount { query_id: String, passage_id: String, expected: usize, found: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Ordered expert embedding models. Positions are stable and are what the
/// active-set statistics refer to.
#[derive(Debug, Clone)]
pub struct ExpertPanel {
    experts: Vec<EmbeddingMatrix>,
}

impl ExpertPanel {
    pub fn new(experts: Vec<EmbeddingMatrix>) -> Result<Self, LabelError> {
        if experts.is_empty() {
            return Err(LabelError::EmptyPanel);
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.experts.iter().map(|m| m.model_id.as_str())
    }

    pub fn experts(&self) -> &[EmbeddingMatrix] {
        &self.experts
    }
}

/// Fills `expert_scores` on every record with one cosine per expert, in
/// panel order.
pub fn score_pairs(panel: &ExpertPanel, pairs: &mut [PairRecord]) -> Result<(), LabelError> {
    for record in pairs.iter_mut() {
        let mut scores = Vec::with_capacity(panel.len());
        for (position, expert) in panel.experts.iter().enumerate() {
            let lookup = |id: &str| {
                expert.get(id).ok_or_else(|| LabelError::MissingEmbedding {
                    expert: expert.model_id.clone(),
                    position,
                    text_id: id.to_owned(),
                })
            };
            let q = lookup(&record.query_id)?;
            let p = lookup(&record.passage_id)?;
            let score = cosine(q, p).map_err(|source| LabelError::Score {
                expert: expert.model_id.clone(),
                query_id: record.query_id.clone(),
                passage_id: record.passage_id.clone(),
                source,
            })?;
            scores.push(score);
        }
        record.expert_scores = Some(scores);
    }
    Ok(())
}

pub fn soft1(scores: &[f64], positive: bool) -> Result<f64, LabelError> {
    let mut iter = scores.iter().copied();
    let first = iter.next().ok_or(LabelError::EmptyScores)?;
    Ok(if positive { iter.fold(first, f64::max) } else { iter.fold(first, f64::min) })
}

pub fn soft2(scores: &[f64]) -> Result<f64, LabelError> {
    if scores.is_empty() {
        return Err(LabelError::EmptyScores);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn soft3(scores: &[f64], positive: bool) -> Result<f64, LabelError> {
    if scores.len() < 2 {
        return Err(LabelError::Soft3NeedsTwo(scores.len()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if positive { (sorted[n - 1] + sorted[n - 2]) / 2.0 } else { (sorted[0] + sorted[1]) / 2.0 })
}

/// Derives `soft1`, `soft2` and (when K ≥ 2) `soft3` from cached scores.
pub fn label_pairs(pairs: &mut [PairRecord]) -> Result<(), LabelError> {
    for record in pairs.iter_mut() {
        let scores = record
            .expert_scores
            .as_deref()
            .ok_or_else(|| LabelError::Unscored(record.query_id.clone(), record.passage_id.clone()))?;
        let positive = record.is_positive();
        let s1 = soft1(scores, positive)?;
        let s2 = soft2(scores)?;
        let s3 = if scores.len() >= 2 { Some(soft3(scores, positive)?) } else { None };
        record.soft1 = Some(s1);
        record.soft2 = Some(s2);
        record.soft3 = s3;
    }
    Ok(())
}

/// Per-expert fraction of records whose score equals the Soft-1 target.
/// Ties credit every expert that attains the extreme, so the fractions can
/// sum to more than one.
pub fn active_set_fractions(labeled: &[PairRecord]) -> Result<Vec<f64>, LabelError> {
    let first = labeled.first().ok_or(LabelError::EmptyDataset)?;
    let k = first
        .expert_scores
        .as_ref()
        .ok_or_else(|| LabelError::Unscored(first.query_id.clone(), first.passage_id.clone()))?
        .len();
    let mut hits = vec![0usize; k];
    for record in labeled {
        let scores = record
            .expert_scores
            .as_deref()
            .ok_or_else(|| LabelError::Unscored(record.query_id.clone(), record.passage_id.clone()))?;
        if scores.len() != k {
            return Err(LabelError::ScoreCount {
                query_id: record.query_id.clone(),
                passage_id: record.passage_id.clone(),
                expected: k,
                found: scores.len(),
            });
        }
        let target = match record.soft1 {
            Some(t) => t,
            None => soft1(scores, record.is_positive())?,
        };
        for (hit, &score) in hits.iter_mut().zip(scores) {
            if score == target {
                *hit += 1;
            }
        }
    }
    let n = labeled.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::Origin;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: [f64; 3] = [0.2, 0.5, 0.9];
    const S4: [f64; 4] = [0.1, 0.4, 0.6, 0.9];

    #[test]
    fn soft1_examples() {
        assert_eq!(soft1(&S, true).unwrap(), 0.9);
        assert_eq!(soft1(&S, false).unwrap(), 0.2);
        for y in [true, false] {
            assert_eq!(soft1(&[0.37], y).unwrap(), 0.37);
            assert_eq!(soft1(&[0.37], y).unwrap(), soft2(&[0.37]).unwrap());
        }
        assert!(matches!(soft1(&[], true), Err(LabelError::EmptyScores)));
    }

    #[test]
    fn soft2_examples() {
        assert!((soft2(&S).unwrap() - 0.533333).abs() < 1e-6);
        assert_eq!(soft2(&[0.25, 0.25, 0.25]).unwrap(), 0.25);
        assert!(matches!(soft2(&[]), Err(LabelError::EmptyScores)));
    }

    #[test]
    fn soft2_matches_sequential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let k = rng.random_range(1..12);
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut total = 0.0f64;
            for score in &scores {
                total += score;
            }
            let oracle = total / k as f64;
            assert!((soft2(&scores).unwrap() - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn soft3_examples() {
        assert!((soft3(&S4, true).unwrap() - 0.75).abs() < 1e-15);
        assert!((soft3(&S4, false).unwrap() - 0.25).abs() < 1e-15);
        let pair = [0.3, -0.7];
        for y in [true, false] {
            assert_eq!(soft3(&pair, y).unwrap(), soft2(&pair).unwrap());
        }
        let err = soft3(&[0.4], true).unwrap_err();
        assert_eq!(err.to_string(), "soft3 requires K ≥ 2, got 1");
    }

    fn matrix(id: &str, rows: &[(&str, &[f32])]) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::new(id, rows[0].1.len()).unwrap();
        for (text_id, v) in rows {
            m.insert(*text_id, v.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn constant_expert_scores_one() {
        let m = matrix("flat", &[("q", &[0.2, 0.4]), ("p", &[0.2, 0.4]), ("r", &[0.2, 0.4])]);
        let panel = ExpertPanel::new(vec![m]).unwrap();
        let mut pairs = vec![PairRecord::new("q", "p", Origin::Direct), PairRecord::new("r", "q", Origin::Negative)];
        score_pairs(&panel, &mut pairs).unwrap();
        for pair in &pairs {
            assert!((pair.expert_scores.as_ref().unwrap()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pair_scores_zero() {
        let m = matrix("e", &[("q", &[1.0, 0.0]), ("p", &[0.0, 1.0])]);
        let panel = ExpertPanel::new(vec![m]).unwrap();
        let mut pairs = vec![PairRecord::new("q", "p", Origin::Direct)];
        score_pairs(&panel, &mut pairs).unwrap();
        assert_eq!(pairs[0].expert_scores.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn missing_embedding_names_id_and_expert() {
        let m = matrix("e7", &[("q", &[1.0, 0.0])]);
        let panel = ExpertPanel::new(vec![m]).unwrap();
        let mut pairs = vec![PairRecord::new("q", "nope", Origin::Direct)];
        let msg = score_pairs(&panel, &mut pairs).unwrap_err().to_string();
        assert!(msg.contains("nope") && msg.contains("e7"), "{msg}");
    }

    #[test]
    fn three_experts_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = ["a", "b", "c", "d"];
        let experts: Vec<EmbeddingMatrix> = (0..3)
            .map(|k| {
                let dim = 3 + k;
                let mut m = EmbeddingMatrix::new(format!("e{k}"), dim).unwrap();
                for id in ids {
                    m.insert(id, (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
                }
                m
            })
            .collect();
        let mut pairs = vec![
            PairRecord::new("a", "b", Origin::Direct),
            PairRecord::new("b", "c", Origin::ConcatLeft),
            PairRecord::new("c", "d", Origin::ConcatRight),
            PairRecord::new("d", "a", Origin::Negative),
        ];
        let panel = ExpertPanel::new(experts.clone()).unwrap();
        score_pairs(&panel, &mut pairs).unwrap();
        for pair in &pairs {
            for (k, expert) in experts.iter().enumerate() {
                let q = expert.get(&pair.query_id).unwrap();
                let p = expert.get(&pair.passage_id).unwrap();
                let mut dot = 0.0;
                let mut nq = 0.0;
                let mut np = 0.0;
                for i in 0..q.len() {
                    dot += q[i] as f64 * p[i] as f64;
                    nq += q[i] as f64 * q[i] as f64;
                    np += p[i] as f64 * p[i] as f64;
                }
                let oracle = dot / (nq.sqrt() * np.sqrt());
                assert!((pair.expert_scores.as_ref().unwrap()[k] - oracle).abs() < 1e-6);
            }
        }
    }

    fn scored(scores: &[f64], positive: bool) -> PairRecord {
        let origin = if positive { Origin::Direct } else { Origin::Negative };
        let mut record = PairRecord::new("q", "p", origin);
        record.expert_scores = Some(scores.to_vec());
        record
    }

    #[test]
    fn active_sets() {
        let single: Vec<PairRecord> = vec![scored(&[0.3], true), scored(&[-0.1], false)];
        assert_eq!(active_set_fractions(&single).unwrap(), vec![1.0]);

        let twins = vec![scored(&[0.3, 0.3], true), scored(&[0.1, 0.1], false)];
        assert_eq!(active_set_fractions(&twins).unwrap(), vec![1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut records: Vec<PairRecord> = (0..200)
            .map(|i| {
                // coarse grid so ties actually occur
                let scores: Vec<f64> = (0..3).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
                scored(&scores, i % 2 == 0)
            })
            .collect();
        label_pairs(&mut records).unwrap();
        let fractions = active_set_fractions(&records).unwrap();
        let mut counts = [0usize; 3];
        for record in &records {
            let scores = record.expert_scores.as_ref().unwrap();
            let extreme = if record.is_positive() {
                scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            } else {
                scores.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            for k in 0..3 {
                if scores[k] == extreme {
                    counts[k] += 1;
                }
            }
        }
        let oracle: Vec<f64> = counts.iter().map(|&c| c as f64 / 200.0).collect();
        assert_eq!(fractions, oracle);
        assert!(fractions.iter().sum::<f64>() > 1.0);

        assert!(matches!(active_set_fractions(&[]), Err(LabelError::EmptyDataset)));
    }

    #[test]
    fn labeling_requires_scores() {
        let mut records = vec![PairRecord::new("q", "p", Origin::Direct)];
        assert!(matches!(label_pairs(&mut records), Err(LabelError::Unscored(..))));
        let mut one = vec![scored(&[0.4], true)];
        label_pairs(&mut one).unwrap();
        assert_eq!(one[0].soft3, None);
        assert_eq!(one[0].soft1, Some(0.4));
    }

    proptest! {
        #[test]
        fn soft_label_invariants(
            scores in proptest::collection::vec(-1.0f64..=1.0, 2..10),
            rotation in 0usize..10,
        ) {
            let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = soft2(&scores).unwrap();
            let up = soft3(&scores, true).unwrap();
            let down = soft3(&scores, false).unwrap();
            prop_assert!(lo - 1e-9 <= down && down <= mean + 1e-9);
            prop_assert!(mean <= up + 1e-9 && up <= hi + 1e-9);
            prop_assert_eq!(soft1(&scores, true).unwrap(), hi);
            prop_assert_eq!(soft1(&scores, false).unwrap(), lo);

            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert_eq!(soft1(&scores, true).unwrap(), -soft1(&negated, false).unwrap());

            let mut permuted = scores.clone();
            let r = rotation % permuted.len();
            permuted.rotate_left(r);
            let last = permuted.len() - 1;
            permuted.swap(0, last);
            for y in [true, false] {
                prop_assert_eq!(soft1(&permuted, y).unwrap(), soft1(&scores, y).unwrap());
                prop_assert_eq!(soft3(&permuted, y).unwrap(), soft3(&scores, y).unwrap());
            }
            prop_assert!((soft2(&permuted).unwrap() - mean).abs() <= 1e-12);
        }
    }
}
