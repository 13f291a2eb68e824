//! Positive / negative query-passage pair construction.
//!
//! Positives are every ordered pair of train questions inside a group, plus
//! two records per ordered pair that match the concatenation `"a. b"` against
//! each of its parts. Negatives pair each positive's query with a uniformly
//! drawn train question from a different group, one negative per positive.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, DatasetSplit, TextCollection, TextItem};
use crate::seed::derive_seed;

pub const CONCAT_SEPARATOR: &str = ". ";

#[derive(Debug, Error)]
pub enum PairgenError {
    #[error("empty group {0}: no train questions")]
    EmptyGroup(u32),
    #[error("cannot sample negatives: need at least 2 groups with train questions, found {0}")]
    CannotSampleNegatives(usize),
    #[error("text id `{0}` is not in the collection")]
    UnknownText(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Direct,
    ConcatLeft,
    ConcatRight,
    Negative,
}

/// One training sample. Expert scores and soft targets are filled in by the
/// labeling stage and omitted from JSON until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    pub passage_id: String,
    pub hard_label: u8,
    #[serde(skip)]
    pub origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft3: Option<f64>,
}

impl PairRecord {
    pub fn new(query_id: impl Into<String>, passage_id: impl Into<String>, origin: Origin) -> Self {
        Self {
            query_id: query_id.into(),
            passage_id: passage_id.into(),
            hard_label: u8::from(origin != Origin::Negative),
            origin: Some(origin),
            expert_scores: None,
            soft1: None,
            soft2: None,
            soft3: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.hard_label == 1
    }

    /// The record's origin, recovering it from the ids when the record was
    /// read back from JSONL (which does not carry it). A self-concatenation
    /// `x+x` paired with `x` reads back as `ConcatLeft`.
    pub fn origin(&self) -> Origin {
        if let Some(origin) = self.origin {
            return origin;
        }
        if self.hard_label == 0 {
            return Origin::Negative;
        }
        match self.query_id.split_once('+') {
            Some((left, _)) if left == self.passage_id => Origin::ConcatLeft,
            Some((_, right)) if right == self.passage_id => Origin::ConcatRight,
            _ => Origin::Direct,
        }
    }
}

pub fn concat_id(a: &str, b: &str) -> String {
    format!("{a}+{b}")
}

pub fn concat_text(a: &str, b: &str) -> String {
    format!("{a}{CONCAT_SEPARATOR}{b}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub seed: u64,
}

impl PairDataset {
    pub fn stats(&self) -> BTreeMap<Origin, usize> {
        let mut stats = BTreeMap::new();
        for record in &self.records {
            *stats.entry(record.origin()).or_insert(0) += 1;
        }
        stats
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.is_positive()).count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Emits all positives, appending the concatenated query texts to
/// `collection`. Concatenations already present (for example from a
/// pre-embedded collection) are left untouched.
pub fn build_positive_pairs(
    collection: &mut TextCollection,
    split: &DatasetSplit,
) -> Result<Vec<PairRecord>, PairgenError> {
    let mut records = Vec::new();
    for (&group, group_split) in &split.groups {
        let train = &group_split.train_question_ids;
        if train.is_empty() {
            return Err(PairgenError::EmptyGroup(group));
        }
        let texts = train
            .iter()
            .map(|id| {
                collection.get(id).map(|item| item.text.clone()).ok_or_else(|| PairgenError::UnknownText(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        // direct pairs first, then the concatenation records, per group
        for a in train {
            for b in train {
                records.push(PairRecord::new(a, b, Origin::Direct));
            }
        }
        for (a, text_a) in train.iter().zip(&texts) {
            for (b, text_b) in train.iter().zip(&texts) {
                let joined = concat_id(a, b);
                collection.insert_if_absent(TextItem {
                    text_id: joined.clone(),
                    text: concat_text(text_a, text_b),
                    group_id: group,
                });
                records.push(PairRecord::new(&joined, a, Origin::ConcatLeft));
                records.push(PairRecord::new(&joined, b, Origin::ConcatRight));
            }
        }
    }
    Ok(records)
}

/// One cross-group negative per positive, in positive order. Each group's
/// draws come from an RNG stream derived from `(seed, group_id)`.
pub fn build_negative_pairs(
    collection: &TextCollection,
    split: &DatasetSplit,
    positives: &[PairRecord],
    seed: u64,
) -> Result<Vec<PairRecord>, PairgenError> {
    // train questions laid out contiguously by group
    let mut pool: Vec<&str> = Vec::new();
    let mut blocks: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&group, group_split) in &split.groups {
        let start = pool.len();
        pool.extend(group_split.train_question_ids.iter().map(String::as_str));
        if pool.len() > start {
            blocks.insert(group, (start, pool.len()));
        }
    }
    if blocks.len() < 2 {
        return Err(PairgenError::CannotSampleNegatives(blocks.len()));
    }

    let mut rngs: BTreeMap<u32, ChaCha8Rng> = BTreeMap::new();
    let mut negatives = Vec::with_capacity(positives.len());
    for positive in positives {
        let group = collection
            .group_of(&positive.query_id)
            .ok_or_else(|| PairgenError::UnknownText(positive.query_id.clone()))?;
        let (start, end) = blocks.get(&group).copied().unwrap_or((0, 0));
        let foreign = pool.len() - (end - start);
        if foreign == 0 {
            return Err(PairgenError::CannotSampleNegatives(1));
        }
        let rng = rngs
            .entry(group)
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("negatives/{group}"))));
        let mut index = rng.random_range(0..foreign);
        if index >= start {
            index += end - start;
        }
        negatives.push(PairRecord::new(&positive.query_id, pool[index], Origin::Negative));
    }
    Ok(negatives)
}

/// Builds the full dataset: positives followed by their negatives.
pub fn build_dataset(
    collection: &mut TextCollection,
    split: &DatasetSplit,
    seed: u64,
) -> Result<PairDataset, PairgenError> {
    let mut records = build_positive_pairs(collection, split)?;
    let negatives = build_negative_pairs(collection, split, &records, seed)?;
    records.extend(negatives);
    Ok(PairDataset { records, seed })
}

pub fn read_pairs<R: Read>(source: R) -> Result<Vec<PairRecord>, CorpusError> {
    corpus::read_jsonl(source)
}

pub fn write_pairs<W: Write>(records: &[PairRecord], sink: W) -> Result<(), CorpusError> {
    corpus::write_jsonl(records, sink)
}
