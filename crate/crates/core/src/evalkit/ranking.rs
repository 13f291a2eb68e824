//! Ranked retrieval metrics with binary relevance: nDCG@k, MAP@k, MRR@k.
//!
//! Ranks start at 1. nDCG uses gain 1 and discount `1/log2(rank + 1)`;
//! AP@k divides by `min(|relevant|, k)`. Queries judged in the qrels but
//! absent from the run score 0.

use std::collections::{BTreeMap, BTreeSet};

use super::{EvalError, Result};

/// Binary relevance judgments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, passage_id: impl Into<String>) {
        self.relevant.entry(query_id.into()).or_default().insert(passage_id.into());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }
}

/// Per-query ranked passages, sorted by score descending with ties broken
/// by ascending passage id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRanking {
    ranked: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunRanking {
    /// Builds the canonical ranking from unordered `(query, passage, score)`
    /// triples.
    pub fn from_scores<I, Q, P>(scores: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Q, P, f64)>,
        Q: Into<String>,
        P: Into<String>,
    {
        let mut ranked: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (q, p, score) in scores {
            let (q, p) = (q.into(), p.into());
            if !score.is_finite() {
                return Err(EvalError::NonFiniteScore(q, p));
            }
            ranked.entry(q).or_default().push((p, score));
        }
        for (query, list) in ranked.iter_mut() {
            let mut seen = BTreeSet::new();
            if let Some((dup, _)) = list.iter().find(|(p, _)| !seen.insert(p.as_str())) {
                return Err(EvalError::DuplicatePassage { query: query.clone(), passage: dup.clone() });
            }
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(Self { ranked })
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.ranked.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.ranked.iter().map(|(q, l)| (q.as_str(), l.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Relevance flags of the top-k ranks and the number of relevant passages,
/// per evaluated query.
fn judged<'a>(run: &'a RunRanking, qrels: &'a QrelSet, k: usize) -> Result<Vec<(&'a str, Vec<bool>, usize)>> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    for query in run.ranked.keys() {
        if qrels.relevant(query).is_none() {
            return Err(EvalError::MissingQrels(query.clone()));
        }
    }
    let mut out = Vec::with_capacity(qrels.len());
    for (query, relevant) in &qrels.relevant {
        if relevant.is_empty() {
            return Err(EvalError::NoRelevant(query.clone()));
        }
        let flags = run.ranking(query).unwrap_or(&[]).iter().take(k).map(|(p, _)| relevant.contains(p)).collect();
        out.push((query.as_str(), flags, relevant.len()));
    }
    Ok(out)
}

fn summarize(values: Vec<(&str, f64)>) -> MetricResult {
    let mean = if values.is_empty() { 0.0 } else { values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64 };
    MetricResult { per_query: values.into_iter().map(|(q, v)| (q.to_owned(), v)).collect(), mean }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(run: &RunRanking, qrels: &QrelSet, k: usize) -> Result<MetricResult> {
    let rows = judged(run, qrels, k)?;
    Ok(summarize(
        rows.into_iter()
            .map(|(q, flags, n_rel)| {
                let dcg: f64 = flags.iter().enumerate().filter(|(_, &rel)| rel).map(|(i, _)| discount(i + 1)).sum();
                let ideal: f64 = (1..=n_rel.min(k)).map(discount).sum();
                (q, dcg / ideal)
            })
            .collect(),
    ))
}

pub fn map_at_k(run: &RunRanking, qrels: &QrelSet, k: usize) -> Result<MetricResult> {
    let rows = judged(run, qrels, k)?;
    Ok(summarize(
        rows.into_iter()
            .map(|(q, flags, n_rel)| {
                let mut hits = 0usize;
                let mut total = 0.0;
                for (i, &rel) in flags.iter().enumerate() {
                    if rel {
                        hits += 1;
                        total += hits as f64 / (i + 1) as f64;
                    }
                }
                (q, total / n_rel.min(k) as f64)
            })
            .collect(),
    ))
}

pub fn mrr_at_k(run: &RunRanking, qrels: &QrelSet, k: usize) -> Result<MetricResult> {
    let rows = judged(run, qrels, k)?;
    Ok(summarize(
        rows.into_iter()
            .map(|(q, flags, _)| {
                let rr = flags.iter().position(|&rel| rel).map_or(0.0, |i| 1.0 / (i + 1) as f64);
                (q, rr)
            })
            .collect(),
    ))
}
