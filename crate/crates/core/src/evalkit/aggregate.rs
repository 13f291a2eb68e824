//! Cross-dataset aggregation: per-model mean and population standard
//! deviation, and pairwise win rates (ties count half).

use std::collections::BTreeMap;

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub mean: f64,
    pub std: f64,
    pub datasets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub models: BTreeMap<String, ModelSummary>,
    /// `(a, b)` → share of datasets on which `a` beats `b`.
    pub win_rates: BTreeMap<(String, String), f64>,
}

/// `scores[model][dataset]`. Every model must cover the same datasets.
pub fn aggregate_report(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<AggregateReport> {
    let mut models = scores.iter();
    let (first_model, first) = models.next().ok_or(EvalError::Empty)?;
    if first.is_empty() {
        return Err(EvalError::Empty);
    }
    for (model, datasets) in scores {
        for dataset in first.keys() {
            if !datasets.contains_key(dataset) {
                return Err(EvalError::DatasetMismatch(model.clone(), dataset.clone()));
            }
        }
        for dataset in datasets.keys() {
            if !first.contains_key(dataset) {
                return Err(EvalError::DatasetMismatch(first_model.clone(), dataset.clone()));
            }
        }
    }

    let summaries = scores
        .iter()
        .map(|(model, datasets)| {
            let n = datasets.len() as f64;
            let mean = datasets.values().sum::<f64>() / n;
            let var = datasets.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (model.clone(), ModelSummary { mean, std: var.sqrt(), datasets: datasets.len() })
        })
        .collect();

    let mut win_rates = BTreeMap::new();
    for (a, sa) in scores {
        for (b, sb) in scores {
            if a == b {
                continue;
            }
            let wins: f64 = sa
                .iter()
                .map(|(dataset, &x)| {
                    let y = sb[dataset];
                    if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    }
                })
                .sum();
            win_rates.insert((a.clone(), b.clone()), wins / sa.len() as f64);
        }
    }
    Ok(AggregateReport { models: summaries, win_rates })
}
