//! Qrels and run files: TREC text format and the toolkit's JSONL.
//!
//! TREC qrels: `query_id 0 passage_id rel`; runs:
//! `query_id Q0 passage_id rank score tag`. JSONL qrels carry
//! `query_id`, `passage_id`, `relevance`; JSONL runs carry `query_id`,
//! `passage_id`, `score`. Relevance ≤ 0 is treated as not relevant.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{EvalError, QrelSet, Result, RunRanking};
use crate::corpus;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QrelLine {
    pub query_id: String,
    pub passage_id: String,
    pub relevance: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLine {
    pub query_id: String,
    pub passage_id: String,
    pub score: f64,
}

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse { line, message: message.into() }
}

pub fn read_trec_qrels<R: Read>(source: R) -> Result<QrelSet> {
    let mut qrels = QrelSet::new();
    for (n, line) in BufReader::new(source).lines().enumerate() {
        let line = line.map_err(corpus::CorpusError::from)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [q, _, p, rel] => {
                let rel: i64 = rel.parse().map_err(|_| parse_err(n + 1, format!("bad relevance `{rel}`")))?;
                if rel > 0 {
                    qrels.insert(*q, *p);
                }
            }
            _ => return Err(parse_err(n + 1, "expected `query_id 0 passage_id rel`")),
        }
    }
    Ok(qrels)
}

pub fn read_trec_run<R: Read>(source: R) -> Result<RunRanking> {
    let mut triples = Vec::new();
    for (n, line) in BufReader::new(source).lines().enumerate() {
        let line = line.map_err(corpus::CorpusError::from)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [q, _, p, _rank, score, ..] => {
                let score: f64 = score.parse().map_err(|_| parse_err(n + 1, format!("bad score `{score}`")))?;
                triples.push((q.to_string(), p.to_string(), score));
            }
            _ => return Err(parse_err(n + 1, "expected `query_id Q0 passage_id rank score tag`")),
        }
    }
    RunRanking::from_scores(triples)
}

pub fn write_trec_run<W: Write>(run: &RunRanking, tag: &str, mut sink: W) -> Result<()> {
    for (query, ranked) in run.iter() {
        for (rank, (passage, score)) in ranked.iter().enumerate() {
            writeln!(sink, "{query} Q0 {passage} {} {score} {tag}", rank + 1).map_err(corpus::CorpusError::from)?;
        }
    }
    Ok(())
}

pub fn read_jsonl_qrels<R: Read>(source: R) -> Result<QrelSet> {
    let mut qrels = QrelSet::new();
    for line in corpus::read_jsonl::<QrelLine, _>(source)? {
        if line.relevance > 0 {
            qrels.insert(line.query_id, line.passage_id);
        }
    }
    Ok(qrels)
}

pub fn read_jsonl_run<R: Read>(source: R) -> Result<RunRanking> {
    let lines = corpus::read_jsonl::<RunLine, _>(source)?;
    RunRanking::from_scores(lines.into_iter().map(|l| (l.query_id, l.passage_id, l.score)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::ndcg_at_k;

    #[test]
    fn trec_formats() {
        let qrels = read_trec_qrels("q1 0 d1 1\nq1 0 d2 0\n\nq2 0 d3 2\n".as_bytes()).unwrap();
        assert_eq!(qrels.len(), 2);
        assert!(qrels.relevant("q1").unwrap().contains("d1"));
        assert!(!qrels.relevant("q1").unwrap().contains("d2"));

        let run = read_trec_run("q1 Q0 d2 1 0.9 sys\nq1 Q0 d1 2 0.5 sys\nq2 Q0 d3 1 0.1 sys\n".as_bytes()).unwrap();
        let ndcg = ndcg_at_k(&run, &qrels, 10).unwrap();
        assert!((ndcg.per_query["q1"] - 1.0 / 3f64.log2()).abs() < 1e-12);

        let mut buf = Vec::new();
        write_trec_run(&run, "sys", &mut buf).unwrap();
        assert_eq!(read_trec_run(buf.as_slice()).unwrap(), run);
        assert!(matches!(read_trec_qrels("q1 d1 1\n".as_bytes()), Err(EvalError::Parse { line: 1, .. })));
    }

    #[test]
    fn jsonl_formats() {
        let qrels = read_jsonl_qrels(
            "{\"query_id\":\"q\",\"passage_id\":\"a\",\"relevance\":1}\n{\"query_id\":\"q\",\"passage_id\":\"b\",\"relevance\":0}\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(qrels.relevant("q").unwrap().len(), 1);
        let run = read_jsonl_run("{\"query_id\":\"q\",\"passage_id\":\"b\",\"score\":0.7}\n".as_bytes()).unwrap();
        assert_eq!(run.ranking("q").unwrap()[0].0, "b");
    }
}
