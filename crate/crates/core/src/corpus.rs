//! Text collections, embedding matrices, and the record formats shared by
//! every stage of the pipeline.
//!
//! Embedding matrices use a small little-endian binary format:
//!
//! ```text
//! magic    b"SDEM"            4 bytes
//! version  u32 = 1
//! dim      u32
//! rows     u64
//! per row: id_len u16, id bytes (UTF-8), dim x f32
//! ```
//!
//! Collections and pair records are JSON Lines.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MATRIX_MAGIC: [u8; 4] = *b"SDEM";
pub const MATRIX_VERSION: u32 = 1;
/// Size of the fixed matrix header in bytes.
pub const MATRIX_HEADER_LEN: usize = 4 + 4 + 4 + 8;

const MAX_DIM: usize = i32::MAX as usize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: expected {MATRIX_VERSION}, found {0}")]
    VersionMismatch(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("non-finite value in row `{0}`")]
    NonFinite(String),
    #[error("dimension overflow: {0} exceeds 2^31-1")]
    DimensionOverflow(usize),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("row `{id}` has {found} entries, expected {expected}")]
    RowLength { id: String, expected: usize, found: usize },
    #[error("text id longer than 65535 bytes: `{0}`")]
    IdTooLong(String),
    #[error("text id is not valid UTF-8")]
    InvalidUtf8,
    #[error("duplicate text id `{0}`")]
    DuplicateId(String),
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub text_id: String,
    pub text: String,
    pub group_id: u32,
}

/// An ordered collection of texts with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCollection {
    items: IndexMap<String, TextItem>,
}

impl TextCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: impl IntoIterator<Item = TextItem>) -> Result<Self> {
        let mut collection = Self::new();
        for item in items {
            collection.insert(item)?;
        }
        Ok(collection)
    }

    /// Inserts a new item; fails if the id is already present.
    pub fn insert(&mut self, item: TextItem) -> Result<()> {
        if self.items.contains_key(&item.text_id) {
            return Err(CorpusError::DuplicateId(item.text_id));
        }
        self.items.insert(item.text_id.clone(), item);
        Ok(())
    }

    /// Inserts the item unless an item with the same id exists. Returns
    /// whether the item was added.
    pub fn insert_if_absent(&mut self, item: TextItem) -> bool {
        if self.items.contains_key(&item.text_id) {
            return false;
        }
        self.items.insert(item.text_id.clone(), item);
        true
    }

    pub fn get(&self, text_id: &str) -> Option<&TextItem> {
        self.items.get(text_id)
    }

    pub fn group_of(&self, text_id: &str) -> Option<u32> {
        self.items.get(text_id).map(|item| item.group_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TextItem> {
        self.items.values()
    }

    pub fn read_jsonl<R: Read>(source: R) -> Result<Self> {
        Self::from_items(read_jsonl::<TextItem, _>(source)?)
    }

    pub fn write_jsonl<W: Write>(&self, sink: W) -> Result<()> {
        write_jsonl(self.iter(), sink)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(File::open(path)?)
    }
}

/// Train / held-out partition of the questions of one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub train_question_ids: Vec<String>,
    pub heldout_question_ids: Vec<String>,
    pub passage_text_id: String,
}

/// Per-group split, keyed by group id. Stored on disk as a JSON object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub groups: BTreeMap<u32, GroupSplit>,
}

impl DatasetSplit {
    /// Checks disjointness within each group and that every referenced id
    /// belongs to the collection under the right group.
    pub fn validate(&self, collection: &TextCollection) -> Result<()> {
        for (&group, split) in &self.groups {
            let train: HashSet<&str> = split.train_question_ids.iter().map(String::as_str).collect();
            if train.len() != split.train_question_ids.len() {
                return Err(CorpusError::InvalidSplit(format!("group {group}: duplicate train question")));
            }
            for id in &split.heldout_question_ids {
                if train.contains(id.as_str()) {
                    return Err(CorpusError::InvalidSplit(format!("group {group}: `{id}` is both train and held-out")));
                }
            }
            let all = split
                .train_question_ids
                .iter()
                .chain(&split.heldout_question_ids)
                .chain(std::iter::once(&split.passage_text_id));
            for id in all {
                match collection.group_of(id) {
                    Some(g) if g == group => {}
                    Some(g) => {
                        return Err(CorpusError::InvalidSplit(format!(
                            "`{id}` listed under group {group} but belongs to group {g}"
                        )))
                    }
                    None => return Err(CorpusError::InvalidSplit(format!("`{id}` is not in the collection"))),
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        serde_json::from_reader(file).map_err(|source| CorpusError::Json { line: 0, source })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self).map_err(|source| CorpusError::Json { line: 0, source })?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }
}

/// Dense embeddings of one model over one collection, keyed by text id.
///
/// Row order is insertion order and is preserved by the binary format.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub model_id: String,
    dim: usize,
    rows: IndexMap<String, Vec<f32>>,
}

impl EmbeddingMatrix {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CorpusError::ZeroDimension);
        }
        if dim > MAX_DIM {
            return Err(CorpusError::DimensionOverflow(dim));
        }
        Ok(Self { model_id: model_id.into(), dim, rows: IndexMap::new() })
    }

    pub fn insert(&mut self, text_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let text_id = text_id.into();
        if vector.len() != self.dim {
            return Err(CorpusError::RowLength { id: text_id, expected: self.dim, found: vector.len() });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite(text_id));
        }
        if text_id.len() > u16::MAX as usize {
            return Err(CorpusError::IdTooLong(text_id));
        }
        if self.rows.contains_key(&text_id) {
            return Err(CorpusError::DuplicateId(text_id));
        }
        self.rows.insert(text_id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, text_id: &str) -> Option<&[f32]> {
        self.rows.get(text_id).map(Vec::as_slice)
    }

    pub fn contains(&self, text_id: &str) -> bool {
        self.rows.contains_key(text_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.rows.iter().map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    /// Ids of `collection` missing from this matrix.
    pub fn missing_ids<'a>(&self, collection: &'a TextCollection) -> Vec<&'a str> {
        collection.iter().filter(|item| !self.contains(&item.text_id)).map(|item| item.text_id.as_str()).collect()
    }

    /// Reads a matrix from `path`, naming it after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut matrix = read_matrix(BufReader::new(File::open(path)?))?;
        matrix.model_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(matrix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        write_matrix(self, &mut file)?;
        file.flush()?;
        Ok(())
    }
}

pub fn write_matrix<W: Write>(matrix: &EmbeddingMatrix, mut sink: W) -> Result<()> {
    if matrix.dim > MAX_DIM {
        return Err(CorpusError::DimensionOverflow(matrix.dim));
    }
    sink.write_all(&MATRIX_MAGIC)?;
    sink.write_all(&MATRIX_VERSION.to_le_bytes())?;
    sink.write_all(&(matrix.dim as u32).to_le_bytes())?;
    sink.write_all(&(matrix.rows.len() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(2 + 4 * matrix.dim + 64);
    for (id, vector) in &matrix.rows {
        row.clear();
        row.extend_from_slice(&(id.len() as u16).to_le_bytes());
        row.extend_from_slice(id.as_bytes());
        for value in vector {
            row.extend_from_slice(&value.to_le_bytes());
        }
        sink.write_all(&row)?;
    }
    Ok(())
}

/// Parses a matrix. The format carries no model id, so the result has an
/// empty `model_id`; [`EmbeddingMatrix::load`] fills it from the file name.
pub fn read_matrix<R: Read>(mut source: R) -> Result<EmbeddingMatrix> {
    let mut header = [0u8; MATRIX_HEADER_LEN];
    read_exact(&mut source, &mut header)?;
    if header[0..4] != MATRIX_MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(CorpusError::VersionMismatch(version));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let row_count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let mut matrix = EmbeddingMatrix::new(String::new(), dim)?;

    let mut payload = vec![0u8; 4 * dim];
    for _ in 0..row_count {
        let mut len = [0u8; 2];
        read_exact(&mut source, &mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut source, &mut id)?;
        let id = String::from_utf8(id).map_err(|_| CorpusError::InvalidUtf8)?;
        read_exact(&mut source, &mut payload)?;
        let vector: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        matrix.insert(id, vector)?;
    }
    Ok(matrix)
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CorpusError::Truncated,
        _ => CorpusError::Io(e),
    })
}

/// Cosine similarity, accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CorpusError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(CorpusError::DegenerateVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

pub fn read_jsonl<T, R>(source: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
{
    let mut out = Vec::new();
    for (n, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: n + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I, W>(items: I, sink: W) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
    W: Write,
{
    let mut sink = BufWriter::new(sink);
    for item in items {
        serde_json::to_writer(&mut sink, item).map_err(|source| CorpusError::Json { line: 0, source })?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of(matrix: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_matrix(matrix, &mut buf).unwrap();
        buf
    }

    fn same_payload(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> bool {
        a.dim() == b.dim()
            && a.len() == b.len()
            && a.iter()
                .zip(b.iter())
                .all(|((ia, va), (ib, vb))| ia == ib && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    #[test]
    fn one_by_two_layout() {
        let mut m = EmbeddingMatrix::new("", 2).unwrap();
        m.insert("", vec![1.0, 0.0]).unwrap();
        let bytes = bytes_of(&m);
        // 20-byte fixed header + 2-byte id length (empty id) + 8 payload bytes
        assert_eq!(bytes.len(), MATRIX_HEADER_LEN + 2 + 8);
        assert_eq!(&bytes[0..4], b"SDEM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0]);
        let back = read_matrix(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = EmbeddingMatrix::new("", 7).unwrap();
        let bytes = bytes_of(&m);
        assert_eq!(bytes.len(), MATRIX_HEADER_LEN);
        let back = read_matrix(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 7);
    }

    #[test]
    fn bad_magic() {
        let mut m = EmbeddingMatrix::new("", 1).unwrap();
        m.insert("a", vec![0.5]).unwrap();
        let mut bytes = bytes_of(&m);
        bytes[0] = b'X';
        let err = read_matrix(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, CorpusError::BadMagic));
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn version_mismatch() {
        let m = EmbeddingMatrix::new("", 1).unwrap();
        let mut bytes = bytes_of(&m);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_matrix(bytes.as_slice()), Err(CorpusError::VersionMismatch(2))));
    }

    #[test]
    fn truncated_payload() {
        let mut m = EmbeddingMatrix::new("", 3).unwrap();
        m.insert("a", vec![0.5, 1.0, 2.0]).unwrap();
        let bytes = bytes_of(&m);
        for cut in [3, MATRIX_HEADER_LEN + 1, bytes.len() - 1] {
            assert!(matches!(read_matrix(&bytes[..cut]), Err(CorpusError::Truncated)), "cut at {cut}");
        }
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut m = EmbeddingMatrix::new("", 2).unwrap();
        m.insert("a", vec![0.5, 1.0]).unwrap();
        let mut bytes = bytes_of(&m);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = read_matrix(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, CorpusError::NonFinite(ref id) if id == "a"));
        assert!(err.to_string().starts_with("non-finite value"));
    }

    #[test]
    fn insert_rejects_bad_rows() {
        let mut m = EmbeddingMatrix::new("", 2).unwrap();
        assert!(matches!(m.insert("a", vec![1.0]), Err(CorpusError::RowLength { .. })));
        assert!(matches!(m.insert("a", vec![1.0, f32::INFINITY]), Err(CorpusError::NonFinite(_))));
        m.insert("a", vec![1.0, 2.0]).unwrap();
        assert!(matches!(m.insert("a", vec![1.0, 2.0]), Err(CorpusError::DuplicateId(_))));
        assert!(matches!(EmbeddingMatrix::new("", 0), Err(CorpusError::ZeroDimension)));
        assert!(matches!(EmbeddingMatrix::new("", 1usize << 31), Err(CorpusError::DimensionOverflow(_))));
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3f32, -1.2, 4.0];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - 0.974631846).abs() < 1e-6);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_degenerate_input() {
        let err = cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate vector");
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(CorpusError::LengthMismatch(1, 2))));
    }

    #[test]
    fn collection_round_trip_and_duplicates() {
        let items = vec![
            TextItem { text_id: "a".into(), text: "What is it?".into(), group_id: 0 },
            TextItem { text_id: "b".into(), text: "Wie viel?".into(), group_id: 1 },
        ];
        let collection = TextCollection::from_items(items.clone()).unwrap();
        let mut buf = Vec::new();
        collection.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"text_id":"a","text":"What is it?","group_id":0}"#);
        assert_eq!(TextCollection::read_jsonl(buf.as_slice()).unwrap(), collection);
        let dup = TextCollection::from_items(vec![items[0].clone(), items[0].clone()]);
        assert!(matches!(dup, Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn split_validation() {
        let collection = TextCollection::from_items((0..4).map(|i| TextItem {
            text_id: format!("t{i}"),
            text: format!("text {i}"),
            group_id: 0,
        }))
        .unwrap();
        let mut split = DatasetSplit::default();
        split.groups.insert(
            0,
            GroupSplit {
                train_question_ids: vec!["t0".into(), "t1".into()],
                heldout_question_ids: vec!["t2".into()],
                passage_text_id: "t3".into(),
            },
        );
        split.validate(&collection).unwrap();
        split.groups.get_mut(&0).unwrap().heldout_question_ids.push("t1".into());
        assert!(split.validate(&collection).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (1usize..6, 0usize..6).prop_flat_map(|(dim, rows)| {
            proptest::collection::vec(proptest::collection::vec(-1e30f32..1e30f32, dim), rows).prop_map(
                move |vectors| {
                    let mut m = EmbeddingMatrix::new("", dim).unwrap();
                    for (i, v) in vectors.into_iter().enumerate() {
                        m.insert(format!("row-{i}-é"), v).unwrap();
                    }
                    m
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

        #[test]
        fn matrix_round_trip_is_bit_exact(m in arb_matrix()) {
            let back = read_matrix(bytes_of(&m).as_slice()).unwrap();
            prop_assert!(same_payload(&m, &back));
        }

        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-10f32..10f32, 8),
            v in proptest::collection::vec(-10f32..10f32, 8),
            a_exp in -20i32..20,
            b_exp in -20i32..20,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
            // power-of-two factors keep the scaled f32 inputs exact
            let (a, b) = (2f32.powi(a_exp), 2f32.powi(b_exp));
            let su: Vec<f32> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine(&su, &sv).unwrap() - c).abs() <= 1e-9);
        }
    }
}
