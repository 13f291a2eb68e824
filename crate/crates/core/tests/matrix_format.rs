//! The binary matrix layout as seen by an external writer: files assembled
//! byte by byte here, independent of `write_matrix`.

use softlabel::corpus::{cosine, read_matrix, write_matrix, CorpusError, EmbeddingMatrix};

fn encode(dim: u32, rows: &[(&str, Vec<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"SDEM");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (id, v) in rows {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn externally_written_file_reads_back() {
    let rows = vec![
        ("q1", normalized(&[0.3, -1.2, 0.5, 2.0])),
        ("passage é", normalized(&[1.0, 1.0, 1.0, 1.0])),
        ("q2", normalized(&[-0.1, 0.0, 0.0, 7.0])),
    ];
    let bytes = encode(4, &rows);
    let matrix = read_matrix(bytes.as_slice()).unwrap();
    assert_eq!(matrix.dim(), 4);
    assert_eq!(matrix.len(), 3);
    let ids: Vec<_> = matrix.iter().map(|(id, _)| id.to_owned()).collect();
    assert_eq!(ids, ["q1", "passage é", "q2"]);
    for (id, v) in &rows {
        let stored = matrix.get(id).unwrap();
        assert_eq!(stored, v.as_slice());
        assert!((cosine(stored, stored).unwrap() - 1.0).abs() <= 1e-5);
    }

    let mut rewritten = Vec::new();
    write_matrix(&matrix, &mut rewritten).unwrap();
    assert_eq!(rewritten, bytes);
}

#[test]
fn header_is_twenty_bytes_and_rows_follow() {
    let bytes = encode(2, &[("a", vec![1.0, 0.0])]);
    assert_eq!(bytes.len(), 20 + 2 + 1 + 8);
    let mut m = EmbeddingMatrix::new("m", 2).unwrap();
    m.insert("a", vec![1.0, 0.0]).unwrap();
    let mut written = Vec::new();
    write_matrix(&m, &mut written).unwrap();
    assert_eq!(written, bytes);

    let empty = encode(3, &[]);
    let m = read_matrix(empty.as_slice()).unwrap();
    assert_eq!((m.len(), m.dim()), (0, 3));
}

#[test]
fn validation_rejects_malformed_exports() {
    let good = encode(2, &[("a", vec![0.6, 0.8])]);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let err = read_matrix(bad_magic.as_slice()).unwrap_err();
    assert!(matches!(err, CorpusError::BadMagic));
    assert!(err.to_string().contains("bad magic"));

    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(read_matrix(bad_version.as_slice()), Err(CorpusError::VersionMismatch(2))));

    let truncated = &good[..good.len() - 1];
    assert!(matches!(read_matrix(truncated), Err(CorpusError::Truncated)));

    let nan = encode(2, &[("a", vec![f32::NAN, 0.0])]);
    let err = read_matrix(nan.as_slice()).unwrap_err();
    assert!(err.to_string().contains("non-finite value"));

    let dup = encode(2, &[("a", vec![1.0, 0.0]), ("a", vec![0.0, 1.0])]);
    assert!(matches!(read_matrix(dup.as_slice()), Err(CorpusError::DuplicateId(_))));
}
