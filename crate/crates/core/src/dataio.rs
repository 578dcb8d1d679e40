//! Embedding (`STEB`) and logit (`STLG`) files plus the JSON-lines manifest.
//!
//! Both binary formats are little-endian:
//!
//! ```text
//! STEB: "STEB" | u32 version=1 | u32 N | u32 D | N·D f32 (row-major) | ids
//! STLG: "STLG" | u32 version=1 | u32 N | u32 K | N·K f32 (row-major) | labels | ids
//! ids, labels: u32 count | count × (u16 byte length | UTF-8 bytes)
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"STEB";
pub const LOGIT_MAGIC: &[u8; 4] = b"STLG";
pub const FORMAT_VERSION: u32 = 1;

/// Row-aligned sample ids and their embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    data: Matrix,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, data: Matrix) -> Result<Self> {
        if data.cols() == 0 {
            return Err(Error::Invalid(
                "embedding dimension must be positive".into(),
            ));
        }
        check_ids(&ids, data.rows())?;
        Ok(EmbeddingSet { ids, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<EmbeddingSet> {
        let data = select_rows(&self.ids, &self.data, ids)?;
        EmbeddingSet::new(ids.to_vec(), data)
    }
}

/// Row-aligned sample ids and raw classifier outputs over a label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    ids: Vec<String>,
    labels: Vec<String>,
    data: Matrix,
}

impl LogitSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, data: Matrix) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Invalid(format!(
                "label vocabulary needs at least 2 entries, got {}",
                labels.len()
            )));
        }
        if labels.len() != data.cols() {
            return Err(Error::Shape(format!(
                "{} labels for {} logit columns",
                labels.len(),
                data.cols()
            )));
        }
        check_unique(&labels, "label")?;
        check_ids(&ids, data.rows())?;
        Ok(LogitSet { ids, labels, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, ids: &[String]) -> Result<LogitSet> {
        let data = select_rows(&self.ids, &self.data, ids)?;
        LogitSet::new(ids.to_vec(), self.labels.clone(), data)
    }
}

fn check_unique(items: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(items.len());
    for item in items {
        if item.is_empty() {
            return Err(Error::Invalid(format!("empty {what}")));
        }
        if !seen.insert(item.as_str()) {
            return Err(Error::Invalid(format!("duplicate {what} {item:?}")));
        }
    }
    Ok(())
}

fn check_ids(ids: &[String], rows: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(Error::Shape(format!("{} ids for {rows} rows", ids.len())));
    }
    check_unique(ids, "id")
}

fn select_rows(have: &[String], data: &Matrix, want: &[String]) -> Result<Matrix> {
    let index: HashMap<&str, usize> = have
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(want.len() * data.cols());
    for id in want {
        let &row = index
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("id {id:?} not present")))?;
        out.extend_from_slice(data.row(row));
    }
    Matrix::from_vec(want.len(), data.cols(), out)
}

// ---------------------------------------------------------------------------
// encoding

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_count(buf: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} exceeds u32")))?;
    put_u32(buf, n);
    Ok(())
}

pub(crate) fn put_strings(buf: &mut Vec<u8>, items: &[String]) -> Result<()> {
    put_count(buf, items.len(), "string count")?;
    for s in items {
        let len = u16::try_from(s.len()).map_err(|_| {
            Error::Invalid(format!(
                "string of {} bytes exceeds u16 length prefix",
                s.len()
            ))
        })?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    Ok(())
}

fn put_f32_payload(buf: &mut Vec<u8>, data: &Matrix) -> Result<()> {
    for (i, &v) in data.as_slice().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Invalid(format!(
                "value {v} at flat index {i} does not fit in f32"
            )));
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + set.data.as_slice().len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_count(&mut buf, set.len(), "row count")?;
    put_count(&mut buf, set.dim(), "dimension")?;
    put_f32_payload(&mut buf, &set.data)?;
    put_strings(&mut buf, &set.ids)?;
    Ok(buf)
}

pub fn encode_logits(set: &LogitSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + set.data.as_slice().len() * 4);
    buf.extend_from_slice(LOGIT_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_count(&mut buf, set.len(), "row count")?;
    put_count(&mut buf, set.labels.len(), "class count")?;
    put_f32_payload(&mut buf, &set.data)?;
    put_strings(&mut buf, &set.labels)?;
    put_strings(&mut buf, &set.ids)?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// decoding

/// Byte reader that reports the offset of whatever went wrong.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.buf.len(),
                    format!(
                        "truncated {what}: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.buf.len()
                    ),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.pos;
        let b = self.take(8, what)?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// `rows × cols` little-endian `f32` values, widened to `f64`.
    pub(crate) fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(self.pos, "payload size overflows"))?;
        let bytes_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, "payload size overflows"))?;
        let start = self.pos;
        let bytes = self.take(bytes_len, "payload")?;
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::format(
                    start + 4 * i,
                    format!("non-finite value in row {}", i / cols.max(1)),
                ));
            }
            data.push(f64::from(v));
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// A counted block of length-prefixed UTF-8 strings, unique and non-empty.
    pub(crate) fn strings(&mut self, what: &str) -> Result<Vec<String>> {
        let count = self.u32(what)? as usize;
        // Each entry needs at least its 2-byte length prefix.
        if count > (self.buf.len() - self.pos) / 2 {
            return Err(Error::format(
                self.buf.len(),
                format!("truncated {what} block: {count} entries declared"),
            ));
        }
        let mut out = Vec::with_capacity(count);
        let mut seen = HashSet::with_capacity(count);
        for _ in 0..count {
            let at = self.pos;
            let len = self.u16(what)? as usize;
            let bytes = self.take(len, what)?;
            let s = std::str::from_utf8(bytes)
                .map_err(|_| Error::format(at + 2, format!("{what} entry is not valid UTF-8")))?;
            if s.is_empty() {
                return Err(Error::format(at, format!("empty {what} entry")));
            }
            if !seen.insert(s) {
                return Err(Error::format(at, format!("duplicate {what} entry {s:?}")));
            }
            out.push(s.to_owned());
        }
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    r.version()?;
    let n = r.u32("row count")? as usize;
    let dim_at = r.pos();
    let d = r.u32("dimension")? as usize;
    if d == 0 {
        return Err(Error::format(dim_at, "dimension must be positive"));
    }
    let data = r.f32_matrix(n, d)?;
    let ids_at = r.pos();
    let ids = r.strings("id")?;
    if ids.len() != n {
        return Err(Error::format(
            ids_at,
            format!("{} ids for {n} rows", ids.len()),
        ));
    }
    r.finish()?;
    Ok(EmbeddingSet { ids, data })
}

pub fn decode_logits(bytes: &[u8]) -> Result<LogitSet> {
    let mut r = Reader::new(bytes);
    r.magic(LOGIT_MAGIC)?;
    r.version()?;
    let n = r.u32("row count")? as usize;
    let k_at = r.pos();
    let k = r.u32("class count")? as usize;
    if k < 2 {
        return Err(Error::format(
            k_at,
            format!("label vocabulary needs at least 2 classes, got {k}"),
        ));
    }
    let data = r.f32_matrix(n, k)?;
    let labels_at = r.pos();
    let labels = r.strings("label")?;
    if labels.len() != k {
        return Err(Error::format(
            labels_at,
            format!("{} labels for {k} classes", labels.len()),
        ));
    }
    let ids_at = r.pos();
    let ids = r.strings("id")?;
    if ids.len() != n {
        return Err(Error::format(
            ids_at,
            format!("{} ids for {n} rows", ids.len()),
        ));
    }
    r.finish()?;
    Ok(LogitSet { ids, labels, data })
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode_embeddings(set)?)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_embeddings(&fs::read(path)?)
}

pub fn write_logits(path: impl AsRef<Path>, set: &LogitSet) -> Result<()> {
    fs::write(path, encode_logits(set)?)?;
    Ok(())
}

pub fn read_logits(path: impl AsRef<Path>) -> Result<LogitSet> {
    decode_logits(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_ood: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    label: String,
    split: Split,
    is_ood: Option<bool>,
}

/// Validated manifest. Known labels are the sorted distinct train labels and
/// define class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    known_labels: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl Manifest {
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self> {
        Self::build(
            records
                .into_iter()
                .enumerate()
                .map(|(i, r)| (i + 1, r))
                .collect(),
        )
    }

    fn build(records: Vec<(usize, ManifestRecord)>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (idx, (line, rec)) in records.iter().enumerate() {
            if rec.id.is_empty() {
                return Err(Error::Manifest {
                    line: *line,
                    msg: "empty id".into(),
                });
            }
            if rec.label.is_empty() {
                return Err(Error::Manifest {
                    line: *line,
                    msg: "empty label".into(),
                });
            }
            if rec.split == Split::Train && rec.is_ood {
                return Err(Error::Manifest {
                    line: *line,
                    msg: format!("train record {:?} flagged as OOD", rec.id),
                });
            }
            if by_id.insert(rec.id.clone(), idx).is_some() {
                return Err(Error::Manifest {
                    line: *line,
                    msg: format!("duplicate id {:?}", rec.id),
                });
            }
        }
        let known: BTreeSet<&str> = records
            .iter()
            .filter(|(_, r)| r.split == Split::Train)
            .map(|(_, r)| r.label.as_str())
            .collect();
        for (line, rec) in &records {
            if !rec.is_ood && !known.contains(rec.label.as_str()) {
                return Err(Error::Manifest {
                    line: *line,
                    msg: format!(
                        "in-domain record {:?} has label {:?} absent from train split",
                        rec.id, rec.label
                    ),
                });
            }
        }
        let known_labels = known.into_iter().map(str::to_owned).collect();
        let records = records.into_iter().map(|(_, r)| r).collect();
        Ok(Manifest {
            records,
            known_labels,
            by_id,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: line_no,
                msg: e.to_string(),
            })?;
            records.push((
                line_no,
                ManifestRecord {
                    id: raw.id,
                    label: raw.label,
                    split: raw.split,
                    is_ood: raw.is_ood.unwrap_or(false),
                },
            ));
        }
        Self::build(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn known_labels(&self) -> &[String] {
        &self.known_labels
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.known_labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn has_ood(&self) -> bool {
        self.records.iter().any(|r| r.is_ood)
    }

    /// Pairs each row index of `ids` with its manifest record; ids absent
    /// from the manifest are skipped.
    pub fn join<'a>(&'a self, ids: &[String]) -> Vec<(usize, &'a ManifestRecord)> {
        ids.iter()
            .enumerate()
            .filter_map(|(row, id)| self.get(id).map(|r| (row, r)))
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn small_set() -> EmbeddingSet {
        let data = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -0.125]).unwrap();
        EmbeddingSet::new(ids(2), data).unwrap()
    }

    #[test]
    fn embedding_layout_is_exact() {
        let bytes = encode_embeddings(&small_set()).unwrap();
        assert_eq!(&bytes[..4], b"STEB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        let ids_at = 16 + 6 * 4;
        assert_eq!(&bytes[ids_at..ids_at + 4], &2u32.to_le_bytes());
        assert_eq!(&bytes[ids_at + 4..ids_at + 6], &2u16.to_le_bytes());
        assert_eq!(&bytes[ids_at + 6..ids_at + 8], b"s0");
        assert_eq!(bytes.len(), ids_at + 4 + 2 * 4);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_embeddings(&small_set()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        // header claims 5 rows, payload holds 4
        let data = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let set = EmbeddingSet::new(ids(4), data).unwrap();
        let mut bytes = encode_embeddings(&set).unwrap();
        bytes[8..12].copy_from_slice(&5u32.to_le_bytes());
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut bytes = encode_embeddings(&small_set()).unwrap();
        let n = bytes.len();
        bytes[n - 1] = b'0';
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Format { offset, .. } if offset == n - 4),
            "{err}"
        );
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_embeddings(&small_set()).unwrap();
        bytes.push(0);
        assert!(decode_embeddings(&bytes).is_err());
    }

    #[test]
    fn logits_need_two_classes() {
        let data = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert!(LogitSet::new(ids(1), vec!["a".into()], data).is_err());

        let mut buf = Vec::new();
        buf.extend_from_slice(b"STLG");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            decode_logits(&buf),
            Err(Error::Format { offset: 12, .. })
        ));
    }

    #[test]
    fn nan_logit_is_rejected() {
        let data = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let set = LogitSet::new(ids(1), vec!["a".into(), "b".into()], data).unwrap();
        let mut bytes = encode_logits(&set).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_logits(&bytes),
            Err(Error::Format { offset: 20, .. })
        ));
        assert!(Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn logits_roundtrip() {
        let data =
            Matrix::from_vec(3, 24, (0..72).map(|i| i as f64 * 0.25 - 4.0).collect()).unwrap();
        let labels = (0..24).map(|k| format!("src{k:02}")).collect();
        let set = LogitSet::new(ids(3), labels, data).unwrap();
        let bytes = encode_logits(&set).unwrap();
        let back = decode_logits(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_logits(&back).unwrap(), bytes);
    }

    #[test]
    fn manifest_single_train_record() {
        let m = Manifest::parse(r#"{"id":"a","label":"tts_vits","split":"train"}"#).unwrap();
        assert_eq!(m.records().len(), 1);
        assert_eq!(m.split(Split::Train).count(), 1);
        assert_eq!(m.known_labels(), &["tts_vits".to_string()]);
    }

    #[test]
    fn manifest_rejects_ood_train_record() {
        let err =
            Manifest::parse(r#"{"id":"a","label":"x","split":"train","is_ood":true}"#).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn manifest_rejects_duplicates_and_schema_drift() {
        let text = "{\"id\":\"a\",\"label\":\"x\",\"split\":\"train\"}\n{\"id\":\"a\",\"label\":\"x\",\"split\":\"dev\"}\n";
        assert!(matches!(
            Manifest::parse(text),
            Err(Error::Manifest { line: 2, .. })
        ));
        let extra = r#"{"id":"a","label":"x","split":"train","speaker":"p1"}"#;
        assert!(Manifest::parse(extra).is_err());
        let bad_split = r#"{"id":"a","label":"x","split":"test"}"#;
        assert!(Manifest::parse(bad_split).is_err());
    }

    #[test]
    fn manifest_rejects_unknown_in_domain_label() {
        let text = "{\"id\":\"a\",\"label\":\"x\",\"split\":\"train\"}\n{\"id\":\"b\",\"label\":\"y\",\"split\":\"eval\"}\n";
        assert!(Manifest::parse(text).is_err());
        let ok = "{\"id\":\"a\",\"label\":\"x\",\"split\":\"train\"}\n{\"id\":\"b\",\"label\":\"y\",\"split\":\"eval\",\"is_ood\":true}\n";
        let m = Manifest::parse(ok).unwrap();
        assert!(m.has_ood());
        assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
    }
}
