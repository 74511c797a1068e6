//! Frozen embedding matrices: binary file format, mock text encoder, and
//! geo-temporal vector lookup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Interaction;
use crate::enrichment::{Bucket, ContextKey, GeoTemporalContext};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"GTEMB001";
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in row {row} ({key})")]
    NonFiniteValue { row: usize, key: String },
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{} interaction context key(s) have no context or embedding: {}", .0.len(), .0.join(", "))]
    MissingContext(Vec<String>),
    #[error("not an embedding file: {0}")]
    Format(String),
    #[error("item metadata line {line}: {reason}")]
    Metadata { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense `|keys| x dim` matrix of `f32` rows with unique keys.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    rows: Vec<f32>,
    normalized: bool,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl EmbeddingMatrix {
    /// Validates and builds a matrix. With `normalize`, every row whose norm
    /// is not already 1 within 1e-6 is rescaled to unit length; rows already
    /// at unit norm are left bit-identical.
    pub fn new(keys: Vec<String>, dim: usize, mut rows: Vec<f32>, normalize: bool) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ShapeMismatch("dim must be positive".into()));
        }
        if rows.len() != keys.len() * dim {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "{} keys x {dim} dims needs {} values, got {}",
                keys.len(),
                keys.len() * dim,
                rows.len()
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(EmbeddingError::DuplicateKey(k.clone()));
            }
        }
        for (i, row) in rows.chunks_mut(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFiniteValue { row: i, key: keys[i].clone() });
            }
            if normalize {
                let n = norm(row);
                if n == 0.0 {
                    return Err(EmbeddingError::ZeroVector);
                }
                if (n - 1.0).abs() > NORM_TOL {
                    for v in row.iter_mut() {
                        *v = (*v as f64 / n) as f32;
                    }
                }
            }
        }
        Ok(Self { keys, index, dim, rows, normalized: normalize })
    }

    pub fn from_rows(keys: Vec<String>, rows: &[Vec<f32>], normalize: bool) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EmbeddingError::DimMismatch(dim, bad.len()));
        }
        Self::new(keys, dim, rows.concat(), normalize)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.position(key).map(|i| self.row(i))
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }

    /// SHA-256 over the serialized file bytes.
    pub fn content_hash(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.rows.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&[self.normalized as u8, 0, 0, 0]);
        for k in &self.keys {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary format. Rows are normalized when the header flag is
    /// set or `normalize` is true.
    pub fn from_bytes(bytes: &[u8], normalize: bool) -> Result<Self, EmbeddingError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let flags = r.take(4)?;
        let mut keys = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let k = std::str::from_utf8(r.take(len)?).map_err(|e| EmbeddingError::Format(e.to_string()))?;
            keys.push(k.to_string());
        }
        let body = &bytes[r.pos..];
        if body.len() != count * dim * 4 {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "header declares {count} x {dim} floats ({} bytes), body has {} bytes",
                count * dim * 4,
                body.len()
            )));
        }
        let rows = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(keys, dim, rows, normalize || flags[0] == 1)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EmbeddingError::ShapeMismatch(format!("file truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EmbeddingError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), EmbeddingError> {
    write_atomic(path, &m.to_bytes())?;
    Ok(())
}

/// Loads and L2-normalizes every row.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    load_embeddings_with(path, true)
}

/// Loads rows as stored unless `normalize` is set or the file's own flag
/// requests it.
pub fn load_embeddings_with(path: &Path, normalize: bool) -> Result<EmbeddingMatrix, EmbeddingError> {
    EmbeddingMatrix::from_bytes(&fs::read(path)?, normalize)
}

/// Deterministic stand-in for a text encoder: the text is hashed with the
/// seed, the digest seeds a generator, and `dim` normal draws are scaled to
/// unit length. Similar texts do not get similar vectors.
pub fn mock_encode(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 2, "mock_encode needs dim >= 2");
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(text.as_bytes()).finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Encodes `(key, text)` pairs into a normalized matrix in the given order.
pub fn mock_encode_all<'a>(
    entries: impl IntoIterator<Item = (String, &'a str)>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for (k, text) in entries {
        keys.push(k);
        rows.extend(mock_encode(text, dim, seed));
    }
    EmbeddingMatrix::new(keys, dim, rows, true)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Context embeddings keyed by `ContextKey` display form (`bucket|location`),
/// together with the bucketing that produced the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSource {
    pub matrix: EmbeddingMatrix,
    pub bucket: Bucket,
    pub location_override: Option<String>,
}

impl GtSource {
    pub fn new(matrix: EmbeddingMatrix, bucket: Bucket) -> Self {
        Self { matrix, bucket, location_override: None }
    }

    pub fn key(&self, ts: i64, location: &str) -> ContextKey {
        let loc = self.location_override.as_deref().unwrap_or(location.trim());
        ContextKey::new(self.bucket.label(ts), loc)
    }

    pub fn row_of(&self, ts: i64, location: &str) -> Option<usize> {
        self.matrix.position(&self.key(ts, location).to_string())
    }

    pub fn vector(&self, ts: i64, location: &str) -> Option<&[f32]> {
        self.row_of(ts, location).map(|i| self.matrix.row(i))
    }
}

/// Resolves each interaction to its context-embedding row. Every key must
/// have both a context and an embedding; all unresolved keys are reported
/// together.
pub fn attach_gt(
    log: &[Interaction],
    contexts: &BTreeMap<ContextKey, GeoTemporalContext>,
    gt: &GtSource,
) -> Result<Vec<usize>, EmbeddingError> {
    let mut missing = BTreeSet::new();
    let mut rows = Vec::with_capacity(log.len());
    for r in log {
        let key = gt.key(r.timestamp_utc, &r.location);
        match gt.matrix.position(&key.to_string()) {
            Some(i) if contexts.contains_key(&key) => rows.push(i),
            _ => {
                missing.insert(key.to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(EmbeddingError::MissingContext(missing.into_iter().collect()));
    }
    Ok(rows)
}

/// One line of an item metadata file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMetadata {
    #[serde(deserialize_with = "crate::corpus::opaque_id")]
    pub item_id: String,
    pub title: String,
    #[serde(default, deserialize_with = "genre_list")]
    pub genres: Vec<String>,
}

fn genre_list<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum G {
        List(Vec<String>),
        Piped(String),
    }
    Ok(match G::deserialize(d)? {
        G::List(v) => v,
        G::Piped(s) => s.split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
    })
}

impl ItemMetadata {
    pub fn text(&self) -> String {
        if self.genres.is_empty() {
            self.title.clone()
        } else {
            format!("{}. Genres: {}", self.title, self.genres.join(", "))
        }
    }
}

/// Reads JSONL item metadata (`item_id`, `title`, `genres`).
pub fn load_item_metadata(path: &Path) -> Result<Vec<ItemMetadata>, EmbeddingError> {
    let mut out = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| EmbeddingError::Metadata { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_four_round_trip() {
        let m = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5],
            false,
        )
        .unwrap();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes(), false).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("b").unwrap(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn truncated_body_is_shape_mismatch() {
        let m = EmbeddingMatrix::new(vec!["a".into()], 2, vec![1.0, 2.0], false).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1], false),
            Err(EmbeddingError::ShapeMismatch(_))
        ));
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes[..10], false), Err(EmbeddingError::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_duplicates_and_non_finite() {
        let dup = EmbeddingMatrix::new(vec!["a".into(), "a".into()], 1, vec![1.0, 1.0], false);
        assert!(matches!(dup, Err(EmbeddingError::DuplicateKey(_))));
        let nan = EmbeddingMatrix::new(vec!["a".into()], 2, vec![f32::NAN, 1.0], false);
        assert!(matches!(nan, Err(EmbeddingError::NonFiniteValue { row: 0, .. })));
    }

    #[test]
    fn normalization_on_load() {
        let m = EmbeddingMatrix::new(vec!["a".into()], 2, vec![3.0, 4.0], false).unwrap();
        let n = EmbeddingMatrix::from_bytes(&m.to_bytes(), true).unwrap();
        assert!(n.normalized());
        assert!((norm(n.row(0)) - 1.0).abs() < 1e-6);
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn mock_encoder_is_unit_and_deterministic() {
        let a = mock_encode("hello", 64, 7);
        assert_eq!(a, mock_encode("hello", 64, 7));
        assert_ne!(a, mock_encode("hello", 64, 8));
        assert!((norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbeddingError::ZeroVector)));
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 0.0]), Err(EmbeddingError::DimMismatch(1, 2))));
    }

    #[test]
    fn genres_accept_list_or_pipes() {
        let a: ItemMetadata = serde_json::from_str(r#"{"item_id":1,"title":"T","genres":"Drama|War"}"#).unwrap();
        let b: ItemMetadata = serde_json::from_str(r#"{"item_id":"1","title":"T","genres":["Drama","War"]}"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text(), "T. Genres: Drama, War");
    }
}
