//! The offline knowledge base: a multimodal vector index with exact cosine
//! top-k search and a checksummed little-endian binary file format.
//!
//! Search is an exact scan. At the corpus sizes this artifact targets
//! (<= 1e5 records) exactness is affordable and keeps results testable
//! against a brute-force oracle; approximation belongs behind this same
//! contract if it is ever needed.

use crate::domain::{DomainError, Embedding, ImageRef, Modality};
use crate::hash::Fnv1a64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"MIRAIDX1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0:?} already present")]
    DuplicateId(String),
    #[error("record dim {actual} does not match index dim {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("record {id}: embedding is not normalized (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("query dim {actual} does not match index dim {expected}")]
    QueryDimMismatch { expected: usize, actual: usize },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Payload carried by an index record: a text chunk or an image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecordPayload {
    Text(String),
    Image(ImageRef),
}

/// One entry of the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: String,
    pub modality: Modality,
    pub embedding: Embedding,
    pub payload: RecordPayload,
    pub metadata: BTreeMap<String, String>,
}

impl IndexRecord {
    pub fn content_text(&self) -> Option<&str> {
        match &self.payload {
            RecordPayload::Text(t) => Some(t),
            RecordPayload::Image(_) => None,
        }
    }

    pub fn image(&self) -> Option<&ImageRef> {
        match &self.payload {
            RecordPayload::Image(i) => Some(i),
            RecordPayload::Text(_) => None,
        }
    }
}

/// A scored search hit, borrowed from the index.
#[derive(Debug, Clone, Copy)]
pub struct SearchHit<'a> {
    pub record: &'a IndexRecord,
    pub score: f64,
}

/// Exact-scan vector index over normalized embeddings.
///
/// ```
/// use mira_core::domain::Modality;
/// use mira_core::encode::{embed_text, ReferenceEmbedder};
/// use mira_core::store::{IndexRecord, RecordPayload, VectorIndex};
///
/// let enc = ReferenceEmbedder::text(64);
/// let mut idx = VectorIndex::new(64);
/// idx.add(IndexRecord {
///     id: "note-1".into(),
///     modality: Modality::Text,
///     embedding: embed_text("bilateral pleural effusion", &enc).unwrap(),
///     payload: RecordPayload::Text("bilateral pleural effusion".into()),
///     metadata: Default::default(),
/// })
/// .unwrap();
///
/// let query = embed_text("pleural effusion", &enc).unwrap();
/// let hits = idx.search(&query, 1, None).unwrap();
/// assert_eq!(hits[0].record.id, "note-1");
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    records: Vec<IndexRecord>,
    by_id: HashMap<String, usize>,
    counts: BTreeMap<Modality, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            by_id: HashMap::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_by_modality(&self, modality: Modality) -> usize {
        self.counts.get(&modality).copied().unwrap_or(0)
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn add(&mut self, rec: IndexRecord) -> Result<(), StoreError> {
        if rec.embedding.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                actual: rec.embedding.dim(),
            });
        }
        if !rec.embedding.is_normalized() {
            return Err(StoreError::NotNormalized {
                id: rec.id.clone(),
                norm: rec.embedding.norm(),
            });
        }
        if self.by_id.contains_key(&rec.id) {
            return Err(StoreError::DuplicateId(rec.id));
        }
        self.by_id.insert(rec.id.clone(), self.records.len());
        *self.counts.entry(rec.modality).or_insert(0) += 1;
        self.records.push(rec);
        Ok(())
    }

    /// Top-k by cosine similarity, descending; ties broken by ascending id.
    /// Cosine of normalized vectors is their dot product.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        modality: Option<Modality>,
    ) -> Result<Vec<SearchHit<'_>>, StoreError> {
        if query.dim() != self.dim {
            return Err(StoreError::QueryDimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut scored: Vec<(f64, &IndexRecord)> = Vec::new();
        for rec in &self.records {
            if let Some(m) = modality {
                if rec.modality != m {
                    continue;
                }
            }
            let score = query.dot(&rec.embedding)?;
            scored.push((score, rec));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.id.cmp(&b.1.id))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, record)| SearchHit { record, score })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Serialize: magic | u32 version | u32 dim | u64 count | records |
    /// u64 FNV-1a checksum of everything before it. All integers and the
    /// f32 embedding values are little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            let id = rec.id.as_bytes();
            if id.len() > u16::MAX as usize {
                return Err(StoreError::Corrupt(format!("id {} too long", rec.id)));
            }
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id);
            out.push(match rec.modality {
                Modality::Text => 0,
                Modality::Image => 1,
                Modality::Joint => 2,
            });
            for v in rec.embedding.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let payload = match &rec.payload {
                RecordPayload::Text(t) => t.as_bytes().to_vec(),
                RecordPayload::Image(img) => serde_json::to_vec(img)
                    .map_err(|e| StoreError::Corrupt(format!("image payload: {e}")))?,
            };
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
            let metadata = serde_json::to_vec(&rec.metadata)
                .map_err(|e| StoreError::Corrupt(format!("metadata: {e}")))?;
            out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
            out.extend_from_slice(&metadata);
        }
        let mut checksum = Fnv1a64::new();
        checksum.update(&out);
        out.extend_from_slice(&checksum.finish().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < MAGIC.len() + 4 + 4 + 8 + 8 {
            return Err(StoreError::Corrupt("file shorter than header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let mut checksum = Fnv1a64::new();
        checksum.update(body);
        if checksum.finish() != stored {
            return Err(StoreError::Corrupt("checksum mismatch".into()));
        }

        let mut r = body;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| StoreError::Corrupt("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(StoreError::Corrupt("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(StoreError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut idx = VectorIndex::new(dim);
        for _ in 0..count {
            let id_len = read_u16(&mut r)? as usize;
            let id = String::from_utf8(read_vec(&mut r, id_len)?)
                .map_err(|_| StoreError::Corrupt("id not UTF-8".into()))?;
            let modality = match read_u8(&mut r)? {
                0 => Modality::Text,
                1 => Modality::Image,
                2 => Modality::Joint,
                m => return Err(StoreError::Corrupt(format!("unknown modality byte {m}"))),
            };
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| StoreError::Corrupt("truncated embedding".into()))?;
                values.push(f32::from_le_bytes(b));
            }
            let payload_len = read_u32(&mut r)? as usize;
            let payload_bytes = read_vec(&mut r, payload_len)?;
            let payload = match modality {
                Modality::Image => RecordPayload::Image(
                    serde_json::from_slice(&payload_bytes)
                        .map_err(|e| StoreError::Corrupt(format!("image payload: {e}")))?,
                ),
                _ => RecordPayload::Text(
                    String::from_utf8(payload_bytes)
                        .map_err(|_| StoreError::Corrupt("payload not UTF-8".into()))?,
                ),
            };
            let metadata_len = read_u32(&mut r)? as usize;
            let metadata_bytes = read_vec(&mut r, metadata_len)?;
            let metadata: BTreeMap<String, String> = serde_json::from_slice(&metadata_bytes)
                .map_err(|e| StoreError::Corrupt(format!("metadata: {e}")))?;
            let embedding = Embedding::new(modality, values)?;
            idx.add(IndexRecord {
                id,
                modality,
                embedding,
                payload,
                metadata,
            })?;
        }
        if !r.is_empty() {
            return Err(StoreError::Corrupt(format!(
                "{} trailing bytes after last record",
                r.len()
            )));
        }
        Ok(idx)
    }
}

fn read_u8(r: &mut &[u8]) -> Result<u8, StoreError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| StoreError::Corrupt("truncated".into()))?;
    Ok(b[0])
}

fn read_u16(r: &mut &[u8]) -> Result<u16, StoreError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| StoreError::Corrupt("truncated".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| StoreError::Corrupt("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, StoreError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| StoreError::Corrupt("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec(r: &mut &[u8], len: usize) -> Result<Vec<u8>, StoreError> {
    if r.len() < len {
        return Err(StoreError::Corrupt("truncated".into()));
    }
    let mut v = vec![0u8; len];
    r.read_exact(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Source;
    use crate::encode::{embed_text, Embedder, ReferenceEmbedder};
    use crate::rng::SplitMix64;

    fn text_record(id: &str, content: &str, dim: usize) -> IndexRecord {
        let enc = ReferenceEmbedder::text(dim);
        IndexRecord {
            id: id.into(),
            modality: Modality::Text,
            embedding: embed_text(content, &enc).unwrap(),
            payload: RecordPayload::Text(content.into()),
            metadata: BTreeMap::new(),
        }
    }

    fn random_unit(rng: &mut SplitMix64, dim: usize, modality: Modality) -> Embedding {
        let values: Vec<f32> = (0..dim).map(|_| rng.next_range(-1.0, 1.0) as f32).collect();
        Embedding::normalized(modality, values).unwrap()
    }

    #[test]
    fn add_and_count() {
        let mut idx = VectorIndex::new(16);
        idx.add(text_record("a", "alpha", 16)).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.count_by_modality(Modality::Text), 1);
        assert_eq!(idx.count_by_modality(Modality::Image), 0);
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut idx = VectorIndex::new(16);
        idx.add(text_record("a", "alpha", 16)).unwrap();
        assert!(matches!(
            idx.add(text_record("a", "other", 16)),
            Err(StoreError::DuplicateId(_))
        ));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut idx = VectorIndex::new(16);
        assert!(matches!(
            idx.add(text_record("a", "alpha", 8)),
            Err(StoreError::DimMismatch { .. })
        ));
    }

    #[test]
    fn unnormalized_rejected() {
        let mut idx = VectorIndex::new(2);
        let rec = IndexRecord {
            id: "u".into(),
            modality: Modality::Text,
            embedding: Embedding::new(Modality::Text, vec![3.0, 4.0]).unwrap(),
            payload: RecordPayload::Text("u".into()),
            metadata: BTreeMap::new(),
        };
        assert!(matches!(
            idx.add(rec),
            Err(StoreError::NotNormalized { .. })
        ));
    }

    #[test]
    fn self_match_ranks_first() {
        let mut idx = VectorIndex::new(32);
        for (id, text) in [
            ("a", "first entry"),
            ("b", "second entry"),
            ("c", "third one"),
        ] {
            idx.add(text_record(id, text, 32)).unwrap();
        }
        let enc = ReferenceEmbedder::text(32);
        let q = embed_text("second entry", &enc).unwrap();
        let hits = idx.search(&q, 3, None).unwrap();
        assert_eq!(hits[0].record.id, "b");
        assert!((hits[0].score - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn k_larger_than_index_returns_all() {
        let mut idx = VectorIndex::new(16);
        idx.add(text_record("a", "alpha", 16)).unwrap();
        idx.add(text_record("b", "beta", 16)).unwrap();
        let enc = ReferenceEmbedder::text(16);
        let q = embed_text("gamma", &enc).unwrap();
        assert_eq!(idx.search(&q, 10, None).unwrap().len(), 2);
    }

    #[test]
    fn mixed_counts_match_tally() {
        let mut idx = VectorIndex::new(8);
        let mut rng = SplitMix64::new(99);
        let mut texts = 0usize;
        let mut images = 0usize;
        for i in 0..1000 {
            let is_text = rng.next_below(2) == 0;
            let modality = if is_text {
                Modality::Text
            } else {
                Modality::Image
            };
            let embedding = random_unit(&mut rng, 8, modality);
            let payload = if is_text {
                texts += 1;
                RecordPayload::Text(format!("t{i}"))
            } else {
                images += 1;
                RecordPayload::Image(
                    ImageRef::from_bytes(
                        format!("img{i}"),
                        Source::OfflineIndex,
                        1,
                        1,
                        &[i as u8],
                        "mem://",
                    )
                    .unwrap(),
                )
            };
            idx.add(IndexRecord {
                id: format!("r{i:04}"),
                modality,
                embedding,
                payload,
                metadata: BTreeMap::new(),
            })
            .unwrap();
        }
        assert_eq!(idx.count_by_modality(Modality::Text), texts);
        assert_eq!(idx.count_by_modality(Modality::Image), images);
    }

    #[test]
    fn search_matches_brute_force_and_prefix_property() {
        let dim = 24;
        let mut rng = SplitMix64::new(7);
        let mut idx = VectorIndex::new(dim);
        for i in 0..50 {
            idx.add(IndexRecord {
                id: format!("r{i:02}"),
                modality: Modality::Text,
                embedding: random_unit(&mut rng, dim, Modality::Text),
                payload: RecordPayload::Text(format!("content {i}")),
                metadata: BTreeMap::new(),
            })
            .unwrap();
        }
        let q = random_unit(&mut rng, dim, Modality::Text);

        // Brute-force oracle: score every record independently, sort.
        let mut oracle: Vec<(String, f64)> = idx
            .records()
            .iter()
            .map(|r| {
                let dot: f64 = r
                    .embedding
                    .values()
                    .iter()
                    .zip(q.values())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (r.id.clone(), dot)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));

        let hits = idx.search(&q, 5, None).unwrap();
        for (hit, (oid, oscore)) in hits.iter().zip(&oracle) {
            assert_eq!(&hit.record.id, oid);
            assert!((hit.score - oscore).abs() < 1e-9);
        }

        // search(k) is a prefix of search(k+1)
        let k5: Vec<_> = hits.iter().map(|h| h.record.id.clone()).collect();
        let k6: Vec<_> = idx
            .search(&q, 6, None)
            .unwrap()
            .iter()
            .map(|h| h.record.id.clone())
            .collect();
        assert_eq!(&k6[..5], &k5[..]);
    }

    #[test]
    fn save_load_round_trip_preserves_search() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.idx");
        let dim = 16;
        let mut rng = SplitMix64::new(3);
        let mut idx = VectorIndex::new(dim);
        for i in 0..100 {
            let modality = if i % 3 == 0 {
                Modality::Image
            } else {
                Modality::Text
            };
            let payload = match modality {
                Modality::Image => RecordPayload::Image(
                    ImageRef::from_bytes(
                        format!("i{i}"),
                        Source::OfflineIndex,
                        3,
                        3,
                        &[i as u8, 1],
                        "file:///x",
                    )
                    .unwrap(),
                ),
                _ => RecordPayload::Text(format!("chunk {i}")),
            };
            let mut metadata = BTreeMap::new();
            metadata.insert("doc".to_string(), format!("d{i}"));
            idx.add(IndexRecord {
                id: format!("rec{i:03}"),
                modality,
                embedding: random_unit(&mut rng, dim, modality),
                payload,
                metadata,
            })
            .unwrap();
        }
        idx.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, idx);

        for _ in 0..20 {
            let q = random_unit(&mut rng, dim, Modality::Text);
            let a = idx.search(&q, 7, None).unwrap();
            let b = loaded.search(&q, 7, None).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.record.id, y.record.id);
                assert_eq!(x.score, y.score);
            }
        }
    }

    #[test]
    fn empty_index_round_trips() {
        let idx = VectorIndex::new(4);
        let bytes = idx.to_bytes().unwrap();
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut idx = VectorIndex::new(4);
        idx.add(text_record("a", "alpha", 4)).unwrap();
        let bytes = idx.to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            VectorIndex::from_bytes(truncated),
            Err(StoreError::Corrupt(_))
        ));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut idx = VectorIndex::new(4);
        idx.add(text_record("a", "alpha", 4)).unwrap();
        let mut bytes = idx.to_bytes().unwrap();
        bytes[20] ^= 0xff;
        assert!(matches!(
            VectorIndex::from_bytes(&bytes),
            Err(StoreError::Corrupt(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let idx = VectorIndex::new(4);
        let mut bytes = idx.to_bytes().unwrap();
        bytes[0] = b'X';
        // Checksum still covers the body, so recompute it to isolate the magic check.
        let body_len = bytes.len() - 8;
        let mut c = Fnv1a64::new();
        c.update(&bytes[..body_len]);
        let tail = c.finish().to_le_bytes();
        bytes[body_len..].copy_from_slice(&tail);
        match VectorIndex::from_bytes(&bytes) {
            Err(StoreError::Corrupt(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn cosine_of_normalized_vectors_equals_dot() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..50 {
            let a = random_unit(&mut rng, 32, Modality::Text);
            let b = random_unit(&mut rng, 32, Modality::Text);
            let dot = a.dot(&b).unwrap();
            let cosine = dot / (a.norm() * b.norm());
            assert!((cosine - dot).abs() <= 1e-6);
        }
    }

    #[test]
    fn query_dim_mismatch() {
        let idx = VectorIndex::new(8);
        let q = Embedding::normalized(Modality::Text, vec![1.0; 4]).unwrap();
        assert!(matches!(
            idx.search(&q, 1, None),
            Err(StoreError::QueryDimMismatch { .. })
        ));
    }
}
