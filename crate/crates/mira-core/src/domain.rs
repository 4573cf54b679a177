//! Domain types shared by every pipeline stage: queries, image references,
//! embeddings, retrieved entries, and the structured multimodal input bundle,
//! plus report-style bundle validation.

use crate::config::PipelineConfig;
use crate::hash::sha256_hex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// L2-norm tolerance below which an embedding counts as normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("query text is empty after trimming")]
    EmptyQuery,
    #[error("embedding has {actual} values but dim is {dim}")]
    DimMismatch { dim: usize, actual: usize },
    #[error("embedding contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("embedding has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("retrieved entry {id}: {reason}")]
    BadEntry { id: String, reason: String },
    #[error("image dimensions must be positive when a payload is present")]
    BadImageDims,
}

/// A textual query: raw text plus its whitespace-token count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    text: String,
    word_count: usize,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyQuery);
        }
        let word_count = text.split_whitespace().count();
        Ok(Self { text, word_count })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }
}

/// Where a piece of content came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    User,
    OfflineIndex,
    Online,
}

/// Reference to an image: locator plus content digest. Raw pixel tensors
/// never enter the pipeline; they stay on the encoder-provider side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub source: Source,
    pub width: u32,
    pub height: u32,
    /// Lowercase-hex SHA-256 of the payload bytes.
    pub bytes_digest: String,
    pub payload_uri: String,
}

impl ImageRef {
    /// Build a reference from payload bytes, computing the content digest.
    pub fn from_bytes(
        id: impl Into<String>,
        source: Source,
        width: u32,
        height: u32,
        bytes: &[u8],
        payload_uri: impl Into<String>,
    ) -> Result<Self, DomainError> {
        if width == 0 || height == 0 {
            return Err(DomainError::BadImageDims);
        }
        Ok(Self {
            id: id.into(),
            source,
            width,
            height,
            bytes_digest: sha256_hex(bytes),
            payload_uri: payload_uri.into(),
        })
    }
}

/// Which kind of content an embedding or entry represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Joint,
}

/// Fixed-dimension real vector with a modality tag. Stored as f32 to match
/// the index file format exactly; similarity math accumulates in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    modality: Modality,
    dim: usize,
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(modality: Modality, values: Vec<f32>) -> Result<Self, DomainError> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(DomainError::NonFinite(i));
            }
        }
        Ok(Self {
            modality,
            dim: values.len(),
            values,
        })
    }

    /// Build and L2-normalize in one step.
    pub fn normalized(modality: Modality, values: Vec<f32>) -> Result<Self, DomainError> {
        let mut e = Self::new(modality, values)?;
        e.normalize()?;
        Ok(e)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    /// Idempotent at storage resolution: a vector already within
    /// [`NORM_TOLERANCE`] of unit norm is left bit-identical, so fusing at
    /// an endpoint reproduces the input exactly.
    pub fn normalize(&mut self) -> Result<(), DomainError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(DomainError::ZeroNorm);
        }
        if (n - 1.0).abs() <= NORM_TOLERANCE {
            return Ok(());
        }
        for v in &mut self.values {
            *v = (f64::from(*v) / n) as f32;
        }
        Ok(())
    }

    /// Dot product, accumulated in f64. For normalized embeddings this is
    /// the cosine similarity.
    pub fn dot(&self, other: &Embedding) -> Result<f64, DomainError> {
        if self.dim != other.dim {
            return Err(DomainError::DimMismatch {
                dim: self.dim,
                actual: other.dim,
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum())
    }

    /// Re-tag the modality without touching the values.
    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

/// One retrieved candidate: text chunk or image, with its embedding and
/// cosine score against the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub id: String,
    pub modality: Modality,
    pub source: Source,
    pub content_text: Option<String>,
    pub image: Option<ImageRef>,
    pub embedding: Embedding,
    pub score: f64,
}

impl RetrievedEntry {
    pub fn text_entry(
        id: impl Into<String>,
        source: Source,
        content: impl Into<String>,
        embedding: Embedding,
        score: f64,
    ) -> Result<Self, DomainError> {
        let e = Self {
            id: id.into(),
            modality: Modality::Text,
            source,
            content_text: Some(content.into()),
            image: None,
            embedding,
            score,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn image_entry(
        id: impl Into<String>,
        source: Source,
        image: ImageRef,
        embedding: Embedding,
        score: f64,
    ) -> Result<Self, DomainError> {
        let e = Self {
            id: id.into(),
            modality: Modality::Image,
            source,
            content_text: None,
            image: Some(image),
            embedding,
            score,
        };
        e.validate()?;
        Ok(e)
    }

    fn validate(&self) -> Result<(), DomainError> {
        let bad = |reason: &str| DomainError::BadEntry {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        match self.modality {
            Modality::Text => {
                if self.content_text.is_none() || self.image.is_some() {
                    return Err(bad("text entry must carry content_text and no image"));
                }
            }
            Modality::Image => {
                if self.image.is_none() || self.content_text.is_some() {
                    return Err(bad("image entry must carry an image and no content_text"));
                }
            }
            Modality::Joint => return Err(bad("retrieved entries are text or image")),
        }
        if !self.score.is_finite() {
            return Err(bad("score must be finite"));
        }
        Ok(())
    }

    /// Digest of the entry's content, used for deduplication and citations.
    pub fn content_digest(&self) -> String {
        match (&self.content_text, &self.image) {
            (Some(t), _) => sha256_hex(t.as_bytes()),
            (None, Some(img)) => img.bytes_digest.clone(),
            (None, None) => sha256_hex(self.id.as_bytes()),
        }
    }
}

/// The structured multimodal input bundle handed to generation: original
/// image and text plus retrieved text chunks, retrieved images, and the
/// online API paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagBundle {
    pub original_image: Option<ImageRef>,
    pub original_text: Query,
    pub retrieved_texts: Vec<RetrievedEntry>,
    pub retrieved_images: Vec<RetrievedEntry>,
    pub api_text: Option<RetrievedEntry>,
}

/// One invariant violation found by [`validate_bundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    NoExternalContext,
    ModalityMismatch,
    OverCapacity,
    OrderViolation,
    BadEntry,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.detail)
    }
}

fn check_ordering(entries: &[RetrievedEntry], which: &str, out: &mut Vec<Violation>) {
    for w in entries.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let ordered = a.score > b.score || (a.score == b.score && a.id <= b.id);
        if !ordered {
            out.push(Violation {
                code: ViolationCode::OrderViolation,
                detail: format!(
                    "{which} not sorted by descending score / ascending id at {} -> {}",
                    a.id, b.id
                ),
            });
        }
    }
}

/// Report every invariant violation in a bundle. An empty report means the
/// bundle is valid; nothing is mutated.
pub fn validate_bundle(bundle: &RagBundle, cfg: &PipelineConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    let total_entries = bundle.retrieved_texts.len()
        + bundle.retrieved_images.len()
        + usize::from(bundle.api_text.is_some());
    if total_entries == 0 {
        out.push(Violation {
            code: ViolationCode::NoExternalContext,
            detail: "no external context: bundle has no retrieved entries and no api_text".into(),
        });
    }

    if bundle.retrieved_texts.len() > cfg.k_text {
        out.push(Violation {
            code: ViolationCode::OverCapacity,
            detail: format!(
                "retrieved_texts holds {} entries, k_text is {}",
                bundle.retrieved_texts.len(),
                cfg.k_text
            ),
        });
    }
    if bundle.retrieved_images.len() > cfg.k_image {
        out.push(Violation {
            code: ViolationCode::OverCapacity,
            detail: format!(
                "retrieved_images holds {} entries, k_image is {}",
                bundle.retrieved_images.len(),
                cfg.k_image
            ),
        });
    }

    for e in &bundle.retrieved_texts {
        if e.modality != Modality::Text {
            out.push(Violation {
                code: ViolationCode::ModalityMismatch,
                detail: format!(
                    "modality mismatch: entry {} in retrieved_texts is not text",
                    e.id
                ),
            });
        }
        if let Err(err) = e.validate() {
            out.push(Violation {
                code: ViolationCode::BadEntry,
                detail: err.to_string(),
            });
        }
    }
    for e in &bundle.retrieved_images {
        if e.modality != Modality::Image {
            out.push(Violation {
                code: ViolationCode::ModalityMismatch,
                detail: format!(
                    "modality mismatch: entry {} in retrieved_images is not an image",
                    e.id
                ),
            });
        }
        if let Err(err) = e.validate() {
            out.push(Violation {
                code: ViolationCode::BadEntry,
                detail: err.to_string(),
            });
        }
    }
    if let Some(api) = &bundle.api_text {
        if api.modality != Modality::Text {
            out.push(Violation {
                code: ViolationCode::ModalityMismatch,
                detail: format!("modality mismatch: api_text entry {} is not text", api.id),
            });
        }
    }

    check_ordering(&bundle.retrieved_texts, "retrieved_texts", &mut out);
    check_ordering(&bundle.retrieved_images, "retrieved_images", &mut out);

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::ReferenceEmbedder;
    use crate::encode::{embed_text, Embedder};

    fn emb(text: &str) -> Embedding {
        let enc = ReferenceEmbedder::text(8);
        embed_text(text, &enc).unwrap()
    }

    fn text_e(id: &str, content: &str, score: f64) -> RetrievedEntry {
        RetrievedEntry::text_entry(id, Source::OfflineIndex, content, emb(content), score).unwrap()
    }

    fn image_e(id: &str, score: f64) -> RetrievedEntry {
        let img =
            ImageRef::from_bytes(id, Source::OfflineIndex, 4, 4, id.as_bytes(), "mem://").unwrap();
        let enc = ReferenceEmbedder::image(8);
        let e = crate::encode::embed_image(&img, id.as_bytes(), &enc).unwrap();
        RetrievedEntry::image_entry(id, Source::OfflineIndex, img, e, score).unwrap()
    }

    #[test]
    fn query_counts_whitespace_tokens() {
        let q = Query::new("Is it a malignant lesion?").unwrap();
        assert_eq!(q.word_count(), 5);
        assert!(Query::new("   ").is_err());
    }

    #[test]
    fn full_bundle_is_valid() {
        let cfg = PipelineConfig::default();
        let bundle = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![
                text_e("a", "alpha", 0.9),
                text_e("b", "beta", 0.8),
                text_e("c", "gamma", 0.7),
            ],
            retrieved_images: vec![image_e("x", 0.6), image_e("y", 0.5)],
            api_text: Some(text_e("api", "online paragraph", 0.4)),
        };
        assert!(validate_bundle(&bundle, &cfg).is_empty());
    }

    #[test]
    fn empty_bundle_reports_no_external_context() {
        let cfg = PipelineConfig::default();
        let bundle = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![],
            retrieved_images: vec![],
            api_text: None,
        };
        let report = validate_bundle(&bundle, &cfg);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].code, ViolationCode::NoExternalContext);
    }

    #[test]
    fn text_in_image_slot_reports_modality_mismatch() {
        let cfg = PipelineConfig::default();
        let bundle = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![],
            retrieved_images: vec![text_e("t", "not an image", 0.9)],
            api_text: None,
        };
        let report = validate_bundle(&bundle, &cfg);
        assert!(report
            .iter()
            .any(|v| v.code == ViolationCode::ModalityMismatch));
    }

    #[test]
    fn unsorted_entries_reported() {
        let cfg = PipelineConfig::default();
        let bundle = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![text_e("a", "alpha", 0.5), text_e("b", "beta", 0.9)],
            retrieved_images: vec![],
            api_text: None,
        };
        let report = validate_bundle(&bundle, &cfg);
        assert!(report
            .iter()
            .any(|v| v.code == ViolationCode::OrderViolation));
    }

    #[test]
    fn tie_break_requires_ascending_id() {
        let cfg = PipelineConfig::default();
        let ok = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![text_e("a", "alpha", 0.5), text_e("b", "beta", 0.5)],
            retrieved_images: vec![],
            api_text: None,
        };
        assert!(validate_bundle(&ok, &cfg).is_empty());
        let bad = RagBundle {
            retrieved_texts: vec![text_e("b", "beta", 0.5), text_e("a", "alpha", 0.5)],
            ..ok
        };
        assert!(validate_bundle(&bad, &cfg)
            .iter()
            .any(|v| v.code == ViolationCode::OrderViolation));
    }

    #[test]
    fn validate_is_pure() {
        let cfg = PipelineConfig::default();
        let bundle = RagBundle {
            original_image: None,
            original_text: Query::new("q").unwrap(),
            retrieved_texts: vec![],
            retrieved_images: vec![],
            api_text: None,
        };
        let a = validate_bundle(&bundle, &cfg);
        let b = validate_bundle(&bundle, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_normalization_and_dot() {
        let e = Embedding::normalized(Modality::Text, vec![3.0, 4.0]).unwrap();
        assert!(e.is_normalized());
        assert!((e.values()[0] - 0.6).abs() < 1e-6);
        let f = Embedding::normalized(Modality::Text, vec![4.0, 3.0]).unwrap();
        assert!((e.dot(&f).unwrap() - 0.96).abs() < 1e-6);
        assert!(Embedding::normalized(Modality::Text, vec![0.0, 0.0]).is_err());
        assert!(Embedding::new(Modality::Text, vec![f32::NAN]).is_err());
    }
}
