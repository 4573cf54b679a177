//! Encoder provider contracts plus the deterministic reference embedder.
//!
//! Real encoders (CLIP-style vision towers, sentence transformers) live
//! behind the wire contract; the reference embedder hashes character
//! 3-grams (text) or 64-byte blocks (images) into signed buckets and
//! L2-normalizes, so retrieval and fusion are testable without any model.

use crate::domain::{DomainError, Embedding, ImageRef, Modality};
use crate::hash::fnv1a64;
use thiserror::Error;

/// Gram hash: FNV-1a finalized with a splitmix-style mixer. The raw FNV
/// low bits are too regular for structured inputs (incrementing byte
/// ramps collide into one bucket); the finalizer disperses them.
fn gram_hash(bytes: &[u8]) -> u64 {
    let mut z = fnv1a64(bytes);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("encoder transport: {0}")]
    Transport(String),
    #[error("encoder returned {actual} values, contract dim is {expected}")]
    DimContract { expected: usize, actual: usize },
    #[error("encoder modality is {spec:?}, input is {input:?}")]
    ModalityContract { spec: Modality, input: Modality },
    #[error("unreadable payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl EncodeError {
    /// Transport errors may be retried; contract errors may not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EncodeError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    External,
    Reference,
}

/// Describes an encoder: which modality it accepts, the dimension it emits,
/// and where it runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub modality: Modality,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub kind: EncoderKind,
}

/// Raw content handed to an embedder.
pub enum EmbedContent<'a> {
    Text(&'a str),
    ImageBytes(&'a [u8]),
}

/// Provider contract for E_text / E_vision. Implementations return raw
/// (possibly unnormalized) vectors; the [`embed_text`] / [`embed_image`]
/// wrappers enforce the dimension contract and normalization.
pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn embed_raw(&self, content: &EmbedContent<'_>) -> Result<Vec<f32>, EncodeError>;
}

/// Embed a text query or chunk. Returns a unit-norm text embedding of the
/// encoder's dimension.
pub fn embed_text(text: &str, enc: &dyn Embedder) -> Result<Embedding, EncodeError> {
    let spec = enc.spec();
    if spec.modality != Modality::Text {
        return Err(EncodeError::ModalityContract {
            spec: spec.modality,
            input: Modality::Text,
        });
    }
    let raw = enc.embed_raw(&EmbedContent::Text(text))?;
    finish(raw, spec, Modality::Text)
}

/// Embed image payload bytes. The [`ImageRef`] travels alongside only for
/// contract checks; the reference embedder hashes the bytes directly.
pub fn embed_image(
    _img: &ImageRef,
    payload: &[u8],
    enc: &dyn Embedder,
) -> Result<Embedding, EncodeError> {
    let spec = enc.spec();
    if spec.modality != Modality::Image {
        return Err(EncodeError::ModalityContract {
            spec: spec.modality,
            input: Modality::Image,
        });
    }
    let raw = enc.embed_raw(&EmbedContent::ImageBytes(payload))?;
    finish(raw, spec, Modality::Image)
}

fn finish(raw: Vec<f32>, spec: &EncoderSpec, modality: Modality) -> Result<Embedding, EncodeError> {
    if raw.len() != spec.dim {
        return Err(EncodeError::DimContract {
            expected: spec.dim,
            actual: raw.len(),
        });
    }
    Ok(Embedding::normalized(modality, raw)?)
}

/// Deterministic hashed-n-gram embedder. Pure function of the input bytes:
/// same content always embeds identically, on every platform.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    spec: EncoderSpec,
}

impl ReferenceEmbedder {
    pub fn text(dim: usize) -> Self {
        Self {
            spec: EncoderSpec {
                modality: Modality::Text,
                dim,
                endpoint: None,
                kind: EncoderKind::Reference,
            },
        }
    }

    pub fn image(dim: usize) -> Self {
        Self {
            spec: EncoderSpec {
                modality: Modality::Image,
                dim,
                endpoint: None,
                kind: EncoderKind::Reference,
            },
        }
    }

    fn accumulate(&self, grams: impl Iterator<Item = u64>) -> Vec<f32> {
        let dim = self.spec.dim;
        let mut acc = vec![0.0f32; dim];
        let mut any = false;
        for h in grams {
            any = true;
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        if !any {
            // Degenerate empty input: a fixed deterministic direction.
            acc[0] = 1.0;
        }
        acc
    }
}

impl Embedder for ReferenceEmbedder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn embed_raw(&self, content: &EmbedContent<'_>) -> Result<Vec<f32>, EncodeError> {
        match content {
            EmbedContent::Text(text) => {
                let chars: Vec<char> = text.chars().collect();
                let raw = if chars.len() < 3 {
                    // Shorter than one 3-gram: hash the whole text once.
                    self.accumulate(std::iter::once(gram_hash(text.as_bytes())))
                } else {
                    self.accumulate(chars.windows(3).map(|w| {
                        let gram: String = w.iter().collect();
                        gram_hash(gram.as_bytes())
                    }))
                };
                Ok(raw)
            }
            EmbedContent::ImageBytes(bytes) => {
                if bytes.is_empty() {
                    return Err(EncodeError::Payload("empty image payload".into()));
                }
                Ok(self.accumulate(bytes.chunks(64).map(gram_hash)))
            }
        }
    }
}
