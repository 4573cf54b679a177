//! Attention-based modality fusion: scaled dot-product attention pooling,
//! the alpha-weighted image/text combination, argmax knowledge selection,
//! and the normalized attention trace exported for visualization.

use crate::domain::{DomainError, Embedding, Modality, RagBundle, RetrievedEntry};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("items must be non-empty")]
    EmptyItems,
    #[error("dim mismatch: query {query}, item {item}")]
    DimMismatch { query: usize, item: usize },
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("candidates must be non-empty")]
    EmptyCandidates,
    #[error("{labels} labels but {weights} weights")]
    LengthMismatch { labels: usize, weights: usize },
    #[error("attention weights must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("attention weights sum to zero")]
    ZeroWeights,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Normalized attention distribution over the components of a bundle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionTrace {
    pub component_labels: Vec<String>,
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    /// Comma-separated "label,weight" rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,weight\n");
        for (label, w) in self.component_labels.iter().zip(&self.weights) {
            out.push_str(&format!("{label},{w:.6}\n"));
        }
        out
    }
}

/// Fused joint embedding with the alpha actually applied and the pathway
/// split that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub values: Embedding,
    pub alpha_used: f64,
    pub trace: AttentionTrace,
}

/// Scaled dot-product attention pooling: weights are the softmax of
/// query.item / sqrt(dim) over the items; the pooled vector is the
/// weight-sum of items, re-normalized to unit norm.
pub fn attend(
    query: &Embedding,
    items: &[Embedding],
) -> Result<(Embedding, Vec<f64>), FusionError> {
    if items.is_empty() {
        return Err(FusionError::EmptyItems);
    }
    let dim = query.dim();
    for item in items {
        if item.dim() != dim {
            return Err(FusionError::DimMismatch {
                query: dim,
                item: item.dim(),
            });
        }
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let scores: Vec<f64> = items
        .iter()
        .map(|item| query.dot(item).map(|d| d * scale))
        .collect::<Result<_, _>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();

    let mut pooled = vec![0.0f64; dim];
    for (w, item) in weights.iter().zip(items) {
        for (acc, v) in pooled.iter_mut().zip(item.values()) {
            *acc += w * f64::from(*v);
        }
    }
    let pooled = Embedding::normalized(
        Modality::Joint,
        pooled.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok((pooled, weights))
}

/// Alpha-weighted combination of the pooled image and text pathways:
/// normalize(alpha * image + (1 - alpha) * text).
pub fn alpha_fuse(
    att_image: &Embedding,
    att_text: &Embedding,
    alpha: f64,
) -> Result<FusedEmbedding, FusionError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(FusionError::BadAlpha(alpha));
    }
    if att_image.dim() != att_text.dim() {
        return Err(FusionError::DimMismatch {
            query: att_image.dim(),
            item: att_text.dim(),
        });
    }
    let combined: Vec<f32> = att_image
        .values()
        .iter()
        .zip(att_text.values())
        .map(|(i, t)| (alpha * f64::from(*i) + (1.0 - alpha) * f64::from(*t)) as f32)
        .collect();
    let values = Embedding::normalized(Modality::Joint, combined)?;
    Ok(FusedEmbedding {
        values,
        alpha_used: alpha,
        trace: AttentionTrace {
            component_labels: vec!["image_pathway".into(), "text_pathway".into()],
            weights: vec![alpha, 1.0 - alpha],
        },
    })
}

/// Argmax knowledge selection: the candidate maximizing the inner product
/// of (f_v + f_t) with the candidate embedding; ties by ascending id.
pub fn select_knowledge<'a>(
    f_v: &Embedding,
    f_t: &Embedding,
    candidates: &'a [RetrievedEntry],
) -> Result<&'a RetrievedEntry, FusionError> {
    if candidates.is_empty() {
        return Err(FusionError::EmptyCandidates);
    }
    let mut best: Option<(&RetrievedEntry, f64)> = None;
    for c in candidates {
        let score = f_v.dot(&c.embedding)? + f_t.dot(&c.embedding)?;
        let better = match &best {
            None => true,
            Some((b, s)) => score > *s || (score == *s && c.id < b.id),
        };
        if better {
            best = Some((c, score));
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// Ordered labels for the components of a bundle: input image, query, then
/// each RAG slice in bundle order.
pub fn bundle_component_labels(bundle: &RagBundle) -> Vec<String> {
    let mut labels = Vec::new();
    if bundle.original_image.is_some() {
        labels.push("input_image".to_string());
    }
    labels.push("query".to_string());
    for i in 0..bundle.retrieved_texts.len() {
        labels.push(format!("text_{}", i + 1));
    }
    for i in 0..bundle.retrieved_images.len() {
        labels.push(format!("image_{}", i + 1));
    }
    if bundle.api_text.is_some() {
        labels.push("api".to_string());
    }
    labels
}

/// Normalize raw per-component attention weights to sum 1 and pair them
/// with the bundle's component labels.
pub fn build_trace(bundle: &RagBundle, raw_weights: &[f64]) -> Result<AttentionTrace, FusionError> {
    let labels = bundle_component_labels(bundle);
    if labels.len() != raw_weights.len() {
        return Err(FusionError::LengthMismatch {
            labels: labels.len(),
            weights: raw_weights.len(),
        });
    }
    let mut sum = 0.0;
    for &w in raw_weights {
        if w < 0.0 || !w.is_finite() {
            return Err(FusionError::NegativeWeight(w));
        }
        sum += w;
    }
    if sum == 0.0 {
        return Err(FusionError::ZeroWeights);
    }
    Ok(AttentionTrace {
        component_labels: labels,
        weights: raw_weights.iter().map(|w| w / sum).collect(),
    })
}
