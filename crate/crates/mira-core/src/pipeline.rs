//! End-to-end session orchestration: rewrite, dual-pathway embedding,
//! retrieval, fusion, the rearrange/initial/rethink/final cycle, reward.
//! One function drives the whole pipeline so the CLI, the HTTP service,
//! and the browser demo produce identical records for identical inputs.

use crate::config::PipelineConfig;
use crate::domain::{
    validate_bundle, DomainError, Embedding, ImageRef, Modality, Query, RagBundle, Violation,
};
use crate::encode::{embed_image, embed_text, Embedder, EncodeError};
use crate::fusion::{
    alpha_fuse, attend, build_trace, select_knowledge, AttentionTrace, FusedEmbedding, FusionError,
};
use crate::retrieve::{retrieve, OnlineContext, RetrievalPlan, RetrieveError};
use crate::rewrite::{rewrite_query, Rewriter};
use crate::rtra::{
    finalize, generate_initial, rearrange, rethink, reward, serialize_record, CoherenceScorer,
    Evidence, FactualScorer, Generator, Rearranged, RecordError, RewardWeights, RtraError,
    RtraRecord,
};
use crate::store::{StoreError, VectorIndex};
use crate::websearch::{SearchError, SearchProvider};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Rtra(#[from] RtraError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Every provider a session consumes. All models sit behind these
/// contracts, so a full session runs deterministically on stubs.
pub struct ProviderSet<'a> {
    pub rewriter: Option<&'a dyn Rewriter>,
    pub text_embedder: &'a dyn Embedder,
    pub image_embedder: &'a dyn Embedder,
    pub generator: &'a dyn Generator,
    pub search: Option<&'a dyn SearchProvider>,
    pub factual: &'a dyn FactualScorer,
    pub coherence: &'a dyn CoherenceScorer,
}

/// A user query: text plus an optional image payload.
pub struct QueryInput {
    pub text: String,
    pub image: Option<(ImageRef, Vec<u8>)>,
}

/// Everything a session produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub record: RtraRecord,
    pub rewrite: crate::rewrite::RewriteResult,
    pub bundle: RagBundle,
    pub bundle_report: Vec<Violation>,
    pub trace: Option<AttentionTrace>,
    pub fused: Option<FusedEmbedding>,
    pub reward: Option<f64>,
}

impl SessionOutput {
    /// The canonical `.rtra` serialization of the record.
    pub fn record_text(&self) -> Result<String, PipelineError> {
        Ok(serialize_record(&self.record)?)
    }
}

pub const FLAG_INITIAL_FAILED: &str = "initial_generation_failed";

fn normalized_sum(a: &Embedding, b: &Embedding) -> Result<Embedding, DomainError> {
    let values: Vec<f32> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| ((f64::from(*x) + f64::from(*y)) / 2.0) as f32)
        .collect();
    Embedding::normalized(Modality::Joint, values)
}

/// Run one full pipeline session. Degradations (rewrite fallback, online
/// timeouts, generator hiccups at rethink/finalize) are recorded in the
/// record's flags; only contract-level failures surface as errors.
pub fn run_session(
    input: &QueryInput,
    idx: &VectorIndex,
    cfg: &PipelineConfig,
    providers: &ProviderSet<'_>,
) -> Result<SessionOutput, PipelineError> {
    let query = Query::new(&input.text)?;

    // Stage 1: query rewrite.
    let rewrite = rewrite_query(&query, providers.rewriter, cfg);

    // Stage 2: dual-pathway embedding.
    let e_text = embed_text(rewrite.rewritten.text(), providers.text_embedder)?;
    let e_image = match &input.image {
        Some((img, bytes)) => Some(embed_image(img, bytes, providers.image_embedder)?),
        None => None,
    };

    // Stage 3: offline + online retrieval.
    let plan = RetrievalPlan::from_config(cfg);
    let online_ctx = providers.search.map(|provider| OnlineContext {
        provider,
        query_text: rewrite.rewritten.text(),
        text_embedder: providers.text_embedder,
        image_embedder: providers.image_embedder,
    });
    let retrieval = retrieve(
        Some(&e_text),
        e_image.as_ref(),
        idx,
        online_ctx.as_ref(),
        &plan,
    )?;
    let mut flags = retrieval.flags.clone();
    if cfg.online_enabled && providers.search.is_none() {
        flags.push("online_unavailable".into());
    }

    let bundle = RagBundle {
        original_image: input.image.as_ref().map(|(img, _)| img.clone()),
        original_text: query.clone(),
        retrieved_texts: retrieval.texts.clone(),
        retrieved_images: retrieval.images.clone(),
        api_text: retrieval.api_text.clone(),
    };
    let bundle_report = validate_bundle(&bundle, cfg);

    // Stage 4: attention fusion and the exported trace.
    let q_prior = match &e_image {
        Some(ei) => normalized_sum(&e_text, ei)?,
        None => e_text.clone(),
    };
    let mut text_side: Vec<Embedding> = vec![e_text.clone()];
    text_side.extend(bundle.retrieved_texts.iter().map(|t| t.embedding.clone()));
    if let Some(api) = &bundle.api_text {
        text_side.push(api.embedding.clone());
    }
    let mut image_side: Vec<Embedding> = Vec::new();
    if let Some(ei) = &e_image {
        image_side.push(ei.clone());
    }
    image_side.extend(bundle.retrieved_images.iter().map(|i| i.embedding.clone()));

    let (att_text, _) = attend(&q_prior, &text_side)?;
    let fused = if image_side.is_empty() {
        flags.push("single_modality_fusion".into());
        None
    } else {
        let (att_image, _) = attend(&q_prior, &image_side)?;
        Some(alpha_fuse(&att_image, &att_text, cfg.alpha)?)
    };
    let attention_query = fused.as_ref().map(|f| &f.values).unwrap_or(&att_text);

    let mut components: Vec<Embedding> = Vec::new();
    if bundle.original_image.is_some() {
        components.push(e_image.clone().expect("image embedding exists with image"));
    }
    components.push(e_text.clone());
    components.extend(bundle.retrieved_texts.iter().map(|t| t.embedding.clone()));
    components.extend(bundle.retrieved_images.iter().map(|i| i.embedding.clone()));
    if let Some(api) = &bundle.api_text {
        components.push(api.embedding.clone());
    }
    let (_, component_weights) = attend(attention_query, &components)?;
    let trace = build_trace(&bundle, &component_weights)?;

    // Stage 5: rearrange.
    let (evidence, rearrange_flags) = match rearrange(&retrieval.pool, cfg.relevance_threshold) {
        Rearranged::Selected { evidence, flags } => (evidence, flags),
        Rearranged::None { reason } => {
            flags.push(format!("rearrange_none: {reason}"));
            let record = RtraRecord {
                query,
                rearrange_none: true,
                rearrange_selected: vec![],
                initial: String::new(),
                rethink_points: vec![],
                final_answer: String::new(),
                citations: vec![],
                degraded_flags: flags,
            };
            return Ok(SessionOutput {
                record,
                rewrite,
                bundle,
                bundle_report,
                trace: Some(trace),
                fused,
                reward: None,
            });
        }
    };
    flags.extend(rearrange_flags);

    // Stage 6: knowledge selection over the chosen evidence.
    let f_v = e_image.as_ref().unwrap_or(&e_text);
    let entries: Vec<_> = evidence.iter().map(|e| e.entry.clone()).collect();
    let primary = select_knowledge(f_v, &e_text, &entries)?;
    let primary_label = evidence
        .iter()
        .find(|e| e.entry.id == primary.id)
        .map(|e| e.label.clone());

    // Stage 7: initial generation (one retry inside).
    let original_image_id = bundle.original_image.as_ref().map(|i| i.id.as_str());
    let image_bytes = input.image.as_ref().map(|(_, b)| b.as_slice());
    let initial = match generate_initial(
        &rewrite.rewritten,
        original_image_id,
        image_bytes,
        &evidence,
        primary_label.as_deref(),
        providers.generator,
    ) {
        Ok(text) => text,
        Err(RtraError::Transport(msg)) => {
            flags.push(FLAG_INITIAL_FAILED.into());
            flags.push(format!("generator: {msg}"));
            let record = RtraRecord {
                query,
                rearrange_none: false,
                rearrange_selected: evidence.iter().map(Evidence::to_selected).collect(),
                initial: String::new(),
                rethink_points: vec![],
                final_answer: String::new(),
                citations: vec![],
                degraded_flags: flags,
            };
            return Ok(SessionOutput {
                record,
                rewrite,
                bundle,
                bundle_report,
                trace: Some(trace),
                fused,
                reward: None,
            });
        }
        Err(e) => return Err(e.into()),
    };

    // Stage 8: rethink, then refine. Both degrade instead of failing.
    let (points, rethink_flags) =
        rethink(&initial, &evidence, &retrieval.pool, providers.generator)?;
    flags.extend(rethink_flags);
    let (final_answer, citations, final_flags) =
        finalize(&initial, &points, &evidence, providers.generator)?;
    flags.extend(final_flags);

    // Stage 9: reward.
    let weights = RewardWeights::from_config(cfg)?;
    let session_reward = reward(
        &points,
        &final_answer,
        &evidence,
        &weights,
        providers.factual,
        providers.coherence,
    )?;

    let record = RtraRecord {
        query,
        rearrange_none: false,
        rearrange_selected: evidence.iter().map(Evidence::to_selected).collect(),
        initial,
        rethink_points: points,
        final_answer,
        citations,
        degraded_flags: flags,
    };

    Ok(SessionOutput {
        record,
        rewrite,
        bundle,
        bundle_report,
        trace: Some(trace),
        fused,
        reward: Some(session_reward),
    })
}

/// Promote cached online responses into the offline index, explicitly and
/// auditably: returns the ids actually added (existing ids are skipped).
pub fn promote_cached_results(
    idx: &mut VectorIndex,
    cache_dir: &std::path::Path,
    text_embedder: &dyn Embedder,
) -> Result<Vec<String>, PipelineError> {
    let mut promoted = Vec::new();
    let cached = crate::websearch::read_cached_responses(cache_dir)?;
    for (digest, results) in cached {
        for (i, r) in results.iter().enumerate() {
            if !r.is_text() {
                continue;
            }
            let id = format!("online:{digest}:{i}");
            if idx.contains(&id) {
                continue;
            }
            let embedding = embed_text(&r.snippet_or_paragraph, text_embedder)?;
            let mut metadata = std::collections::BTreeMap::new();
            metadata.insert("url".to_string(), r.url.clone());
            metadata.insert("title".to_string(), r.title.clone());
            idx.add(crate::store::IndexRecord {
                id: id.clone(),
                modality: Modality::Text,
                embedding,
                payload: crate::store::RecordPayload::Text(r.snippet_or_paragraph.clone()),
                metadata,
            })?;
            promoted.push(id);
        }
    }
    Ok(promoted)
}
