//! Browser demo: runs the full pipeline in-page on a user-editable toy
//! corpus with deterministic reference providers, explores how the alpha
//! balance shifts the attention distribution, and scores candidate text
//! against references. Exported functions take and return JSON strings;
//! the page renders them with plain JS.

use mira_core::config::PipelineConfig;
use mira_core::domain::{Embedding, ImageRef, Modality, Source};
use mira_core::encode::{EmbedContent, Embedder, ReferenceEmbedder};
use mira_core::metrics::{bleu, exact_match, rouge_l_components, tokenize};
use mira_core::pipeline::{run_session, ProviderSet, QueryInput};
use mira_core::rtra::{Generator, LexicalFactualScorer, NegationCoherenceScorer, RtraError};
use mira_core::store::{IndexRecord, RecordPayload, VectorIndex};
use serde::Deserialize;
use wasm_bindgen::prelude::*;

const DIM: usize = 128;

#[derive(Deserialize)]
struct CorpusEntry {
    id: String,
    modality: String,
    /// Text content for text records; a byte-seed string for image records.
    content: String,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Deserialize)]
struct DemoParams {
    corpus: Vec<CorpusEntry>,
    query: String,
    #[serde(default)]
    image_seed: Option<String>,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_k_text")]
    k_text: usize,
    #[serde(default = "default_k_image")]
    k_image: usize,
    #[serde(default = "default_threshold")]
    relevance_threshold: f64,
    #[serde(default = "default_true")]
    query_rewrite_enabled: bool,
    #[serde(default)]
    text_only: bool,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_k_text() -> usize {
    3
}
fn default_k_image() -> usize {
    2
}
fn default_threshold() -> f64 {
    0.3
}
fn default_true() -> bool {
    true
}

/// Pseudo-image payload: the seed bytes repeated to an odd block count so
/// the block-hash embedding never degenerates.
fn seed_bytes(seed: &str) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(320);
    while bytes.len() < 320 {
        bytes.extend_from_slice(seed.as_bytes());
        bytes.push(0x1f);
    }
    bytes.truncate(320);
    bytes
}

fn build_index(entries: &[CorpusEntry]) -> Result<VectorIndex, String> {
    let text_enc = ReferenceEmbedder::text(DIM);
    let image_enc = ReferenceEmbedder::image(DIM);
    let mut idx = VectorIndex::new(DIM);
    for e in entries {
        let record = match e.modality.as_str() {
            "text" => IndexRecord {
                id: e.id.clone(),
                modality: Modality::Text,
                embedding: mira_core::encode::embed_text(&e.content, &text_enc)
                    .map_err(|err| err.to_string())?,
                payload: RecordPayload::Text(e.content.clone()),
                metadata: Default::default(),
            },
            "image" => {
                let bytes = seed_bytes(&e.content);
                let img = ImageRef::from_bytes(
                    e.id.clone(),
                    Source::OfflineIndex,
                    64,
                    64,
                    &bytes,
                    format!("demo://{}", e.id),
                )
                .map_err(|err| err.to_string())?;
                let raw = image_enc
                    .embed_raw(&EmbedContent::ImageBytes(&bytes))
                    .map_err(|err| err.to_string())?;
                let mut metadata = std::collections::BTreeMap::new();
                if let Some(c) = &e.caption {
                    metadata.insert("caption".to_string(), c.clone());
                }
                IndexRecord {
                    id: e.id.clone(),
                    modality: Modality::Image,
                    embedding: Embedding::normalized(Modality::Image, raw)
                        .map_err(|err| err.to_string())?,
                    payload: RecordPayload::Image(img),
                    metadata,
                }
            }
            other => {
                return Err(format!(
                    "record {}: modality must be text or image, got {other:?}",
                    e.id
                ))
            }
        };
        idx.add(record).map_err(|err| err.to_string())?;
    }
    Ok(idx)
}

fn config_from(params: &DemoParams) -> Result<PipelineConfig, String> {
    let mut cfg = PipelineConfig::default();
    cfg.embed_dim = DIM;
    cfg.alpha = params.alpha;
    cfg.k_text = params.k_text.max(1);
    cfg.k_image = params.k_image.max(1);
    cfg.relevance_threshold = params.relevance_threshold;
    cfg.query_rewrite_enabled = params.query_rewrite_enabled;
    cfg.text_only = params.text_only;
    cfg.online_enabled = false;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Deterministic in-page generator: composes stage outputs from the
/// evidence slices visible in the prompt, citing their labels.
struct TemplateGenerator;

fn first_sentence(text: &str) -> &str {
    match text.find(['.', '!', '?']) {
        Some(i) => &text[..=i],
        None => text,
    }
}

impl Generator for TemplateGenerator {
    fn generate(&self, prompt: &str, _images: &[Vec<u8>]) -> Result<String, RtraError> {
        let mut slices: Vec<(String, String)> = Vec::new();
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix('[') {
                if let Some((label, content)) = rest.split_once(']') {
                    if label.starts_with("text_") || label.starts_with("image_") || label == "api" {
                        let content = content.trim_start_matches(" (primary)").trim();
                        slices.push((label.to_string(), content.to_string()));
                    }
                }
            }
        }
        let text_slice = slices
            .iter()
            .find(|(l, _)| l.starts_with("text_") || l == "api");
        let image_slice = slices.iter().find(|(l, _)| l.starts_with("image_"));

        if prompt.contains("[rethink 1]") {
            // Refine stage.
            let mut out = String::new();
            if let Some((label, content)) = text_slice {
                out.push_str(&format!(
                    "{} [{}]. ",
                    first_sentence(content).trim_end_matches('.'),
                    label
                ));
            }
            if let Some((label, _)) = image_slice {
                out.push_str(&format!(
                    "The retrieved visual reference supports this reading [{label}]."
                ));
            }
            if out.is_empty() {
                out.push_str("No usable evidence was retrieved [y0].");
            }
            Ok(out)
        } else if prompt.contains("[y0]") {
            // Critique stage.
            let mut points =
                vec!["1. Re-check the draft claim against the cited slices [y0].".to_string()];
            if let Some((label, _)) = text_slice {
                points.push(format!("2. Keep the wording aligned with [{label}]."));
            }
            if let Some((label, _)) = image_slice {
                points.push(format!(
                    "{}. Compare against the visual evidence [{label}].",
                    points.len() + 1
                ));
            }
            Ok(points.join("\n"))
        } else {
            // Initial stage.
            match text_slice {
                Some((label, content)) => Ok(format!(
                    "Drawing on [{}]: {}",
                    label,
                    first_sentence(content)
                )),
                None => Ok("The corpus offers no text evidence for this query.".to_string()),
            }
        }
    }
}

fn demo_image(params: &DemoParams) -> Result<Option<(ImageRef, Vec<u8>)>, String> {
    match params
        .image_seed
        .as_deref()
        .filter(|s| !s.trim().is_empty())
    {
        Some(seed) => {
            let bytes = seed_bytes(seed);
            let img =
                ImageRef::from_bytes("user-image", Source::User, 64, 64, &bytes, "demo://user")
                    .map_err(|e| e.to_string())?;
            Ok(Some((img, bytes)))
        }
        None => Ok(None),
    }
}

fn run_demo_inner(params_json: &str) -> Result<String, String> {
    let params: DemoParams = serde_json::from_str(params_json).map_err(|e| e.to_string())?;
    let idx = build_index(&params.corpus)?;
    let cfg = config_from(&params)?;
    let text_enc = ReferenceEmbedder::text(DIM);
    let image_enc = ReferenceEmbedder::image(DIM);
    let providers = ProviderSet {
        rewriter: None,
        text_embedder: &text_enc,
        image_embedder: &image_enc,
        generator: &TemplateGenerator,
        search: None,
        factual: &LexicalFactualScorer,
        coherence: &NegationCoherenceScorer,
    };
    let input = QueryInput {
        text: params.query.clone(),
        image: demo_image(&params)?,
    };
    let out = run_session(&input, &idx, &cfg, &providers).map_err(|e| e.to_string())?;
    let rtra = out.record_text().map_err(|e| e.to_string())?;
    serde_json::to_string(&serde_json::json!({
        "rtra": rtra,
        "record": out.record,
        "trace": out.trace,
        "reward": out.reward,
        "rewritten_query": out.rewrite.rewritten.text(),
        "bundle_violations": out.bundle_report.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
    }))
    .map_err(|e| e.to_string())
}

fn alpha_sweep_inner(params_json: &str, steps: usize) -> Result<String, String> {
    let params: DemoParams = serde_json::from_str(params_json).map_err(|e| e.to_string())?;
    let idx = build_index(&params.corpus)?;
    let text_enc = ReferenceEmbedder::text(DIM);
    let image_enc = ReferenceEmbedder::image(DIM);
    let steps = steps.clamp(2, 201);
    let mut alphas = Vec::with_capacity(steps);
    let mut sweeps: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut labels: Vec<String> = Vec::new();
    for i in 0..steps {
        let alpha = i as f64 / (steps - 1) as f64;
        let mut cfg = config_from(&params)?;
        cfg.alpha = alpha;
        let providers = ProviderSet {
            rewriter: None,
            text_embedder: &text_enc,
            image_embedder: &image_enc,
            generator: &TemplateGenerator,
            search: None,
            factual: &LexicalFactualScorer,
            coherence: &NegationCoherenceScorer,
        };
        let input = QueryInput {
            text: params.query.clone(),
            image: demo_image(&params)?,
        };
        let out = run_session(&input, &idx, &cfg, &providers).map_err(|e| e.to_string())?;
        let trace = out.trace.ok_or("session produced no trace")?;
        if labels.is_empty() {
            labels = trace.component_labels.clone();
        }
        alphas.push(alpha);
        sweeps.push(trace.weights);
    }
    serde_json::to_string(&serde_json::json!({
        "labels": labels,
        "alphas": alphas,
        "weights": sweeps,
    }))
    .map_err(|e| e.to_string())
}

fn score_text_inner(candidate: &str, references_json: &str) -> Result<String, String> {
    let references: Vec<String> =
        serde_json::from_str(references_json).map_err(|e| e.to_string())?;
    if references.is_empty() {
        return Err("at least one reference required".into());
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut bleus = Vec::new();
    for n in 1..=4 {
        bleus.push(bleu(&cand, &refs, n).map_err(|e| e.to_string())?);
    }
    let rouge = rouge_l_components(&cand, &refs);
    let em = references.iter().any(|r| exact_match(candidate, r, true));
    serde_json::to_string(&serde_json::json!({
        "bleu": bleus,
        "rouge_l": { "precision": rouge.precision, "recall": rouge.recall, "f": rouge.f_measure },
        "exact_match": em,
        "candidate_tokens": cand,
    }))
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run_demo(params_json: &str) -> Result<String, JsValue> {
    run_demo_inner(params_json).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn alpha_sweep(params_json: &str, steps: usize) -> Result<String, JsValue> {
    alpha_sweep_inner(params_json, steps).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn score_text(candidate: &str, references_json: &str) -> Result<String, JsValue> {
    score_text_inner(candidate, references_json).map_err(|e| JsValue::from_str(&e))
}
