//! The rearrange -> initial -> rethink -> final generation cycle with
//! citation tracking, reward scoring, and the policy-gradient estimator.
//!
//! Generators sit behind a wire-level contract; deterministic stubs (echo,
//! scripted, digest-keyed fixture) make every stage testable offline. A
//! generator failure degrades a stage, never the session: rethink falls
//! back to a marker point and finalize falls back to the initial answer.

mod policy;
mod record;

pub use policy::{exact_gradient, expected_reward, reinforce_gradient, PolicyError, ToyPolicy};
pub use record::{
    parse_record, serialize_record, Citation, RecordError, RtraRecord, SelectedEvidence,
};

use crate::config::PipelineConfig;
use crate::domain::{Modality, Query, RetrievedEntry};
use crate::hash::fnv1a64;
use std::collections::HashMap;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RtraError {
    #[error("generator transport: {0}")]
    Transport(String),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("scorer returned {score} for {scorer}, outside [0, 1]")]
    ScorerOutOfRange { scorer: &'static str, score: f64 },
}

/// Wire contract for the generation model: prompt plus optional image
/// payloads in, text out.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String, RtraError>;
}

/// 16-hex digest of a prompt, the key for fixture generators.
pub fn prompt_digest(prompt: &str) -> String {
    format!("{:016x}", fnv1a64(prompt.as_bytes()))
}

/// Echoes a digest line of the prompt it was given. The simplest honest
/// generator: output depends on the full assembled prompt and nothing else.
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn generate(&self, prompt: &str, _images: &[Vec<u8>]) -> Result<String, RtraError> {
        Ok(format!("echo:{}", prompt_digest(prompt)))
    }
}

/// Replays a fixed script of responses in call order; `Fail` entries
/// simulate transport failures at exact stages.
pub enum ScriptedResponse {
    Text(String),
    Fail,
}

pub struct ScriptedGenerator {
    script: Mutex<std::collections::VecDeque<ScriptedResponse>>,
}

impl ScriptedGenerator {
    pub fn new(responses: impl IntoIterator<Item = ScriptedResponse>) -> Self {
        Self {
            script: Mutex::new(responses.into_iter().collect()),
        }
    }

    pub fn texts(responses: impl IntoIterator<Item = String>) -> Self {
        Self::new(responses.into_iter().map(ScriptedResponse::Text))
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, _prompt: &str, _images: &[Vec<u8>]) -> Result<String, RtraError> {
        match self.script.lock().expect("script lock").pop_front() {
            Some(ScriptedResponse::Text(t)) => Ok(t),
            Some(ScriptedResponse::Fail) => Err(RtraError::Transport("scripted failure".into())),
            None => Err(RtraError::Transport("script exhausted".into())),
        }
    }
}

/// Canned responses keyed by prompt digest.
pub struct FixtureGenerator {
    responses: HashMap<String, String>,
}

impl FixtureGenerator {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self { responses }
    }

    /// Load `<digest>.txt` files from a directory.
    pub fn from_dir(dir: &std::path::Path) -> std::io::Result<Self> {
        let mut responses = HashMap::new();
        if dir.exists() {
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "txt") {
                    if let Some(stem) = path.file_stem() {
                        responses.insert(
                            stem.to_string_lossy().to_string(),
                            std::fs::read_to_string(&path)?,
                        );
                    }
                }
            }
        }
        Ok(Self { responses })
    }
}

impl Generator for FixtureGenerator {
    fn generate(&self, prompt: &str, _images: &[Vec<u8>]) -> Result<String, RtraError> {
        let digest = prompt_digest(prompt);
        self.responses
            .get(&digest)
            .cloned()
            .ok_or_else(|| RtraError::Transport(format!("no fixture for prompt digest {digest}")))
    }
}

/// Always fails; exercises retry and fallback paths.
pub struct FailingGenerator;

impl Generator for FailingGenerator {
    fn generate(&self, _prompt: &str, _images: &[Vec<u8>]) -> Result<String, RtraError> {
        Err(RtraError::Transport("generator down".into()))
    }
}

/// A labeled evidence slice: the prompt-visible label plus the entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub label: String,
    pub entry: RetrievedEntry,
}

impl Evidence {
    pub fn to_selected(&self) -> SelectedEvidence {
        let digest = self.entry.content_digest();
        SelectedEvidence {
            label: self.label.clone(),
            digest: digest.chars().take(16).collect(),
        }
    }

    fn content_line(&self) -> String {
        match (&self.entry.content_text, &self.entry.image) {
            (Some(t), _) => t.replace('\n', " "),
            (None, Some(img)) => format!("(image {} from {})", img.id, img.payload_uri),
            (None, None) => String::new(),
        }
    }
}

/// Rearrange output: a labeled selection, or `<None>` when a modality is
/// entirely absent from the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub enum Rearranged {
    Selected {
        evidence: Vec<Evidence>,
        flags: Vec<String>,
    },
    None {
        reason: String,
    },
}

/// Filter the ranked candidate pool: keep entries scoring at or above the
/// threshold, then guarantee at least one text and one image slice by
/// back-filling the single best below-threshold candidate of a missing
/// modality. `<None>` only when the pool has no candidate of some modality
/// at all.
pub fn rearrange(pool: &[RetrievedEntry], threshold: f64) -> Rearranged {
    let mut sorted: Vec<&RetrievedEntry> = pool.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });

    let has_text = sorted.iter().any(|e| e.modality == Modality::Text);
    let has_image = sorted.iter().any(|e| e.modality == Modality::Image);
    if !has_text {
        return Rearranged::None {
            reason: "no text evidence in pool".into(),
        };
    }
    if !has_image {
        return Rearranged::None {
            reason: "no image evidence in pool".into(),
        };
    }

    let mut flags = Vec::new();
    let mut kept: Vec<&RetrievedEntry> = sorted
        .iter()
        .copied()
        .filter(|e| e.score >= threshold)
        .collect();

    for (modality, flag) in [
        (Modality::Text, "backfilled_text"),
        (Modality::Image, "backfilled_image"),
    ] {
        if !kept.iter().any(|e| e.modality == modality) {
            let best = sorted
                .iter()
                .copied()
                .find(|e| e.modality == modality)
                .expect("modality presence checked above");
            kept.push(best);
            flags.push(flag.to_string());
        }
    }

    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });

    let mut text_n = 0usize;
    let mut image_n = 0usize;
    let evidence = kept
        .into_iter()
        .map(|entry| {
            let label = match entry.modality {
                Modality::Image => {
                    image_n += 1;
                    format!("image_{image_n}")
                }
                _ => {
                    text_n += 1;
                    format!("text_{text_n}")
                }
            };
            Evidence {
                label,
                entry: entry.clone(),
            }
        })
        .collect();

    Rearranged::Selected { evidence, flags }
}

const SYSTEM_PREAMBLE: &str = "[system] Answer the medical query using only the evidence \
slices below. Cite slice labels in brackets, e.g. [text_1].";

/// Assemble the initial-generation prompt in the fixed slot order:
/// system preamble, original-image slot, evidence slices with labels
/// (the knowledge-selection winner marked `(primary)`), then the query.
pub fn initial_prompt(
    query: &Query,
    original_image_id: Option<&str>,
    evidence: &[Evidence],
    primary_label: Option<&str>,
) -> String {
    let mut p = String::new();
    p.push_str(SYSTEM_PREAMBLE);
    p.push('\n');
    p.push_str(&format!(
        "[image] {}\n",
        original_image_id.unwrap_or("none")
    ));
    for e in evidence {
        let marker = if Some(e.label.as_str()) == primary_label {
            " (primary)"
        } else {
            ""
        };
        p.push_str(&format!("[{}]{} {}\n", e.label, marker, e.content_line()));
    }
    p.push_str(&format!("[query] {}\n", query.text()));
    p
}

/// Prompt for the self-critique pass. Selected evidence carries its
/// citable labels; unselected pool entries follow as reference-only
/// context, mirroring reassessment against the wider knowledge base.
pub fn rethink_prompt(initial: &str, evidence: &[Evidence], pool: &[RetrievedEntry]) -> String {
    let mut p = String::new();
    p.push_str(
        "[system] Reassess the draft answer against the evidence. Emit numbered \
critique points; every point must cite [y0] or an evidence label.\n",
    );
    for e in evidence {
        p.push_str(&format!("[{}] {}\n", e.label, e.content_line()));
    }
    let selected_ids: std::collections::HashSet<&str> =
        evidence.iter().map(|e| e.entry.id.as_str()).collect();
    for (i, entry) in pool
        .iter()
        .filter(|c| !selected_ids.contains(c.id.as_str()))
        .take(4)
        .enumerate()
    {
        let line = match (&entry.content_text, &entry.image) {
            (Some(t), _) => t.replace('\n', " "),
            (None, Some(img)) => format!("(image {})", img.id),
            (None, None) => String::new(),
        };
        p.push_str(&format!("[pool_{}] {}\n", i + 1, line));
    }
    p.push_str(&format!("[y0] {}\n", initial.replace('\n', " ")));
    p
}

/// Prompt for the final refinement pass.
pub fn final_prompt(initial: &str, points: &[String], evidence: &[Evidence]) -> String {
    let mut p = String::new();
    p.push_str(
        "[system] Rewrite the draft into a final answer that addresses every \
critique point. Cite evidence labels in brackets.\n",
    );
    for e in evidence {
        p.push_str(&format!("[{}] {}\n", e.label, e.content_line()));
    }
    p.push_str(&format!("[y0] {}\n", initial.replace('\n', " ")));
    for (i, point) in points.iter().enumerate() {
        p.push_str(&format!(
            "[rethink {}] {}\n",
            i + 1,
            point.replace('\n', " ")
        ));
    }
    p
}

/// Generate the initial answer y0. One retry on transport failure, then
/// the error propagates so the caller can mark the record degraded.
pub fn generate_initial(
    query: &Query,
    original_image_id: Option<&str>,
    original_image_bytes: Option<&[u8]>,
    evidence: &[Evidence],
    primary_label: Option<&str>,
    generator: &dyn Generator,
) -> Result<String, RtraError> {
    if evidence.is_empty() {
        return Err(RtraError::Precondition(
            "generate_initial needs selected evidence",
        ));
    }
    let prompt = initial_prompt(query, original_image_id, evidence, primary_label);
    let images: Vec<Vec<u8>> = original_image_bytes
        .map(|b| b.to_vec())
        .into_iter()
        .collect();
    match generator.generate(&prompt, &images) {
        Ok(text) => Ok(text),
        Err(RtraError::Transport(_)) => generator.generate(&prompt, &images),
        Err(e) => Err(e),
    }
}

/// True when the text contains a bracketed citation of y0 or any evidence label.
fn has_citation_token(text: &str, evidence: &[Evidence]) -> bool {
    if text.contains("[y0]") {
        return true;
    }
    evidence
        .iter()
        .any(|e| text.contains(&format!("[{}]", e.label)))
}

/// Split generator output into ordered critique points: numbered lines
/// ("1. ..."), bulleted lines ("- ..."), or bare non-empty lines.
fn split_points(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            if line.is_empty() {
                return None;
            }
            if let Some((num, rest)) = line.split_once(". ") {
                if num.chars().all(|c| c.is_ascii_digit()) && !num.is_empty() {
                    return Some(rest.trim().to_string());
                }
            }
            if let Some(rest) = line.strip_prefix("- ") {
                return Some(rest.trim().to_string());
            }
            Some(line.to_string())
        })
        .collect()
}

pub const FALLBACK_POINT: &str = "no revision available";
pub const FLAG_RETHINK_FALLBACK: &str = "rethink_fallback";

/// The self-critique stage: returns ordered critique points, each citing
/// y0 or an evidence label. A failing or citation-less generator degrades
/// to the single fallback point plus a flag.
pub fn rethink(
    initial: &str,
    evidence: &[Evidence],
    pool: &[RetrievedEntry],
    generator: &dyn Generator,
) -> Result<(Vec<String>, Vec<String>), RtraError> {
    if initial.is_empty() {
        return Err(RtraError::Precondition(
            "rethink needs a non-empty initial answer",
        ));
    }
    let prompt = rethink_prompt(initial, evidence, pool);
    match generator.generate(&prompt, &[]) {
        Ok(text) => {
            let points: Vec<String> = split_points(&text)
                .into_iter()
                .filter(|p| has_citation_token(p, evidence))
                .collect();
            if points.is_empty() {
                Ok((
                    vec![FALLBACK_POINT.to_string()],
                    vec![FLAG_RETHINK_FALLBACK.to_string()],
                ))
            } else {
                Ok((points, Vec::new()))
            }
        }
        Err(RtraError::Transport(_)) => Ok((
            vec![FALLBACK_POINT.to_string()],
            vec![FLAG_RETHINK_FALLBACK.to_string()],
        )),
        Err(e) => Err(e),
    }
}

pub const FLAG_FINALIZE_FALLBACK: &str = "finalize_fallback";

/// Split text into sentences on terminal punctuation, keeping the
/// terminator with the sentence.
fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = current.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = current.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

/// Map claim spans (sentences) of the final answer to the evidence labels
/// they cite.
pub fn extract_citations(final_answer: &str, evidence: &[Evidence]) -> Vec<Citation> {
    let mut out = Vec::new();
    for sentence in sentences(final_answer) {
        for e in evidence {
            if sentence.contains(&format!("[{}]", e.label)) {
                out.push(Citation {
                    claim: sentence.clone(),
                    evidence: e.label.clone(),
                });
            }
        }
    }
    out
}

/// The refinement stage: produce y* with citations. Refinement must never
/// lose the initial answer, so any generator failure yields y* == y0 with
/// a flag.
pub fn finalize(
    initial: &str,
    points: &[String],
    evidence: &[Evidence],
    generator: &dyn Generator,
) -> Result<(String, Vec<Citation>, Vec<String>), RtraError> {
    if points.is_empty() {
        return Err(RtraError::Precondition("finalize needs critique points"));
    }
    let prompt = final_prompt(initial, points, evidence);
    let (final_answer, flags) = match generator.generate(&prompt, &[]) {
        Ok(text) if !text.trim().is_empty() => (text, Vec::new()),
        _ => (
            initial.to_string(),
            vec![FLAG_FINALIZE_FALLBACK.to_string()],
        ),
    };
    let citations = extract_citations(&final_answer, evidence);
    Ok((final_answer, citations, flags))
}

/// Reward weights for the factual/coherence balance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RewardWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, RtraError> {
        if lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 == 0.0 && lambda2 == 0.0) {
            return Err(RtraError::Precondition(
                "reward weights must be non-negative and not both zero",
            ));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, RtraError> {
        Self::new(cfg.lambda1, cfg.lambda2)
    }
}

/// Scores how well the trace/answer is grounded in the selected evidence.
pub trait FactualScorer: Send + Sync {
    fn factual_score(&self, trace: &[String], final_answer: &str, evidence: &[Evidence]) -> f64;
}

/// Scores internal consistency of the final answer against the trace.
pub trait CoherenceScorer: Send + Sync {
    fn coherence_score(&self, final_answer: &str, trace: &[String]) -> f64;
}

/// Linear reward: lambda1 * FactualScore + lambda2 * CoherenceScore.
/// Scorers must return values in [0, 1]; anything else is a contract error.
pub fn reward(
    trace: &[String],
    final_answer: &str,
    evidence: &[Evidence],
    weights: &RewardWeights,
    factual: &dyn FactualScorer,
    coherence: &dyn CoherenceScorer,
) -> Result<f64, RtraError> {
    let f = factual.factual_score(trace, final_answer, evidence);
    if !(0.0..=1.0).contains(&f) {
        return Err(RtraError::ScorerOutOfRange {
            scorer: "factual",
            score: f,
        });
    }
    let c = coherence.coherence_score(final_answer, trace);
    if !(0.0..=1.0).contains(&c) {
        return Err(RtraError::ScorerOutOfRange {
            scorer: "coherence",
            score: c,
        });
    }
    Ok(weights.lambda1 * f + weights.lambda2 * c)
}

fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 4)
        .map(|w| w.to_lowercase())
}

/// Reference factual scorer: the fraction of final-answer sentences that
/// contain at least one content word (length >= 4) appearing in the
/// selected evidence. A proxy for the provider-side judge.
pub struct LexicalFactualScorer;

impl FactualScorer for LexicalFactualScorer {
    fn factual_score(&self, _trace: &[String], final_answer: &str, evidence: &[Evidence]) -> f64 {
        let sents = sentences(final_answer);
        if sents.is_empty() {
            return 0.0;
        }
        let vocabulary: std::collections::HashSet<String> = evidence
            .iter()
            .flat_map(|e| {
                let text = match (&e.entry.content_text, &e.entry.image) {
                    (Some(t), _) => t.clone(),
                    (None, Some(img)) => img.id.clone(),
                    _ => String::new(),
                };
                content_words(&text).collect::<Vec<_>>()
            })
            .collect();
        let grounded = sents
            .iter()
            .filter(|s| content_words(s).any(|w| vocabulary.contains(&w)))
            .count();
        grounded as f64 / sents.len() as f64
    }
}

const NEGATIONS: [&str; 4] = ["not", "no", "never", "without"];

/// Reference coherence scorer: 1 minus the fraction of rethink points
/// lexically contradicted by the final answer, where "contradicted" means
/// the final answer negates a content word of the point that the point
/// itself does not negate.
pub struct NegationCoherenceScorer;

impl NegationCoherenceScorer {
    fn negated_words(text: &str) -> std::collections::HashSet<String> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let mut out = std::collections::HashSet::new();
        for w in tokens.windows(2) {
            if NEGATIONS.contains(&w[0].as_str()) && w[1].len() >= 4 {
                out.insert(w[1].clone());
            }
        }
        out
    }
}

impl CoherenceScorer for NegationCoherenceScorer {
    fn coherence_score(&self, final_answer: &str, trace: &[String]) -> f64 {
        if trace.is_empty() {
            return 0.0;
        }
        let final_negated = Self::negated_words(final_answer);
        let contradicted = trace
            .iter()
            .filter(|point| {
                let point_negated = Self::negated_words(point);
                content_words(point)
                    .any(|w| final_negated.contains(&w) && !point_negated.contains(&w))
            })
            .count();
        1.0 - contradicted as f64 / trace.len() as f64
    }
}

/// Fixed-value scorers for tests.
pub struct ConstScorer(pub f64);

impl FactualScorer for ConstScorer {
    fn factual_score(&self, _: &[String], _: &str, _: &[Evidence]) -> f64 {
        self.0
    }
}

impl CoherenceScorer for ConstScorer {
    fn coherence_score(&self, _: &str, _: &[String]) -> f64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ImageRef, Source};
    use crate::encode::{embed_image, embed_text, ReferenceEmbedder};

    fn text_entry(id: &str, content: &str, score: f64) -> RetrievedEntry {
        let enc = ReferenceEmbedder::text(16);
        RetrievedEntry::text_entry(
            id,
            Source::OfflineIndex,
            content,
            embed_text(content, &enc).unwrap(),
            score,
        )
        .unwrap()
    }

    fn image_entry(id: &str, score: f64) -> RetrievedEntry {
        let bytes = id.as_bytes().repeat(20);
        let img = ImageRef::from_bytes(id, Source::OfflineIndex, 4, 4, &bytes, "mem://").unwrap();
        let enc = ReferenceEmbedder::image(16);
        let e = embed_image(&img, &bytes, &enc).unwrap();
        RetrievedEntry::image_entry(id, Source::OfflineIndex, img, e, score).unwrap()
    }

    fn query() -> Query {
        Query::new("Is it a malignant lesion?").unwrap()
    }

    #[test]
    fn rearrange_keeps_both_above_threshold() {
        let pool = vec![
            text_entry("t", "granuloma evidence text", 0.9),
            image_entry("i", 0.8),
        ];
        match rearrange(&pool, 0.5) {
            Rearranged::Selected { evidence, flags } => {
                assert_eq!(evidence.len(), 2);
                assert!(flags.is_empty());
                assert_eq!(evidence[0].label, "text_1");
                assert_eq!(evidence[1].label, "image_1");
            }
            other => panic!("expected selection, got {other:?}"),
        }
    }

    #[test]
    fn rearrange_text_only_pool_is_none() {
        let pool = vec![text_entry("t1", "a", 0.9), text_entry("t2", "b", 0.8)];
        assert!(matches!(rearrange(&pool, 0.5), Rearranged::None { .. }));
    }

    #[test]
    fn rearrange_backfills_below_threshold_image() {
        let pool = vec![text_entry("t", "good text", 0.9), image_entry("i", 0.3)];
        match rearrange(&pool, 0.5) {
            Rearranged::Selected { evidence, flags } => {
                assert_eq!(evidence.len(), 2);
                assert!(flags.contains(&"backfilled_image".to_string()));
                assert!(evidence.iter().any(|e| e.label == "image_1"));
            }
            other => panic!("expected selection, got {other:?}"),
        }
    }

    #[test]
    fn rearrange_all_below_threshold_backfills_both() {
        let pool = vec![text_entry("t", "weak text", 0.1), image_entry("i", 0.2)];
        match rearrange(&pool, 0.5) {
            Rearranged::Selected { evidence, flags } => {
                assert_eq!(evidence.len(), 2);
                assert!(flags.contains(&"backfilled_text".to_string()));
                assert!(flags.contains(&"backfilled_image".to_string()));
            }
            other => panic!("expected selection, got {other:?}"),
        }
    }

    fn selected_evidence() -> Vec<Evidence> {
        match rearrange(
            &[
                text_entry("t", "granulomatous infection evidence", 0.9),
                image_entry("i", 0.8),
            ],
            0.5,
        ) {
            Rearranged::Selected { evidence, .. } => evidence,
            _ => unreachable!(),
        }
    }

    #[test]
    fn echo_generator_yields_prompt_digest_line() {
        let ev = selected_evidence();
        let y0 = generate_initial(&query(), None, None, &ev, None, &EchoGenerator).unwrap();
        let prompt = initial_prompt(&query(), None, &ev, None);
        assert_eq!(y0, format!("echo:{}", prompt_digest(&prompt)));
    }

    #[test]
    fn fixture_generator_keyed_on_prompt_digest() {
        let ev = selected_evidence();
        let prompt = initial_prompt(&query(), None, &ev, Some("text_1"));
        let canned = "The lesion is likely organizing pneumonia [text_1].";
        let gen = FixtureGenerator::new(
            [(prompt_digest(&prompt), canned.to_string())]
                .into_iter()
                .collect(),
        );
        let y0 = generate_initial(&query(), None, None, &ev, Some("text_1"), &gen).unwrap();
        assert_eq!(y0, canned);
    }

    #[test]
    fn initial_requires_evidence() {
        assert!(matches!(
            generate_initial(&query(), None, None, &[], None, &EchoGenerator),
            Err(RtraError::Precondition(_))
        ));
    }

    #[test]
    fn initial_retries_once_then_succeeds() {
        let ev = selected_evidence();
        let gen = ScriptedGenerator::new([
            ScriptedResponse::Fail,
            ScriptedResponse::Text("recovered answer".into()),
        ]);
        let y0 = generate_initial(&query(), None, None, &ev, None, &gen).unwrap();
        assert_eq!(y0, "recovered answer");
    }

    #[test]
    fn initial_fails_after_second_transport_error() {
        let ev = selected_evidence();
        assert!(matches!(
            generate_initial(&query(), None, None, &ev, None, &FailingGenerator),
            Err(RtraError::Transport(_))
        ));
    }

    #[test]
    fn rethink_parses_numbered_cited_points() {
        let ev = selected_evidence();
        let gen = ScriptedGenerator::texts([
            "1. Confirm the diagnosis matches [text_1].\n2. Check the scan [image_1].\n3. Soften the claim in [y0].".to_string(),
        ]);
        let (points, flags) = rethink("draft answer", &ev, &[], &gen).unwrap();
        assert_eq!(points.len(), 3);
        assert!(flags.is_empty());
        assert!(points[0].contains("[text_1]"));
    }

    #[test]
    fn rethink_without_citations_falls_back() {
        let ev = selected_evidence();
        let gen = ScriptedGenerator::texts(["no citations here at all".to_string()]);
        let (points, flags) = rethink("draft", &ev, &[], &gen).unwrap();
        assert_eq!(points, vec![FALLBACK_POINT.to_string()]);
        assert_eq!(flags, vec![FLAG_RETHINK_FALLBACK.to_string()]);
    }

    #[test]
    fn rethink_empty_initial_is_precondition() {
        let ev = selected_evidence();
        assert!(matches!(
            rethink("", &ev, &[], &EchoGenerator),
            Err(RtraError::Precondition(_))
        ));
    }

    #[test]
    fn finalize_fallback_preserves_initial() {
        let ev = selected_evidence();
        let (y_star, _, flags) = finalize(
            "the initial answer",
            &["a point [y0]".to_string()],
            &ev,
            &FailingGenerator,
        )
        .unwrap();
        assert_eq!(y_star, "the initial answer");
        assert_eq!(flags, vec![FLAG_FINALIZE_FALLBACK.to_string()]);
    }

    #[test]
    fn finalize_extracts_citations_per_sentence() {
        let ev = selected_evidence();
        let gen = ScriptedGenerator::texts([
            "The infection mimics cancer [text_1]. The scan shows pneumonia [image_1]. No citation here.".to_string(),
        ]);
        let (y_star, citations, flags) =
            finalize("draft", &["p [y0]".to_string()], &ev, &gen).unwrap();
        assert!(flags.is_empty());
        assert_eq!(citations.len(), 2);
        assert_eq!(citations[0].evidence, "text_1");
        assert!(citations[0].claim.contains("mimics cancer"));
        assert_eq!(citations[1].evidence, "image_1");
        assert!(!y_star.is_empty());
    }

    #[test]
    fn finalize_empty_critique_is_precondition() {
        let ev = selected_evidence();
        assert!(matches!(
            finalize("draft", &[], &ev, &EchoGenerator),
            Err(RtraError::Precondition(_))
        ));
    }

    #[test]
    fn reward_is_exactly_linear() {
        let ev = selected_evidence();
        let w = RewardWeights::new(1.0, 0.0).unwrap();
        let r = reward(&[], "y", &ev, &w, &ConstScorer(0.8), &ConstScorer(0.0)).unwrap();
        assert!((r - 0.8).abs() < 1e-12);

        let w = RewardWeights::new(0.7, 0.3).unwrap();
        let r = reward(&[], "y", &ev, &w, &ConstScorer(0.9), &ConstScorer(0.5)).unwrap();
        assert!((r - 0.78).abs() < 1e-12);

        let r = reward(&[], "y", &ev, &w, &ConstScorer(0.0), &ConstScorer(0.0)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn out_of_range_scorer_is_contract_error() {
        let ev = selected_evidence();
        let w = RewardWeights::new(0.7, 0.3).unwrap();
        assert!(matches!(
            reward(&[], "y", &ev, &w, &ConstScorer(1.2), &ConstScorer(0.5)),
            Err(RtraError::ScorerOutOfRange {
                scorer: "factual",
                ..
            })
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::new(0.0, 0.0).is_err());
        assert!(RewardWeights::new(-0.1, 0.5).is_err());
        assert!(RewardWeights::new(0.7, 0.3).is_ok());
    }

    #[test]
    fn lexical_factual_scorer_counts_grounded_sentences() {
        let ev = selected_evidence(); // evidence mentions "granulomatous infection evidence"
        let s = LexicalFactualScorer;
        let half = s.factual_score(
            &[],
            "The granulomatous finding is clear. Totally unrelated w.",
            &ev,
        );
        assert!((half - 0.5).abs() < 1e-9);
        assert_eq!(s.factual_score(&[], "", &ev), 0.0);
    }

    #[test]
    fn negation_coherence_detects_contradiction() {
        let s = NegationCoherenceScorer;
        let trace = vec![
            "the lesion shows malignancy markers [y0]".to_string(),
            "biopsy is recommended [text_1]".to_string(),
        ];
        // Final negates "malignancy", contradicting point 1 but not point 2.
        let score = s.coherence_score("There is not malignancy in this scan.", &trace);
        assert!((score - 0.5).abs() < 1e-9);
        // No negation: fully coherent.
        let score = s.coherence_score("There is malignancy.", &trace);
        assert!((score - 1.0).abs() < 1e-9);
    }
}
