//! The retrieval orchestrator: scores offline and online candidates against
//! the query embeddings, merges, dedupes, and fills the structured bundle
//! slots. The full ranked pool is retained so the rearrange stage can swap
//! evidence without re-querying.

use crate::config::PipelineConfig;
use crate::domain::{Embedding, Modality, RetrievedEntry, Source};
use crate::encode::{embed_text, EmbedContent, Embedder, EncodeError};
use crate::hash::query_digest;
use crate::store::{StoreError, VectorIndex};
use crate::websearch::{search_online, SearchProvider};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("at least one query embedding must be present")]
    NoQueryEmbedding,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
}

/// Which modalities participate in retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMode {
    Both,
    TextOnly,
    VisionOnly,
}

/// Retrieval switches, derived from config plus per-run overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalPlan {
    pub k_text: usize,
    pub k_image: usize,
    pub use_offline: bool,
    pub use_online: bool,
    pub modality_mode: ModalityMode,
}

impl RetrievalPlan {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let modality_mode = if cfg.text_only {
            ModalityMode::TextOnly
        } else if cfg.vision_only {
            ModalityMode::VisionOnly
        } else {
            ModalityMode::Both
        };
        Self {
            k_text: cfg.k_text,
            k_image: cfg.k_image,
            use_offline: cfg.offline_enabled,
            use_online: cfg.online_enabled,
            modality_mode,
        }
    }
}

/// Everything the online pathway needs: the provider, the (rewritten) query
/// text it searches with, and embedders for scoring its results.
pub struct OnlineContext<'a> {
    pub provider: &'a dyn SearchProvider,
    pub query_text: &'a str,
    pub text_embedder: &'a dyn Embedder,
    pub image_embedder: &'a dyn Embedder,
}

/// Retrieval output: bundle slot fills plus the full ranked candidate pool
/// and any degradation/mode flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub texts: Vec<RetrievedEntry>,
    pub images: Vec<RetrievedEntry>,
    pub api_text: Option<RetrievedEntry>,
    pub pool: Vec<RetrievedEntry>,
    pub flags: Vec<String>,
}

fn sort_candidates(entries: &mut [RetrievedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Drop duplicate content, keeping the higher-scored entry per digest.
pub fn dedupe(mut candidates: Vec<RetrievedEntry>) -> Vec<RetrievedEntry> {
    sort_candidates(&mut candidates);
    let mut seen = std::collections::HashSet::new();
    candidates.retain(|c| seen.insert(c.content_digest()));
    candidates
}

struct QuerySide<'a> {
    e_text: Option<&'a Embedding>,
    e_image: Option<&'a Embedding>,
    mode: ModalityMode,
}

impl<'a> QuerySide<'a> {
    /// Query embedding used to score a candidate of the given modality.
    /// Cross-modal fallback: image candidates score against the text
    /// embedding when no image query exists, and vice versa.
    fn for_candidate(&self, modality: Modality) -> Option<&'a Embedding> {
        match self.mode {
            ModalityMode::VisionOnly => self.e_image.or(self.e_text),
            ModalityMode::TextOnly => self.e_text.or(self.e_image),
            ModalityMode::Both => match modality {
                Modality::Image => self.e_image.or(self.e_text),
                _ => self.e_text.or(self.e_image),
            },
        }
    }
}

fn offline_candidates(
    idx: &VectorIndex,
    side: &QuerySide<'_>,
    plan: &RetrievalPlan,
) -> Result<Vec<RetrievedEntry>, RetrieveError> {
    let mut out = Vec::new();
    // Text candidates are retrieved in every mode; vision_only just scores
    // them by the image embedding. Image candidates are skipped in text_only.
    if let Some(q) = side.for_candidate(Modality::Text) {
        for hit in idx.search(q, idx.len(), Some(Modality::Text))? {
            let rec = hit.record;
            out.push(RetrievedEntry::text_entry(
                rec.id.clone(),
                Source::OfflineIndex,
                rec.content_text().unwrap_or_default(),
                rec.embedding.clone(),
                hit.score,
            )?);
        }
    }
    if plan.modality_mode != ModalityMode::TextOnly {
        if let Some(q) = side.for_candidate(Modality::Image) {
            for hit in idx.search(q, idx.len(), Some(Modality::Image))? {
                let rec = hit.record;
                let img = rec.image().cloned().ok_or_else(|| {
                    StoreError::Corrupt(format!("image record {} has no image payload", rec.id))
                })?;
                out.push(RetrievedEntry::image_entry(
                    rec.id.clone(),
                    Source::OfflineIndex,
                    img,
                    rec.embedding.clone(),
                    hit.score,
                )?);
            }
        }
    }
    Ok(out)
}

fn online_candidates(
    online: &OnlineContext<'_>,
    side: &QuerySide<'_>,
    plan: &RetrievalPlan,
    flags: &mut Vec<String>,
) -> Result<Vec<RetrievedEntry>, RetrieveError> {
    let max_results = plan.k_text + plan.k_image;
    let outcome = search_online(online.query_text, max_results, online.provider);
    if let Some(d) = outcome.degraded {
        flags.push(d);
    }
    let digest = query_digest(online.query_text);
    let mut out = Vec::new();
    for (i, r) in outcome.results.iter().enumerate() {
        if r.is_text() {
            if let Some(q) = side.for_candidate(Modality::Text) {
                let e = embed_text(&r.snippet_or_paragraph, online.text_embedder)?;
                let score = q.dot(&e)?;
                out.push(RetrievedEntry::text_entry(
                    format!("online:{digest}:{i}"),
                    Source::Online,
                    r.snippet_or_paragraph.clone(),
                    e,
                    score,
                )?);
            }
        }
        if plan.modality_mode == ModalityMode::TextOnly {
            continue;
        }
        if let Some(img) = &r.image {
            if let Some(q) = side.for_candidate(Modality::Image) {
                // Online images arrive without payload bytes; embed their
                // caption/url bytes as a deterministic proxy.
                let proxy = format!("{} {}", r.title, img.payload_uri);
                let raw = online
                    .image_embedder
                    .embed_raw(&EmbedContent::ImageBytes(proxy.as_bytes()))?;
                let e = Embedding::normalized(Modality::Image, raw)?;
                let score = q.dot(&e)?;
                out.push(RetrievedEntry::image_entry(
                    format!("online:{digest}:{i}:img"),
                    Source::Online,
                    img.clone(),
                    e,
                    score,
                )?);
            }
        }
    }
    Ok(out)
}

/// Retrieve and assemble candidates from the offline index and the online
/// provider. Offline and online run concurrently where threads exist; the
/// merge is deterministic either way because the sort key is (score, id).
pub fn retrieve(
    e_text: Option<&Embedding>,
    e_image: Option<&Embedding>,
    idx: &VectorIndex,
    online: Option<&OnlineContext<'_>>,
    plan: &RetrievalPlan,
) -> Result<RetrievalOutcome, RetrieveError> {
    if e_text.is_none() && e_image.is_none() {
        return Err(RetrieveError::NoQueryEmbedding);
    }
    let side = QuerySide {
        e_text,
        e_image,
        mode: plan.modality_mode,
    };
    let mut flags = Vec::new();
    match plan.modality_mode {
        ModalityMode::TextOnly => flags.push("text_only".into()),
        ModalityMode::VisionOnly => {
            flags.push("vision_only".into());
            if e_image.is_none() {
                flags.push("vision_only_without_image_embedding".into());
            }
        }
        ModalityMode::Both => {}
    }
    if !plan.use_online {
        flags.push("offline_only".into());
    }
    if !plan.use_offline {
        flags.push("online_only".into());
    }

    let run_offline = plan.use_offline;
    let run_online = plan.use_online && online.is_some();

    let (offline_res, online_res) = run_both(
        || {
            if run_offline {
                offline_candidates(idx, &side, plan)
            } else {
                Ok(Vec::new())
            }
        },
        || {
            let mut online_flags = Vec::new();
            let res = if run_online {
                online_candidates(online.unwrap(), &side, plan, &mut online_flags)
            } else {
                Ok(Vec::new())
            };
            (res, online_flags)
        },
    );
    let offline_entries = offline_res?;
    let (online_result, online_flags) = online_res;
    let online_entries = online_result?;
    flags.extend(online_flags);

    let mut all = offline_entries;
    all.extend(online_entries);
    let pool = dedupe(all);

    // The best online text becomes the bundle's api slot and is excluded
    // from the text-chunk slots so the bundle never repeats content.
    let api_text = pool
        .iter()
        .find(|c| c.modality == Modality::Text && c.source == Source::Online)
        .cloned();
    let api_digest = api_text.as_ref().map(|a| a.content_digest());

    let texts: Vec<RetrievedEntry> = pool
        .iter()
        .filter(|c| c.modality == Modality::Text)
        .filter(|c| Some(c.content_digest()) != api_digest)
        .take(plan.k_text)
        .cloned()
        .collect();

    // Image slots hold offline images only; online images stay pool-only.
    let images: Vec<RetrievedEntry> = if plan.modality_mode == ModalityMode::TextOnly {
        Vec::new()
    } else {
        pool.iter()
            .filter(|c| c.modality == Modality::Image && c.source == Source::OfflineIndex)
            .take(plan.k_image)
            .cloned()
            .collect()
    };

    if texts.is_empty() && images.is_empty() && api_text.is_none() {
        flags.push("no external context".into());
    }

    Ok(RetrievalOutcome {
        texts,
        images,
        api_text,
        pool,
        flags,
    })
}

#[cfg(not(target_arch = "wasm32"))]
fn run_both<A, B>(a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B)
where
    A: Send,
    B: Send,
{
    std::thread::scope(|s| {
        let hb = s.spawn(b);
        let ra = a();
        let rb = hb.join().expect("online retrieval thread panicked");
        (ra, rb)
    })
}

#[cfg(target_arch = "wasm32")]
fn run_both<A, B>(a: impl FnOnce() -> A, b: impl FnOnce() -> B) -> (A, B) {
    (a(), b())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ImageRef;
    use crate::encode::ReferenceEmbedder;
    use crate::store::{IndexRecord, RecordPayload};
    use crate::websearch::{OnlineResult, StaticSearchProvider, TimeoutSearchProvider};
    use std::collections::BTreeMap;

    const DIM: usize = 64;

    fn text_embedder() -> ReferenceEmbedder {
        ReferenceEmbedder::text(DIM)
    }

    fn image_embedder() -> ReferenceEmbedder {
        ReferenceEmbedder::image(DIM)
    }

    fn text_record(id: &str, content: &str) -> IndexRecord {
        IndexRecord {
            id: id.into(),
            modality: Modality::Text,
            embedding: embed_text(content, &text_embedder()).unwrap(),
            payload: RecordPayload::Text(content.into()),
            metadata: BTreeMap::new(),
        }
    }

    fn image_record(id: &str, bytes: &[u8]) -> IndexRecord {
        let img =
            ImageRef::from_bytes(id, Source::OfflineIndex, 8, 8, bytes, format!("mem://{id}"))
                .unwrap();
        let raw = image_embedder()
            .embed_raw(&EmbedContent::ImageBytes(bytes))
            .unwrap();
        IndexRecord {
            id: id.into(),
            modality: Modality::Image,
            embedding: Embedding::normalized(Modality::Image, raw).unwrap(),
            payload: RecordPayload::Image(img),
            metadata: BTreeMap::new(),
        }
    }

    fn plan() -> RetrievalPlan {
        RetrievalPlan {
            k_text: 3,
            k_image: 2,
            use_offline: true,
            use_online: false,
            modality_mode: ModalityMode::Both,
        }
    }

    fn query_emb(text: &str) -> Embedding {
        embed_text(text, &text_embedder()).unwrap()
    }

    #[test]
    fn empty_index_no_online_flags_no_context() {
        let idx = VectorIndex::new(DIM);
        let q = query_emb("anything");
        let out = retrieve(Some(&q), None, &idx, None, &plan()).unwrap();
        assert!(out.texts.is_empty());
        assert!(out.images.is_empty());
        assert!(out.api_text.is_none());
        assert!(out.flags.iter().any(|f| f == "no external context"));
    }

    #[test]
    fn exact_duplicate_ranks_first_with_score_one() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("a", "pulmonary edema with effusion"))
            .unwrap();
        idx.add(text_record("b", "unrelated cardiology note"))
            .unwrap();
        let q = query_emb("pulmonary edema with effusion");
        let out = retrieve(Some(&q), None, &idx, None, &plan()).unwrap();
        assert_eq!(out.texts[0].id, "a");
        assert!((out.texts[0].score - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn matches_brute_force_ranking() {
        let mut idx = VectorIndex::new(DIM);
        for i in 0..20 {
            idx.add(text_record(
                &format!("t{i:02}"),
                &format!("text chunk number {i} about finding {}", i % 7),
            ))
            .unwrap();
        }
        for i in 0..10 {
            let bytes: Vec<u8> = (0..200)
                .map(|b| (b as u8).wrapping_mul(i as u8 + 1))
                .collect();
            idx.add(image_record(&format!("i{i:02}"), &bytes)).unwrap();
        }
        let q_t = query_emb("text chunk about finding 3");
        let raw = image_embedder()
            .embed_raw(&EmbedContent::ImageBytes(&[9u8; 100]))
            .unwrap();
        let q_i = Embedding::normalized(Modality::Image, raw).unwrap();

        let out = retrieve(Some(&q_t), Some(&q_i), &idx, None, &plan()).unwrap();

        // Exhaustive oracle over every record with independent dot products.
        let mut oracle_t: Vec<(String, f64)> = idx
            .records()
            .iter()
            .filter(|r| r.modality == Modality::Text)
            .map(|r| {
                let d: f64 = r
                    .embedding
                    .values()
                    .iter()
                    .zip(q_t.values())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (r.id.clone(), d)
            })
            .collect();
        oracle_t.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let expect_t: Vec<String> = oracle_t.iter().take(3).map(|(id, _)| id.clone()).collect();
        let got_t: Vec<String> = out.texts.iter().map(|e| e.id.clone()).collect();
        assert_eq!(got_t, expect_t);

        let mut oracle_i: Vec<(String, f64)> = idx
            .records()
            .iter()
            .filter(|r| r.modality == Modality::Image)
            .map(|r| {
                let d: f64 = r
                    .embedding
                    .values()
                    .iter()
                    .zip(q_i.values())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (r.id.clone(), d)
            })
            .collect();
        oracle_i.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let expect_i: Vec<String> = oracle_i.iter().take(2).map(|(id, _)| id.clone()).collect();
        let got_i: Vec<String> = out.images.iter().map(|e| e.id.clone()).collect();
        assert_eq!(got_i, expect_i);
    }

    #[test]
    fn dedupe_keeps_highest_scored() {
        let e = query_emb("shared");
        let mk = |id: &str, score: f64| {
            RetrievedEntry::text_entry(id, Source::OfflineIndex, "same content", e.clone(), score)
                .unwrap()
        };
        let out = dedupe(vec![mk("c", 0.7), mk("a", 0.9), mk("b", 0.8)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "a");
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn dedupe_no_duplicates_is_identity_up_to_order() {
        let mk = |id: &str, content: &str, score: f64| {
            RetrievedEntry::text_entry(id, Source::OfflineIndex, content, query_emb(content), score)
                .unwrap()
        };
        let input = vec![mk("a", "one", 0.5), mk("b", "two", 0.9)];
        let out = dedupe(input.clone());
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].id, "b");
        assert_eq!(out[1].id, "a");
    }

    #[test]
    fn online_text_becomes_api_slot_and_is_not_a_text_slot() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("off1", "offline chunk one")).unwrap();
        let provider = StaticSearchProvider {
            results: vec![OnlineResult {
                title: "web".into(),
                snippet_or_paragraph: "a fresh online paragraph".into(),
                image: None,
                url: "https://example".into(),
                fetched_at: 0,
            }],
        };
        let te = text_embedder();
        let ie = image_embedder();
        let ctx = OnlineContext {
            provider: &provider,
            query_text: "fresh paragraph",
            text_embedder: &te,
            image_embedder: &ie,
        };
        let q = query_emb("fresh paragraph");
        let mut p = plan();
        p.use_online = true;
        let out = retrieve(Some(&q), None, &idx, Some(&ctx), &p).unwrap();
        let api = out.api_text.expect("api slot filled");
        assert_eq!(api.source, Source::Online);
        assert!(out
            .texts
            .iter()
            .all(|t| t.content_digest() != api.content_digest()));
        // Pool still contains the api entry for the rearrange stage.
        assert!(out.pool.iter().any(|c| c.id == api.id));
    }

    #[test]
    fn online_failure_degrades_with_flag() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("off1", "offline chunk")).unwrap();
        let te = text_embedder();
        let ie = image_embedder();
        let ctx = OnlineContext {
            provider: &TimeoutSearchProvider,
            query_text: "q",
            text_embedder: &te,
            image_embedder: &ie,
        };
        let q = query_emb("offline chunk");
        let mut p = plan();
        p.use_online = true;
        let out = retrieve(Some(&q), None, &idx, Some(&ctx), &p).unwrap();
        assert!(out.flags.iter().any(|f| f.contains("degraded")));
        assert_eq!(out.texts.len(), 1);
    }

    #[test]
    fn use_online_false_equals_offline_only() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("a", "alpha chunk")).unwrap();
        idx.add(text_record("b", "beta chunk")).unwrap();
        let provider = StaticSearchProvider {
            results: vec![OnlineResult {
                title: "noise".into(),
                snippet_or_paragraph: "should never appear".into(),
                image: None,
                url: "https://x".into(),
                fetched_at: 0,
            }],
        };
        let te = text_embedder();
        let ie = image_embedder();
        let ctx = OnlineContext {
            provider: &provider,
            query_text: "alpha",
            text_embedder: &te,
            image_embedder: &ie,
        };
        let q = query_emb("alpha chunk");
        let p_off = plan();
        let with_ctx = retrieve(Some(&q), None, &idx, Some(&ctx), &p_off).unwrap();
        let without_ctx = retrieve(Some(&q), None, &idx, None, &p_off).unwrap();
        assert_eq!(with_ctx.texts, without_ctx.texts);
        assert_eq!(with_ctx.api_text, None);
    }

    #[test]
    fn text_only_mode_produces_zero_images() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("t", "a text")).unwrap();
        idx.add(image_record("i", &[5u8; 128])).unwrap();
        let q = query_emb("a text");
        let mut p = plan();
        p.modality_mode = ModalityMode::TextOnly;
        let out = retrieve(Some(&q), None, &idx, None, &p).unwrap();
        assert!(out.images.is_empty());
        assert!(out.pool.iter().all(|c| c.modality == Modality::Text));
        assert!(out.flags.iter().any(|f| f == "text_only"));
    }

    #[test]
    fn vision_only_ranks_texts_by_image_embedding() {
        let mut idx = VectorIndex::new(DIM);
        idx.add(text_record("t1", "first chunk")).unwrap();
        idx.add(text_record("t2", "second chunk")).unwrap();
        let raw = image_embedder()
            .embed_raw(&EmbedContent::ImageBytes(&[1u8; 64]))
            .unwrap();
        let q_i = Embedding::normalized(Modality::Image, raw).unwrap();
        let q_t = query_emb("first chunk");
        let mut p = plan();
        p.modality_mode = ModalityMode::VisionOnly;
        let out = retrieve(Some(&q_t), Some(&q_i), &idx, None, &p).unwrap();
        // Scores must come from q_i, not q_t: the self-match score of 1.0
        // that q_t would give t1 must not appear.
        assert!(out.texts.iter().all(|t| (t.score - 1.0).abs() > 1e-6));
        assert!(out.flags.iter().any(|f| f == "vision_only"));
    }

    #[test]
    fn both_embeddings_absent_is_an_error() {
        let idx = VectorIndex::new(DIM);
        assert!(matches!(
            retrieve(None, None, &idx, None, &plan()),
            Err(RetrieveError::NoQueryEmbedding)
        ));
    }
}
