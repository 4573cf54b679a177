//! HTTP service: query sessions over multipart, health, index writes, and
//! attention-trace lookup. The index sits behind an RwLock (many readers
//! or one writer); each query builds fresh providers so scripted fixtures
//! replay identically per request.

use crate::providers::ProviderFactory;
use anyhow::{anyhow, Result};
use base64::Engine;
use mira_core::domain::{ImageRef, Modality, Source};
use mira_core::encode::{embed_text, EmbedContent};
use mira_core::fusion::AttentionTrace;
use mira_core::hash::fnv1a64;
use mira_core::pipeline::{run_session, ProviderSet, QueryInput, SessionOutput};
use mira_core::rtra::{LexicalFactualScorer, NegationCoherenceScorer};
use mira_core::store::{IndexRecord, RecordPayload, VectorIndex};
use serde::Deserialize;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use tiny_http::{Header, Response, Server};

pub struct ServerState {
    pub index: RwLock<VectorIndex>,
    pub traces: RwLock<HashMap<String, AttentionTrace>>,
    pub factory: ProviderFactory,
    counter: AtomicU64,
    seed: u64,
}

impl ServerState {
    /// The seed salts query ids; session content stays deterministic from
    /// inputs and providers alone.
    pub fn with_seed(index: VectorIndex, factory: ProviderFactory, seed: u64) -> Self {
        Self {
            index: RwLock::new(index),
            traces: RwLock::new(HashMap::new()),
            factory,
            counter: AtomicU64::new(0),
            seed,
        }
    }

    fn next_query_id(&self, text: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let salted = fnv1a64(text.as_bytes()) ^ self.seed;
        format!("{:012x}-{n}", salted & 0xffff_ffff_ffff)
    }
}

/// Run a session against the shared state. Used by the HTTP handler; the
/// repl reuses it for in-process serving.
pub fn state_query(state: &ServerState, input: &QueryInput) -> Result<(String, SessionOutput)> {
    let factory = &state.factory;
    let rewriter = factory.rewriter()?;
    let text_embedder = factory.text_embedder();
    let image_embedder = factory.image_embedder();
    let generator = factory.generator()?;
    let search = factory.search()?;
    let providers = ProviderSet {
        rewriter: rewriter.as_ref().map(|r| r.as_dyn()),
        text_embedder: text_embedder.as_dyn(),
        image_embedder: image_embedder.as_dyn(),
        generator: generator.as_dyn(),
        search: search.as_ref().map(|s| s.as_dyn()),
        factual: &LexicalFactualScorer,
        coherence: &NegationCoherenceScorer,
    };
    let idx = state.index.read().expect("index lock");
    let out = run_session(input, &idx, factory.config(), &providers)?;
    drop(idx);
    let query_id = state.next_query_id(&input.text);
    if let Some(trace) = &out.trace {
        state
            .traces
            .write()
            .expect("trace lock")
            .insert(query_id.clone(), trace.clone());
    }
    Ok((query_id, out))
}

fn json_response(status: u32, body: serde_json::Value) -> Response<std::io::Cursor<Vec<u8>>> {
    let data = body.to_string().into_bytes();
    Response::from_data(data)
        .with_status_code(status as u16)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn handle_query(
    state: &ServerState,
    request: &mut tiny_http::Request,
) -> Response<std::io::Cursor<Vec<u8>>> {
    let content_type = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Content-Type"))
        .map(|h| h.value.as_str().to_string())
        .unwrap_or_default();
    let mut body = Vec::new();
    if request.as_reader().read_to_end(&mut body).is_err() {
        return json_response(400, serde_json::json!({"error": "unreadable body"}));
    }
    let boundary = match crate::multipart::boundary_from_content_type(&content_type) {
        Ok(b) => b,
        Err(e) => return json_response(400, serde_json::json!({"error": e.to_string()})),
    };
    let parts = match crate::multipart::parse_multipart(&body, &boundary) {
        Ok(p) => p,
        Err(e) => return json_response(400, serde_json::json!({"error": e.to_string()})),
    };
    let mut text: Option<String> = None;
    let mut image: Option<(String, Vec<u8>)> = None;
    for part in parts {
        match part.name.as_str() {
            "text" => text = Some(String::from_utf8_lossy(&part.data).to_string()),
            "image" => {
                let name = part.filename.unwrap_or_else(|| "upload".into());
                image = Some((name, part.data));
            }
            _ => {}
        }
    }
    let Some(text) = text.filter(|t| !t.trim().is_empty()) else {
        return json_response(400, serde_json::json!({"error": "missing text field"}));
    };
    let image_input = image.and_then(|(name, bytes)| {
        let id = std::path::Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "upload".into());
        // Dimensions are provider-side; a 1x1 placeholder satisfies the
        // reference contract.
        ImageRef::from_bytes(
            id,
            Source::User,
            1,
            1,
            &bytes,
            format!("multipart://{name}"),
        )
        .ok()
        .map(|r| (r, bytes))
    });
    let input = QueryInput {
        text,
        image: image_input,
    };
    match state_query(state, &input) {
        Ok((query_id, out)) => {
            if out
                .record
                .degraded_flags
                .iter()
                .any(|f| f == "initial_generation_failed")
            {
                return json_response(
                    503,
                    serde_json::json!({
                        "error": "provider degraded beyond policy",
                        "detail": out.record.degraded_flags,
                        "query_id": query_id,
                    }),
                );
            }
            let rtra = match out.record_text() {
                Ok(t) => t,
                Err(e) => return json_response(500, serde_json::json!({"error": e.to_string()})),
            };
            json_response(
                200,
                serde_json::json!({
                    "query_id": query_id,
                    "record": out.record,
                    "rtra": rtra,
                    "reward": out.reward,
                    "trace": out.trace,
                    "rewrite_provider": format!("{:?}", out.rewrite.provider_used),
                }),
            )
        }
        Err(e) => json_response(500, serde_json::json!({"error": e.to_string()})),
    }
}

#[derive(Deserialize)]
struct AddRecordBody {
    id: String,
    modality: String,
    content: String,
    #[serde(default)]
    metadata: std::collections::BTreeMap<String, String>,
}

fn handle_index_add(
    state: &ServerState,
    request: &mut tiny_http::Request,
) -> Response<std::io::Cursor<Vec<u8>>> {
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        return json_response(400, serde_json::json!({"error": "unreadable body"}));
    }
    let parsed: AddRecordBody = match serde_json::from_str(&body) {
        Ok(p) => p,
        Err(e) => {
            return json_response(400, serde_json::json!({"error": format!("bad json: {e}")}))
        }
    };
    let result = (|| -> Result<usize> {
        let record = match parsed.modality.as_str() {
            "text" => {
                let embedder = state.factory.text_embedder();
                IndexRecord {
                    id: parsed.id.clone(),
                    modality: Modality::Text,
                    embedding: embed_text(&parsed.content, embedder.as_dyn())?,
                    payload: RecordPayload::Text(parsed.content.clone()),
                    metadata: parsed.metadata.clone(),
                }
            }
            "image" => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&parsed.content)
                    .map_err(|e| anyhow!("image content must be base64: {e}"))?;
                let img = ImageRef::from_bytes(
                    parsed.id.clone(),
                    Source::OfflineIndex,
                    1,
                    1,
                    &bytes,
                    format!("api://{}", parsed.id),
                )?;
                let embedder = state.factory.image_embedder();
                let raw = embedder
                    .as_dyn()
                    .embed_raw(&EmbedContent::ImageBytes(&bytes))?;
                IndexRecord {
                    id: parsed.id.clone(),
                    modality: Modality::Image,
                    embedding: mira_core::domain::Embedding::normalized(Modality::Image, raw)?,
                    payload: RecordPayload::Image(img),
                    metadata: parsed.metadata.clone(),
                }
            }
            other => return Err(anyhow!("modality must be text or image, got {other:?}")),
        };
        let mut idx = state.index.write().expect("index lock");
        idx.add(record)?;
        Ok(idx.len())
    })();
    match result {
        Ok(n) => json_response(
            200,
            serde_json::json!({"added": parsed.id, "index_records": n}),
        ),
        Err(e) => json_response(400, serde_json::json!({"error": e.to_string()})),
    }
}

fn handle(state: &ServerState, mut request: tiny_http::Request) {
    let method = request.method().to_string();
    let url = request.url().to_string();
    let response = match (method.as_str(), url.as_str()) {
        ("GET", "/v1/health") => {
            let n = state.index.read().expect("index lock").len();
            json_response(200, serde_json::json!({"status": "ok", "index_records": n}))
        }
        ("POST", "/v1/query") => handle_query(state, &mut request),
        ("POST", "/v1/index/records") => handle_index_add(state, &mut request),
        ("GET", path) if path.starts_with("/v1/trace/") => {
            let id = path.trim_start_matches("/v1/trace/");
            match state.traces.read().expect("trace lock").get(id) {
                Some(trace) => json_response(200, serde_json::json!(trace)),
                None => json_response(404, serde_json::json!({"error": "unknown query id"})),
            }
        }
        _ => json_response(404, serde_json::json!({"error": "no such endpoint"})),
    };
    let status = response.status_code().0;
    eprintln!("level=info event=http method={method} url={url} status={status}");
    let _ = request.respond(response);
}

/// Bind and serve until the process is interrupted. `workers` threads pull
/// from the shared listener so concurrent requests proceed in parallel.
pub fn serve(addr: &str, state: ServerState, workers: usize) -> Result<ServeHandle> {
    let server = Server::http(addr).map_err(|e| anyhow!("bind {addr}: {e}"))?;
    let local = server.server_addr().to_string();
    let server = Arc::new(server);
    let state = Arc::new(state);
    let mut handles = Vec::new();
    for _ in 0..workers.max(1) {
        let server = Arc::clone(&server);
        let state = Arc::clone(&state);
        handles.push(std::thread::spawn(move || {
            while let Ok(request) = server.recv() {
                handle(&state, request);
            }
        }));
    }
    drop(server);
    Ok(ServeHandle {
        addr: local,
        handles,
    })
}

pub struct ServeHandle {
    pub addr: String,
    handles: Vec<std::thread::JoinHandle<()>>,
}

impl ServeHandle {
    /// Block until the worker threads exit.
    pub fn join(self) {
        for h in self.handles {
            let _ = h.join();
        }
    }
}
