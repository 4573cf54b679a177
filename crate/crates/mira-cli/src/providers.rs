//! Provider wiring: HTTP-backed implementations of the rewriter, embedder,
//! generator, judge, and search contracts, plus the factory that picks an
//! implementation per configured endpoint. Endpoint values accept three
//! schemes: `http(s)://...` for live providers, `fixture:<dir>` for the
//! digest-keyed file fixtures, and `script:<file>` for ordered scripted
//! responses (one response per `---`-separated block).

use anyhow::{anyhow, Context, Result};
use base64::Engine;
use mira_core::config::PipelineConfig;
use mira_core::domain::{ImageRef, Modality, Source};
use mira_core::encode::{
    EmbedContent, Embedder, EncodeError, EncoderKind, EncoderSpec, ReferenceEmbedder,
};
use mira_core::hash::query_digest;
use mira_core::rewrite::{RewriteError, Rewriter};
use mira_core::rtra::{FixtureGenerator, Generator, RtraError, ScriptedGenerator};
use mira_core::websearch::{
    CachedSearchProvider, FixtureSearchProvider, OnlineResult, SearchError, SearchProvider,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

const REWRITE_TIMEOUT: Duration = Duration::from_secs(10);
const EMBED_TIMEOUT: Duration = Duration::from_secs(30);
const GENERATE_TIMEOUT: Duration = Duration::from_secs(60);
const SEARCH_TIMEOUT: Duration = Duration::from_secs(10);
const MIN_SEARCH_INTERVAL: Duration = Duration::from_secs(1);

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

// ---------------------------------------------------------------- rewriter

pub struct HttpRewriter {
    url: String,
    agent: ureq::Agent,
}

impl HttpRewriter {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: agent(REWRITE_TIMEOUT),
        }
    }

    fn call(&self, text: &str) -> Result<String, RewriteError> {
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let reply: Reply = self
            .agent
            .post(&self.url)
            .send_json(serde_json::json!({ "text": text }))
            .map_err(|e| RewriteError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| RewriteError::Transport(format!("malformed rewrite body: {e}")))?;
        Ok(reply.text)
    }
}

impl Rewriter for HttpRewriter {
    fn rewrite(&self, text: &str) -> Result<String, RewriteError> {
        // One retry, then the caller's rule-based fallback takes over.
        match self.call(text) {
            Ok(t) => Ok(t),
            Err(_) => self.call(text),
        }
    }
}

/// Digest-keyed canned rewrites: `<dir>/<query_digest>.txt`.
pub struct FixtureRewriter {
    dir: PathBuf,
}

impl Rewriter for FixtureRewriter {
    fn rewrite(&self, text: &str) -> Result<String, RewriteError> {
        let path = self.dir.join(format!("{}.txt", query_digest(text)));
        std::fs::read_to_string(&path)
            .map(|s| s.trim_end_matches('\n').to_string())
            .map_err(|e| RewriteError::Transport(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------- embedder

pub struct HttpEmbedder {
    spec: EncoderSpec,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, modality: Modality, dim: usize) -> Self {
        Self {
            spec: EncoderSpec {
                modality,
                dim,
                endpoint: Some(url.into()),
                kind: EncoderKind::External,
            },
            agent: agent(EMBED_TIMEOUT),
        }
    }

    fn call(&self, body: &serde_json::Value) -> Result<Vec<f32>, EncodeError> {
        #[derive(Deserialize)]
        struct Reply {
            embedding: Vec<f32>,
        }
        let url = self
            .spec
            .endpoint
            .as_deref()
            .expect("http embedder has endpoint");
        let reply: Reply = self
            .agent
            .post(url)
            .send_json(body.clone())
            .map_err(|e| EncodeError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| EncodeError::Transport(format!("malformed embed body: {e}")))?;
        Ok(reply.embedding)
    }
}

impl Embedder for HttpEmbedder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn embed_raw(&self, content: &EmbedContent<'_>) -> Result<Vec<f32>, EncodeError> {
        let body = match content {
            EmbedContent::Text(text) => {
                serde_json::json!({ "modality": "text", "content": text })
            }
            EmbedContent::ImageBytes(bytes) => serde_json::json!({
                "modality": "image",
                "content": base64::engine::general_purpose::STANDARD.encode(bytes),
            }),
        };
        match self.call(&body) {
            Ok(v) => Ok(v),
            Err(EncodeError::Transport(_)) => self.call(&body),
            Err(e) => Err(e),
        }
    }
}

// --------------------------------------------------------------- generator

pub struct HttpGenerator {
    url: String,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: agent(GENERATE_TIMEOUT),
        }
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String, RtraError> {
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let encoded: Vec<String> = images
            .iter()
            .map(|b| base64::engine::general_purpose::STANDARD.encode(b))
            .collect();
        let reply: Reply = self
            .agent
            .post(&self.url)
            .send_json(serde_json::json!({ "prompt": prompt, "images": encoded }))
            .map_err(|e| RtraError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| RtraError::Transport(format!("malformed generate body: {e}")))?;
        Ok(reply.text)
    }
}

// ------------------------------------------------------------------ search

pub struct HttpSearchProvider {
    url: String,
    agent: ureq::Agent,
    last_call: Mutex<Option<Instant>>,
}

/// Wire shape of a search result; `image_url` becomes an [`ImageRef`]
/// with a digest over the URL (payload bytes stay remote).
#[derive(Deserialize)]
struct WireResult {
    title: String,
    #[serde(default)]
    paragraph: String,
    url: String,
    #[serde(default)]
    image_url: Option<String>,
}

impl HttpSearchProvider {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: agent(SEARCH_TIMEOUT),
            last_call: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last_call.lock().expect("rate limiter lock");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < MIN_SEARCH_INTERVAL {
                std::thread::sleep(MIN_SEARCH_INTERVAL - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl SearchProvider for HttpSearchProvider {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<OnlineResult>, SearchError> {
        self.throttle();
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let wire: Vec<WireResult> = self
            .agent
            .get(&self.url)
            .query("q", query)
            .call()
            .map_err(|e| SearchError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| SearchError::Malformed(e.to_string()))?;
        let mut out = Vec::new();
        for (i, w) in wire.into_iter().take(max_results).enumerate() {
            let image = match &w.image_url {
                Some(u) if !u.is_empty() => ImageRef::from_bytes(
                    format!("web-img-{i}"),
                    Source::Online,
                    1,
                    1,
                    u.as_bytes(),
                    u.clone(),
                )
                .ok(),
                _ => None,
            };
            out.push(OnlineResult {
                title: w.title,
                snippet_or_paragraph: w.paragraph,
                image,
                url: w.url,
                fetched_at: now,
            });
        }
        Ok(out)
    }
}

// ----------------------------------------------------------------- factory

/// Provider construction from config endpoints. Generators and rewriters
/// are built fresh per session so scripted fixtures replay identically
/// for every request.
pub struct ProviderFactory {
    cfg: PipelineConfig,
    cache_dir: PathBuf,
}

pub enum BuiltGenerator {
    Http(HttpGenerator),
    Fixture(FixtureGenerator),
    Scripted(ScriptedGenerator),
    Echo(mira_core::rtra::EchoGenerator),
}

impl BuiltGenerator {
    pub fn as_dyn(&self) -> &dyn Generator {
        match self {
            BuiltGenerator::Http(g) => g,
            BuiltGenerator::Fixture(g) => g,
            BuiltGenerator::Scripted(g) => g,
            BuiltGenerator::Echo(g) => g,
        }
    }
}

pub enum BuiltRewriter {
    Http(HttpRewriter),
    Fixture(FixtureRewriter),
}

impl BuiltRewriter {
    pub fn as_dyn(&self) -> &dyn Rewriter {
        match self {
            BuiltRewriter::Http(r) => r,
            BuiltRewriter::Fixture(r) => r,
        }
    }
}

pub enum BuiltSearch {
    Http(CachedSearchProvider<HttpSearchProvider>),
    Fixture(FixtureSearchProvider),
}

impl BuiltSearch {
    pub fn as_dyn(&self) -> &dyn SearchProvider {
        match self {
            BuiltSearch::Http(s) => s,
            BuiltSearch::Fixture(s) => s,
        }
    }
}

pub enum BuiltEmbedder {
    Http(HttpEmbedder),
    Reference(ReferenceEmbedder),
}

impl BuiltEmbedder {
    pub fn as_dyn(&self) -> &dyn Embedder {
        match self {
            BuiltEmbedder::Http(e) => e,
            BuiltEmbedder::Reference(e) => e,
        }
    }
}

fn fixture_dir(value: &str) -> Option<&Path> {
    value.strip_prefix("fixture:").map(Path::new)
}

fn script_file(value: &str) -> Option<&Path> {
    value.strip_prefix("script:").map(Path::new)
}

/// Split a script file into ordered responses. Blocks are separated by a
/// line holding only `---`; a block holding only `<FAIL>` injects a
/// transport failure.
fn load_script(path: &Path) -> Result<ScriptedGenerator> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading script {}", path.display()))?;
    let responses = text.split("\n---\n").map(|block| {
        let block = block.trim_end_matches('\n');
        if block.trim() == "<FAIL>" {
            mira_core::rtra::ScriptedResponse::Fail
        } else {
            mira_core::rtra::ScriptedResponse::Text(block.to_string())
        }
    });
    Ok(ScriptedGenerator::new(responses.collect::<Vec<_>>()))
}

impl ProviderFactory {
    pub fn new(cfg: PipelineConfig, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            cache_dir: cache_dir.into(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn rewriter(&self) -> Result<Option<BuiltRewriter>> {
        match self.cfg.endpoint("rewriter") {
            None => Ok(None),
            Some(v) if v.starts_with("http") => Ok(Some(BuiltRewriter::Http(HttpRewriter::new(v)))),
            Some(v) => {
                let dir = fixture_dir(v).ok_or_else(|| {
                    anyhow!("rewriter endpoint {v:?}: expected http(s)://, or fixture:<dir>")
                })?;
                Ok(Some(BuiltRewriter::Fixture(FixtureRewriter {
                    dir: dir.to_path_buf(),
                })))
            }
        }
    }

    pub fn text_embedder(&self) -> BuiltEmbedder {
        match self.cfg.endpoint("text_encoder") {
            Some(v) if v.starts_with("http") => {
                BuiltEmbedder::Http(HttpEmbedder::new(v, Modality::Text, self.cfg.embed_dim))
            }
            _ => BuiltEmbedder::Reference(ReferenceEmbedder::text(self.cfg.embed_dim)),
        }
    }

    pub fn image_embedder(&self) -> BuiltEmbedder {
        match self.cfg.endpoint("image_encoder") {
            Some(v) if v.starts_with("http") => {
                BuiltEmbedder::Http(HttpEmbedder::new(v, Modality::Image, self.cfg.embed_dim))
            }
            _ => BuiltEmbedder::Reference(ReferenceEmbedder::image(self.cfg.embed_dim)),
        }
    }

    pub fn generator(&self) -> Result<BuiltGenerator> {
        match self.cfg.endpoint("generator") {
            None => Ok(BuiltGenerator::Echo(mira_core::rtra::EchoGenerator)),
            Some(v) if v.starts_with("http") => Ok(BuiltGenerator::Http(HttpGenerator::new(v))),
            Some(v) => {
                if let Some(dir) = fixture_dir(v) {
                    Ok(BuiltGenerator::Fixture(
                        FixtureGenerator::from_dir(dir)
                            .with_context(|| format!("loading fixtures from {}", dir.display()))?,
                    ))
                } else if let Some(file) = script_file(v) {
                    Ok(BuiltGenerator::Scripted(load_script(file)?))
                } else {
                    Err(anyhow!(
                        "generator endpoint {v:?}: expected http(s)://, fixture:<dir>, or script:<file>"
                    ))
                }
            }
        }
    }

    /// The judge shares the generator wire contract.
    pub fn judge(&self) -> Result<Option<BuiltGenerator>> {
        match self.cfg.endpoint("judge") {
            None => Ok(None),
            Some(v) if v.starts_with("http") => {
                Ok(Some(BuiltGenerator::Http(HttpGenerator::new(v))))
            }
            Some(v) => {
                if let Some(dir) = fixture_dir(v) {
                    Ok(Some(BuiltGenerator::Fixture(FixtureGenerator::from_dir(
                        dir,
                    )?)))
                } else if let Some(file) = script_file(v) {
                    Ok(Some(BuiltGenerator::Scripted(load_script(file)?)))
                } else {
                    Err(anyhow!(
                        "judge endpoint {v:?}: expected http(s)://, fixture:<dir>, or script:<file>"
                    ))
                }
            }
        }
    }

    pub fn search(&self) -> Result<Option<BuiltSearch>> {
        if !self.cfg.online_enabled {
            return Ok(None);
        }
        match self.cfg.endpoint("search") {
            None => Ok(None),
            Some(v) if v.starts_with("http") => Ok(Some(BuiltSearch::Http(
                CachedSearchProvider::new(HttpSearchProvider::new(v), &self.cache_dir),
            ))),
            Some(v) => {
                let dir = fixture_dir(v).ok_or_else(|| {
                    anyhow!("search endpoint {v:?}: expected http(s):// or fixture:<dir>")
                })?;
                Ok(Some(BuiltSearch::Fixture(FixtureSearchProvider::new(dir))))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn spawn_search_stub() -> (String, Arc<AtomicUsize>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = server.server_addr().to_string();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_clone = Arc::clone(&hits);
        std::thread::spawn(move || {
            while let Ok(request) = server.recv() {
                hits_clone.fetch_add(1, Ordering::SeqCst);
                let body = r#"[{"title":"t","paragraph":"p","url":"https://u"}]"#;
                let _ = request.respond(tiny_http::Response::from_string(body));
            }
        });
        (format!("http://{addr}/search"), hits)
    }

    #[test]
    fn live_search_calls_are_rate_limited() {
        let (url, hits) = spawn_search_stub();
        let provider = HttpSearchProvider::new(url);
        let start = Instant::now();
        provider.search("first", 2).unwrap();
        provider.search("second", 2).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        assert!(
            start.elapsed() >= MIN_SEARCH_INTERVAL,
            "second call must wait out the interval, elapsed {:?}",
            start.elapsed()
        );
    }

    #[test]
    fn search_results_parse_image_urls() {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = server.server_addr().to_string();
        std::thread::spawn(move || {
            if let Ok(request) = server.recv() {
                let body = r#"[{"title":"with image","paragraph":"p","url":"https://u","image_url":"https://img/x.png"}]"#;
                let _ = request.respond(tiny_http::Response::from_string(body));
            }
        });
        let provider = HttpSearchProvider::new(format!("http://{addr}/s"));
        let results = provider.search("q", 5).unwrap();
        assert_eq!(results.len(), 1);
        let img = results[0].image.as_ref().unwrap();
        assert_eq!(img.payload_uri, "https://img/x.png");
        assert_eq!(img.source, Source::Online);
    }

    #[test]
    fn script_loader_splits_blocks_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(&path, "first reply\n---\n<FAIL>\n---\nthird reply\n").unwrap();
        let gen = load_script(&path).unwrap();
        assert_eq!(gen.generate("p", &[]).unwrap(), "first reply");
        assert!(gen.generate("p", &[]).is_err());
        assert_eq!(gen.generate("p", &[]).unwrap(), "third reply");
    }
}
