//! Online retrieval: the search provider contract, a file-backed fixture
//! provider keyed by query digest, and a (query, day) cache layer so
//! repeated eval runs are reproducible. Provider failures never block the
//! pipeline; they degrade to an empty result set with a recorded flag.

use crate::domain::ImageRef;
use crate::hash::{fnv1a64, query_digest};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search transport: {0}")]
    Transport(String),
    #[error("search timed out after {0} ms")]
    Timeout(u64),
    #[error("search response malformed: {0}")]
    Malformed(String),
    #[error("search io: {0}")]
    Io(#[from] std::io::Error),
}

/// One online search result: a text paragraph and/or an image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineResult {
    pub title: String,
    pub snippet_or_paragraph: String,
    pub image: Option<ImageRef>,
    pub url: String,
    pub fetched_at: u64,
}

impl OnlineResult {
    /// True when this result carries usable paragraph text.
    pub fn is_text(&self) -> bool {
        !self.snippet_or_paragraph.trim().is_empty()
    }
}

/// Provider contract for live or fixture web search.
pub trait SearchProvider: Send + Sync {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<OnlineResult>, SearchError>;
}

/// Outcome of an online search pass: results plus an optional degradation
/// note when the provider failed and the pipeline proceeds offline-only.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub results: Vec<OnlineResult>,
    pub degraded: Option<String>,
}

/// Run the online stage. Never fails: transport problems become an empty
/// result list plus a degradation flag.
pub fn search_online(
    query: &str,
    max_results: usize,
    provider: &dyn SearchProvider,
) -> SearchOutcome {
    match provider.search(query, max_results) {
        Ok(mut results) => {
            results.truncate(max_results);
            for (i, r) in results.iter().enumerate() {
                if r.url.is_empty() {
                    return SearchOutcome {
                        results: Vec::new(),
                        degraded: Some(format!("online result {i} missing url")),
                    };
                }
            }
            SearchOutcome {
                results,
                degraded: None,
            }
        }
        Err(e) => SearchOutcome {
            results: Vec::new(),
            degraded: Some(format!("online search degraded: {e}")),
        },
    }
}

/// Fixture provider: reads canned responses from `<dir>/<digest>.response`
/// where digest is the 8-hex digest of the query string. Files hold a JSON
/// array of [`OnlineResult`]. Missing file means zero results.
pub struct FixtureSearchProvider {
    dir: PathBuf,
}

impl FixtureSearchProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Write a canned response for a query, for test setup.
    pub fn store_fixture(
        dir: impl AsRef<Path>,
        query: &str,
        results: &[OnlineResult],
    ) -> Result<PathBuf, SearchError> {
        let path = dir
            .as_ref()
            .join(format!("{}.response", query_digest(query)));
        let json = serde_json::to_string_pretty(results)
            .map_err(|e| SearchError::Malformed(e.to_string()))?;
        std::fs::create_dir_all(dir.as_ref())?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

impl SearchProvider for FixtureSearchProvider {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<OnlineResult>, SearchError> {
        let path = self.dir.join(format!("{}.response", query_digest(query)));
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path)?;
        let mut results: Vec<OnlineResult> = serde_json::from_str(&text)
            .map_err(|e| SearchError::Malformed(format!("{}: {e}", path.display())))?;
        results.truncate(max_results);
        Ok(results)
    }
}

/// In-memory provider with fixed results, for tests and the demo page.
pub struct StaticSearchProvider {
    pub results: Vec<OnlineResult>,
}

impl SearchProvider for StaticSearchProvider {
    fn search(&self, _query: &str, max_results: usize) -> Result<Vec<OnlineResult>, SearchError> {
        Ok(self.results.iter().take(max_results).cloned().collect())
    }
}

/// Provider that always times out, for failure-path tests.
pub struct TimeoutSearchProvider;

impl SearchProvider for TimeoutSearchProvider {
    fn search(&self, _query: &str, _max_results: usize) -> Result<Vec<OnlineResult>, SearchError> {
        Err(SearchError::Timeout(10_000))
    }
}

/// Cache layer keyed by (query, day). Cache files live under
/// `<cache_dir>/online/<digest>.response` with the digest computed over
/// `"<day>:<query>"`, so a new day refreshes without clobbering history.
pub struct CachedSearchProvider<P> {
    inner: P,
    cache_dir: PathBuf,
    day: u64,
}

impl<P: SearchProvider> CachedSearchProvider<P> {
    pub fn new(inner: P, cache_dir: impl Into<PathBuf>) -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self::with_day(inner, cache_dir, now / 86_400)
    }

    /// Pin the cache day, for deterministic tests.
    pub fn with_day(inner: P, cache_dir: impl Into<PathBuf>, day: u64) -> Self {
        Self {
            inner,
            cache_dir: cache_dir.into(),
            day,
        }
    }

    fn cache_path(&self, query: &str) -> PathBuf {
        let keyed = format!("{}:{}", self.day, query);
        let digest = format!("{:08x}", fnv1a64(keyed.as_bytes()) as u32);
        self.cache_dir
            .join("online")
            .join(format!("{digest}.response"))
    }
}

impl<P: SearchProvider> SearchProvider for CachedSearchProvider<P> {
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<OnlineResult>, SearchError> {
        let path = self.cache_path(query);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut cached: Vec<OnlineResult> = serde_json::from_str(&text)
                .map_err(|e| SearchError::Malformed(format!("cache {}: {e}", path.display())))?;
            cached.truncate(max_results);
            return Ok(cached);
        }
        let results = self.inner.search(query, max_results)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(&results)
            .map_err(|e| SearchError::Malformed(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(results)
    }
}

/// Read every cached response under `<cache_dir>/online`, with its digest.
/// Used by the explicit promote-into-index flow.
pub fn read_cached_responses(
    cache_dir: &Path,
) -> Result<Vec<(String, Vec<OnlineResult>)>, SearchError> {
    let dir = cache_dir.join("online");
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "response"))
        .collect();
    paths.sort();
    for path in paths {
        let digest = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let text = std::fs::read_to_string(&path)?;
        let results: Vec<OnlineResult> = serde_json::from_str(&text)
            .map_err(|e| SearchError::Malformed(format!("{}: {e}", path.display())))?;
        out.push((digest, results));
    }
    Ok(out)
}
