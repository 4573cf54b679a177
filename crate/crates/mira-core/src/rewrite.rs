//! Query rewriting behind a pluggable provider, with a rule-based fallback
//! so a rewrite hiccup can never kill the pipeline.

use crate::config::PipelineConfig;
use crate::domain::Query;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("rewriter transport: {0}")]
    Transport(String),
    #[error("rewriter returned an empty rewrite")]
    EmptyRewrite,
}

/// Provider contract for the rewrite stage.
pub trait Rewriter: Send + Sync {
    fn rewrite(&self, text: &str) -> Result<String, RewriteError>;
}

/// Which implementation actually produced the rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewriteProvider {
    External,
    Passthrough,
    RuleBased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteResult {
    pub original: Query,
    pub rewritten: Query,
    pub provider_used: RewriteProvider,
}

/// Leading stop-phrases the rule-based rewriter strips (case-insensitive).
/// Fixed list: the semantic-preservation property is defined against it.
pub const STOP_PHRASES: &[&str] = &[
    "please",
    "kindly",
    "can you tell me",
    "could you tell me",
    "i would like to know",
    "tell me",
];

/// Deterministic normalization: trim, collapse whitespace runs, collapse
/// repeated terminal punctuation, strip leading stop-phrases. Never deletes
/// content words outside the fixed stop-phrase list.
pub fn rule_based_rewrite(text: &str) -> String {
    let mut s = text.split_whitespace().collect::<Vec<_>>().join(" ");

    // Collapse runs of the same terminal punctuation mark: "??" -> "?".
    let mut collapsed = String::with_capacity(s.len());
    let mut prev: Option<char> = None;
    for c in s.chars() {
        let is_punct = matches!(c, '?' | '!' | '.' | ',' | ';');
        if is_punct && prev == Some(c) {
            continue;
        }
        collapsed.push(c);
        prev = Some(c);
    }
    s = collapsed;

    // Strip leading stop-phrases, repeatedly, longest first.
    let mut phrases: Vec<&str> = STOP_PHRASES.to_vec();
    phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
    loop {
        let mut stripped = false;
        for p in &phrases {
            let prefix_matches = s.len() >= p.len()
                && s.is_char_boundary(p.len())
                && s[..p.len()].eq_ignore_ascii_case(p);
            if prefix_matches {
                let boundary = s[p.len()..]
                    .chars()
                    .next()
                    .map_or(true, |c| c.is_whitespace() || c == ',');
                if boundary {
                    s = s[p.len()..].trim_start_matches([' ', ',']).to_string();
                    stripped = true;
                    break;
                }
            }
        }
        if !stripped || s.is_empty() {
            break;
        }
    }

    if s.is_empty() {
        // Everything was stop-phrase; fall back to the whitespace-normalized input.
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        s
    }
}

/// The rewrite stage. Disabled config short-circuits to passthrough; a
/// failing provider degrades to the rule-based rewriter. Degradation is
/// recorded in the result, never surfaced as an error.
pub fn rewrite_query(
    q: &Query,
    provider: Option<&dyn Rewriter>,
    cfg: &PipelineConfig,
) -> RewriteResult {
    if !cfg.query_rewrite_enabled {
        return RewriteResult {
            original: q.clone(),
            rewritten: q.clone(),
            provider_used: RewriteProvider::Passthrough,
        };
    }
    if let Some(p) = provider {
        match p.rewrite(q.text()) {
            Ok(text) if !text.trim().is_empty() => {
                return RewriteResult {
                    original: q.clone(),
                    rewritten: Query::new(text).expect("non-empty checked above"),
                    provider_used: RewriteProvider::External,
                };
            }
            _ => {} // fall through to rule-based
        }
    }
    let text = rule_based_rewrite(q.text());
    RewriteResult {
        original: q.clone(),
        rewritten: Query::new(text).expect("rule-based rewrite preserves non-emptiness"),
        provider_used: RewriteProvider::RuleBased,
    }
}

/// Canned rewriter for tests and the demo: answers from a fixed map, errs
/// on anything else.
pub struct StaticRewriter {
    map: std::collections::HashMap<String, String>,
}

impl StaticRewriter {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }
}

impl Rewriter for StaticRewriter {
    fn rewrite(&self, text: &str) -> Result<String, RewriteError> {
        self.map
            .get(text)
            .cloned()
            .ok_or_else(|| RewriteError::Transport("no canned rewrite".into()))
    }
}

/// A rewriter that always fails, for exercising the fallback path.
pub struct DownRewriter;

impl Rewriter for DownRewriter {
    fn rewrite(&self, _text: &str) -> Result<String, RewriteError> {
        Err(RewriteError::Transport("provider down".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str) -> Query {
        Query::new(text).unwrap()
    }

    #[test]
    fn disabled_rewrite_is_passthrough() {
        let mut cfg = PipelineConfig::default();
        cfg.query_rewrite_enabled = false;
        let query = q("Is it a malignant lesion?");
        let r = rewrite_query(&query, Some(&DownRewriter), &cfg);
        assert_eq!(r.rewritten.text(), "Is it a malignant lesion?");
        assert_eq!(r.provider_used, RewriteProvider::Passthrough);
    }

    #[test]
    fn external_provider_used_when_healthy() {
        let cfg = PipelineConfig::default();
        let provider = StaticRewriter::new([(
            "Is it a malignant lesion?".to_string(),
            "Assess malignancy of the lesion in the provided image.".to_string(),
        )]);
        let r = rewrite_query(&q("Is it a malignant lesion?"), Some(&provider), &cfg);
        assert_eq!(
            r.rewritten.text(),
            "Assess malignancy of the lesion in the provided image."
        );
        assert_eq!(r.provider_used, RewriteProvider::External);
    }

    #[test]
    fn provider_down_falls_back_to_rule_based() {
        let cfg = PipelineConfig::default();
        let r = rewrite_query(&q("  what   is  this??  "), Some(&DownRewriter), &cfg);
        assert_eq!(r.rewritten.text(), "what is this?");
        assert_eq!(r.provider_used, RewriteProvider::RuleBased);
    }

    #[test]
    fn no_provider_uses_rule_based() {
        let cfg = PipelineConfig::default();
        let r = rewrite_query(&q("please describe the scan"), None, &cfg);
        assert_eq!(r.rewritten.text(), "describe the scan");
        assert_eq!(r.provider_used, RewriteProvider::RuleBased);
    }

    #[test]
    fn rule_based_preserves_content_words() {
        let input = "please  can you tell me  what the   chest x-ray shows??";
        let out = rule_based_rewrite(input);
        for word in ["what", "the", "chest", "x-ray", "shows?"] {
            assert!(
                out.contains(word.trim_end_matches('?')),
                "missing {word} in {out:?}"
            );
        }
        assert_eq!(out, "what the chest x-ray shows?");
    }

    #[test]
    fn rule_based_never_drops_non_stop_words() {
        let inputs = [
            "solitary pulmonary nodule,, biopsy pending",
            "PLEASE evaluate!!! this CT",
            "is consolidation visible",
        ];
        for input in inputs {
            let out = rule_based_rewrite(input);
            for token in input.split_whitespace() {
                let content: String = token.chars().filter(|c| c.is_alphanumeric()).collect();
                if content.is_empty() {
                    continue;
                }
                let in_stop_list = STOP_PHRASES.iter().any(|p| {
                    p.split_whitespace()
                        .any(|w| w.eq_ignore_ascii_case(&content))
                });
                if !in_stop_list {
                    assert!(
                        out.to_lowercase().contains(&content.to_lowercase()),
                        "content word {content:?} dropped from {input:?} -> {out:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_stop_phrase_input_keeps_text() {
        let out = rule_based_rewrite("please");
        assert_eq!(out, "please");
    }

    #[test]
    fn deterministic_given_deterministic_provider() {
        let cfg = PipelineConfig::default();
        let a = rewrite_query(&q("stable?"), None, &cfg);
        let b = rewrite_query(&q("stable?"), None, &cfg);
        assert_eq!(a, b);
    }
}
