//! The four-stage output record and its line-oriented text serialization
//! (one record per `.rtra` file). Section order is fixed: Rearrange,
//! Initial, Rethink, Final, then citations and flags. Free text is
//! newline-escaped so the format stays strictly line-oriented and
//! `parse(serialize(record)) == record` holds for arbitrary content.

use crate::domain::Query;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("missing section {0:?}")]
    MissingSection(&'static str),
    #[error("sections out of order near line {0}")]
    OutOfOrder(usize),
    #[error("line {line}: cannot parse {text:?}")]
    Malformed { line: usize, text: String },
    #[error("invalid label {0:?}")]
    BadLabel(String),
    #[error("record marked <None> must have no selected evidence")]
    NoneWithSelection,
    #[error("query text invalid: {0}")]
    BadQuery(String),
}

/// One cited evidence slice: its prompt label and a truncated content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedEvidence {
    pub label: String,
    pub digest: String,
}

impl SelectedEvidence {
    pub fn is_text(&self) -> bool {
        self.label.starts_with("text_") || self.label == "api"
    }

    pub fn is_image(&self) -> bool {
        self.label.starts_with("image_")
    }
}

/// A claim span in the final answer mapped to the evidence label it cites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub claim: String,
    pub evidence: String,
}

/// The rearrange/initial/rethink/final record with citations and
/// degradation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtraRecord {
    pub query: Query,
    /// True when rearrange returned `<None>` (a modality was entirely
    /// absent from the candidate pool).
    pub rearrange_none: bool,
    pub rearrange_selected: Vec<SelectedEvidence>,
    pub initial: String,
    pub rethink_points: Vec<String>,
    pub final_answer: String,
    pub citations: Vec<Citation>,
    pub degraded_flags: Vec<String>,
}

impl RtraRecord {
    /// Per-evidence citation counts, including zero for uncited slices.
    pub fn citation_coverage(&self) -> std::collections::BTreeMap<String, usize> {
        let mut cov: std::collections::BTreeMap<String, usize> = self
            .rearrange_selected
            .iter()
            .map(|e| (e.label.clone(), 0))
            .collect();
        for c in &self.citations {
            *cov.entry(c.evidence.clone()).or_insert(0) += 1;
        }
        cov
    }

    /// Structural invariant check; returns human-readable violations.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rearrange_none {
            if !self.rearrange_selected.is_empty() {
                out.push("<None> record carries selected evidence".into());
            }
            return out;
        }
        if !self.rearrange_selected.iter().any(|e| e.is_text()) {
            out.push("no text evidence selected".into());
        }
        if !self.rearrange_selected.iter().any(|e| e.is_image()) {
            out.push("no image evidence selected".into());
        }
        let initial_failed = self
            .degraded_flags
            .iter()
            .any(|f| f == "initial_generation_failed");
        if self.final_answer.is_empty() && !initial_failed {
            out.push("final answer empty on a non-<None> record".into());
        }
        out
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn label_ok(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

/// Render a record as the labeled-section text block.
pub fn serialize_record(rec: &RtraRecord) -> Result<String, RecordError> {
    if rec.rearrange_none && !rec.rearrange_selected.is_empty() {
        return Err(RecordError::NoneWithSelection);
    }
    let mut out = String::new();
    out.push_str(&format!("Query: {}\n", escape(rec.query.text())));
    if rec.rearrange_none {
        out.push_str("Rearrange: <None>\n");
    } else {
        out.push_str("Rearrange: Selected:\n");
        for (i, e) in rec.rearrange_selected.iter().enumerate() {
            if !label_ok(&e.label) {
                return Err(RecordError::BadLabel(e.label.clone()));
            }
            out.push_str(&format!("{}. [{}#{}]\n", i + 1, e.label, e.digest));
        }
    }
    out.push_str(&format!("Initial: {}\n", escape(&rec.initial)));
    out.push_str("Rethink:\n");
    for (i, p) in rec.rethink_points.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, escape(p)));
    }
    out.push_str(&format!("Final: {}\n", escape(&rec.final_answer)));
    for c in &rec.citations {
        if !label_ok(&c.evidence) {
            return Err(RecordError::BadLabel(c.evidence.clone()));
        }
        out.push_str(&format!("Cite: [{}] {}\n", c.evidence, escape(&c.claim)));
    }
    for f in &rec.degraded_flags {
        out.push_str(&format!("Flag: {}\n", escape(f)));
    }
    Ok(out)
}

/// Parse a numbered item line "N. rest", returning the rest.
fn numbered_rest(line: &str) -> Option<&str> {
    let (num, rest) = line.split_once(". ")?;
    if num.is_empty() || !num.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(rest)
}

/// Parse "[label#digest] trailing..." or "[label] ...". Trailing free text
/// (as in transcribed appendix slices) is tolerated and dropped.
fn parse_selected_item(rest: &str, line_no: usize) -> Result<SelectedEvidence, RecordError> {
    let rest = rest.trim_start();
    let inner = rest
        .strip_prefix('[')
        .and_then(|r| r.split_once(']'))
        .map(|(inner, _)| inner)
        .ok_or_else(|| RecordError::Malformed {
            line: line_no,
            text: rest.to_string(),
        })?;
    let (label, digest) = match inner.split_once('#') {
        Some((l, d)) => (l.to_string(), d.to_string()),
        None => (inner.to_string(), String::new()),
    };
    if !label_ok(&label) {
        return Err(RecordError::BadLabel(label));
    }
    Ok(SelectedEvidence { label, digest })
}

/// Parse the labeled-section text block back into a record. Section order
/// is enforced; a missing `Final:` (or any other section) is an error.
pub fn parse_record(text: &str) -> Result<RtraRecord, RecordError> {
    let mut lines = text.lines().enumerate().peekable();

    let query = match lines.next() {
        Some((_, line)) if line.starts_with("Query: ") => {
            let raw = unescape(line.strip_prefix("Query: ").unwrap());
            Query::new(raw).map_err(|e| RecordError::BadQuery(e.to_string()))?
        }
        Some((i, _)) => return Err(RecordError::OutOfOrder(i + 1)),
        None => return Err(RecordError::MissingSection("Query:")),
    };

    // Rearrange section.
    let (rearrange_line_no, rearrange_line) = lines
        .next()
        .ok_or(RecordError::MissingSection("Rearrange:"))?;
    let mut rearrange_none = false;
    let mut selected = Vec::new();
    if rearrange_line == "Rearrange: <None>" {
        rearrange_none = true;
    } else if rearrange_line == "Rearrange: Selected:" {
        while let Some((_, line)) = lines.peek() {
            match numbered_rest(line) {
                Some(rest) => {
                    let (i, _) = lines.next().expect("peeked");
                    selected.push(parse_selected_item(rest, i + 1)?);
                }
                None => break,
            }
        }
    } else if rearrange_line.starts_with("Rearrange:") {
        return Err(RecordError::Malformed {
            line: rearrange_line_no + 1,
            text: rearrange_line.to_string(),
        });
    } else {
        return Err(RecordError::MissingSection("Rearrange:"));
    }

    // Initial section. The serializer writes exactly one space after the
    // colon; content whitespace beyond it is significant.
    let initial = match lines.next() {
        Some((_, line)) if line.starts_with("Initial:") => {
            unescape(line.strip_prefix("Initial: ").unwrap_or(""))
        }
        Some((i, _)) => return Err(RecordError::OutOfOrder(i + 1)),
        None => return Err(RecordError::MissingSection("Initial:")),
    };

    // Rethink section.
    match lines.next() {
        Some((_, line)) if line == "Rethink:" => {}
        Some((i, _)) => return Err(RecordError::OutOfOrder(i + 1)),
        None => return Err(RecordError::MissingSection("Rethink:")),
    }
    let mut rethink_points = Vec::new();
    while let Some((_, line)) = lines.peek() {
        match numbered_rest(line) {
            Some(rest) => {
                rethink_points.push(unescape(rest));
                lines.next();
            }
            None => break,
        }
    }

    // Final section.
    let final_answer = match lines.next() {
        Some((_, line)) if line.starts_with("Final:") => {
            unescape(line.strip_prefix("Final: ").unwrap_or(""))
        }
        Some((i, _)) => return Err(RecordError::OutOfOrder(i + 1)),
        None => return Err(RecordError::MissingSection("Final:")),
    };

    // Citations then flags.
    let mut citations = Vec::new();
    let mut degraded_flags = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Cite: ") {
            if !degraded_flags.is_empty() {
                return Err(RecordError::OutOfOrder(i + 1));
            }
            let inner = rest
                .strip_prefix('[')
                .and_then(|r| r.split_once("] "))
                .ok_or_else(|| RecordError::Malformed {
                    line: i + 1,
                    text: line.to_string(),
                })?;
            citations.push(Citation {
                evidence: inner.0.to_string(),
                claim: unescape(inner.1),
            });
        } else if let Some(rest) = line.strip_prefix("Flag: ") {
            degraded_flags.push(unescape(rest));
        } else {
            return Err(RecordError::Malformed {
                line: i + 1,
                text: line.to_string(),
            });
        }
    }

    if rearrange_none && !selected.is_empty() {
        return Err(RecordError::NoneWithSelection);
    }

    Ok(RtraRecord {
        query,
        rearrange_none,
        rearrange_selected: selected,
        initial,
        rethink_points,
        final_answer,
        citations,
        degraded_flags,
    })
}
