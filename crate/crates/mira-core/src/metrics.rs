//! Evaluation harness: BLEU-1..4, LCS-based ROUGE-L, exact match, and the
//! threshold correctness split for conversation/detail question sets.
//!
//! Tokenization is fixed so metric values mean something: lowercase, split
//! on Unicode whitespace, strip surrounding punctuation from each token.

use crate::rtra::{Generator, RtraError};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("n must be in 1..=4, got {0}")]
    BadN(usize),
    #[error("pair {0} is vqa_detail but carries no judge score")]
    MissingJudgeScore(usize),
    #[error("line {line}: {reason}")]
    Corpus { line: usize, reason: String },
    #[error("judge reply {0:?} contains no score in [0, 1]")]
    BadJudgeReply(String),
    #[error("judge transport: {0}")]
    JudgeTransport(String),
}

/// Lowercase, split on whitespace, strip surrounding punctuation. Tokens
/// that were pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let trimmed = w.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision with multi-reference clipping.
fn clipped_precision(candidate: &[String], references: &[Vec<String>], n: usize) -> Option<f64> {
    let cand_counts = ngram_counts(candidate, n);
    let total: usize = cand_counts.values().sum();
    if total == 0 {
        return None;
    }
    let ref_counts: Vec<HashMap<&[String], usize>> =
        references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut clipped = 0usize;
    for (gram, count) in &cand_counts {
        let max_ref = ref_counts
            .iter()
            .map(|rc| rc.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        clipped += (*count).min(max_ref);
    }
    Some(clipped as f64 / total as f64)
}

/// Effective reference length: the reference closest in length to the
/// candidate, ties resolved toward the shorter reference.
fn closest_ref_len(candidate_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| {
            let diff = (len as isize - candidate_len as isize).unsigned_abs();
            (diff, len)
        })
        .unwrap_or(0)
}

/// Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times
/// the brevity penalty exp(1 - r/c) applied when the candidate is shorter
/// than the effective reference. Zero overlap (or a candidate too short to
/// form an n-gram) scores 0; no smoothing.
///
/// ```
/// use mira_core::metrics::{bleu, tokenize};
/// let candidate = tokenize("the cat sat");
/// let references = vec![tokenize("the cat sat down")];
/// let b1 = bleu(&candidate, &references, 1).unwrap();
/// assert!((b1 - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
/// ```
pub fn bleu(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::BadN(n));
    }
    if candidate.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        match clipped_precision(candidate, references, k) {
            Some(p) if p > 0.0 => log_sum += p.ln(),
            _ => return Ok(0.0),
        }
    }
    let geo = (log_sum / n as f64).exp();
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(geo * bp)
}

/// Length of the longest common subsequence.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L precision/recall/F components against one reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_single(candidate: &[String], reference: &[String]) -> RougeL {
    if candidate.is_empty() || reference.is_empty() {
        return RougeL {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
        };
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / (recall + beta2 * precision)
    };
    RougeL {
        precision,
        recall,
        f_measure,
    }
}

/// LCS-based F-measure (beta = 1.2), maximized over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    rouge_l_components(candidate, references).f_measure
}

/// The P/R/F components of the best-scoring reference.
pub fn rouge_l_components(candidate: &[String], references: &[Vec<String>]) -> RougeL {
    references
        .iter()
        .map(|r| rouge_l_single(candidate, r))
        .max_by(|a, b| a.f_measure.partial_cmp(&b.f_measure).unwrap())
        .unwrap_or(RougeL {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
        })
}

/// Normalization applied before exact match: lowercase, trim, collapse
/// whitespace, strip trailing punctuation.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .to_lowercase()
}

/// 1 iff the (optionally normalized) strings are equal.
pub fn exact_match(candidate: &str, reference: &str, normalize: bool) -> bool {
    if normalize {
        normalize_answer(candidate) == normalize_answer(reference)
    } else {
        candidate == reference
    }
}

/// Kind of an evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Report,
    VqaConv,
    VqaDetail,
}

/// One candidate/reference evaluation pair. Raw strings are stored; the
/// metric functions apply the documented tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub kind: PairKind,
    pub candidate: String,
    pub references: Vec<String>,
    pub judge_score: Option<f64>,
}

impl EvalPair {
    pub fn candidate_tokens(&self) -> Vec<String> {
        tokenize(&self.candidate)
    }

    pub fn reference_tokens(&self) -> Vec<Vec<String>> {
        self.references.iter().map(|r| tokenize(r)).collect()
    }
}

/// Accuracy reported in the benchmark "ratio(count)" form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitAccuracy {
    pub ratio: f64,
    pub correct: usize,
    pub total: usize,
}

impl std::fmt::Display for SplitAccuracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}({})", self.ratio, self.correct)
    }
}

/// Conversation accuracy (exact match against any reference, normalized)
/// and detail accuracy (judge score strictly above the threshold).
pub fn correctness_split(
    pairs: &[EvalPair],
    threshold: f64,
) -> Result<(SplitAccuracy, SplitAccuracy), MetricsError> {
    let mut conv_total = 0usize;
    let mut conv_correct = 0usize;
    let mut detail_total = 0usize;
    let mut detail_correct = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        match pair.kind {
            PairKind::VqaConv => {
                conv_total += 1;
                if pair
                    .references
                    .iter()
                    .any(|r| exact_match(&pair.candidate, r, true))
                {
                    conv_correct += 1;
                }
            }
            PairKind::VqaDetail => {
                detail_total += 1;
                let c_s = pair.judge_score.ok_or(MetricsError::MissingJudgeScore(i))?;
                if c_s > threshold {
                    detail_correct += 1;
                }
            }
            PairKind::Report => {}
        }
    }
    let ratio = |correct: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    };
    Ok((
        SplitAccuracy {
            ratio: ratio(conv_correct, conv_total),
            correct: conv_correct,
            total: conv_total,
        },
        SplitAccuracy {
            ratio: ratio(detail_correct, detail_total),
            correct: detail_correct,
            total: detail_total,
        },
    ))
}

const UNIT_SEPARATOR: char = '\u{1f}';

/// Parse the tab-separated eval corpus: one record per line with fields
/// kind, candidate, references (unit-separator-joined), optional c_s.
pub fn parse_corpus(text: &str) -> Result<Vec<EvalPair>, MetricsError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 {
            return Err(MetricsError::Corpus {
                line: line_no,
                reason: format!(
                    "expected at least 3 tab-separated fields, got {}",
                    fields.len()
                ),
            });
        }
        let kind = match fields[0] {
            "report" => PairKind::Report,
            "vqa_conv" => PairKind::VqaConv,
            "vqa_detail" => PairKind::VqaDetail,
            other => {
                return Err(MetricsError::Corpus {
                    line: line_no,
                    reason: format!("unknown kind {other:?}"),
                })
            }
        };
        let references: Vec<String> = fields[2]
            .split(UNIT_SEPARATOR)
            .map(str::to_string)
            .collect();
        if references.iter().all(String::is_empty) {
            return Err(MetricsError::Corpus {
                line: line_no,
                reason: "at least one reference required".into(),
            });
        }
        let judge_score = match fields.get(3) {
            Some(s) if !s.trim().is_empty() => {
                let v: f64 = s.trim().parse().map_err(|_| MetricsError::Corpus {
                    line: line_no,
                    reason: format!("cannot parse c_s {s:?}"),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::Corpus {
                        line: line_no,
                        reason: format!("c_s {v} outside [0, 1]"),
                    });
                }
                Some(v)
            }
            _ => None,
        };
        pairs.push(EvalPair {
            kind,
            candidate: fields[1].to_string(),
            references,
            judge_score,
        });
    }
    Ok(pairs)
}

/// Aggregate metrics over a parsed corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub report_pairs: usize,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub conv: SplitAccuracy,
    pub detail: SplitAccuracy,
}

/// Compute corpus-average BLEU-1..4 and ROUGE-L over report pairs plus the
/// correctness split over the VQA pairs.
pub fn evaluate_corpus(pairs: &[EvalPair], threshold: f64) -> Result<EvalReport, MetricsError> {
    let mut bleu_sums = [0.0f64; 4];
    let mut rouge_sum = 0.0;
    let mut report_pairs = 0usize;
    for pair in pairs.iter().filter(|p| p.kind == PairKind::Report) {
        report_pairs += 1;
        let cand = pair.candidate_tokens();
        let refs = pair.reference_tokens();
        for (n, slot) in bleu_sums.iter_mut().enumerate() {
            *slot += bleu(&cand, &refs, n + 1)?;
        }
        rouge_sum += rouge_l(&cand, &refs);
    }
    let denom = report_pairs.max(1) as f64;
    let (conv, detail) = correctness_split(pairs, threshold)?;
    Ok(EvalReport {
        report_pairs,
        bleu: [
            bleu_sums[0] / denom,
            bleu_sums[1] / denom,
            bleu_sums[2] / denom,
            bleu_sums[3] / denom,
        ],
        rouge_l: rouge_sum / denom,
        conv,
        detail,
    })
}

impl EvalReport {
    /// Plain-text table mirroring the benchmark layout.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("metric      value\n");
        out.push_str("----------  -------\n");
        for (i, b) in self.bleu.iter().enumerate() {
            out.push_str(&format!("BLEU{}       {b:.4}\n", i + 1));
        }
        out.push_str(&format!("ROUGE_L     {:.4}\n", self.rouge_l));
        out.push_str(&format!("reports     {}\n", self.report_pairs));
        out.push_str(&format!(
            "Conv        {} of {}\n",
            self.conv, self.conv.total
        ));
        out.push_str(&format!(
            "Details     {} of {} (c_s threshold)\n",
            self.detail, self.detail.total
        ));
        out
    }
}

/// Score a candidate against a reference with a judge provider (generator
/// wire contract plus a scoring prompt). The reply's first token parseable
/// as a float in [0, 1] is the score.
pub fn judge_score(
    candidate: &str,
    reference: &str,
    judge: &dyn Generator,
) -> Result<f64, MetricsError> {
    let prompt = format!(
        "[system] Output only a correctness score between 0 and 1.\n[reference] {reference}\n[candidate] {candidate}\n"
    );
    let reply = judge.generate(&prompt, &[]).map_err(|e| match e {
        RtraError::Transport(msg) => MetricsError::JudgeTransport(msg),
        other => MetricsError::JudgeTransport(other.to_string()),
    })?;
    for token in reply.split_whitespace() {
        if let Ok(v) = token
            .trim_matches(|c: char| !(c.is_ascii_digit() || c == '.'))
            .parse::<f64>()
        {
            if (0.0..=1.0).contains(&v) {
                return Ok(v);
            }
        }
    }
    Err(MetricsError::BadJudgeReply(reply))
}
