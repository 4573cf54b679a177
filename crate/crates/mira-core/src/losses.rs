//! Scoring-function implementations of the training objectives: token-level
//! cross entropy, length-normalized autoregressive NLL, the symmetric
//! contrastive loss, and the pairwise sigmoid loss. Natural log throughout.
//! No training loop and no autodiff; these are verifiable numeric functions.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("targets ({targets}) and distributions ({dists}) differ in length")]
    LengthMismatch { targets: usize, dists: usize },
    #[error("target id {id} out of vocab {vocab_size}")]
    TargetOutOfVocab { id: usize, vocab_size: usize },
    #[error("probabilities must be non-negative, got {0}")]
    NegativeProbability(f64),
    #[error("probabilities sum to {0}, expected 1 within 1e-9")]
    NotNormalized(f64),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("dots are {dots_rows}x{dots_cols} but labels are {label_rows}x{label_cols}")]
    ShapeMismatch {
        dots_rows: usize,
        dots_cols: usize,
        label_rows: usize,
        label_cols: usize,
    },
    #[error("ragged matrix: row {row} has {len} entries, expected {expected}")]
    Ragged {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("label at ({row},{col}) must be +1 or -1, got {value}")]
    BadLabel { row: usize, col: usize, value: i8 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// A probability distribution over a token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    vocab_size: usize,
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        let mut sum = 0.0;
        for &p in &probs {
            if p < 0.0 || !p.is_finite() {
                return Err(LossError::NegativeProbability(p));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::NotNormalized(sum));
        }
        Ok(Self {
            vocab_size: probs.len(),
            probs,
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }
}

/// Cross-entropy result. A zero probability at a target token yields
/// `value = +inf` with `zero_probability_hit` set rather than an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub zero_probability_hit: bool,
}

/// Sum of negative log probabilities of the target tokens.
pub fn cross_entropy(
    targets: &[usize],
    dists: &[TokenDistribution],
) -> Result<CrossEntropy, LossError> {
    if targets.len() != dists.len() {
        return Err(LossError::LengthMismatch {
            targets: targets.len(),
            dists: dists.len(),
        });
    }
    let mut value = 0.0;
    let mut zero_hit = false;
    for (&t, d) in targets.iter().zip(dists) {
        if t >= d.vocab_size() {
            return Err(LossError::TargetOutOfVocab {
                id: t,
                vocab_size: d.vocab_size(),
            });
        }
        let p = d.prob(t);
        if p == 0.0 {
            zero_hit = true;
            value = f64::INFINITY;
        } else if value.is_finite() {
            value -= p.ln();
        }
    }
    Ok(CrossEntropy {
        value,
        zero_probability_hit: zero_hit,
    })
}

/// Length-normalized autoregressive NLL over the target tokens; the visual
/// context length is carried for reporting only (distributions already
/// condition on the visual embeddings).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoregressiveNll {
    pub value: f64,
    pub zero_probability_hit: bool,
    pub visual_context_len: usize,
}

pub fn autoregressive_nll(
    targets: &[usize],
    dists: &[TokenDistribution],
    visual_context_len: usize,
) -> Result<AutoregressiveNll, LossError> {
    let ce = cross_entropy(targets, dists)?;
    let len = targets.len().max(1) as f64;
    Ok(AutoregressiveNll {
        value: ce.value / len,
        zero_probability_hit: ce.zero_probability_hit,
        visual_context_len,
    })
}

fn check_matrix(m: &[Vec<f64>]) -> Result<(usize, usize), LossError> {
    if m.is_empty() {
        return Err(LossError::Empty);
    }
    let cols = m[0].len();
    for (row, r) in m.iter().enumerate() {
        if r.len() != cols {
            return Err(LossError::Ragged {
                row,
                len: r.len(),
                expected: cols,
            });
        }
    }
    Ok((m.len(), cols))
}

/// Row-wise -log softmax(s)[i] in a shift-stable form.
fn neg_log_softmax_at(scores: impl Iterator<Item = f64> + Clone, at: usize) -> f64 {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    let logsum = scores.clone().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    let target = scores.clone().nth(at).expect("diagonal index in range");
    logsum - target
}

/// Symmetric contrastive loss over an NxN similarity matrix: mean of the
/// row-wise and column-wise diagonal negative log softmax at temperature tau.
pub fn clip_contrastive(s: &[Vec<f64>], tau: f64) -> Result<f64, LossError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(LossError::BadTemperature(tau));
    }
    let (rows, cols) = check_matrix(s)?;
    if rows != cols {
        return Err(LossError::NotSquare { rows, cols });
    }
    let n = rows;
    let mut total = 0.0;
    for i in 0..n {
        total += neg_log_softmax_at(s[i].iter().map(|v| v / tau), i);
        total += neg_log_softmax_at((0..n).map(|j| s[j][i] / tau), i);
    }
    Ok(total / (2.0 * n as f64))
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Pairwise sigmoid loss: -(1/B) * sum_ij log(1 / (1 + exp(z_ij * (-t * dot_ij + b)))),
/// with z=+1 for matches and z=-1 for non-matches.
pub fn siglip_loss(
    dots: &[Vec<f64>],
    labels: &[Vec<i8>],
    t: f64,
    b: f64,
) -> Result<f64, LossError> {
    let (dr, dc) = check_matrix(dots)?;
    if labels.len() != dr || labels.iter().any(|r| r.len() != dc) {
        let (lr, lc) = (labels.len(), labels.first().map_or(0, Vec::len));
        return Err(LossError::ShapeMismatch {
            dots_rows: dr,
            dots_cols: dc,
            label_rows: lr,
            label_cols: lc,
        });
    }
    let batch = dr as f64;
    let mut total = 0.0;
    for (i, (drow, lrow)) in dots.iter().zip(labels).enumerate() {
        for (j, (&d, &z)) in drow.iter().zip(lrow).enumerate() {
            if z != 1 && z != -1 {
                return Err(LossError::BadLabel {
                    row: i,
                    col: j,
                    value: z,
                });
            }
            // -log(1/(1+exp(m))) = softplus(m), m = z*(-t*d + b)
            total += softplus(f64::from(z) * (-t * d + b));
        }
    }
    Ok(total / batch)
}
