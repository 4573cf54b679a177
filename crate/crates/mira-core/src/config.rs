//! Pipeline configuration: every tunable in one place, loadable from a flat
//! `key=value` text file. Unspecified keys take defaults; unknown keys are
//! rejected so typos never silently fall back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("key {key}: cannot parse {value:?} as {expected}")]
    Parse {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key {key}: {reason}")]
    OutOfRange { key: String, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// All pipeline tunables. Construct via `Default` then adjust, or load from
/// a config file with [`PipelineConfig::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Retrieved text chunks per bundle.
    pub k_text: usize,
    /// Retrieved images per bundle.
    pub k_image: usize,
    /// Retrieval depth knob kept alongside k_text; k_text governs the
    /// text-slot count.
    pub rag_topk: usize,
    /// Image/text balance in modality fusion.
    pub alpha: f64,
    /// Reward weight on factual grounding.
    pub lambda1: f64,
    /// Reward weight on coherence.
    pub lambda2: f64,
    /// Rearrange keeps candidates scoring at or above this.
    pub relevance_threshold: f64,
    /// Embedding dimension shared by all providers.
    pub embed_dim: usize,
    pub query_rewrite_enabled: bool,
    pub online_enabled: bool,
    pub offline_enabled: bool,
    pub text_only: bool,
    pub vision_only: bool,
    /// Provider endpoints by role (rewriter, text_encoder, image_encoder,
    /// generator, judge, search). Values are URLs, or `fixture:<dir>` for
    /// the file-backed deterministic providers.
    pub endpoints: BTreeMap<String, String>,
    /// Softmax temperature for the contrastive loss.
    pub tau: f64,
    /// Sigmoid-loss scaling factor.
    pub siglip_t: f64,
    /// Sigmoid-loss bias.
    pub siglip_b: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_text: 3,
            k_image: 2,
            rag_topk: 3,
            alpha: 0.5,
            lambda1: 0.7,
            lambda2: 0.3,
            relevance_threshold: 0.5,
            embed_dim: 384,
            query_rewrite_enabled: true,
            online_enabled: true,
            offline_enabled: true,
            text_only: false,
            vision_only: false,
            endpoints: BTreeMap::new(),
            tau: 0.07,
            siglip_t: 1.0,
            siglip_b: 0.0,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::Parse {
        key: key.into(),
        value: value.into(),
        expected: "positive integer",
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|_| ConfigError::Parse {
        key: key.into(),
        value: value.into(),
        expected: "real number",
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::Parse {
            key: key.into(),
            value: value.into(),
            expected: "true or false",
        }),
    }
}

impl PipelineConfig {
    /// Parse a flat key=value config text. Blank lines and `#` comments are
    /// ignored. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "k_text" => cfg.k_text = parse_usize(key, value)?,
                "k_image" => cfg.k_image = parse_usize(key, value)?,
                "rag_topk" => cfg.rag_topk = parse_usize(key, value)?,
                "alpha" => cfg.alpha = parse_f64(key, value)?,
                "lambda1" => cfg.lambda1 = parse_f64(key, value)?,
                "lambda2" => cfg.lambda2 = parse_f64(key, value)?,
                "relevance_threshold" => cfg.relevance_threshold = parse_f64(key, value)?,
                "embed_dim" => cfg.embed_dim = parse_usize(key, value)?,
                "query_rewrite_enabled" => cfg.query_rewrite_enabled = parse_bool(key, value)?,
                "online_enabled" => cfg.online_enabled = parse_bool(key, value)?,
                "offline_enabled" => cfg.offline_enabled = parse_bool(key, value)?,
                "text_only" => cfg.text_only = parse_bool(key, value)?,
                "vision_only" => cfg.vision_only = parse_bool(key, value)?,
                "tau" => cfg.tau = parse_f64(key, value)?,
                "siglip_t" => cfg.siglip_t = parse_f64(key, value)?,
                "siglip_b" => cfg.siglip_b = parse_f64(key, value)?,
                _ => {
                    if let Some(role) = key.strip_prefix("endpoint.") {
                        if role.is_empty() {
                            return Err(ConfigError::UnknownKey(key.into()));
                        }
                        cfg.endpoints.insert(role.to_string(), value.to_string());
                    } else {
                        return Err(ConfigError::UnknownKey(key.into()));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serialize to the flat key=value format. `parse(render(cfg)) == cfg`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k_text={}", self.k_text);
        let _ = writeln!(s, "k_image={}", self.k_image);
        let _ = writeln!(s, "rag_topk={}", self.rag_topk);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "lambda1={}", self.lambda1);
        let _ = writeln!(s, "lambda2={}", self.lambda2);
        let _ = writeln!(s, "relevance_threshold={}", self.relevance_threshold);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "query_rewrite_enabled={}", self.query_rewrite_enabled);
        let _ = writeln!(s, "online_enabled={}", self.online_enabled);
        let _ = writeln!(s, "offline_enabled={}", self.offline_enabled);
        let _ = writeln!(s, "text_only={}", self.text_only);
        let _ = writeln!(s, "vision_only={}", self.vision_only);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "siglip_t={}", self.siglip_t);
        let _ = writeln!(s, "siglip_b={}", self.siglip_b);
        for (role, url) in &self.endpoints {
            let _ = writeln!(s, "endpoint.{role}={url}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &str, reason: String| ConfigError::OutOfRange {
            key: key.into(),
            reason,
        };
        if self.k_text < 1 {
            return Err(range("k_text", "must be at least 1".into()));
        }
        if self.k_image < 1 && !self.text_only {
            return Err(range(
                "k_image",
                "must be at least 1 when images are enabled".into(),
            ));
        }
        if self.rag_topk < 1 {
            return Err(range("rag_topk", "must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(range("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if self.lambda1 < 0.0 {
            return Err(range("lambda1", "must be non-negative".into()));
        }
        if self.lambda2 < 0.0 {
            return Err(range("lambda2", "must be non-negative".into()));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(ConfigError::Invalid(
                "lambda1 and lambda2 must not both be zero".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.relevance_threshold) {
            return Err(range(
                "relevance_threshold",
                format!("{} is outside [-1, 1]", self.relevance_threshold),
            ));
        }
        if self.embed_dim < 1 {
            return Err(range("embed_dim", "must be at least 1".into()));
        }
        if !self.offline_enabled && !self.online_enabled {
            return Err(ConfigError::Invalid(
                "at least one of offline_enabled/online_enabled must be true".into(),
            ));
        }
        if self.text_only && self.vision_only {
            return Err(ConfigError::Invalid(
                "text_only and vision_only are mutually exclusive".into(),
            ));
        }
        if self.tau <= 0.0 {
            return Err(range("tau", "must be positive".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self, role: &str) -> Option<&str> {
        self.endpoints.get(role).map(String::as_str)
    }
}
