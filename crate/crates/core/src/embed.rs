//! Text embedders and vector similarity.
//!
//! Every [`Embedding`] is L2-normalized at construction, so similarity
//! between stored vectors reduces to a dot product.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limit::InFlightLimit;

pub const DEFAULT_DIM: usize = 384;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("remote embedder unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `values` to unit length. An all-zero input becomes `e_0`.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::DimensionMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut e0 = vec![0.0; values.len()];
            e0[0] = 1.0;
            return Ok(Self(e0));
        }
        Ok(Self(values.iter().map(|&v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Wraps values already known to be unit length (e.g. read back from a store).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Dot product accumulated in f64, clamped to [-1, 1]. For unit vectors this
/// is the cosine similarity; the store and MMR use it on stored rows.
pub fn unit_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    dot.clamp(-1.0, 1.0)
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let (a, b) = (a.as_slice(), b.as_slice());
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lowercased alphanumeric tokens, in order, duplicates kept.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    HashStub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::HashStub,
            dim: DEFAULT_DIM,
            seed: 0,
            endpoint: None,
            model: None,
            api_key_env: None,
            max_in_flight: 4,
            timeout_secs: 30,
        }
    }
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidSpec("dim must be > 0".into()));
        }
        match self.kind {
            EmbedderKind::HashStub => Ok(Box::new(HashEmbedder::new(self.dim, self.seed))),
            EmbedderKind::Remote => Ok(Box::new(RemoteEmbedder::from_spec(self)?)),
        }
    }
}

/// Builds the embedder for `spec` and embeds one text.
pub fn embed_text(spec: &EmbedderSpec, text: &str) -> Result<Embedding, EmbedError> {
    spec.build()?.embed(text)
}

/// Signed feature hashing over lowercase alphanumeric tokens.
///
/// The bucket and sign for a token depend only on (seed, token), so the
/// output is stable across processes and releases.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn token_hash(&self, token: &str) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for b in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^ (h >> 31)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut acc = vec![0.0f32; self.dim];
        for token in tokenize(text) {
            let h = self.token_hash(&token);
            let bucket = (h % self.dim as u64) as usize;
            acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        Embedding::normalized(acc)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    inputs: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// HTTP client for an embedding service speaking
/// `{model, inputs} -> {vectors}`.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    dim: usize,
    limit: InFlightLimit,
}

impl RemoteEmbedder {
    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self, EmbedError> {
        let endpoint = spec
            .endpoint
            .clone()
            .ok_or_else(|| EmbedError::InvalidSpec("remote embedder needs an endpoint".into()))?;
        let token = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                EmbedError::InvalidSpec(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs.max(1))))
            .build()
            .new_agent();
        Ok(Self {
            agent,
            endpoint,
            model: spec.model.clone().unwrap_or_default(),
            token,
            dim: spec.dim,
            limit: InFlightLimit::new(spec.max_in_flight),
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::RemoteUnavailable("service returned no vectors".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let _permit = self.limit.acquire();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let resp: EmbedResponse = req
            .send_json(EmbedRequest { model: &self.model, inputs: texts })
            .map_err(|e| EmbedError::RemoteUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::RemoteUnavailable(format!("bad response body: {e}")))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::RemoteUnavailable(format!(
                "asked for {} vectors, received {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.dim, actual: v.len() });
                }
                Embedding::normalized(v)
            })
            .collect()
    }
}
