//! Embedding vectors, the bi-encoder backend contract and dot-product scoring.
//!
//! A backend exposes two encoders: the context side (`e_ctx`) and the response
//! side (`e_resp`). Relevance between a context and a response is the raw dot
//! product of their embeddings; nothing is normalized.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// A finite, non-empty embedding vector stored as `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim >= 1".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding element {pos} is not finite"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Exact inner product accumulated in `f64`.
    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        dot(self, other)
    }

    /// Multiplies every element by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Embedding::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Dot product of two embeddings of equal dimension.
pub fn dot(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot_unchecked(a.as_slice(), b.as_slice()))
}

/// Left-to-right `f64` accumulation of `f32` products. Each product is exact in
/// `f64`, so the only rounding is in the running sum.
#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc + f64::from(*x) * f64::from(*y))
}

/// Which tower of the bi-encoder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Context,
    Response,
}

impl Side {
    fn salt(self) -> &'static [u8] {
        match self {
            Side::Context => b"pdp.mock.ctx",
            Side::Response => b"pdp.mock.resp",
        }
    }
}

/// Stable fingerprint of an encoder: its identity string plus output dim.
pub fn backend_fingerprint(identity: &str, dim: usize) -> String {
    let digest = Sha256::digest(format!("{identity}|dim={dim}").as_bytes());
    hex::encode(&digest[..8])
}

/// A bi-encoder. Implementations are stateless after construction and may be
/// shared across threads.
pub trait EmbeddingBackend: Send + Sync {
    /// Raw batch call. Callers should prefer [`embed_contexts`] and
    /// [`embed_responses`], which enforce the batch contract.
    ///
    /// [`embed_contexts`]: EmbeddingBackend::embed_contexts
    /// [`embed_responses`]: EmbeddingBackend::embed_responses
    fn embed_batch(&self, texts: &[String], side: Side) -> Result<Vec<Embedding>>;

    /// Kind plus endpoint or seed; combined with the dim into the fingerprint.
    fn identity(&self) -> String;

    /// Output dimension, when known before the first call.
    fn dim(&self) -> Option<usize>;

    fn embed_contexts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        embed_checked(self, texts, Side::Context)
    }

    fn embed_responses(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        embed_checked(self, texts, Side::Response)
    }

    fn embed_one(&self, text: &str, side: Side) -> Result<Embedding> {
        let mut out = embed_checked(self, &[text.to_string()], side)?;
        Ok(out.remove(0))
    }

    fn fingerprint(&self, dim: usize) -> String {
        backend_fingerprint(&self.identity(), dim)
    }
}

fn embed_checked<B: EmbeddingBackend + ?Sized>(
    backend: &B,
    texts: &[String],
    side: Side,
) -> Result<Vec<Embedding>> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("cannot embed an empty batch".into()));
    }
    if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::InvalidInput(format!("text {pos} is blank")));
    }
    let vectors = backend.embed_batch(texts, side)?;
    if vectors.len() != texts.len() {
        return Err(Error::Protocol(format!(
            "backend returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let dim = vectors[0].dim();
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::Protocol(format!(
            "inconsistent dims in one batch: {dim} and {}",
            bad.dim()
        )));
    }
    if let Some(expected) = backend.dim() {
        if dim != expected {
            return Err(Error::Protocol(format!(
                "backend returned dim {dim}, configured for {expected}"
            )));
        }
    }
    Ok(vectors)
}

/// Deterministic offline encoder.
///
/// Every lowercased whitespace token hashes, together with a side-specific salt
/// and the seed, to a pseudo-random unit vector. A text embeds to the sum of its
/// token vectors scaled by `1/sqrt(token count)`.
#[derive(Debug, Clone)]
pub struct MockHashBackend {
    dim: usize,
    seed: u64,
    execution: Execution,
}

impl MockHashBackend {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_seed(dim, 0)
    }

    pub fn with_seed(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("mock-hash backend needs dim >= 1".into()));
        }
        Ok(MockHashBackend {
            dim,
            seed,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    fn token_vector(&self, token: &str, side: Side) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(side.salt());
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&hasher.finalize());
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn embed_text(&self, text: &str, side: Side) -> Embedding {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        let mut acc = vec![0.0f64; self.dim];
        for token in &tokens {
            for (a, t) in acc.iter_mut().zip(self.token_vector(token, side)) {
                *a += t;
            }
        }
        let scale = if tokens.is_empty() {
            0.0
        } else {
            1.0 / (tokens.len() as f64).sqrt()
        };
        Embedding(acc.into_iter().map(|a| (a * scale) as f32).collect())
    }
}

impl EmbeddingBackend for MockHashBackend {
    fn embed_batch(&self, texts: &[String], side: Side) -> Result<Vec<Embedding>> {
        Ok(self.execution.map(texts, |t| self.embed_text(t, side)))
    }

    fn identity(&self) -> String {
        format!("mock-hash:seed={}", self.seed)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    side: Side,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for a remote bi-encoder: `POST {endpoint}/embed`.
pub struct RemoteEmbeddingBackend {
    endpoint: String,
    agent: ureq::Agent,
    observed_dim: OnceLock<usize>,
}

impl RemoteEmbeddingBackend {
    pub fn new(endpoint_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbeddingBackend {
            endpoint: endpoint_url.trim_end_matches('/').to_string(),
            agent,
            observed_dim: OnceLock::new(),
        }
    }

    fn url(&self) -> String {
        format!("{}/embed", self.endpoint)
    }
}

impl EmbeddingBackend for RemoteEmbeddingBackend {
    fn embed_batch(&self, texts: &[String], side: Side) -> Result<Vec<Embedding>> {
        let url = self.url();
        let transport = |e: ureq::Error| Error::Transport {
            endpoint: url.clone(),
            message: e.to_string(),
        };
        let mut resp = self
            .agent
            .post(&url)
            .send_json(EmbedRequest { texts, side })
            .map_err(transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Backend {
                status: Some(status),
                message: body,
            });
        }
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Protocol(format!("bad /embed response: {e}")))?;
        let vectors = parsed
            .vectors
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Protocol(e.to_string()))?;
        if let Some(first) = vectors.first() {
            let dim = *self.observed_dim.get_or_init(|| first.dim());
            if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
                return Err(Error::Protocol(format!(
                    "remote encoder changed dim from {dim} to {}",
                    bad.dim()
                )));
            }
        }
        Ok(vectors)
    }

    fn identity(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn dim(&self) -> Option<usize> {
        self.observed_dim.get().copied()
    }
}

/// Lookup-table encoder over vectors computed ahead of time.
///
/// The table file is `{"context": {text: [f32]}, "response": {text: [f32]}}`;
/// texts are matched verbatim and unknown texts are rejected.
#[derive(Debug, Clone)]
pub struct PrecomputedBackend {
    context: HashMap<String, Embedding>,
    response: HashMap<String, Embedding>,
    dim: usize,
    digest: String,
}

#[derive(Deserialize)]
struct PrecomputedTable {
    #[serde(default)]
    context: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    response: BTreeMap<String, Vec<f32>>,
}

impl PrecomputedBackend {
    pub fn new(
        context: impl IntoIterator<Item = (String, Embedding)>,
        response: impl IntoIterator<Item = (String, Embedding)>,
    ) -> Result<Self> {
        let context: BTreeMap<String, Embedding> = context.into_iter().collect();
        let response: BTreeMap<String, Embedding> = response.into_iter().collect();
        let dim = context
            .values()
            .chain(response.values())
            .next()
            .map(Embedding::dim)
            .ok_or_else(|| Error::Config("precomputed table is empty".into()))?;
        let mut hasher = Sha256::new();
        for (side, map) in [("ctx", &context), ("resp", &response)] {
            for (text, v) in map {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: v.dim(),
                    });
                }
                hasher.update(side.as_bytes());
                hasher.update((text.len() as u64).to_le_bytes());
                hasher.update(text.as_bytes());
                for x in v.as_slice() {
                    hasher.update(x.to_le_bytes());
                }
            }
        }
        Ok(PrecomputedBackend {
            context: context.into_iter().collect(),
            response: response.into_iter().collect(),
            dim,
            digest: hex::encode(&hasher.finalize()[..8]),
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let table: PrecomputedTable =
            serde_json::from_str(json).map_err(|e| Error::format("precomputed table", e))?;
        let convert = |m: BTreeMap<String, Vec<f32>>| {
            m.into_iter()
                .map(|(k, v)| Embedding::new(v).map(|e| (k, e)))
                .collect::<Result<Vec<_>>>()
        };
        Self::new(convert(table.context)?, convert(table.response)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

impl EmbeddingBackend for PrecomputedBackend {
    fn embed_batch(&self, texts: &[String], side: Side) -> Result<Vec<Embedding>> {
        let table = match side {
            Side::Context => &self.context,
            Side::Response => &self.response,
        };
        texts
            .iter()
            .map(|t| {
                table.get(t).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!("no precomputed {side:?} vector for {t:?}"))
                })
            })
            .collect()
    }

    fn identity(&self) -> String {
        format!("precomputed:{}", self.digest)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Remote,
    MockHash,
    Precomputed,
}

fn default_timeout_ms() -> u64 {
    10_000
}

/// Serializable description of an embedding backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBackendConfig {
    pub kind: EmbeddingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Vector table for the precomputed backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_path: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl EmbeddingBackendConfig {
    pub fn mock(dim: usize) -> Self {
        EmbeddingBackendConfig {
            kind: EmbeddingKind::MockHash,
            endpoint_url: None,
            dim: Some(dim),
            seed: None,
            table_path: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn remote(endpoint_url: impl Into<String>) -> Self {
        EmbeddingBackendConfig {
            kind: EmbeddingKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            dim: None,
            seed: None,
            table_path: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        match self.kind {
            EmbeddingKind::Remote => {
                let url = self.endpoint_url.as_deref().ok_or_else(|| {
                    Error::Config("remote embedding backend requires endpoint_url".into())
                })?;
                Ok(Arc::new(RemoteEmbeddingBackend::new(
                    url,
                    Duration::from_millis(self.timeout_ms),
                )))
            }
            EmbeddingKind::MockHash => {
                let dim = self.dim.ok_or_else(|| {
                    Error::Config("mock-hash embedding backend requires dim".into())
                })?;
                Ok(Arc::new(MockHashBackend::with_seed(
                    dim,
                    self.seed.unwrap_or(0),
                )?))
            }
            EmbeddingKind::Precomputed => {
                let path = self.table_path.as_deref().ok_or_else(|| {
                    Error::Config("precomputed embedding backend requires table_path".into())
                })?;
                Ok(Arc::new(PrecomputedBackend::load(path)?))
            }
        }
    }
}
