//! Text encoding behind a backend interface.
//!
//! Real multilingual encoders plug in through [`TextEncoder`]; the shipped
//! [`StubTextEncoder`] derives embeddings from stable token hashes so every
//! downstream module is testable offline. Task instructions are prepended to
//! captions by [`build_task_prompt`].

use std::collections::BTreeMap;
use std::sync::Arc;

use faceforge_tensor::rng::{fnv1a, rng_from_seed, standard_normal_vec};
use faceforge_tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("caption must not be empty")]
    EmptyCaption,
    #[error("text encoder backend `{0}` is not registered")]
    BackendMissing(String),
    #[error("bad input for encoder: {0}")]
    BadInput(String),
}

/// Generation tasks the prompt builder knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Landmarks,
    Face,
}

impl Task {
    pub fn instruction_prefix(&self) -> &'static str {
        match self {
            Task::Segmentation => "Generate a face segmentation:",
            Task::Landmarks => "Generate face landmarks:",
            Task::Face => "Generate a face portrait:",
        }
    }
}

/// Prepend the task instruction to a caption.
pub fn build_task_prompt(task: Task, caption: &str) -> Result<String, TextError> {
    if caption.trim().is_empty() {
        return Err(TextError::EmptyCaption);
    }
    Ok(format!("{} {}", task.instruction_prefix(), caption))
}

/// Token-sequence embedding plus a pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `[L,E]` per-token embeddings consumed by cross-attention.
    pub tokens: Tensor,
    /// `[E]` pooled summary (mean of token rows).
    pub pooled: Vec<f64>,
    pub lang_hint: Option<String>,
}

impl TextEmbedding {
    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn shape_matches(&self, other: &TextEmbedding) -> bool {
        self.tokens.shape() == other.tokens.shape() && self.pooled.len() == other.pooled.len()
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.is_finite() && self.pooled.iter().all(|v| v.is_finite())
    }

    pub fn with_tokens(&self, tokens: Tensor) -> TextEmbedding {
        assert_eq!(tokens.shape(), self.tokens.shape());
        let pooled = pool_rows(&tokens);
        TextEmbedding {
            tokens,
            pooled,
            lang_hint: self.lang_hint.clone(),
        }
    }
}

fn pool_rows(tokens: &Tensor) -> Vec<f64> {
    let (l, e) = (tokens.shape()[0], tokens.shape()[1]);
    let mut pooled = vec![0.0; e];
    for r in 0..l {
        for c in 0..e {
            pooled[c] += tokens.data()[r * e + c];
        }
    }
    for v in &mut pooled {
        *v /= l as f64;
    }
    pooled
}

/// Backend interface for multilingual text encoders.
///
/// Encoders are immutable after construction; `encode` must be a pure
/// function of the input text.
pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<TextEmbedding, TextError>;

    /// Embedding used for the unconditional guidance pass. User-facing
    /// `encode` rejects empty text, so the empty-prompt embedding gets its
    /// own entry point.
    fn encode_uncond(&self) -> TextEmbedding;
}

/// Deterministic offline encoder: each whitespace token's embedding is drawn
/// from a PRNG seeded with a stable hash of the token text.
pub struct StubTextEncoder {
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "embedding dim too small");
        Self { dim }
    }

    fn token_row(&self, token: &str) -> Vec<f64> {
        let seed = fnv1a(token.as_bytes());
        let mut rng = rng_from_seed(seed);
        standard_normal_vec(&mut rng, self.dim)
    }
}

impl TextEncoder for StubTextEncoder {
    fn id(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding, TextError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(TextError::BadInput("empty string".into()));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for tok in &tokens {
            data.extend(self.token_row(tok));
        }
        let tokens_emb = Tensor::new(&[tokens.len(), self.dim], data);
        let pooled = pool_rows(&tokens_emb);
        Ok(TextEmbedding {
            tokens: tokens_emb,
            pooled,
            lang_hint: None,
        })
    }

    fn encode_uncond(&self) -> TextEmbedding {
        // One row, hashed from the empty byte string.
        let row = self.token_row("");
        let tokens = Tensor::new(&[1, self.dim], row);
        let pooled = pool_rows(&tokens);
        TextEmbedding {
            tokens,
            pooled,
            lang_hint: None,
        }
    }
}

/// Registry of encoder backends keyed by string id.
#[derive(Default, Clone)]
pub struct EncoderRegistry {
    backends: BTreeMap<String, Arc<dyn TextEncoder>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the stub encoder pre-registered at the given dim.
    pub fn with_stub(dim: usize) -> Self {
        let mut r = Self::new();
        r.register(Arc::new(StubTextEncoder::new(dim)));
        r
    }

    pub fn register(&mut self, encoder: Arc<dyn TextEncoder>) {
        self.backends.insert(encoder.id().to_string(), encoder);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn TextEncoder>, TextError> {
        self.backends
            .get(id)
            .ok_or_else(|| TextError::BackendMissing(id.to_string()))
    }
}

/// Encode text with a registered backend.
pub fn encode_text(
    registry: &EncoderRegistry,
    backend_id: &str,
    text: &str,
) -> Result<TextEmbedding, TextError> {
    registry.get(backend_id)?.encode(text)
}
