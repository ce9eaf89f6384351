//! Per-token contextual embeddings.
//!
//! [`EmbeddingProvider`] is the seam between the engine and whatever encoder
//! produces token vectors. Two providers ship: [`HashEmbedder`], a
//! deterministic context-free embedder used for tests and the synthetic
//! benchmarks, and [`RemoteEmbedder`], a JSON/HTTP client for an external
//! embedding service.

mod config;
mod hashing;
mod remote;

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TextKind, Token};

pub use config::{ProviderConfig, ProviderKind};
pub use hashing::HashEmbedder;
pub use remote::RemoteEmbedder;

/// Norms below this are treated as zero by [`cosine`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A dense real-valued vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dimension: usize) -> Self {
        Embedding(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with a flag for zero-norm inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had norm below [`DEGENERATE_NORM`]; `value` is then 0.
    pub degenerate: bool,
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Panics if the dimensions differ.
pub fn cosine(a: &[f64], b: &[f64]) -> Cosine {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimensions");
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Component-wise arithmetic mean, accumulated in iteration order.
pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Embedding> {
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(Error::EmptyInput("mean of zero vectors"))?;
    let mut sum = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                got: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        count += 1;
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(Embedding(sum))
}

/// Coarse, language-portable AST node categories attached to code tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AstNodeType {
    Identifier,
    Call,
    NumberLiteral,
    StringLiteral,
    OtherLiteral,
    Operator,
    Assignment,
    ControlKeyword,
    DeclarationKeyword,
    TypeName,
    Parameter,
    FieldAccess,
    Comment,
    ReturnStmt,
    LoopConstruct,
    ConditionalConstruct,
    ImportStmt,
    FunctionDefinition,
    ClassDefinition,
    Other,
}

impl AstNodeType {
    pub const ALL: [AstNodeType; 20] = [
        AstNodeType::Identifier,
        AstNodeType::Call,
        AstNodeType::NumberLiteral,
        AstNodeType::StringLiteral,
        AstNodeType::OtherLiteral,
        AstNodeType::Operator,
        AstNodeType::Assignment,
        AstNodeType::ControlKeyword,
        AstNodeType::DeclarationKeyword,
        AstNodeType::TypeName,
        AstNodeType::Parameter,
        AstNodeType::FieldAccess,
        AstNodeType::Comment,
        AstNodeType::ReturnStmt,
        AstNodeType::LoopConstruct,
        AstNodeType::ConditionalConstruct,
        AstNodeType::ImportStmt,
        AstNodeType::FunctionDefinition,
        AstNodeType::ClassDefinition,
        AstNodeType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AstNodeType::Identifier => "identifier",
            AstNodeType::Call => "call",
            AstNodeType::NumberLiteral => "number-literal",
            AstNodeType::StringLiteral => "string-literal",
            AstNodeType::OtherLiteral => "other-literal",
            AstNodeType::Operator => "operator",
            AstNodeType::Assignment => "assignment",
            AstNodeType::ControlKeyword => "control-keyword",
            AstNodeType::DeclarationKeyword => "declaration-keyword",
            AstNodeType::TypeName => "type-name",
            AstNodeType::Parameter => "parameter",
            AstNodeType::FieldAccess => "field-access",
            AstNodeType::Comment => "comment",
            AstNodeType::ReturnStmt => "return-stmt",
            AstNodeType::LoopConstruct => "loop-construct",
            AstNodeType::ConditionalConstruct => "conditional-construct",
            AstNodeType::ImportStmt => "import-stmt",
            AstNodeType::FunctionDefinition => "function-definition",
            AstNodeType::ClassDefinition => "class-definition",
            AstNodeType::Other => "other",
        }
    }
}

impl fmt::Display for AstNodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AstNodeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AstNodeType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown AST node type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
    pub kind: TextKind,
    /// One entry per produced token (code only).
    pub ast_types: Option<Vec<AstNodeType>>,
}

impl EmbedRequest {
    pub fn query(text: impl Into<String>) -> Self {
        EmbedRequest {
            text: text.into(),
            kind: TextKind::Query,
            ast_types: None,
        }
    }

    pub fn code(text: impl Into<String>, ast_types: Option<Vec<AstNodeType>>) -> Self {
        EmbedRequest {
            text: text.into(),
            kind: TextKind::Code,
            ast_types,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dimension: usize,
    pub tokens: Vec<Token>,
    pub embeddings: Vec<Embedding>,
}

impl EmbedResponse {
    /// Checks token/vector parallelism, dimensions and finiteness.
    pub fn check(&self) -> Result<()> {
        if self.tokens.len() != self.embeddings.len() {
            return Err(Error::MalformedResponse(format!(
                "{} tokens but {} embeddings",
                self.tokens.len(),
                self.embeddings.len()
            )));
        }
        for e in &self.embeddings {
            if e.dimension() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    got: e.dimension(),
                });
            }
            if !e.is_finite() {
                return Err(Error::MalformedResponse("non-finite embedding value".into()));
            }
        }
        Ok(())
    }

    /// Mean of the member token vectors. Not renormalized.
    pub fn span_embedding(&self, indices: &[usize]) -> Result<Embedding> {
        span_embedding(&self.embeddings, indices)
    }
}

/// Mean-pools the vectors at `indices` (in the order given).
pub fn span_embedding(embeddings: &[Embedding], indices: &[usize]) -> Result<Embedding> {
    if indices.is_empty() {
        return Err(Error::Domain("span embedding of an empty token set".into()));
    }
    for &i in indices {
        if i >= embeddings.len() {
            return Err(Error::Range {
                what: "token",
                index: i,
                len: embeddings.len(),
            });
        }
    }
    mean(indices.iter().map(|&i| embeddings[i].as_ref()))
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Source of token embeddings (`embed`) and frozen sentence embeddings
/// (`embed_reference`).
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> String;

    /// Session-constant vector dimension.
    fn dimension(&self) -> usize;

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse>;

    /// Sentence-level vector from the frozen reference encoder.
    fn embed_reference(&self, text: &str) -> Result<Embedding>;

    /// Tokens this provider would produce for `text`, without embedding.
    ///
    /// Code analysis uses this to attach AST types before embedding.
    fn tokenize(&self, text: &str, kind: TextKind) -> Result<Vec<Token>>;
}

pub(crate) fn require_text(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Domain("text is empty after trimming whitespace".into()));
    }
    Ok(())
}
