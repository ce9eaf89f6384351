use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{require_text, AstNodeType, EmbedRequest, EmbedResponse, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{tokenize, TextKind, Token};

pub const DEFAULT_DIMENSION: usize = 64;
pub const DEFAULT_SEED: u64 = 0x5eed;

const TOKEN_KEYSPACE: &str = "token";
const TYPE_KEYSPACE: &str = "ast-type";
const REFERENCE_KEYSPACE: &str = "reference";

/// Deterministic, context-free embedder.
///
/// Every token maps to a unit vector drawn from a generator seeded by
/// `sha256(keyspace, seed, text)`. Code tokens with an AST type get the type's
/// vector added before renormalizing. Reference (sentence) embeddings use a
/// separate keyspace and mean-pool over the sentence tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIMENSION, DEFAULT_SEED)
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { dimension, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit vector for a token's text, ignoring AST type.
    pub fn base_vector(&self, text: &str) -> Vec<f64> {
        prf_unit(TOKEN_KEYSPACE, self.seed, text, self.dimension)
    }

    /// Unit vector added for an AST node type.
    pub fn type_vector(&self, ty: AstNodeType) -> Vec<f64> {
        prf_unit(TYPE_KEYSPACE, self.seed, ty.as_str(), self.dimension)
    }

    fn reference_token_vector(&self, text: &str) -> Vec<f64> {
        prf_unit(REFERENCE_KEYSPACE, self.seed, text, self.dimension)
    }
}

fn prf_unit(keyspace: &str, seed: u64, key: &str, dimension: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(keyspace.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    let mut v: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = super::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> String {
        format!("hash-embedder(seed={})", self.seed)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse> {
        require_text(&req.text)?;
        let tokens = tokenize(&req.text, req.kind);
        if let Some(types) = &req.ast_types {
            if req.kind != TextKind::Code {
                return Err(Error::Contract("AST types are only accepted for code".into()));
            }
            if types.len() != tokens.len() {
                return Err(Error::Contract(format!(
                    "{} AST types for {} tokens",
                    types.len(),
                    tokens.len()
                )));
            }
        }
        let embeddings = tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let mut v = self.base_vector(&tok.text);
                if let Some(types) = &req.ast_types {
                    for (x, t) in v.iter_mut().zip(self.type_vector(types[i])) {
                        *x += t;
                    }
                    normalize(&mut v);
                }
                Embedding(v)
            })
            .collect();
        Ok(EmbedResponse {
            dimension: self.dimension,
            tokens,
            embeddings,
        })
    }

    fn embed_reference(&self, text: &str) -> Result<Embedding> {
        require_text(text)?;
        let tokens = tokenize(text, TextKind::Query);
        let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| self.reference_token_vector(&t.text)).collect();
        let mut v = super::mean(vectors.iter().map(Vec::as_slice))?.into_inner();
        normalize(&mut v);
        Ok(Embedding(v))
    }

    fn tokenize(&self, text: &str, kind: TextKind) -> Result<Vec<Token>> {
        Ok(tokenize(text, kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine, norm};
    use rand::{Rng, SeedableRng};

    #[test]
    fn repeated_token_gets_identical_vector() {
        let e = HashEmbedder::default();
        let r = e.embed(&EmbedRequest::query("sort list then sort again")).unwrap();
        assert_eq!(r.tokens[0].text, "sort");
        assert_eq!(r.tokens[3].text, "sort");
        assert_eq!(r.embeddings[0], r.embeddings[3]);
    }

    #[test]
    fn vectors_are_unit_norm() {
        let e = HashEmbedder::default();
        let r = e
            .embed(&EmbedRequest::code(
                "x = foo(1)\nreturn x",
                Some(vec![AstNodeType::Identifier; 8]),
            ))
            .unwrap();
        for v in &r.embeddings {
            assert!((norm(v) - 1.0).abs() < 1e-9);
        }
        assert!((norm(&e.embed_reference("merge two dicts").unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn typed_token_is_renormalized_sum_of_components() {
        let e = HashEmbedder::new(16, 7);
        let r = e
            .embed(&EmbedRequest::code(
                "x = 1",
                Some(vec![AstNodeType::Identifier, AstNodeType::Assignment, AstNodeType::NumberLiteral]),
            ))
            .unwrap();
        let sum: Vec<f64> = e
            .base_vector("=")
            .iter()
            .zip(e.type_vector(AstNodeType::Assignment))
            .map(|(a, b)| a + b)
            .collect();
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (got, want) in r.embeddings[1].iter().zip(&sum) {
            assert!((got - want / n).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_keyspace_is_independent() {
        let e = HashEmbedder::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut small = 0;
        for _ in 0..100 {
            let word: String = (0..8).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let a = &e.embed(&EmbedRequest::query(word.clone())).unwrap().embeddings[0];
            let b = e.embed_reference(&word).unwrap();
            if cosine(a, &b).value.abs() < 0.5 {
                small += 1;
            }
        }
        assert!(small >= 95, "only {small}/100 below 0.5");
    }

    #[test]
    fn identical_reference_texts_have_cosine_one() {
        let e = HashEmbedder::default();
        let a = e.embed_reference("read a file line by line").unwrap();
        let b = e.embed_reference("read a file line by line").unwrap();
        assert!((cosine(&a, &b).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blank_input_is_rejected() {
        let e = HashEmbedder::default();
        assert!(matches!(e.embed_reference("  \n"), Err(Error::Domain(_))));
        assert!(matches!(e.embed(&EmbedRequest::query("")), Err(Error::Domain(_))));
    }

    #[test]
    fn ast_type_count_must_match() {
        let e = HashEmbedder::default();
        let err = e.embed(&EmbedRequest::code("a b", Some(vec![AstNodeType::Other]))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
