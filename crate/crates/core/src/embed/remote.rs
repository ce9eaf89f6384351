use std::sync::OnceLock;
use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{require_text, EmbedRequest, EmbedResponse, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::{TextKind, Token};

#[derive(Serialize)]
struct ReferenceRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ReferenceResponse {
    dimension: usize,
    embedding: Embedding,
}

/// Client for an embedding service speaking
/// `POST /v1/embed` and `POST /v1/embed_reference`.
///
/// The first response fixes the session dimension unless one was given up
/// front; any later response with another dimension is an error.
#[derive(Debug)]
pub struct RemoteEmbedder {
    base_url: String,
    agent: ureq::Agent,
    dimension: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(base_url: impl Into<String>, dimension: Option<usize>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let cell = OnceLock::new();
        if let Some(d) = dimension {
            let _ = cell.set(d);
        }
        RemoteEmbedder {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            dimension: cell,
        }
    }

    /// Connects and fixes the session dimension with one reference call.
    pub fn connect(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = RemoteEmbedder::new(base_url, None, timeout);
        client.embed_reference("dimension probe")?;
        Ok(client)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{}", self.base_url, path);
        let mut response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))
    }

    fn check_dimension(&self, got: usize) -> Result<()> {
        let expected = *self.dimension.get_or_init(|| got);
        if expected != got {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> String {
        format!("remote({})", self.base_url)
    }

    fn dimension(&self) -> usize {
        self.dimension.get().copied().unwrap_or(0)
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse> {
        require_text(&req.text)?;
        let resp: EmbedResponse = self.post("/v1/embed", req)?;
        self.check_dimension(resp.dimension)?;
        resp.check()?;
        if let Some(types) = &req.ast_types {
            if types.len() != resp.tokens.len() {
                return Err(Error::MalformedResponse(format!(
                    "sent {} AST types, service produced {} tokens",
                    types.len(),
                    resp.tokens.len()
                )));
            }
        }
        Ok(resp)
    }

    fn embed_reference(&self, text: &str) -> Result<Embedding> {
        require_text(text)?;
        let resp: ReferenceResponse = self.post("/v1/embed_reference", &ReferenceRequest { text })?;
        self.check_dimension(resp.dimension)?;
        if resp.embedding.dimension() != resp.dimension {
            return Err(Error::MalformedResponse(format!(
                "declared dimension {} but embedding has {} values",
                resp.dimension,
                resp.embedding.dimension()
            )));
        }
        if !resp.embedding.is_finite() {
            return Err(Error::MalformedResponse("non-finite embedding value".into()));
        }
        Ok(resp.embedding)
    }

    fn tokenize(&self, text: &str, kind: TextKind) -> Result<Vec<Token>> {
        // The wire protocol has no tokenize endpoint; an untyped embed call
        // reports the service's tokens.
        let req = EmbedRequest {
            text: text.to_string(),
            kind,
            ast_types: None,
        };
        Ok(self.embed(&req)?.tokens)
    }
}
