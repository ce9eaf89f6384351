//! Corpus ingestion, persistence and explained search.
//!
//! An [`Engine`] bundles the embedding provider with the query and code
//! probe heads. An [`Index`] holds analyzed, embedded and highlight-scored
//! entries; it lives in memory or in a directory (see [`store`]). Each
//! ingest produces a new immutable generation; searches run against a
//! snapshot and never block on a writer.

mod corpus;
pub mod store;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, read_jsonl, CorpusItem};
pub use store::{IndexManifest, ProviderFingerprint};

use crate::analyzer::{analyze_tokens, line_embeddings, AnalyzedCode};
use crate::embed::{EmbedRequest, EmbeddingProvider, HashEmbedder, ProviderConfig};
use crate::error::{Error, Result};
use crate::eval::Ranker;
use crate::matcher::{rank, Candidate, ExplainedResult, LineView, MatchStats};
use crate::model::{Language, TextKind, Token};
use crate::query::{cluster_concepts, score_highlights, ProbeHead, QueryConcept, DELTA_CLUSTER, DELTA_HIGHLIGHT};

/// Provider plus probe heads.
pub struct Engine {
    provider: Arc<dyn EmbeddingProvider>,
    query_head: ProbeHead,
    code_head: ProbeHead,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("fingerprint", &self.fingerprint()).finish()
    }
}

impl Engine {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, query_head: ProbeHead, code_head: ProbeHead) -> Result<Self> {
        let dim = provider.dimension();
        for head in [&query_head, &code_head] {
            if head.dimension() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: head.dimension(),
                });
            }
        }
        if query_head.kind != TextKind::Query || code_head.kind != TextKind::Code {
            return Err(Error::Config("probe heads passed in the wrong order".into()));
        }
        Ok(Engine {
            provider,
            query_head,
            code_head,
        })
    }

    /// The deterministic test embedder with seeded heads.
    pub fn hashed(dimension: usize, seed: u64, head_seed: u64) -> Self {
        let provider = Arc::new(HashEmbedder::new(dimension, seed));
        Engine {
            provider,
            query_head: ProbeHead::seeded(TextKind::Query, dimension, head_seed),
            code_head: ProbeHead::seeded(TextKind::Code, dimension, head_seed),
        }
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        let provider = cfg.build_provider()?;
        let dim = provider.dimension();
        let head = |path: &Option<PathBuf>, kind| match path {
            Some(p) => ProbeHead::load(p),
            None => Ok(ProbeHead::seeded(kind, dim, cfg.head_seed)),
        };
        let query_head = head(&cfg.query_head, TextKind::Query)?;
        let code_head = head(&cfg.code_head, TextKind::Code)?;
        Engine::new(provider, query_head, code_head)
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        &*self.provider
    }

    pub fn query_head(&self) -> &ProbeHead {
        &self.query_head
    }

    pub fn code_head(&self) -> &ProbeHead {
        &self.code_head
    }

    pub fn fingerprint(&self) -> ProviderFingerprint {
        ProviderFingerprint {
            name: self.provider.name(),
            dimension: self.provider.dimension(),
            query_head: self.query_head.checksum(),
            code_head: self.code_head.checksum(),
        }
    }

    /// Analyzes, embeds and highlight-scores one snippet.
    pub fn prepare(&self, item: &CorpusItem) -> Result<CorpusEntry> {
        let tokens = self.provider.tokenize(&item.source, TextKind::Code)?;
        let analyzed = analyze_tokens(&item.source, item.language, tokens);
        let resp = self
            .provider
            .embed(&EmbedRequest::code(item.source.clone(), Some(analyzed.ast_types.clone())))?;
        resp.check()?;
        if resp.tokens != analyzed.tokens {
            return Err(Error::MalformedResponse(format!(
                "provider returned {} tokens after announcing {}",
                resp.tokens.len(),
                analyzed.tokens.len()
            )));
        }
        let highlights = score_highlights(&resp, &self.code_head)?.scores;
        // The threshold only sets `concept_bearing`, which is recomputed per search.
        let lines = line_embeddings(&resp, &highlights, DELTA_HIGHLIGHT)?
            .into_iter()
            .map(|l| StoredLine {
                line_index: l.line_index,
                max_highlight: l.max_highlight,
                vector: l.vector.into_inner(),
            })
            .collect();
        Ok(CorpusEntry {
            id: item.id.clone(),
            analyzed,
            highlights,
            lines,
        })
    }

    /// Embeds, scores and clusters a query.
    pub fn analyze_query(&self, query: &str, delta_highlight: f64, delta_cluster: f64) -> Result<AnalyzedQuery> {
        check_thresholds(delta_highlight, delta_cluster)?;
        let resp = self.provider.embed(&EmbedRequest::query(query.to_string()))?;
        resp.check()?;
        let scores = score_highlights(&resp, &self.query_head)?;
        let concepts = cluster_concepts(&resp, &scores, delta_highlight, delta_cluster)?;
        Ok(AnalyzedQuery {
            tokens: resp.tokens,
            highlights: scores.scores,
            concepts,
        })
    }
}

fn check_thresholds(delta_highlight: f64, delta_cluster: f64) -> Result<()> {
    if !(delta_highlight > 0.0 && delta_highlight < 1.0) {
        return Err(Error::Domain(format!("delta_highlight {delta_highlight} not in (0, 1)")));
    }
    if !(delta_cluster > 0.0 && delta_cluster <= 1.0) {
        return Err(Error::Domain(format!("delta_cluster {delta_cluster} not in (0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedQuery {
    pub tokens: Vec<Token>,
    pub highlights: Vec<f64>,
    pub concepts: Vec<QueryConcept>,
}

/// Stored embedding of one non-blank code line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLine {
    pub line_index: usize,
    pub max_highlight: f64,
    pub vector: Vec<f64>,
}

/// One indexed snippet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub analyzed: AnalyzedCode,
    /// Code-head probability per token.
    pub highlights: Vec<f64>,
    pub lines: Vec<StoredLine>,
}

impl CorpusEntry {
    pub fn source(&self) -> &str {
        &self.analyzed.source
    }

    pub fn language(&self) -> Language {
        self.analyzed.language
    }

    /// Lines with some token above `delta_highlight`.
    pub fn bearing_lines(&self, delta_highlight: f64) -> impl Iterator<Item = &StoredLine> {
        self.lines.iter().filter(move |l| l.max_highlight > delta_highlight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub top_k: usize,
    pub delta_highlight: f64,
    pub delta_cluster: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            top_k: 10,
            delta_highlight: DELTA_HIGHLIGHT,
            delta_cluster: DELTA_CLUSTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub id: usize,
    /// Character offsets `[start, end)` of each member token in the query.
    pub token_spans: Vec<[usize; 2]>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchView {
    pub concept: usize,
    pub line: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
    pub degenerate: bool,
    pub matches: Vec<MatchView>,
    pub source: String,
}

/// Search output in the HTTP response shape, plus diagnostics and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub concepts: Vec<ConceptView>,
    pub results: Vec<SearchHit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub stats: MatchStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub ingested: usize,
    /// Ingested ids that replaced an existing entry.
    pub replaced: usize,
    /// `(id, reason)` for entries the provider could not process.
    pub skipped: Vec<(String, String)>,
    pub total_tokens: usize,
    /// Entry count after the ingest.
    pub entries: usize,
    pub generation: u64,
}

/// One immutable view of the index.
#[derive(Debug, Default)]
pub struct Generation {
    pub number: u64,
    pub entries: BTreeMap<String, Arc<CorpusEntry>>,
    pub segments: Vec<String>,
}

pub struct Index {
    engine: Arc<Engine>,
    dir: Option<PathBuf>,
    current: RwLock<Arc<Generation>>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for Index {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Index")
            .field("dir", &self.dir)
            .field("entries", &self.len())
            .finish()
    }
}

impl Index {
    pub fn in_memory(engine: Arc<Engine>) -> Self {
        Index {
            engine,
            dir: None,
            current: RwLock::new(Arc::new(Generation::default())),
            writer: Mutex::new(()),
        }
    }

    /// Creates an empty index in `dir` (created if missing). Fails if a
    /// manifest is already there.
    pub fn create(dir: &Path, engine: Arc<Engine>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        if dir.join(store::MANIFEST_FILE).exists() {
            return Err(Error::Config(format!("{} already holds an index", dir.display())));
        }
        IndexManifest::empty(engine.fingerprint()).write(dir)?;
        Ok(Index {
            dir: Some(dir.to_path_buf()),
            ..Index::in_memory(engine)
        })
    }

    /// Opens an existing index, refusing one built by a different provider.
    pub fn open(dir: &Path, engine: Arc<Engine>) -> Result<Self> {
        let manifest = IndexManifest::read(dir)?;
        let live = engine.fingerprint();
        if manifest.provider != live {
            return Err(Error::ProviderMismatch {
                stored: manifest.provider.to_string(),
                live: live.to_string(),
            });
        }
        let entries = store::load_entries(dir, &manifest)?;
        Ok(Index {
            engine,
            dir: Some(dir.to_path_buf()),
            current: RwLock::new(Arc::new(Generation {
                number: manifest.generation,
                entries,
                segments: manifest.segments,
            })),
            writer: Mutex::new(()),
        })
    }

    pub fn open_or_create(dir: &Path, engine: Arc<Engine>) -> Result<Self> {
        if dir.join(store::MANIFEST_FILE).exists() {
            Index::open(dir, engine)
        } else {
            Index::create(dir, engine)
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn snapshot(&self) -> Arc<Generation> {
        self.current.read().expect("index lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Arc<CorpusEntry>> {
        self.snapshot().entries.get(id).cloned()
    }

    /// Analyzes and stores every item. Ids already in the index are
    /// replaced. Items the provider fails on are skipped and reported.
    pub fn ingest(&self, items: &[CorpusItem]) -> Result<IngestStats> {
        let mut seen = HashSet::new();
        let mut dups: Vec<String> = items
            .iter()
            .filter(|i| !seen.insert(i.id.as_str()))
            .map(|i| i.id.clone())
            .collect();
        if !dups.is_empty() {
            dups.sort();
            dups.dedup();
            return Err(Error::DuplicateIds(dups));
        }

        let prepared: Vec<Result<CorpusEntry>> = items.par_iter().map(|i| self.engine.prepare(i)).collect();

        let _guard = self.writer.lock().expect("index writer lock poisoned");
        let base = self.snapshot();
        let mut stats = IngestStats::default();
        let mut fresh = Vec::new();
        for (item, entry) in items.iter().zip(prepared) {
            match entry {
                Ok(e) => {
                    stats.total_tokens += e.analyzed.tokens.len();
                    fresh.push(Arc::new(e));
                }
                Err(err) => stats.skipped.push((item.id.clone(), err.to_string())),
            }
        }

        let number = base.number + 1;
        let mut segments = base.segments.clone();
        if let Some(dir) = &self.dir {
            if !fresh.is_empty() {
                let name = store::segment_name(number);
                store::write_segment(&dir.join(&name), &fresh)?;
                segments.push(name);
            }
        }
        let mut entries = base.entries.clone();
        for e in fresh {
            stats.ingested += 1;
            if entries.insert(e.id.clone(), e).is_some() {
                stats.replaced += 1;
            }
        }
        if let Some(dir) = &self.dir {
            IndexManifest {
                format_version: store::FORMAT_VERSION,
                generation: number,
                provider: self.engine.fingerprint(),
                entries: entries.len(),
                segments: segments.clone(),
            }
            .write(dir)?;
        }
        stats.entries = entries.len();
        stats.generation = number;
        *self.current.write().expect("index lock poisoned") = Arc::new(Generation {
            number,
            entries,
            segments,
        });
        Ok(stats)
    }

    /// Explained top-k search over every entry.
    pub fn search(&self, query: &str, opts: &SearchOptions) -> Result<SearchResponse> {
        if opts.top_k == 0 {
            return Err(Error::Domain("top_k must be at least 1".into()));
        }
        let q = self.engine.analyze_query(query, opts.delta_highlight, opts.delta_cluster)?;
        let concepts = q
            .concepts
            .iter()
            .enumerate()
            .map(|(id, c)| ConceptView {
                id,
                token_spans: c.members.iter().map(|&m| [q.tokens[m].start, q.tokens[m].end]).collect(),
                fallback: c.fallback,
            })
            .collect();

        let snapshot = self.snapshot();
        if snapshot.entries.is_empty() {
            return Ok(SearchResponse {
                concepts,
                results: Vec::new(),
                diagnostics: vec!["index is empty".into()],
                stats: MatchStats::default(),
            });
        }
        let (ranked, stats) = rank_entries(&q.concepts, snapshot.entries.values(), opts.delta_highlight)?;
        let results = ranked
            .into_iter()
            .take(opts.top_k)
            .map(|r| SearchHit {
                source: snapshot.entries[&r.id].source().to_string(),
                id: r.id,
                score: r.score,
                degenerate: r.degenerate,
                matches: r
                    .matches
                    .into_iter()
                    .map(|m| MatchView {
                        concept: m.concept,
                        line: m.line,
                        similarity: m.similarity,
                    })
                    .collect(),
            })
            .collect();
        Ok(SearchResponse {
            concepts,
            results,
            diagnostics: Vec::new(),
            stats,
        })
    }
}

/// Ranks entries against query concepts using their concept-bearing lines.
pub fn rank_entries<'a>(
    concepts: &[QueryConcept],
    entries: impl Iterator<Item = &'a Arc<CorpusEntry>>,
    delta_highlight: f64,
) -> Result<(Vec<ExplainedResult>, MatchStats)> {
    let candidates: Vec<Candidate<'_>> = entries
        .map(|e| Candidate {
            id: &e.id,
            lines: e
                .bearing_lines(delta_highlight)
                .map(|l| LineView {
                    line_index: l.line_index,
                    vector: &l.vector,
                })
                .collect(),
        })
        .collect();
    rank(concepts, &candidates)
}

impl Ranker for Index {
    fn rank_all(&self, query: &str) -> Result<Vec<String>> {
        let opts = SearchOptions {
            top_k: self.len().max(1),
            ..Default::default()
        };
        Ok(self.search(query, &opts)?.results.into_iter().map(|h| h.id).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Arc<Engine> {
        Arc::new(Engine::hashed(32, 1, 2))
    }

    fn items() -> Vec<CorpusItem> {
        vec![
            CorpusItem::new("a", "def add(x, y):\n    return x + y\n", Language::Python),
            CorpusItem::new("b", "func Read(path string) ([]byte, error) {\n\treturn os.ReadFile(path)\n}", Language::Go),
            CorpusItem::new("c", "x = [3, 1, 2]\n\nx.sort()\nprint(x)", Language::Python),
        ]
    }

    #[test]
    fn reopen_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let idx = Index::create(dir.path(), engine()).unwrap();
        let stats = idx.ingest(&items()).unwrap();
        assert_eq!(stats.ingested, 3);
        assert_eq!(stats.entries, 3);
        let before = idx.search("sort a list", &SearchOptions::default()).unwrap();
        let reopened = Index::open(dir.path(), engine()).unwrap();
        assert_eq!(reopened.len(), 3);
        for id in ["a", "b", "c"] {
            assert_eq!(idx.get(id), reopened.get(id));
        }
        assert_eq!(before, reopened.search("sort a list", &SearchOptions::default()).unwrap());
    }

    #[test]
    fn reingest_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let idx = Index::create(dir.path(), engine()).unwrap();
        idx.ingest(&items()).unwrap();
        let stats = idx
            .ingest(&[CorpusItem::new("a", "def sub(x, y):\n    return x - y\n", Language::Python)])
            .unwrap();
        assert_eq!((stats.replaced, stats.entries), (1, 3));
        let reopened = Index::open(dir.path(), engine()).unwrap();
        assert!(reopened.get("a").unwrap().source().contains("sub"));
        assert_eq!(reopened.len(), 3);
    }

    #[test]
    fn duplicates_and_skips() {
        let idx = Index::in_memory(engine());
        let mut dup = items();
        dup.push(dup[0].clone());
        assert!(matches!(idx.ingest(&dup), Err(Error::DuplicateIds(ids)) if ids == ["a"]));
        let stats = idx
            .ingest(&[CorpusItem::new("blank", "   \n", Language::Python), items()[0].clone()])
            .unwrap();
        assert_eq!(stats.skipped.len(), 1);
        assert_eq!(stats.skipped[0].0, "blank");
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn provider_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        Index::create(dir.path(), engine()).unwrap().ingest(&items()).unwrap();
        let other = Arc::new(Engine::hashed(32, 1, 3));
        assert!(matches!(Index::open(dir.path(), other), Err(Error::ProviderMismatch { .. })));
    }

    #[test]
    fn empty_index_and_top_k() {
        let idx = Index::in_memory(engine());
        let r = idx.search("anything", &SearchOptions::default()).unwrap();
        assert!(r.results.is_empty());
        assert_eq!(r.diagnostics.len(), 1);
        idx.ingest(&items()).unwrap();
        let opts = SearchOptions {
            top_k: 50,
            ..Default::default()
        };
        let r = idx.search("read a file", &opts).unwrap();
        assert_eq!(r.results.len(), 3);
        assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(idx.search("x", &SearchOptions { top_k: 0, ..opts }).is_err());
    }

    #[test]
    fn interrupted_ingest_keeps_old_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let idx = Index::create(dir.path(), engine()).unwrap();
        idx.ingest(&items()[..1]).unwrap();
        // a half-written segment and manifest from a crashed writer
        std::fs::write(dir.path().join("seg-000002.bin.tmp"), b"CSSG\x01").unwrap();
        std::fs::write(dir.path().join("manifest.json.tmp"), b"{\"trunc").unwrap();
        let reopened = Index::open(dir.path(), engine()).unwrap();
        assert_eq!(reopened.len(), 1);
    }
}
