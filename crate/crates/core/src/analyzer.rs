//! Code segmentation, AST type tagging and line embeddings.
//!
//! Tokens are tagged by parsing the snippet with a tree-sitter grammar and
//! mapping the smallest node covering each token onto one of the twenty
//! [`AstNodeType`]s. The mapping tables live in `mappings/<language>.tsv`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use tree_sitter::{Node, Parser};

use crate::embed::{span_embedding, AstNodeType, EmbedResponse, Embedding};
use crate::error::{Error, Result};
use crate::model::{line_count, tokenize, Language, TextKind, Token};

/// Node-kind → coarse type table for one language.
///
/// Keys are either a bare node kind (`identifier`) or a `parent>kind` pair,
/// which takes precedence.
#[derive(Debug, Clone, Default)]
pub struct NodeKindMap {
    entries: HashMap<String, AstNodeType>,
}

impl NodeKindMap {
    /// Parses the two-column `node_kind<TAB>coarse_type` format. Lines
    /// starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, ty) = line
                .split_once('\t')
                .ok_or_else(|| Error::Contract(format!("mapping line {}: expected two columns", lineno + 1)))?;
            let ty: AstNodeType = ty.trim().parse()?;
            if entries.insert(kind.to_string(), ty).is_some() {
                return Err(Error::Contract(format!(
                    "mapping line {}: duplicate node kind `{kind}`",
                    lineno + 1
                )));
            }
        }
        Ok(NodeKindMap { entries })
    }

    pub fn get(&self, kind: &str) -> Option<AstNodeType> {
        self.entries.get(kind).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The table committed for `language` (empty for `Other`).
    pub fn builtin(language: Language) -> &'static NodeKindMap {
        static TABLES: OnceLock<HashMap<Language, NodeKindMap>> = OnceLock::new();
        let tables = TABLES.get_or_init(|| {
            let sources = [
                (Language::Python, include_str!("../mappings/python.tsv")),
                (Language::Javascript, include_str!("../mappings/javascript.tsv")),
                (Language::Go, include_str!("../mappings/go.tsv")),
                (Language::Java, include_str!("../mappings/java.tsv")),
                (Language::Ruby, include_str!("../mappings/ruby.tsv")),
                (Language::Php, include_str!("../mappings/php.tsv")),
            ];
            let mut tables: HashMap<_, _> = sources
                .into_iter()
                .map(|(lang, text)| (lang, NodeKindMap::parse(text).expect("committed mapping table is valid")))
                .collect();
            tables.insert(Language::Other, NodeKindMap::default());
            tables
        });
        &tables[&language]
    }

    /// Coarse type for `node`: walk up from the node until a `parent>kind`
    /// or `kind` entry matches.
    fn classify(&self, node: Node<'_>) -> AstNodeType {
        let mut current = Some(node);
        while let Some(n) = current {
            let parent = n.parent();
            if let Some(p) = parent {
                if let Some(t) = self.get(&format!("{}>{}", p.kind(), n.kind())) {
                    return t;
                }
            }
            if let Some(t) = self.get(n.kind()) {
                return t;
            }
            current = parent;
        }
        AstNodeType::Other
    }
}

fn grammar(language: Language) -> Option<tree_sitter::Language> {
    Some(match language {
        Language::Python => tree_sitter_python::LANGUAGE.into(),
        Language::Javascript => tree_sitter_javascript::LANGUAGE.into(),
        Language::Go => tree_sitter_go::LANGUAGE.into(),
        Language::Java => tree_sitter_java::LANGUAGE.into(),
        Language::Ruby => tree_sitter_ruby::LANGUAGE.into(),
        Language::Php => tree_sitter_php::LANGUAGE_PHP_ONLY.into(),
        Language::Other => return None,
    })
}

thread_local! {
    // Parsers hold mutable state; one per thread and language.
    static PARSERS: RefCell<HashMap<Language, Parser>> = RefCell::new(HashMap::new());
}

fn parse(language: Language, source: &str) -> std::result::Result<tree_sitter::Tree, String> {
    let grammar = grammar(language).ok_or_else(|| "no grammar for language `other`".to_string())?;
    PARSERS.with(|cell| {
        let mut parsers = cell.borrow_mut();
        if !parsers.contains_key(&language) {
            let mut parser = Parser::new();
            parser
                .set_language(&grammar)
                .map_err(|e| format!("loading {language} grammar: {e}"))?;
            parsers.insert(language, parser);
        }
        let parser = parsers.get_mut(&language).expect("inserted above");
        parser
            .parse(source, None)
            .ok_or_else(|| format!("{language} parser returned no tree"))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineInfo {
    pub line_index: usize,
    /// Token indices on this line (contiguous).
    pub tokens: Range<usize>,
    pub is_blank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedCode {
    pub source: String,
    pub language: Language,
    pub tokens: Vec<Token>,
    pub ast_types: Vec<AstNodeType>,
    /// One entry per physical line, blank lines included and flagged.
    pub lines: Vec<LineInfo>,
    /// Parse problems; when non-empty every token is typed `other`.
    pub diagnostics: Vec<String>,
}

impl AnalyzedCode {
    pub fn non_blank_lines(&self) -> impl Iterator<Item = &LineInfo> {
        self.lines.iter().filter(|l| !l.is_blank)
    }
}

/// Tokenizes with the default tokenizer and tags every token.
pub fn analyze(source: &str, language: Language) -> AnalyzedCode {
    analyze_tokens(source, language, tokenize(source, TextKind::Code))
}

/// Tags externally produced tokens (e.g. from a remote provider).
///
/// Never fails: a missing grammar or a tree with syntax errors leaves every
/// token typed [`AstNodeType::Other`] and records a diagnostic.
pub fn analyze_tokens(source: &str, language: Language, tokens: Vec<Token>) -> AnalyzedCode {
    let mut diagnostics = Vec::new();
    let ast_types = match parse(language, source) {
        Ok(tree) if tree.root_node().has_error() => {
            diagnostics.push(format!("{language}: syntax error, AST types degraded to `other`"));
            vec![AstNodeType::Other; tokens.len()]
        }
        Ok(tree) => {
            let map = NodeKindMap::builtin(language);
            let byte_offsets = char_to_byte_offsets(source);
            tokens
                .iter()
                .map(|t| {
                    let at = |c: usize| byte_offsets.get(c).copied().unwrap_or(source.len());
                    let (start, end) = (at(t.start), at(t.end));
                    tree.root_node()
                        .descendant_for_byte_range(start, end)
                        .map_or(AstNodeType::Other, |n| map.classify(n))
                })
                .collect()
        }
        Err(msg) => {
            if language != Language::Other {
                diagnostics.push(msg);
            }
            vec![AstNodeType::Other; tokens.len()]
        }
    };

    let lines = segment_lines(source, &tokens);
    AnalyzedCode {
        source: source.to_string(),
        language,
        tokens,
        ast_types,
        lines,
        diagnostics,
    }
}

fn char_to_byte_offsets(source: &str) -> Vec<usize> {
    source
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(source.len()))
        .collect()
}

fn segment_lines(source: &str, tokens: &[Token]) -> Vec<LineInfo> {
    let mut lines = Vec::with_capacity(line_count(source));
    let mut next = 0usize;
    for line_index in 0..line_count(source) {
        let start = next;
        while next < tokens.len() && tokens[next].line_index == Some(line_index) {
            next += 1;
        }
        lines.push(LineInfo {
            line_index,
            tokens: start..next,
            is_blank: start == next,
        });
    }
    lines
}

/// Embedding of one code line plus its highlight summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineEmbedding {
    pub line_index: usize,
    /// Mean over all tokens of the line.
    pub vector: Embedding,
    pub concept_bearing: bool,
    /// Largest token highlight probability on the line.
    pub max_highlight: f64,
}

/// One embedding per line that has tokens, flagged concept-bearing when some
/// token's highlight probability strictly exceeds `delta_highlight`.
///
/// Lines are taken from the token `line_index` of `resp`, so any provider
/// tokenization works. `highlights` is parallel to `resp.tokens`.
pub fn line_embeddings(resp: &EmbedResponse, highlights: &[f64], delta_highlight: f64) -> Result<Vec<LineEmbedding>> {
    if highlights.len() != resp.tokens.len() {
        return Err(Error::Contract(format!(
            "{} highlight scores for {} tokens",
            highlights.len(),
            resp.tokens.len()
        )));
    }
    if !(delta_highlight > 0.0 && delta_highlight < 1.0) {
        return Err(Error::Domain(format!("delta_highlight {delta_highlight} not in (0, 1)")));
    }

    let mut by_line: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, tok) in resp.tokens.iter().enumerate() {
        let line = tok
            .line_index
            .ok_or_else(|| Error::Contract("code token without a line index".into()))?;
        match by_line.last_mut() {
            Some((l, members)) if *l == line => members.push(i),
            _ => by_line.push((line, vec![i])),
        }
    }

    by_line
        .into_iter()
        .map(|(line_index, members)| {
            let max_highlight = members.iter().map(|&i| highlights[i]).fold(f64::NEG_INFINITY, f64::max);
            Ok(LineEmbedding {
                line_index,
                vector: span_embedding(&resp.embeddings, &members)?,
                concept_bearing: max_highlight > delta_highlight,
                max_highlight,
            })
        })
        .collect()
}
