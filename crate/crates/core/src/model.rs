//! Shared domain types: tokens with character offsets, concept spans,
//! code units, and the annotated query/code record.
//!
//! Offsets are counted in Unicode scalar values (`char`s), never bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token of a query or code snippet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Start offset (inclusive), in chars.
    pub start: usize,
    /// End offset (exclusive), in chars.
    pub end: usize,
    /// 0-based line number; `None` for query tokens.
    pub line_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Query,
    Code,
}

impl fmt::Display for TextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextKind::Query => "query",
            TextKind::Code => "code",
        })
    }
}

/// A source text together with its tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub source: String,
    pub tokens: Vec<Token>,
}

impl TokenizedText {
    /// Tokenizes with the default word/punctuation splitter.
    ///
    /// Identifier characters (alphanumerics and `_`) form whole tokens, each
    /// maximal run of other non-whitespace characters forms one token, and
    /// whitespace separates tokens. Code tokens carry line numbers.
    pub fn new(source: impl Into<String>, kind: TextKind) -> Self {
        let source = source.into();
        let tokens = tokenize(&source, kind);
        TokenizedText { source, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of physical lines (a trailing newline opens one more, empty, line).
    pub fn line_count(&self) -> usize {
        line_count(&self.source)
    }

    /// Indices of the tokens on `line`, in offset order.
    pub fn tokens_in_line(&self, line: usize) -> Result<Vec<usize>> {
        let lines = self.line_count();
        if line >= lines {
            return Err(Error::Range {
                what: "line",
                index: line,
                len: lines,
            });
        }
        Ok(self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.line_index == Some(line))
            .map(|(i, _)| i)
            .collect())
    }

    /// Source text between two char offsets.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        char_slice(&self.source, start, end)
    }
}

pub fn line_count(source: &str) -> usize {
    source.chars().filter(|&c| c == '\n').count() + 1
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

#[derive(PartialEq, Clone, Copy)]
enum CharClass {
    Space,
    Word,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if is_word_char(c) {
        CharClass::Word
    } else {
        CharClass::Punct
    }
}

/// Default tokenizer shared by the deterministic embedder, the code analyzer
/// and the annotation validators.
pub fn tokenize(source: &str, kind: TextKind) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut line = 0usize;
    let mut current: Option<(CharClass, usize, usize, String)> = None;

    let mut flush = |current: &mut Option<(CharClass, usize, usize, String)>, end: usize| {
        if let Some((_, start, tok_line, text)) = current.take() {
            tokens.push(Token {
                text,
                start,
                end,
                line_index: (kind == TextKind::Code).then_some(tok_line),
            });
        }
    };

    let mut pos = 0usize;
    for c in source.chars() {
        let class = classify(c);
        match (&mut current, class) {
            (Some((cur, _, _, text)), cl) if *cur == cl && cl != CharClass::Space => text.push(c),
            (_, CharClass::Space) => flush(&mut current, pos),
            (_, cl) => {
                flush(&mut current, pos);
                current = Some((cl, pos, line, c.to_string()));
            }
        }
        if c == '\n' {
            line += 1;
        }
        pos += 1;
    }
    flush(&mut current, pos);
    tokens
}

/// Slice by char offsets; out-of-range bounds are clamped.
pub fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let mut indices = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let total = s.chars().count();
    let start = start.min(total);
    let end = end.clamp(start, total);
    let b_start = indices.nth(start).unwrap_or(s.len());
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1).unwrap_or(s.len())
    };
    &s[b_start..b_end]
}

/// Source languages with grammar support; anything else is `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Ruby,
    Javascript,
    Go,
    Python,
    Java,
    Php,
    #[serde(other)]
    Other,
}

impl Language {
    pub const ALL: [Language; 7] = [
        Language::Ruby,
        Language::Javascript,
        Language::Go,
        Language::Python,
        Language::Java,
        Language::Php,
        Language::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Ruby => "ruby",
            Language::Javascript => "javascript",
            Language::Go => "go",
            Language::Python => "python",
            Language::Java => "java",
            Language::Php => "php",
            Language::Other => "other",
        }
    }

    /// Guess from a file extension.
    pub fn from_extension(ext: &str) -> Option<Language> {
        Some(match ext {
            "rb" => Language::Ruby,
            "js" | "mjs" | "cjs" | "jsx" => Language::Javascript,
            "go" => Language::Go,
            "py" => Language::Python,
            "java" => Language::Java,
            "php" => Language::Php,
            _ => return None,
        })
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ruby" => Language::Ruby,
            "javascript" | "js" => Language::Javascript,
            "go" => Language::Go,
            "python" | "py" => Language::Python,
            "java" => Language::Java,
            "php" => Language::Php,
            _ => Language::Other,
        })
    }
}

/// One query concept: verbatim span strings plus the token indices they cover.
///
/// The strings are checked against the query text; the indices feed the math.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub id: String,
    pub spans: Vec<String>,
    pub token_indices: Vec<usize>,
}

/// A range of code lines (inclusive, 0-based) and its description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUnit {
    pub line_start: usize,
    pub line_end: usize,
    #[serde(default)]
    pub description: String,
    /// Verbatim unit text, when the annotator reports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl CodeUnit {
    pub fn lines(&self) -> std::ops::RangeInclusive<usize> {
        self.line_start..=self.line_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub concept_id: String,
    pub units: Vec<CodeUnit>,
}

/// A query/code pair with concept spans and concept-to-code alignments.
///
/// One JSON object per line in annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub code: String,
    pub language: Language,
    pub concepts: Vec<ConceptSpan>,
    pub alignments: Vec<Alignment>,
}

impl AnnotatedPair {
    pub fn concept(&self, id: &str) -> Option<&ConceptSpan> {
        self.concepts.iter().find(|c| c.id == id)
    }

    /// Units aligned to `concept_id` (empty if none).
    pub fn units_for<'a>(&'a self, concept_id: &'a str) -> impl Iterator<Item = &'a CodeUnit> + 'a {
        self.alignments
            .iter()
            .filter(move |a| a.concept_id == concept_id)
            .flat_map(|a| a.units.iter())
    }

    /// All code lines aligned to `concept_id`, ascending.
    pub fn aligned_lines(&self, concept_id: &str) -> Vec<usize> {
        let mut lines: Vec<usize> = self.units_for(concept_id).flat_map(|u| u.lines()).collect();
        lines.sort_unstable();
        lines.dedup();
        lines
    }
}

/// Reads an annotation file (one record per non-empty line).
pub fn read_pairs(reader: impl BufRead) -> Result<Vec<AnnotatedPair>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_pairs<'a>(
    mut writer: impl Write,
    pairs: impl IntoIterator<Item = &'a AnnotatedPair>,
) -> Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut writer, pair)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionViolation {
    /// A query token claimed by more than one concept.
    Overlap { token: usize, concepts: Vec<String> },
    OutOfRange { concept: String, token: usize, len: usize },
    EmptySpan { concept: String },
    NotIncreasing { concept: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PartitionCheck {
    pub violations: Vec<PartitionViolation>,
}

impl PartitionCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that query concepts form a partial partition of the query tokens:
/// every index in range, each span strictly increasing, and no token shared
/// between concepts. Code lines may be shared freely.
pub fn validate_concept_partition(pair: &AnnotatedPair) -> PartitionCheck {
    let len = tokenize(&pair.query, TextKind::Query).len();
    let mut violations = Vec::new();
    let mut owners: BTreeMap<usize, Vec<String>> = BTreeMap::new();

    for concept in &pair.concepts {
        if concept.token_indices.is_empty() {
            violations.push(PartitionViolation::EmptySpan {
                concept: concept.id.clone(),
            });
            continue;
        }
        if concept.token_indices.windows(2).any(|w| w[0] >= w[1]) {
            violations.push(PartitionViolation::NotIncreasing {
                concept: concept.id.clone(),
            });
        }
        for &token in &concept.token_indices {
            if token >= len {
                violations.push(PartitionViolation::OutOfRange {
                    concept: concept.id.clone(),
                    token,
                    len,
                });
            }
            let ids = owners.entry(token).or_default();
            if !ids.contains(&concept.id) {
                ids.push(concept.id.clone());
            }
        }
    }

    for (token, concepts) in owners {
        if concepts.len() > 1 {
            violations.push(PartitionViolation::Overlap { token, concepts });
        }
    }
    PartitionCheck { violations }
}
