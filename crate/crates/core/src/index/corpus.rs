use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Language;

/// One snippet to ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    #[serde(alias = "code")]
    pub source: String,
    #[serde(default = "other_language")]
    pub language: Language,
}

fn other_language() -> Language {
    Language::Other
}

impl CorpusItem {
    pub fn new(id: impl Into<String>, source: impl Into<String>, language: Language) -> Self {
        CorpusItem {
            id: id.into(),
            source: source.into(),
            language,
        }
    }
}

/// Reads a JSONL corpus: one `{"id", "source" | "code", "language"}` per line.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<CorpusItem>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::format("corpus", format!("line {}", n + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

/// Loads a corpus from a `.jsonl` file or a directory of source files.
///
/// Directory entries are identified by their path relative to the root
/// (with `/` separators); files whose extension maps to no supported
/// language are skipped and listed in the returned diagnostics.
pub fn load_corpus(path: &Path) -> Result<(Vec<CorpusItem>, Vec<String>)> {
    if path.is_file() {
        let f = fs::File::open(path)?;
        return Ok((read_jsonl(std::io::BufReader::new(f))?, Vec::new()));
    }
    if !path.is_dir() {
        return Err(Error::Config(format!("corpus path {} does not exist", path.display())));
    }
    let mut items = Vec::new();
    let mut diagnostics = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let language = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .and_then(Language::from_extension);
        let Some(language) = language else {
            diagnostics.push(format!("{id}: unsupported extension, skipped"));
            continue;
        };
        match fs::read_to_string(entry.path()) {
            Ok(source) => items.push(CorpusItem { id, source, language }),
            Err(e) => diagnostics.push(format!("{id}: {e}, skipped")),
        }
    }
    Ok((items, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_accepts_code_alias() {
        let text = "{\"id\":\"a\",\"code\":\"x = 1\",\"language\":\"python\"}\n\n{\"id\":\"b\",\"source\":\"y\"}\n";
        let items = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(items[0], CorpusItem::new("a", "x = 1", Language::Python));
        assert_eq!(items[1].language, Language::Other);
        assert!(read_jsonl("{\"id\":1}".as_bytes()).is_err());
    }

    #[test]
    fn directory_walk() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("pkg")).unwrap();
        fs::write(dir.path().join("pkg/a.py"), "x = 1\n").unwrap();
        fs::write(dir.path().join("b.go"), "package b\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "hi").unwrap();
        let (items, diags) = load_corpus(dir.path()).unwrap();
        let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["b.go", "pkg/a.py"]);
        assert_eq!(items[1].language, Language::Python);
        assert_eq!(diags.len(), 1);
    }
}
