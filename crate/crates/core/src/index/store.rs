//! On-disk layout: `manifest.json` plus append-only `seg-NNNNNN.bin` files.
//!
//! A segment is a magic/version header followed by entries. Each entry is a
//! `u32` length, a JSON header of that length, then the raw little-endian
//! `f64` payload: token highlights, per-line max highlight, line vectors.
//! Manifests are written to a temporary file and renamed into place, so a
//! crash mid-ingest leaves the previous manifest intact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CorpusEntry, StoredLine};
use crate::analyzer::AnalyzedCode;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const SEGMENT_MAGIC: &[u8; 4] = b"CSSG";

/// Identity of the provider and heads an index was built with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderFingerprint {
    pub name: String,
    pub dimension: usize,
    pub query_head: String,
    pub code_head: String,
}

impl std::fmt::Display for ProviderFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (dim {}, heads {}/{})",
            self.name,
            self.dimension,
            &self.query_head[..self.query_head.len().min(12)],
            &self.code_head[..self.code_head.len().min(12)]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub generation: u64,
    pub provider: ProviderFingerprint,
    pub entries: usize,
    /// Segment file names, oldest first. Later segments override earlier
    /// entries with the same id.
    pub segments: Vec<String>,
}

impl IndexManifest {
    pub fn empty(provider: ProviderFingerprint) -> Self {
        IndexManifest {
            format_version: FORMAT_VERSION,
            generation: 0,
            provider,
            entries: 0,
            segments: Vec::new(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let m: IndexManifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", &path, e))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "manifest",
                &path,
                format!("format version {} (expected {FORMAT_VERSION})", m.format_version),
            ));
        }
        Ok(m)
    }

    /// Atomically replaces the manifest in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

pub fn segment_name(generation: u64) -> String {
    format!("seg-{generation:06}.bin")
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    id: String,
    analyzed: AnalyzedCode,
    line_indices: Vec<usize>,
    dimension: usize,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes one entry (header length, header, payload).
pub fn encode_entry(entry: &CorpusEntry) -> Result<Vec<u8>> {
    let dimension = entry.lines.first().map_or(0, |l| l.vector.len());
    let header = EntryHeader {
        id: entry.id.clone(),
        analyzed: entry.analyzed.clone(),
        line_indices: entry.lines.iter().map(|l| l.line_index).collect(),
        dimension,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + header.len() + 8 * (entry.highlights.len() + entry.lines.len() * (dimension + 1)));
    out.extend_from_slice(&u32::try_from(header.len()).expect("entry header under 4 GiB").to_le_bytes());
    out.extend_from_slice(&header);
    put_f64s(&mut out, &entry.highlights);
    for line in &entry.lines {
        out.extend_from_slice(&line.max_highlight.to_le_bytes());
    }
    for line in &entry.lines {
        assert_eq!(line.vector.len(), dimension, "ragged line vectors");
        put_f64s(&mut out, &line.vector);
    }
    Ok(out)
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads the next entry, or `None` at a clean end of file.
pub fn decode_entry(r: &mut impl Read) -> std::io::Result<Option<CorpusEntry>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: EntryHeader =
        serde_json::from_slice(&header).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let highlights = read_f64s(r, header.analyzed.tokens.len())?;
    let max = read_f64s(r, header.line_indices.len())?;
    let mut lines = Vec::with_capacity(header.line_indices.len());
    for (line_index, max_highlight) in header.line_indices.into_iter().zip(max) {
        lines.push(StoredLine {
            line_index,
            max_highlight,
            vector: read_f64s(r, header.dimension)?,
        });
    }
    Ok(Some(CorpusEntry {
        id: header.id,
        analyzed: header.analyzed,
        highlights,
        lines,
    }))
}

/// Writes a complete segment file (via a temporary name).
pub fn write_segment(path: &Path, entries: &[Arc<CorpusEntry>]) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(SEGMENT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for e in entries {
            w.write_all(&encode_entry(e)?)?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_segment(path: &Path) -> Result<Vec<CorpusEntry>> {
    let bad = |reason: String| Error::format("segment", path, reason);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic[..4] != SEGMENT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(magic[4..].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("segment version {version}")));
    }
    let mut out = Vec::new();
    while let Some(e) = decode_entry(&mut r).map_err(|e| bad(e.to_string()))? {
        out.push(e);
    }
    Ok(out)
}

/// Loads every segment named by the manifest; later segments win.
pub fn load_entries(dir: &Path, manifest: &IndexManifest) -> Result<BTreeMap<String, Arc<CorpusEntry>>> {
    let mut entries = BTreeMap::new();
    for name in &manifest.segments {
        for e in read_segment(&dir.join(name))? {
            entries.insert(e.id.clone(), Arc::new(e));
        }
    }
    if entries.len() != manifest.entries {
        return Err(Error::format(
            "manifest",
            dir.join(MANIFEST_FILE),
            format!("lists {} entries, segments hold {}", manifest.entries, entries.len()),
        ));
    }
    Ok(entries)
}

pub fn segment_path(dir: &Path, generation: u64) -> PathBuf {
    dir.join(segment_name(generation))
}
