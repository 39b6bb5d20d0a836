//! The fixed pool of single-turn context candidates and their precomputed
//! context-side embeddings.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot_unchecked, Embedding, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::exec::Execution;

const INDEX_VERSION: u32 = 1;
const EMBED_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateContext {
    pub id: usize,
    pub text: String,
}

/// Immutable, brute-force searchable candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateIndex {
    candidates: Vec<CandidateContext>,
    embeddings: Vec<Embedding>,
    fingerprint: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dim: usize,
    backend_fingerprint: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    text: String,
    e_ctx: Embedding,
}

/// Reads a pool file: one candidate per line, trimmed, blank lines skipped.
pub fn read_pool(path: &Path) -> Result<Vec<String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Builds an index from a pool file.
pub fn build_index(pool_file: &Path, backend: &dyn EmbeddingBackend) -> Result<CandidateIndex> {
    let texts = read_pool(pool_file)?;
    CandidateIndex::build(texts, backend)
}

impl CandidateIndex {
    /// Embeds `texts` with the context tower. Ids follow input order.
    pub fn build(texts: Vec<String>, backend: &dyn EmbeddingBackend) -> Result<Self> {
        let texts: Vec<String> = texts
            .into_iter()
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        if texts.is_empty() {
            return Err(Error::InvalidInput(
                "candidate pool has no usable lines".into(),
            ));
        }
        let mut embeddings = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            embeddings.extend(backend.embed_contexts(chunk)?);
        }
        let dim = embeddings[0].dim();
        let fingerprint = backend.fingerprint(dim);
        let candidates = texts
            .into_iter()
            .enumerate()
            .map(|(id, text)| CandidateContext { id, text })
            .collect();
        Self::from_parts(candidates, embeddings, fingerprint)
    }

    /// Assembles an index from precomputed embeddings.
    pub fn from_parts(
        candidates: Vec<CandidateContext>,
        embeddings: Vec<Embedding>,
        fingerprint: String,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("index must hold at least one candidate".into()));
        }
        if candidates.len() != embeddings.len() {
            return Err(Error::InvalidInput(format!(
                "{} candidates but {} embeddings",
                candidates.len(),
                embeddings.len()
            )));
        }
        for (pos, c) in candidates.iter().enumerate() {
            if c.id != pos {
                return Err(Error::InvalidInput(format!(
                    "candidate ids must be dense: found id {} at position {pos}",
                    c.id
                )));
            }
            if c.text.trim().is_empty() {
                return Err(Error::InvalidInput(format!("candidate {pos} is blank")));
            }
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(CandidateIndex {
            candidates,
            embeddings,
            fingerprint,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn candidates(&self) -> &[CandidateContext] {
        &self.candidates
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn text(&self, id: usize) -> Option<&str> {
        self.candidates.get(id).map(|c| c.text.as_str())
    }

    /// Copy of the index with every context embedding multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        let embeddings = self
            .embeddings
            .iter()
            .map(|e| e.scaled(factor))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(self.candidates.clone(), embeddings, self.fingerprint.clone())
    }

    pub(crate) fn check_dim(&self, query: &Embedding) -> Result<()> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        Ok(())
    }

    /// `e_ctx(c) · query` for every candidate, in id order.
    pub fn score_all(&self, query: &Embedding) -> Result<Vec<(usize, f64)>> {
        self.score_all_with(query, Execution::default())
    }

    pub fn score_all_with(
        &self,
        query: &Embedding,
        execution: Execution,
    ) -> Result<Vec<(usize, f64)>> {
        self.check_dim(query)?;
        let q = query.as_slice();
        let scores = execution.map(&self.embeddings, |e| dot_unchecked(e.as_slice(), q));
        Ok(scores.into_iter().enumerate().collect())
    }

    /// Writes the header line plus one JSONL record per candidate. The file is
    /// written next to `path` and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(&tmp)?);
            let header = Header {
                version: INDEX_VERSION,
                dim: self.dim,
                backend_fingerprint: self.fingerprint.clone(),
                count: self.candidates.len(),
            };
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
            for (c, e) in self.candidates.iter().zip(&self.embeddings) {
                let record = Record {
                    id: c.id,
                    text: c.text.clone(),
                    e_ctx: e.clone(),
                };
                serde_json::to_writer(&mut out, &record)?;
                out.write_all(b"\n")?;
            }
            out.into_inner()?.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads an index, optionally verifying its encoder fingerprint.
    pub fn load(path: &Path, expected_fingerprint: Option<&str>) -> Result<Self> {
        const WHAT: &str = "index file";
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(WHAT, "missing header"))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(WHAT, format!("header: {e}")))?;
        if header.version != INDEX_VERSION {
            return Err(Error::format(
                WHAT,
                format!("unsupported version {}", header.version),
            ));
        }
        if let Some(expected) = expected_fingerprint {
            if expected != header.backend_fingerprint {
                return Err(Error::StaleIndex {
                    expected: expected.to_string(),
                    found: header.backend_fingerprint,
                });
            }
        }
        let mut candidates = Vec::with_capacity(header.count);
        let mut embeddings = Vec::with_capacity(header.count);
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| Error::format(WHAT, format!("record {}: {e}", lineno + 1)))?;
            if record.e_ctx.dim() != header.dim {
                return Err(Error::format(
                    WHAT,
                    format!("record {} has dim {}", record.id, record.e_ctx.dim()),
                ));
            }
            candidates.push(CandidateContext {
                id: record.id,
                text: record.text,
            });
            embeddings.push(record.e_ctx);
        }
        if candidates.len() != header.count {
            return Err(Error::format(
                WHAT,
                format!(
                    "header announces {} records, found {}",
                    header.count,
                    candidates.len()
                ),
            ));
        }
        Self::from_parts(candidates, embeddings, header.backend_fingerprint)
            .map_err(|e| Error::format(WHAT, e))
    }
}
