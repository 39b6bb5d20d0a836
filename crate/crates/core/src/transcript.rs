//! Append-only JSONL transcripts, one exchange per line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_builder::DialogHistory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub session_id: String,
    pub turn: usize,
    pub user: String,
    pub reply: String,
    pub prompt_chars: usize,
    pub timestamp_ms: u64,
}

impl ExchangeRecord {
    pub fn now(session_id: &str, turn: usize, user: &str, reply: &str, prompt_chars: usize) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        ExchangeRecord {
            session_id: session_id.to_string(),
            turn,
            user: user.to_string(),
            reply: reply.to_string(),
            prompt_chars,
            timestamp_ms,
        }
    }
}

pub fn append_exchange(path: &Path, record: &ExchangeRecord) -> Result<()> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_exchanges(path: &Path) -> Result<Vec<ExchangeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("transcript", format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Rebuilds the dialog history from a transcript; a missing file is an empty history.
pub fn replay(path: &Path) -> Result<DialogHistory> {
    let mut history = DialogHistory::new();
    if !path.exists() {
        return Ok(history);
    }
    for r in read_exchanges(path)? {
        history.push_exchange(r.user, r.reply);
    }
    Ok(history)
}
