//! Cluster labels as an append-only event log.
//!
//! Every write is one JSON line in `tags.jsonl` with a sequence number
//! assigned under the log's lock. The current label of a cluster is the
//! label of its highest-sequence event; clusters without events are
//! untagged.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("untagged is the initial state and cannot be written")]
    UntaggedWrite,
    #[error("author must not be empty")]
    EmptyAuthor,
    #[error("tag log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Responsive,
    NotResponsive,
    FurtherReview,
    Untagged,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Responsive,
        Label::NotResponsive,
        Label::FurtherReview,
        Label::Untagged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Responsive => "responsive",
            Label::NotResponsive => "not_responsive",
            Label::FurtherReview => "further_review",
            Label::Untagged => "untagged",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| TagError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEvent {
    pub seq: u64,
    pub round: u32,
    pub cluster_index: usize,
    pub label: Label,
    #[serde(default)]
    pub note: String,
    pub author: String,
    pub timestamp: DateTime<Utc>,
}

/// Latest event for one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurrentTag {
    pub label: Label,
    pub note: String,
    pub author: String,
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
}

/// Labels folded from events. Keyed by (round, cluster).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagState {
    pub current: BTreeMap<(u32, usize), CurrentTag>,
    pub last_seq: u64,
}

impl TagState {
    pub fn apply(&mut self, event: &TagEvent) {
        self.last_seq = self.last_seq.max(event.seq);
        let newer = self
            .current
            .get(&(event.round, event.cluster_index))
            .is_none_or(|c| c.seq < event.seq);
        if newer {
            self.current.insert(
                (event.round, event.cluster_index),
                CurrentTag {
                    label: event.label,
                    note: event.note.clone(),
                    author: event.author.clone(),
                    seq: event.seq,
                    timestamp: event.timestamp,
                },
            );
        }
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a TagEvent>) -> Self {
        let mut state = TagState::default();
        for e in events {
            state.apply(e);
        }
        state
    }

    pub fn get(&self, round: u32, cluster_index: usize) -> Option<&CurrentTag> {
        self.current.get(&(round, cluster_index))
    }

    pub fn label(&self, round: u32, cluster_index: usize) -> Label {
        self.get(round, cluster_index)
            .map(|c| c.label)
            .unwrap_or(Label::Untagged)
    }

    /// Canonical serialization of the current labels, one line per tagged
    /// cluster in key order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ((round, cluster), tag) in &self.current {
            let line = serde_json::json!({
                "round": round,
                "cluster_index": cluster,
                "label": tag.label,
                "note": tag.note,
                "author": tag.author,
                "seq": tag.seq,
                "timestamp": tag.timestamp,
            });
            out.extend_from_slice(line.to_string().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// Parse a tag log. A final line without a newline that does not parse is
/// an interrupted append and is reported as `torn_at`.
fn parse_log<R: BufRead>(mut input: R) -> Result<(Vec<TagEvent>, Option<u64>), TagError> {
    let mut events = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = input.read_line(&mut buf)?;
        if n == 0 {
            return Ok((events, None));
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if !text.is_empty() {
            match serde_json::from_str::<TagEvent>(text) {
                Ok(e) if e.label == Label::Untagged => {
                    return Err(TagError::Corrupt {
                        line: line_no,
                        message: "explicit untagged event".into(),
                    })
                }
                Ok(e) => events.push(e),
                Err(_) if !complete => return Ok((events, Some(offset))),
                Err(e) => {
                    return Err(TagError::Corrupt {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
        }
        offset += n as u64;
    }
}

pub fn read_events(path: &Path) -> Result<Vec<TagEvent>, TagError> {
    match File::open(path) {
        Ok(f) => Ok(parse_log(BufReader::new(f))?.0),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// Open log file plus the state folded from it. Callers serialize access.
#[derive(Debug)]
pub struct TagLog {
    path: PathBuf,
    file: File,
    events: Vec<TagEvent>,
    state: TagState,
}

impl TagLog {
    pub fn open(path: &Path) -> Result<Self, TagError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        file.seek(SeekFrom::Start(0))?;
        let (events, torn) = parse_log(BufReader::new(&file))?;
        if let Some(at) = torn {
            warn!(path = %path.display(), offset = at, "dropping interrupted tag event");
            file.set_len(at)?;
        }
        let state = TagState::replay(&events);
        Ok(Self {
            path: path.to_path_buf(),
            file,
            events,
            state,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn events(&self) -> &[TagEvent] {
        &self.events
    }

    pub fn state(&self) -> &TagState {
        &self.state
    }

    /// Persist one event and fold it in. The line is synced before the
    /// event becomes visible.
    pub fn append(
        &mut self,
        round: u32,
        cluster_index: usize,
        label: Label,
        note: &str,
        author: &str,
    ) -> Result<TagEvent, TagError> {
        if label == Label::Untagged {
            return Err(TagError::UntaggedWrite);
        }
        if author.trim().is_empty() {
            return Err(TagError::EmptyAuthor);
        }
        let event = TagEvent {
            seq: self.state.last_seq + 1,
            round,
            cluster_index,
            label,
            note: note.to_string(),
            author: author.to_string(),
            timestamp: Utc::now(),
        };
        let mut line = serde_json::to_vec(&event).expect("tag events serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.state.apply(&event);
        self.events.push(event.clone());
        Ok(event)
    }

    /// Events for one cluster, oldest first.
    pub fn history(&self, round: u32, cluster_index: usize) -> Vec<TagEvent> {
        self.events
            .iter()
            .filter(|e| e.round == round && e.cluster_index == cluster_index)
            .cloned()
            .collect()
    }
}
