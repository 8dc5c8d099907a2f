//! Resume sidecar written next to each partially downloaded file.
//!
//! Plain `key=value` lines so a half-finished transfer can be inspected by
//! hand. Completed byte ranges are appended as `done=<start>-<end>` (end
//! exclusive) only after those bytes have been synced to disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::chunks::{plan_chunks, ChunkRange};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("missing `{0}`")]
    Missing(&'static str),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferManifest {
    pub version: u32,
    pub source_url: String,
    pub total_bytes: u64,
    pub chunk_bytes: u64,
    pub expected_md5: Option<String>,
    /// Completed `[start, end)` ranges, in completion order.
    pub done: Vec<(u64, u64)>,
}

pub fn manifest_path(destination: &Path) -> PathBuf {
    let mut name = destination.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

impl TransferManifest {
    pub fn new(source_url: &str, total_bytes: u64, chunk_bytes: u64, expected_md5: Option<&str>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            source_url: source_url.to_owned(),
            total_bytes,
            chunk_bytes,
            expected_md5: expected_md5.map(str::to_owned),
            done: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "version={}\nurl={}\ntotal_bytes={}\nchunk_bytes={}\n",
            self.version, self.source_url, self.total_bytes, self.chunk_bytes
        );
        if let Some(md5) = &self.expected_md5 {
            out.push_str(&format!("md5={md5}\n"));
        }
        for (start, end) in &self.done {
            out.push_str(&format!("done={start}-{end}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut version = None;
        let mut url = None;
        let mut total = None;
        let mut chunk = None;
        let mut md5 = None;
        let mut done = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: &str| ManifestError::Malformed { line: i + 1, reason: reason.to_owned() };
            let (key, value) = line.split_once('=').ok_or_else(|| malformed("expected key=value"))?;
            let number = |v: &str| v.parse::<u64>().map_err(|_| malformed("expected an integer"));
            match key {
                "version" => version = Some(number(value)?),
                "url" => url = Some(value.to_owned()),
                "total_bytes" => total = Some(number(value)?),
                "chunk_bytes" => chunk = Some(number(value)?),
                "md5" => md5 = Some(value.to_owned()),
                "done" => {
                    let (s, e) = value.split_once('-').ok_or_else(|| malformed("expected start-end"))?;
                    let (s, e) = (number(s)?, number(e)?);
                    if e <= s {
                        return Err(malformed("empty range"));
                    }
                    done.push((s, e));
                }
                _ => return Err(malformed("unknown key")),
            }
        }
        let version = version.ok_or(ManifestError::Missing("version"))?;
        if version != u64::from(MANIFEST_VERSION) {
            return Err(ManifestError::Version(version.try_into().unwrap_or(u32::MAX)));
        }
        let total_bytes = total.ok_or(ManifestError::Missing("total_bytes"))?;
        let chunk_bytes = chunk.ok_or(ManifestError::Missing("chunk_bytes"))?;
        if chunk_bytes == 0 {
            return Err(ManifestError::Missing("chunk_bytes"));
        }
        if let Some(&(s, e)) = done.iter().find(|&&(_, e)| e > total_bytes) {
            return Err(ManifestError::Malformed { line: 0, reason: format!("range {s}-{e} past end of file") });
        }
        Ok(Self {
            version: MANIFEST_VERSION,
            source_url: url.ok_or(ManifestError::Missing("url"))?,
            total_bytes,
            chunk_bytes,
            expected_md5: md5,
            done,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Replaces the file at `path` atomically (write, sync, rename).
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut file = fs::File::create(&tmp)?;
        file.write_all(self.to_text().as_bytes())?;
        file.sync_data()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// True when `[start, end)` is covered by the union of completed ranges.
    pub fn covers(&self, start: u64, end: u64) -> bool {
        let mut ranges = self.done.clone();
        ranges.sort_unstable();
        let mut reached = start;
        for (s, e) in ranges {
            if s > reached {
                break;
            }
            reached = reached.max(e);
            if reached >= end {
                return true;
            }
        }
        reached >= end
    }

    pub fn done_bytes(&self) -> u64 {
        (0..self.total_bytes.div_ceil(self.chunk_bytes))
            .map(|i| {
                let s = i * self.chunk_bytes;
                let e = (s + self.chunk_bytes).min(self.total_bytes);
                if self.covers(s, e) {
                    e - s
                } else {
                    0
                }
            })
            .sum()
    }

    /// Planned chunks not fully covered by completed ranges. Partially
    /// written chunks are fetched again in full.
    pub fn pending_chunks(&self, job_id: usize) -> Vec<ChunkRange> {
        plan_chunks(job_id, Some(self.total_bytes), self.chunk_bytes)
            .into_iter()
            .filter(|c| !self.covers(c.offset, c.end().unwrap_or(c.offset)))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.pending_chunks(0).is_empty()
    }
}
