//! Accession resolution: repository metadata to download jobs.
//!
//! ENA's filereport endpoint is asked first because it lists direct file
//! URLs together with sizes and MD5s. When it knows nothing about an
//! accession, NCBI E-utilities (esearch, then efetch) is tried for SRA Lite
//! objects. All requests go through a [`Transport`], so tests replay
//! recorded responses instead of touching the network.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RetryPolicy, TransferJob};

/// Fields requested from ENA: run accession, file URLs, sizes, checksums.
pub const ENA_FIELDS: [&str; 4] = ["run_accession", "fastq_ftp", "fastq_bytes", "fastq_md5"];
pub const ENA_FILEREPORT: &str = "https://www.ebi.ac.uk/ena/portal/api/filereport";
pub const EUTILS: &str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils";
/// Upper bound on simultaneous metadata requests.
pub const MAX_PARALLEL: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("line {line}: `{text}` is not an accession")]
    MalformedAccession { line: usize, text: String },
    #[error("{source_name} response: {reason}")]
    Parse { source_name: &'static str, reason: String },
    #[error("{0}")]
    Transport(#[from] TransportError),
    #[error("{accession} not found (ENA: {ena}; NCBI: {ncbi})")]
    NotFound { accession: String, ena: String, ncbi: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("GET {url}: {reason}")]
    Failed { url: String, reason: String },
    #[error("GET {url}: HTTP {status}")]
    Status { url: String, status: u16 },
    #[error("no recorded response for {0}")]
    NoFixture(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Failed { .. } => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::NoFixture(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Accession(String);

impl Accession {
    pub fn new(text: &str) -> Option<Self> {
        let id = text.trim();
        let digits = id.trim_start_matches(|c: char| c.is_ascii_uppercase());
        let valid = digits.len() < id.len() && !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit());
        valid.then(|| Self(id.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Accession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Accession {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Accession::new(&value).ok_or_else(|| format!("`{value}` is not an accession"))
    }
}

impl From<Accession> for String {
    fn from(a: Accession) -> Self {
        a.0
    }
}

/// One accession per line; blank lines and `#` comments are skipped and
/// repeats dropped, keeping the first occurrence.
pub fn parse_accession_list(text: &str) -> Result<Vec<Accession>, ResolveError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let acc = Accession::new(line)
            .ok_or_else(|| ResolveError::MalformedAccession { line: i + 1, text: line.to_owned() })?;
        if seen.insert(acc.clone()) {
            out.push(acc);
        }
    }
    Ok(out)
}

/// Files of one sequencing run; `bytes` and `md5` are aligned with `urls`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_accession: String,
    pub urls: Vec<String>,
    pub bytes: Vec<Option<u64>>,
    pub md5: Vec<Option<String>>,
}

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Ena,
    Ncbi,
}

fn https(url: &str) -> String {
    let url = url.trim();
    if url.starts_with("http://") || url.starts_with("https://") {
        url.to_owned()
    } else {
        format!("https://{}", url.strip_prefix("ftp://").unwrap_or(url))
    }
}

fn split_list(field: &str) -> Vec<&str> {
    if field.trim().is_empty() {
        Vec::new()
    } else {
        field.split(';').map(str::trim).collect()
    }
}

/// Parses a filereport TSV. Rows without file URLs are skipped.
pub fn parse_ena_tsv(body: &str) -> Result<Vec<RunRecord>, ResolveError> {
    let err = |reason: String| ResolveError::Parse { source_name: "ENA", reason };
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else { return Ok(Vec::new()) };
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let run_col = col("run_accession").ok_or_else(|| err("missing run_accession column".into()))?;
    let url_col = col("fastq_ftp").ok_or_else(|| err("missing fastq_ftp column".into()))?;
    let bytes_col = col("fastq_bytes");
    let md5_col = col("fastq_md5");

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |c: Option<usize>| c.and_then(|c| fields.get(c)).copied().unwrap_or("");
        let run = get(Some(run_col)).trim();
        if run.is_empty() {
            return Err(err(format!("row {}: empty run_accession", i + 2)));
        }
        let urls: Vec<String> = split_list(get(Some(url_col))).into_iter().map(https).collect();
        if urls.is_empty() {
            warn!("{run}: no files listed");
            continue;
        }
        let aligned = |raw: Vec<&str>, what: &str| -> Result<Vec<Option<String>>, ResolveError> {
            match raw.len() {
                0 => Ok(vec![None; urls.len()]),
                n if n == urls.len() => Ok(raw.into_iter().map(|s| (!s.is_empty()).then(|| s.to_owned())).collect()),
                n => Err(err(format!("{run}: {n} {what} for {} urls", urls.len()))),
            }
        };
        let bytes = aligned(split_list(get(bytes_col)), "sizes")?
            .into_iter()
            .map(|b| b.map(|b| b.parse::<u64>().map_err(|_| err(format!("{run}: bad size `{b}`")))).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        let md5 = aligned(split_list(get(md5_col)), "checksums")?;
        records.push(RunRecord { run_accession: run.to_owned(), urls, bytes, md5 });
    }
    Ok(records)
}

/// Serializes records in the filereport layout.
pub fn to_tsv(records: &[RunRecord]) -> String {
    let mut out = ENA_FIELDS.join("\t");
    out.push('\n');
    for r in records {
        let bytes: Vec<String> = r.bytes.iter().map(|b| b.map(|b| b.to_string()).unwrap_or_default()).collect();
        let md5: Vec<&str> = r.md5.iter().map(|m| m.as_deref().unwrap_or("")).collect();
        let join = |v: Vec<String>| if v.iter().all(String::is_empty) { String::new() } else { v.join(";") };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.run_accession,
            r.urls.join(";"),
            join(bytes),
            join(md5.into_iter().map(str::to_owned).collect())
        ));
    }
    out
}

/// Run-level ids from an esearch JSON response.
pub fn parse_esearch(body: &str) -> Result<Vec<String>, ResolveError> {
    let err = |reason: String| ResolveError::Parse { source_name: "NCBI esearch", reason };
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| err(e.to_string()))?;
    let ids = v
        .pointer("/esearchresult/idlist")
        .and_then(|ids| ids.as_array())
        .ok_or_else(|| err("missing esearchresult.idlist".into()))?;
    Ok(ids.iter().filter_map(|id| id.as_str().map(str::to_owned)).collect())
}

/// Runs and their SRA Lite objects from an efetch XML response. Falls back
/// to any other SRA object of the run when no Lite copy is listed.
pub fn parse_efetch(body: &str) -> Result<Vec<RunRecord>, ResolveError> {
    let doc = roxmltree::Document::parse(body)
        .map_err(|e| ResolveError::Parse { source_name: "NCBI efetch", reason: e.to_string() })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for run in doc.descendants().filter(|n| n.has_tag_name("RUN")) {
        let Some(acc) = run.attribute("accession") else { continue };
        if !seen.insert(acc.to_owned()) {
            continue;
        }
        let files: Vec<_> = run.descendants().filter(|n| n.has_tag_name("SRAFile")).collect();
        let is_lite = |f: &roxmltree::Node| f.attribute("semantic_name").is_some_and(|s| s.eq_ignore_ascii_case("SRA Lite"));
        let is_sra = |f: &roxmltree::Node| f.attribute("supertype").is_some_and(|s| s == "Primary ETL" || s == "Original")
            && f.attribute("semantic_name").is_some_and(|s| s.starts_with("SRA"));
        let chosen = files.iter().find(|f| is_lite(f)).or_else(|| files.iter().find(|f| is_sra(f)));
        let Some(file) = chosen else {
            warn!("{acc}: no SRA object listed");
            continue;
        };
        let url = file.attribute("url").map(str::to_owned).or_else(|| {
            file.children()
                .filter(|n| n.has_tag_name("Alternatives"))
                .find_map(|alt| alt.attribute("url").filter(|u| u.starts_with("http")).map(str::to_owned))
        });
        let Some(url) = url else {
            warn!("{acc}: SRA object has no URL");
            continue;
        };
        records.push(RunRecord {
            run_accession: acc.to_owned(),
            urls: vec![url],
            bytes: vec![file.attribute("size").and_then(|s| s.parse().ok())],
            md5: vec![file.attribute("md5").map(str::to_owned)],
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Metadata fetches. Implementations return any HTTP status as a response
/// and reserve errors for failures to obtain one.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .user_agent(concat!("genodl/", env!("CARGO_PKG_VERSION")))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let failed = |reason: String| TransportError::Failed { url: url.to_owned(), reason };
        let mut resp = self.agent.get(url).call().map_err(|e| failed(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| failed(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Replays recorded responses. `index.tsv` in the fixture directory maps
/// each URL to a body file, with an optional third column for the status
/// (default 200). Unlisted URLs are an error, never an empty answer.
#[derive(Debug, Clone)]
pub struct FixtureTransport {
    root: PathBuf,
    index: HashMap<String, (PathBuf, u16)>,
    requests: std::sync::Arc<Mutex<Vec<String>>>,
}

impl FixtureTransport {
    pub fn open(root: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(root.join("index.tsv"))?;
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, format!("index.tsv line {}", i + 1));
            let url = parts.next().ok_or_else(bad)?;
            let file = parts.next().ok_or_else(bad)?;
            let status = parts.next().map(|s| s.parse().map_err(|_| bad())).transpose()?.unwrap_or(200);
            index.insert(url.to_owned(), (PathBuf::from(file), status));
        }
        Ok(Self { root: root.to_owned(), index, requests: Default::default() })
    }

    /// URLs requested so far, in order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for FixtureTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        self.requests.lock().unwrap().push(url.to_owned());
        let (file, status) = self.index.get(url).ok_or_else(|| TransportError::NoFixture(url.to_owned()))?;
        let body = fs::read_to_string(self.root.join(file))
            .map_err(|e| TransportError::Failed { url: url.to_owned(), reason: e.to_string() })?;
        Ok(HttpResponse { status: *status, body })
    }
}

#[derive(Debug, Clone)]
pub struct ResolverConfig {
    pub ena_base: String,
    pub eutils_base: String,
    pub retry: RetryPolicy,
    pub parallel: usize,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        Self {
            ena_base: ENA_FILEREPORT.to_owned(),
            eutils_base: EUTILS.to_owned(),
            retry: RetryPolicy::default(),
            parallel: MAX_PARALLEL,
        }
    }
}

pub struct Resolver<T: Transport> {
    transport: T,
    cfg: ResolverConfig,
}

impl<T: Transport> Resolver<T> {
    pub fn new(transport: T, cfg: ResolverConfig) -> Self {
        Self { transport, cfg }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn ena_url(&self, acc: &Accession) -> String {
        format!("{}?accession={acc}&result=read_run&fields={}&format=tsv", self.cfg.ena_base, ENA_FIELDS.join(","))
    }

    pub fn esearch_url(&self, acc: &Accession) -> String {
        format!("{}/esearch.fcgi?db=sra&term={acc}&retmax=10000&retmode=json", self.cfg.eutils_base)
    }

    pub fn efetch_url(&self, ids: &[String]) -> String {
        format!("{}/efetch.fcgi?db=sra&id={}&rettype=full&retmode=xml", self.cfg.eutils_base, ids.join(","))
    }

    /// GET with retries on transient failures. `None` means the service
    /// answered that it has nothing for this request.
    fn fetch(&self, url: &str) -> Result<Option<String>, TransportError> {
        let mut failures = 0;
        loop {
            let outcome = self.transport.get(url).and_then(|resp| match resp.status {
                200 => Ok(Some(resp.body)),
                204 | 400 | 404 => Ok(None),
                status => Err(TransportError::Status { url: url.to_owned(), status }),
            });
            match outcome {
                Err(e) if e.retryable() && failures + 1 < self.cfg.retry.max_attempts => {
                    failures += 1;
                    debug!("{e}; retrying");
                    thread::sleep(self.cfg.retry.delay(failures));
                }
                other => return other,
            }
        }
    }

    /// Runs listed by ENA. Unknown accessions give an empty list.
    pub fn resolve_ena(&self, acc: &Accession) -> Result<Vec<RunRecord>, ResolveError> {
        match self.fetch(&self.ena_url(acc))? {
            Some(body) => parse_ena_tsv(&body),
            None => Ok(Vec::new()),
        }
    }

    /// Runs listed by NCBI. Unknown accessions give an empty list.
    pub fn resolve_ncbi(&self, acc: &Accession) -> Result<Vec<RunRecord>, ResolveError> {
        let Some(body) = self.fetch(&self.esearch_url(acc))? else { return Ok(Vec::new()) };
        let ids = parse_esearch(&body)?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        match self.fetch(&self.efetch_url(&ids))? {
            Some(body) => parse_efetch(&body),
            None => Ok(Vec::new()),
        }
    }

    /// ENA first; NCBI only when ENA has nothing or cannot be reached.
    pub fn resolve(&self, acc: &Accession) -> Result<(Source, Vec<RunRecord>), ResolveError> {
        let ena = match self.resolve_ena(acc) {
            Ok(records) if !records.is_empty() => return Ok((Source::Ena, records)),
            Ok(_) => "no runs".to_owned(),
            Err(e) => {
                warn!("ENA lookup of {acc} failed: {e}");
                e.to_string()
            }
        };
        let ncbi = match self.resolve_ncbi(acc) {
            Ok(records) if !records.is_empty() => return Ok((Source::Ncbi, records)),
            Ok(_) => "no runs".to_owned(),
            Err(e) => e.to_string(),
        };
        Err(ResolveError::NotFound { accession: acc.to_string(), ena, ncbi })
    }

    /// Resolves every accession with at most `parallel` (≤ 4) lookups in
    /// flight; results keep the input order.
    pub fn resolve_all(&self, accessions: &[Accession]) -> Vec<Result<(Source, Vec<RunRecord>), ResolveError>> {
        let workers = self.cfg.parallel.clamp(1, MAX_PARALLEL).min(accessions.len().max(1));
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<_>>> = accessions.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(acc) = accessions.get(i) else { break };
                    *results[i].lock().unwrap() = Some(self.resolve(acc));
                });
            }
        });
        results.into_iter().map(|r| r.into_inner().unwrap().expect("every accession resolved")).collect()
    }
}

fn basename(url: &str) -> &str {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    path.rsplit('/').find(|s| !s.is_empty()).unwrap_or("download")
}

/// `name` with `-n` inserted before its extension (`a.fastq.gz` → `a-1.fastq.gz`).
fn suffixed(name: &str, n: usize) -> String {
    match name.split_once('.') {
        Some((stem, ext)) if !stem.is_empty() => format!("{stem}-{n}.{ext}"),
        _ => format!("{name}-{n}"),
    }
}

/// One job per file, saved as `<out_dir>/<run>/<basename>`. Colliding
/// destinations get a numeric suffix.
pub fn build_jobs(records: &[RunRecord], out_dir: &Path) -> Vec<TransferJob> {
    let mut taken = HashSet::new();
    let mut jobs = Vec::new();
    for r in records {
        for (i, url) in r.urls.iter().enumerate() {
            let dir = out_dir.join(&r.run_accession);
            let name = basename(url);
            let mut dest = dir.join(name);
            let mut n = 1;
            while !taken.insert(dest.clone()) {
                dest = dir.join(suffixed(name, n));
                n += 1;
            }
            if n > 1 {
                warn!("{url}: destination collision, saving as {}", dest.display());
            }
            jobs.push(TransferJob {
                source_url: url.clone(),
                total_bytes: r.bytes.get(i).copied().flatten(),
                expected_md5: r.md5.get(i).cloned().flatten(),
                destination: dest,
            });
        }
    }
    jobs
}
