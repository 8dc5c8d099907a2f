use std::io::{self, Read};
use std::time::Duration;

use thiserror::Error;
use ureq::http::{header, StatusCode};

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("server ignored the range request")]
    RangeIgnored,
    #[error("unexpected Content-Range `{0}`")]
    ContentRange(String),
    #[error("writing to disk: {0}")]
    Sink(#[source] io::Error),
}

impl FetchError {
    /// Errors that retrying cannot fix.
    pub fn is_permanent(&self) -> bool {
        match self {
            FetchError::Status(s) => (400..500).contains(s) && *s != 408 && *s != 429,
            FetchError::Sink(_) => true,
            _ => false,
        }
    }
}

/// What a server reports about a file before the transfer starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteInfo {
    pub total_bytes: Option<u64>,
    pub ranges: bool,
}

/// Source of connections; one connection per worker so keep-alive sockets are
/// reused across that worker's chunks.
pub trait Fetcher: Send + Sync {
    fn probe(&self, url: &str) -> Result<RemoteInfo, FetchError>;
    fn connect(&self) -> Box<dyn Connection>;
}

pub trait Connection: Send {
    /// Streams `url`, or the byte range `[start, end)` of it, into `sink` and
    /// returns the number of bytes delivered. On error, whatever already
    /// reached `sink` stays there.
    fn fetch(
        &mut self,
        url: &str,
        range: Option<(u64, u64)>,
        sink: &mut dyn FnMut(&[u8]) -> io::Result<()>,
    ) -> Result<u64, FetchError>;
}

#[derive(Debug, Clone)]
pub struct HttpFetcher {
    pub connect_timeout: Duration,
    pub response_timeout: Duration,
    pub body_timeout: Option<Duration>,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(15),
            response_timeout: Duration::from_secs(60),
            body_timeout: Some(Duration::from_secs(900)),
        }
    }
}

impl HttpFetcher {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(self.connect_timeout))
            .timeout_recv_response(Some(self.response_timeout))
            .timeout_recv_body(self.body_timeout)
            .max_idle_connections_per_host(4)
            .user_agent(concat!("genodl/", env!("CARGO_PKG_VERSION")))
            .build()
            .into()
    }
}

fn transport(e: ureq::Error) -> FetchError {
    FetchError::Transport(e.to_string())
}

/// Parses `bytes <start>-<end>/<total>` or `bytes */<total>`.
pub(crate) fn parse_content_range(value: &str) -> Option<(Option<(u64, u64)>, Option<u64>)> {
    let rest = value.trim().strip_prefix("bytes")?.trim_start();
    let (span, total) = rest.split_once('/')?;
    let total = if total == "*" { None } else { Some(total.parse().ok()?) };
    let span = if span == "*" {
        None
    } else {
        let (s, e) = span.split_once('-')?;
        Some((s.parse().ok()?, e.parse().ok()?))
    };
    Some((span, total))
}

impl Fetcher for HttpFetcher {
    /// Requests the first byte: a 206 answer means ranges work and carries
    /// the size in `Content-Range`; a 200 means the server ignores ranges.
    fn probe(&self, url: &str) -> Result<RemoteInfo, FetchError> {
        let resp = self.agent().get(url).header(header::RANGE, "bytes=0-0").call().map_err(transport)?;
        let content_range = resp.headers().get(header::CONTENT_RANGE).and_then(|v| v.to_str().ok());
        match resp.status() {
            StatusCode::PARTIAL_CONTENT => {
                let raw = content_range.unwrap_or_default();
                let (_, total) = parse_content_range(raw).ok_or_else(|| FetchError::ContentRange(raw.to_owned()))?;
                Ok(RemoteInfo { total_bytes: total, ranges: true })
            }
            StatusCode::RANGE_NOT_SATISFIABLE => {
                // Only an empty file cannot satisfy `bytes=0-0`.
                let total = content_range.and_then(parse_content_range).and_then(|(_, t)| t);
                Ok(RemoteInfo { total_bytes: Some(total.unwrap_or(0)), ranges: true })
            }
            StatusCode::OK => {
                let total = resp
                    .headers()
                    .get(header::CONTENT_LENGTH)
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.parse().ok());
                Ok(RemoteInfo { total_bytes: total, ranges: false })
            }
            other => Err(FetchError::Status(other.as_u16())),
        }
    }

    fn connect(&self) -> Box<dyn Connection> {
        Box::new(HttpConnection { agent: self.agent() })
    }
}

pub struct HttpConnection {
    agent: ureq::Agent,
}

impl Connection for HttpConnection {
    fn fetch(
        &mut self,
        url: &str,
        range: Option<(u64, u64)>,
        sink: &mut dyn FnMut(&[u8]) -> io::Result<()>,
    ) -> Result<u64, FetchError> {
        let mut request = self.agent.get(url);
        if let Some((start, end)) = range {
            request = request.header(header::RANGE, format!("bytes={}-{}", start, end - 1));
        }
        let mut resp = request.call().map_err(transport)?;
        let limit = match (resp.status(), range) {
            (StatusCode::PARTIAL_CONTENT, Some((start, end))) => {
                let raw = resp.headers().get(header::CONTENT_RANGE).and_then(|v| v.to_str().ok()).unwrap_or_default();
                match parse_content_range(raw) {
                    Some((Some((s, _)), _)) if s == start => end - start,
                    _ => return Err(FetchError::ContentRange(raw.to_owned())),
                }
            }
            (StatusCode::OK, Some(_)) => return Err(FetchError::RangeIgnored),
            (StatusCode::OK, None) => u64::MAX,
            (status, _) => return Err(FetchError::Status(status.as_u16())),
        };

        let mut reader = resp.body_mut().as_reader();
        let mut buf = vec![0u8; 64 * 1024];
        let mut received = 0u64;
        while received < limit {
            let want = usize::try_from(limit - received).unwrap_or(usize::MAX).min(buf.len());
            let n = match reader.read(&mut buf[..want]) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(FetchError::Transport(e.to_string())),
            };
            sink(&buf[..n]).map_err(FetchError::Sink)?;
            received += n as u64;
        }
        // The agent only pools a connection whose body was read to its end.
        if received == limit {
            let _ = reader.read(&mut buf[..1]);
        }
        Ok(received)
    }
}
