use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::os::unix::fs::FileExt;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::debug;

use crate::bucket::TokenBucket;

/// Largest write between pacing decisions.
const BLOCK: u64 = 16 * 1024;
/// Smallest grant worth a syscall when the bucket is nearly empty.
const MIN_GRANT: u64 = 4 * 1024;
const IDLE_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThrottleError;

impl fmt::Display for ThrottleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("per-connection rate must not exceed the global rate, and rates must be positive")
    }
}

impl std::error::Error for ThrottleError {}

/// Bandwidth caps in bytes per second; `None` is unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThrottleConfig {
    per_connection: Option<u64>,
    global: Option<u64>,
}

impl ThrottleConfig {
    pub fn new(per_connection: Option<u64>, global: Option<u64>) -> Result<Self, ThrottleError> {
        if per_connection == Some(0) || global == Some(0) {
            return Err(ThrottleError);
        }
        if let (Some(p), Some(g)) = (per_connection, global) {
            if p > g {
                return Err(ThrottleError);
            }
        }
        Ok(Self { per_connection, global })
    }

    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn per_connection(&self) -> Option<u64> {
        self.per_connection
    }

    pub fn global(&self) -> Option<u64> {
        self.global
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerOptions {
    pub throttle: ThrottleConfig,
    /// When false, `Range` headers are ignored and every GET returns 200.
    pub ranges: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { throttle: ThrottleConfig::unlimited(), ranges: true }
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
    pub body_bytes: AtomicU64,
}

struct State {
    root: PathBuf,
    options: ServerOptions,
    origin: Instant,
    global: Option<Mutex<TokenBucket>>,
    stop: AtomicBool,
    stats: ServerStats,
}

impl State {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// A running server; dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<State>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://127.0.0.1:<port>/<path>`
    pub fn url(&self, path: &str) -> String {
        format!("http://{}/{}", self.addr, path.trim_start_matches('/'))
    }

    pub fn stats(&self) -> &ServerStats {
        &self.state.stats
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.state.stop.store(true, Ordering::Release);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves files under `root` on `127.0.0.1:port` (`0` picks a free port).
pub fn serve(root: &Path, options: ServerOptions, port: u16) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    let origin = Instant::now();
    let state = Arc::new(State {
        root: root.canonicalize()?,
        options,
        origin,
        global: options.throttle.global.map(|r| Mutex::new(TokenBucket::new(r, 0.0))),
        stop: AtomicBool::new(false),
        stats: ServerStats::default(),
    });
    let acceptor = {
        let state = Arc::clone(&state);
        thread::Builder::new().name("harness-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if state.stop.load(Ordering::Acquire) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                state.stats.connections.fetch_add(1, Ordering::Relaxed);
                let state = Arc::clone(&state);
                let _ = thread::Builder::new().name("harness-conn".into()).spawn(move || {
                    if let Err(e) = handle_connection(stream, &state) {
                        debug!("connection closed: {e}");
                    }
                });
            }
        })?
    };
    Ok(ServerHandle { addr, state, acceptor: Some(acceptor) })
}

struct Request {
    method: String,
    path: String,
    range: Option<String>,
    close: bool,
}

/// Reads one request head. `Ok(None)` on a clean close or server stop.
fn read_request(reader: &mut BufReader<TcpStream>, state: &State) -> io::Result<Option<Request>> {
    let mut head = Vec::new();
    loop {
        if state.stop.load(Ordering::Acquire) {
            return Ok(None);
        }
        match reader.read_until(b'\n', &mut head) {
            Ok(0) => return Ok(None),
            Ok(_) => {
                if head.ends_with(b"\r\n\r\n") || head.ends_with(b"\n\n") {
                    break;
                }
                if head == b"\r\n" || head == b"\n" {
                    head.clear();
                }
                if head.len() > 64 * 1024 {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large"));
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        }
    }
    let text = String::from_utf8_lossy(&head);
    let mut lines = text.lines();
    let mut first = lines.next().unwrap_or_default().split_whitespace();
    let method = first.next().unwrap_or_default().to_owned();
    let path = first.next().unwrap_or("/").to_owned();
    let version = first.next().unwrap_or("HTTP/1.1");
    let mut range = None;
    let mut close = version == "HTTP/1.0";
    for line in lines {
        let Some((name, value)) = line.split_once(':') else { continue };
        let value = value.trim();
        if name.eq_ignore_ascii_case("range") {
            range = Some(value.to_owned());
        } else if name.eq_ignore_ascii_case("connection") {
            close = value.eq_ignore_ascii_case("close");
        }
    }
    Ok(Some(Request { method, path, range, close }))
}

fn resolve_path(root: &Path, raw: &str) -> Option<PathBuf> {
    let path = raw.split(['?', '#']).next()?;
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) || rel.as_os_str().is_empty() {
        return None;
    }
    let full = root.join(rel);
    full.is_file().then_some(full)
}

/// Outcome of a `Range` header against a file of `len` bytes.
#[derive(Debug, PartialEq, Eq)]
pub(crate) enum RangeSpec {
    Whole,
    Slice(u64, u64),
    Unsatisfiable,
}

/// Single `bytes=` ranges only; anything else is served whole.
pub(crate) fn parse_range(header: Option<&str>, len: u64) -> RangeSpec {
    let Some(spec) = header.and_then(|h| h.trim().strip_prefix("bytes=")) else { return RangeSpec::Whole };
    if spec.contains(',') {
        return RangeSpec::Whole;
    }
    let Some((a, b)) = spec.trim().split_once('-') else { return RangeSpec::Whole };
    let (start, end) = match (a.trim(), b.trim()) {
        ("", suffix) => match suffix.parse::<u64>() {
            Ok(0) | Err(_) => return RangeSpec::Unsatisfiable,
            Ok(n) => (len.saturating_sub(n), len.saturating_sub(1)),
        },
        (s, "") => match s.parse::<u64>() {
            Ok(s) => (s, len.saturating_sub(1)),
            Err(_) => return RangeSpec::Whole,
        },
        (s, e) => match (s.parse::<u64>(), e.parse::<u64>()) {
            (Ok(s), Ok(e)) if e >= s => (s, e.min(len.saturating_sub(1))),
            (Ok(_), Ok(_)) => return RangeSpec::Unsatisfiable,
            _ => return RangeSpec::Whole,
        },
    };
    if len == 0 || start >= len {
        RangeSpec::Unsatisfiable
    } else {
        RangeSpec::Slice(start, end)
    }
}

fn handle_connection(stream: TcpStream, state: &State) -> io::Result<()> {
    stream.set_read_timeout(Some(IDLE_POLL))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut per_conn = state.options.throttle.per_connection.map(|r| TokenBucket::new(r, state.now()));

    while let Some(req) = read_request(&mut reader, state)? {
        state.stats.requests.fetch_add(1, Ordering::Relaxed);
        let keep_alive = if req.close { "close" } else { "keep-alive" };
        if req.method != "GET" && req.method != "HEAD" {
            write!(writer, "HTTP/1.1 405 Method Not Allowed\r\nContent-Length: 0\r\nConnection: {keep_alive}\r\n\r\n")?;
        } else if let Some(path) = resolve_path(&state.root, &req.path) {
            let file = File::open(&path)?;
            let len = file.metadata()?.len();
            let ranges = state.options.ranges;
            let accept = if ranges { "Accept-Ranges: bytes\r\n" } else { "" };
            let spec = if ranges { parse_range(req.range.as_deref(), len) } else { RangeSpec::Whole };
            match spec {
                RangeSpec::Unsatisfiable => write!(
                    writer,
                    "HTTP/1.1 416 Range Not Satisfiable\r\nContent-Range: bytes */{len}\r\nContent-Length: 0\r\n{accept}Connection: {keep_alive}\r\n\r\n"
                )?,
                RangeSpec::Whole | RangeSpec::Slice(..) => {
                    let (start, end, head) = match spec {
                        RangeSpec::Slice(s, e) => (
                            s,
                            e + 1,
                            format!("HTTP/1.1 206 Partial Content\r\nContent-Range: bytes {s}-{e}/{len}\r\n"),
                        ),
                        _ => (0, len, "HTTP/1.1 200 OK\r\n".to_owned()),
                    };
                    write!(
                        writer,
                        "{head}Content-Type: application/octet-stream\r\nContent-Length: {}\r\n{accept}Connection: {keep_alive}\r\n\r\n",
                        end - start
                    )?;
                    if req.method == "GET" {
                        send_body(&mut writer, &file, start, end, per_conn.as_mut(), state)?;
                    }
                }
            }
        } else {
            write!(writer, "HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: {keep_alive}\r\n\r\n")?;
        }
        writer.flush()?;
        if req.close {
            break;
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
    Ok(())
}

fn send_body(
    out: &mut TcpStream,
    file: &File,
    start: u64,
    end: u64,
    mut per_conn: Option<&mut TokenBucket>,
    state: &State,
) -> io::Result<()> {
    let mut buf = vec![0u8; BLOCK as usize];
    let mut pos = start;
    while pos < end {
        if state.stop.load(Ordering::Acquire) {
            return Err(io::Error::new(io::ErrorKind::ConnectionAborted, "server stopping"));
        }
        let want = (end - pos).min(BLOCK);
        let n = grant(want, per_conn.as_deref_mut(), state);
        let n = n as usize;
        file.read_exact_at(&mut buf[..n], pos)?;
        out.write_all(&buf[..n])?;
        state.stats.body_bytes.fetch_add(n as u64, Ordering::Relaxed);
        pos += n as u64;
    }
    Ok(())
}

/// Blocks until both buckets can grant a worthwhile amount, then takes it.
fn grant(want: u64, mut per_conn: Option<&mut TokenBucket>, state: &State) -> u64 {
    loop {
        let now = state.now();
        let mut global = state.global.as_ref().map(|g| g.lock().unwrap());
        let mut avail = want;
        let mut threshold = want.min(MIN_GRANT);
        for bucket in [per_conn.as_deref_mut(), global.as_deref_mut()].into_iter().flatten() {
            avail = avail.min(bucket.available(now));
            threshold = threshold.min(bucket.capacity() as u64).max(1);
        }
        if avail >= threshold {
            for bucket in [per_conn.as_deref_mut(), global.as_deref_mut()].into_iter().flatten() {
                bucket.take(avail, now);
            }
            return avail;
        }
        let wait = [per_conn.as_deref_mut(), global.as_deref_mut()]
            .into_iter()
            .flatten()
            .map(|b| b.wait_for(threshold, now))
            .fold(0.0, f64::max);
        drop(global);
        thread::sleep(Duration::from_secs_f64(wait.clamp(0.000_5, 0.05)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_forms() {
        assert_eq!(parse_range(None, 10), RangeSpec::Whole);
        assert_eq!(parse_range(Some("bytes=0-0"), 10), RangeSpec::Slice(0, 0));
        assert_eq!(parse_range(Some("bytes=5-"), 10), RangeSpec::Slice(5, 9));
        assert_eq!(parse_range(Some("bytes=-3"), 10), RangeSpec::Slice(7, 9));
        assert_eq!(parse_range(Some("bytes=8-100"), 10), RangeSpec::Slice(8, 9));
        assert_eq!(parse_range(Some("bytes=10-12"), 10), RangeSpec::Unsatisfiable);
        assert_eq!(parse_range(Some("bytes=0-0"), 0), RangeSpec::Unsatisfiable);
        assert_eq!(parse_range(Some("bytes=4-2"), 10), RangeSpec::Unsatisfiable);
        assert_eq!(parse_range(Some("bytes=0-1,4-5"), 10), RangeSpec::Whole);
        assert_eq!(parse_range(Some("items=0-1"), 10), RangeSpec::Whole);
    }

    #[test]
    fn throttle_validation() {
        assert!(ThrottleConfig::new(Some(10), Some(50)).is_ok());
        assert!(ThrottleConfig::new(Some(60), Some(50)).is_err());
        assert!(ThrottleConfig::new(Some(0), None).is_err());
        assert!(ThrottleConfig::new(None, None).is_ok());
    }

    #[test]
    fn paths_cannot_escape_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"x").unwrap();
        assert!(resolve_path(dir.path(), "/a").is_some());
        assert!(resolve_path(dir.path(), "/a?x=1").is_some());
        assert!(resolve_path(dir.path(), "/../a").is_none());
        assert!(resolve_path(dir.path(), "/").is_none());
        assert!(resolve_path(dir.path(), "/missing").is_none());
    }
}
