use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use harness::{serve, write_random_file, ServerHandle, ServerOptions, ThrottleConfig};

struct Response {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Response {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

fn read_response(reader: &mut BufReader<TcpStream>, head_only: bool) -> Response {
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let status = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let mut headers = Vec::new();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (n, v) = l.split_once(':').unwrap();
        headers.push((n.to_owned(), v.trim().to_owned()));
    }
    let len: usize = headers.iter().find(|(n, _)| n.eq_ignore_ascii_case("content-length")).unwrap().1.parse().unwrap();
    let mut body = vec![0u8; if head_only { 0 } else { len }];
    reader.read_exact(&mut body).unwrap();
    Response { status, headers, body }
}

fn request(server: &ServerHandle, method: &str, path: &str, range: Option<&str>) -> Response {
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let range = range.map(|r| format!("Range: {r}\r\n")).unwrap_or_default();
    write!(w, "{method} {path} HTTP/1.1\r\nHost: x\r\n{range}Connection: close\r\n\r\n").unwrap();
    read_response(&mut BufReader::new(stream), method == "HEAD")
}

fn fixture(dir: &Path, name: &str, size: u64) -> Vec<u8> {
    write_random_file(&dir.join(name), size, 1).unwrap();
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn first_byte_range_is_206() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "f.bin", 1000);
    let server = serve(dir.path(), ServerOptions::default(), 0).unwrap();
    let r = request(&server, "GET", "/f.bin", Some("bytes=0-0"));
    assert_eq!(r.status, 206);
    assert_eq!(r.body, &data[..1]);
    assert_eq!(r.header("content-range"), Some("bytes 0-0/1000"));
}

#[test]
fn ranges_match_file_slices() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "f.bin", 100_000);
    let server = serve(dir.path(), ServerOptions::default(), 0).unwrap();
    for (spec, s, e) in [("bytes=10-99", 10, 100), ("bytes=99990-", 99_990, 100_000), ("bytes=-5", 99_995, 100_000)] {
        let r = request(&server, "GET", "/f.bin", Some(spec));
        assert_eq!(r.status, 206, "{spec}");
        assert_eq!(r.body, &data[s..e], "{spec}");
        assert_eq!(r.header("content-range").unwrap(), format!("bytes {}-{}/100000", s, e - 1));
    }
    let whole = request(&server, "GET", "/f.bin", None);
    assert_eq!(whole.status, 200);
    assert_eq!(whole.body, data);
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "f.bin", 10);
    let server = serve(dir.path(), ServerOptions::default(), 0).unwrap();
    let r = request(&server, "GET", "/f.bin", Some("bytes=10-20"));
    assert_eq!(r.status, 416);
    assert_eq!(r.header("content-range"), Some("bytes */10"));
    assert_eq!(request(&server, "GET", "/nope", None).status, 404);
    assert_eq!(request(&server, "GET", "/../etc/passwd", None).status, 404);
    assert_eq!(request(&server, "POST", "/f.bin", None).status, 405);
    let head = request(&server, "HEAD", "/f.bin", None);
    assert_eq!((head.status, head.header("content-length")), (200, Some("10")));
}

#[test]
fn ranges_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "f.bin", 500);
    let server = serve(dir.path(), ServerOptions { ranges: false, ..Default::default() }, 0).unwrap();
    let r = request(&server, "GET", "/f.bin", Some("bytes=0-0"));
    assert_eq!(r.status, 200);
    assert_eq!(r.body, data);
    assert_eq!(r.header("accept-ranges"), None);
}

#[test]
fn keep_alive_serves_several_requests_per_connection() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "f.bin", 4096);
    let server = serve(dir.path(), ServerOptions::default(), 0).unwrap();
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    for i in 0..4 {
        write!(w, "GET /f.bin HTTP/1.1\r\nHost: x\r\nRange: bytes={}-{}\r\n\r\n", i * 1024, i * 1024 + 1023).unwrap();
        let r = read_response(&mut reader, false);
        assert_eq!(r.body, &data[i * 1024..(i + 1) * 1024]);
    }
    assert_eq!(server.stats().connections.load(Ordering::Relaxed), 1);
    assert_eq!(server.stats().requests.load(Ordering::Relaxed), 4);
}

/// Streams ranged requests on one keep-alive connection until `stop`,
/// adding every body byte to `counter` as it arrives.
fn pump(server: &ServerHandle, len: u64, counter: &AtomicU64, stop: &AtomicBool) {
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut buf = vec![0u8; 16 * 1024];
    while !stop.load(Ordering::Relaxed) {
        write!(w, "GET /big.bin HTTP/1.1\r\nHost: x\r\nRange: bytes=0-{}\r\n\r\n", len - 1).unwrap();
        let mut line = String::new();
        loop {
            line.clear();
            reader.read_line(&mut line).unwrap();
            if line.trim_end().is_empty() {
                break;
            }
        }
        let mut left = len as usize;
        while left > 0 {
            let n = reader.read(&mut buf[..left.min(16 * 1024)]).unwrap();
            assert!(n > 0);
            counter.fetch_add(n as u64, Ordering::Relaxed);
            left -= n;
            if stop.load(Ordering::Relaxed) {
                return;
            }
        }
    }
}

/// Steady-state rate over `[settle, settle + window)`, after the initial
/// one-second burst has drained.
fn measure(server: &ServerHandle, conns: usize, settle: f64, window: f64) -> Vec<f64> {
    let counters: Vec<AtomicU64> = (0..conns).map(|_| AtomicU64::new(0)).collect();
    let stop = AtomicBool::new(false);
    let mut rates = vec![0.0; conns];
    thread::scope(|s| {
        for c in &counters {
            let stop = &stop;
            s.spawn(move || pump(server, 8_000_000, c, stop));
        }
        thread::sleep(Duration::from_secs_f64(settle));
        let t0 = Instant::now();
        let before: Vec<u64> = counters.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        thread::sleep(Duration::from_secs_f64(window));
        let dt = t0.elapsed().as_secs_f64();
        for (i, c) in counters.iter().enumerate() {
            rates[i] = (c.load(Ordering::Relaxed) - before[i]) as f64 / dt;
        }
        stop.store(true, Ordering::Relaxed);
    });
    rates
}

const MB: u64 = 1_000_000;

#[test]
fn aggregate_rate_tracks_global_cap() {
    let dir = tempfile::tempdir().unwrap();
    write_random_file(&dir.path().join("big.bin"), 8 * MB, 3).unwrap();
    let throttle = ThrottleConfig::new(Some(10 * MB), Some(50 * MB)).unwrap();
    let server = serve(dir.path(), ServerOptions { throttle, ranges: true }, 0).unwrap();
    let rates = measure(&server, 8, 1.5, 2.0);
    let total: f64 = rates.iter().sum();
    assert!((total / (50 * MB) as f64 - 1.0).abs() <= 0.10, "aggregate {:.1} MB/s", total / 1e6);
    for r in &rates {
        assert!(*r <= 10.0 * 1.05 * MB as f64, "connection at {:.1} MB/s", r / 1e6);
    }
}

#[test]
fn single_connection_tracks_its_cap() {
    let dir = tempfile::tempdir().unwrap();
    write_random_file(&dir.path().join("big.bin"), 8 * MB, 4).unwrap();
    let throttle = ThrottleConfig::new(Some(10 * MB), Some(50 * MB)).unwrap();
    let server = serve(dir.path(), ServerOptions { throttle, ranges: true }, 0).unwrap();
    let rate = measure(&server, 1, 1.2, 1.5)[0];
    assert!((rate / (10 * MB) as f64 - 1.0).abs() <= 0.05, "{:.2} MB/s", rate / 1e6);
}

#[test]
fn shutdown_releases_the_port() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), ServerOptions::default(), 0).unwrap();
    let addr = server.addr();
    server.shutdown();
    let rebound = Arc::new(std::net::TcpListener::bind(addr));
    assert!(rebound.is_ok());
}
