use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use genodl::simulator::TracePoint;
use genodl::telemetry::read_csv;
use harness::{generate_fixture_set, serve, write_random_file, FixtureFile, ServerHandle, ServerOptions, ThrottleConfig};
use serde_json::Value;

fn genodl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_genodl"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/resolver")
}

fn accessions(dir: &Path, lines: &str) -> PathBuf {
    let path = dir.join("acc.txt");
    fs::write(&path, lines).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---- resolve ----------------------------------------------------------

#[test]
fn resolve_lists_every_run_of_a_project() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(genodl().arg("resolve").arg("--accessions").arg(accessions(dir.path(), "PRJNA400087\n")).arg("--fixtures").arg(fixtures()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("run_accession\tfastq_ftp\tfastq_bytes\tfastq_md5"));
    assert_eq!(lines.count(), 43);
}

#[test]
fn resolve_empty_list_prints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(genodl().arg("resolve").arg("--accessions").arg(accessions(dir.path(), "# nothing\n")));
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn resolve_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let list = accessions(dir.path(), "PRJNA540705\nPRJNA540705\nPRJNA762469\nPRJNA540705\n");
    let out = run(genodl().arg("resolve").arg("--accessions").arg(list).arg("--fixtures").arg(fixtures()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = String::from_utf8(out.stdout).unwrap().lines().count() - 1;
    assert_eq!(rows, 6 + 10);
}

#[test]
fn resolve_reports_unknown_accessions() {
    let dir = tempfile::tempdir().unwrap();
    let list = accessions(dir.path(), "SRR9100901\nSRR9100999\n");
    let out = run(genodl().arg("resolve").arg("--accessions").arg(list).arg("--fixtures").arg(fixtures()));
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("SRR9100901\t"), "NCBI fallback still printed");
    assert!(String::from_utf8(out.stderr).unwrap().contains("SRR9100999"));
}

#[test]
fn malformed_accession_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(genodl().arg("resolve").arg("--accessions").arg(accessions(dir.path(), "not an accession\n")));
    assert_eq!(out.status.code(), Some(2));
}

// ---- simulate ---------------------------------------------------------

const SCENARIO_A: &str = "total_bandwidth_mbps = 10000\nper_stream_mbps = 500\nfile_size_gb = 100\nnoise = gaussian(0.1)\n";

fn simulate(dir: &Path, scenario: &str, out: &str, extra: &[&str]) -> Output {
    let path = dir.join("scenario.txt");
    fs::write(&path, scenario).unwrap();
    run(genodl().arg("simulate").arg(&path).arg("--out").arg(dir.join(out)).args(extra))
}

#[test]
fn simulate_writes_three_traces_and_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), SCENARIO_A, "o", &["--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("o");
    let comparison = json(&o.join("comparison.json"));
    let rows = comparison["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let base = rows.iter().find(|r| r["name"] == comparison["baseline"]).unwrap()["completion_seconds"].as_f64().unwrap();
    for row in rows {
        let name = row["name"].as_str().unwrap();
        let completion = row["completion_seconds"].as_f64().unwrap();
        let trace = read_csv(&fs::read_to_string(o.join(format!("trace_{name}.csv"))).unwrap()).unwrap();
        let last = trace.last().unwrap().t_seconds;
        assert!(last < completion && completion <= last + 0.1 + 1e-9, "{name}: {last} vs {completion}");
        let speedup = row["speedup_vs_baseline"].as_f64().unwrap();
        assert!((speedup - base / completion).abs() < 1e-12, "{name}");
    }
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), SCENARIO_A, "x", &["--seed", "7"]);
    simulate(dir.path(), SCENARIO_A, "y", &["--seed", "7"]);
    simulate(dir.path(), SCENARIO_A, "z", &["--seed", "8"]);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["trace_adaptive.csv", "trace_fixed3.csv", "trace_fixed5.csv", "comparison.json"] {
        assert_eq!(read("x", f), read("y", f), "{f}");
    }
    assert_ne!(read("x", "trace_adaptive.csv"), read("z", "trace_adaptive.csv"));
}

#[test]
fn simulate_names_an_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &format!("{SCENARIO_A}bandwith = 5\n"), "o", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("`bandwith`"));
}

#[test]
fn trace_point_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), SCENARIO_A, "o", &[]);
    let text = fs::read_to_string(dir.path().join("o/trace_fixed3.csv")).unwrap();
    let rows = read_csv(&text).unwrap();
    let first = TracePoint { t: rows[0].t_seconds, concurrency: rows[0].concurrency, mbps: rows[0].mbps };
    assert_eq!(first.concurrency, 3);
    assert!(first.mbps > 0.0);
}

// ---- bench ------------------------------------------------------------

fn bench(dir: &Path, name: &str, extra: &[&str]) -> (Output, Value) {
    let path = dir.join(name);
    let out = run(genodl().arg("bench").arg("--json").arg(&path).args(extra));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (out, json(&path))
}

#[test]
fn bench_concurrency_falls_as_k_grows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, rows) = bench(dir.path(), "b.json", &["--optimizer", "gd", "--seeds", "1"]);
    let conc: Vec<f64> = rows.as_array().unwrap().iter().map(|r| r["mean_concurrency"].as_f64().unwrap()).collect();
    assert_eq!(conc.len(), 3);
    assert!(conc[0] > conc[1] && conc[1] > conc[2], "{conc:?}");
}

#[test]
fn bench_single_cell_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let (out, rows) = bench(dir.path(), "b.json", &["--k", "1.02", "--optimizer", "bayes", "--seeds", "2"]);
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["runs"], 2);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2, "header + one row");
}

#[test]
fn bench_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = bench(dir.path(), "a.json", &[]);
    let (b, _) = bench(dir.path(), "b.json", &[]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
}

// ---- download ---------------------------------------------------------

#[test]
fn download_of_nothing_succeeds_with_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let list = accessions(dir.path(), "");
    let out = run(genodl().arg("download").arg("--accessions").arg(list).arg("--out").arg(dir.path().join("o")));
    assert!(out.status.success());
    let report = json(&dir.path().join("o/report.json"));
    assert_eq!(report["jobs"].as_array().unwrap().len(), 0);
    assert_eq!(report["total_bytes"], 0);
}

#[test]
fn download_needs_something_to_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(genodl().arg("download").arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixed_excludes_optimizer_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(genodl().args(["download", "--url", "http://x/y", "--fixed", "2", "--optimizer", "bayes", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

struct Site {
    _src: tempfile::TempDir,
    root: PathBuf,
    files: Vec<FixtureFile>,
    server: ServerHandle,
}

fn site(count: usize, size: u64, throttle: ThrottleConfig) -> Site {
    let src = tempfile::tempdir().unwrap();
    let root = src.path().to_owned();
    let files = generate_fixture_set(&root, count, size, 21).unwrap();
    let server = serve(&root, ServerOptions { throttle, ranges: true }, 0).unwrap();
    Site { _src: src, root, files, server }
}

fn download(site: &Site, out: &Path, extra: &[&str]) -> Command {
    let mut cmd = genodl();
    cmd.arg("-q").arg("download").arg("--out").arg(out).arg("--md5sums").arg(site.root.join("MD5SUMS"));
    for f in &site.files {
        cmd.arg("--url").arg(site.server.url(&f.name));
    }
    cmd.args(extra);
    cmd
}

#[test]
fn one_file_summary_matches_its_size() {
    let site = site(1, 3_000_000, ThrottleConfig::unlimited());
    let out = tempfile::tempdir().unwrap();
    let o = run(&mut download(&site, out.path(), &["--probe-secs", "0.2", "--chunk-bytes", "500000"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.path().join("report.json"));
    assert_eq!(report["total_bytes"], 3_000_000);
    assert_eq!(report["jobs"][0]["verify"]["status"], "ok");
    assert_eq!(report["jobs"][0]["status"]["state"], "completed");
    let rows = read_csv(&fs::read_to_string(out.path().join("report.csv")).unwrap()).unwrap();
    let bytes: f64 = rows.iter().map(|r| r.mbps * 1e6 / 8.0).sum();
    assert!((bytes - 3e6).abs() < 1.0);
}

#[test]
fn missing_file_fails_the_run() {
    let site = site(1, 10_000, ThrottleConfig::unlimited());
    let out = tempfile::tempdir().unwrap();
    let gone = site.server.url("gone.bin");
    let o = run(download(&site, out.path(), &["--fixed", "2"]).arg("--url").arg(gone));
    assert_eq!(o.status.code(), Some(1));
    let report = json(&out.path().join("report.json"));
    assert_eq!(report["jobs"][0]["status"]["state"], "completed");
    assert_eq!(report["jobs"][1]["status"]["state"], "failed");
}

#[test]
fn checksum_mismatch_fails_the_run() {
    let src = tempfile::tempdir().unwrap();
    write_random_file(&src.path().join("a.bin"), 50_000, 1).unwrap();
    fs::write(src.path().join("sums"), "00000000000000000000000000000000  a.bin\n").unwrap();
    let server = serve(src.path(), ServerOptions::default(), 0).unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = run(genodl()
        .args(["download", "--fixed", "1", "--url", &server.url("a.bin"), "--md5sums"])
        .arg(src.path().join("sums"))
        .arg("--out")
        .arg(out.path()));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&out.path().join("report.json"))["jobs"][0]["verify"]["status"], "mismatch");
}

#[test]
fn adaptive_beats_three_fixed_streams_on_a_throttled_link() {
    let site = site(5, 20_000_000, ThrottleConfig::new(Some(10_000_000), Some(50_000_000)).unwrap());
    let work = tempfile::tempdir().unwrap();
    let mbps = |name: &str, extra: &[&str]| {
        let out = work.path().join(name);
        let o = run(&mut download(&site, &out, extra));
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        json(&out.join("report.json"))["mean_mbps"].as_f64().unwrap()
    };
    let fixed = mbps("fixed", &["--fixed", "3", "--chunk-bytes", "4000000"]);
    let adaptive = mbps("adaptive", &["--probe-secs", "0.5", "--chunk-bytes", "4000000"]);
    assert!(adaptive > fixed, "adaptive {adaptive:.0} Mbps vs fixed-3 {fixed:.0} Mbps");
}

#[test]
fn sigint_keeps_manifests_and_resume_finishes() {
    let site = site(2, 10_000_000, ThrottleConfig::new(Some(2_000_000), Some(4_000_000)).unwrap());
    let out = tempfile::tempdir().unwrap();
    let mut child = download(&site, out.path(), &["--fixed", "2", "--chunk-bytes", "500000"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(1500));
    // SAFETY: plain kill(2) on our own child.
    unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) };
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "did not exit after SIGINT");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(status.code(), Some(1));
    let report = json(&out.path().join("report.json"));
    assert_eq!(report["interrupted"], true);
    let manifests = fs::read_dir(out.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "manifest")).count();
    assert!(manifests > 0);

    let first_bytes = report["total_bytes"].as_u64().unwrap();
    let o = run(&mut download(&site, out.path(), &["--fixed", "4", "--chunk-bytes", "500000", "--resume"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.path().join("report.json"));
    let resumed: u64 = report["jobs"].as_array().unwrap().iter().map(|j| j["bytes_resumed"].as_u64().unwrap()).sum();
    assert!(resumed > 0 && resumed <= first_bytes, "resumed {resumed}, first run {first_bytes}");
    assert_eq!(resumed + report["total_bytes"].as_u64().unwrap(), 20_000_000);
    assert!(report["jobs"].as_array().unwrap().iter().all(|j| j["verify"]["status"] == "ok"));
}
