use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use mppd_cli::server::{router, AppState};
use mppd_core::runtime::{run, SimConfig};
use mppd_core::scenario::Scenario;
use mppd_core::trace_io::{read_trace_file, write_trace_file, OutcomeRecord, TraceHeader};
use serde_json::Value;
use tower::ServiceExt;

fn make_trace(dir: &Path, name: &str) -> PathBuf {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.scn"));
    let s = Scenario::parse(&std::fs::read_to_string(path).unwrap(), name).unwrap();
    let out = run(&s, &SimConfig::default());
    let trace = dir.join(format!("{name}.jsonl"));
    let header = TraceHeader::new(&s.name, s.process_count, 1000);
    write_trace_file(&trace, &header, &out.graph, &OutcomeRecord::from(&out)).unwrap();
    trace
}

fn app(trace: &Path, assets: Option<PathBuf>) -> Router {
    router(AppState::new(read_trace_file(trace).unwrap(), assets))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let resp = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    (status, body.to_vec())
}

async fn get_json(app: &Router, uri: &str) -> Value {
    let (status, body) = get(app, uri).await;
    assert_eq!(
        status,
        StatusCode::OK,
        "{uri}: {}",
        String::from_utf8_lossy(&body)
    );
    serde_json::from_slice(&body).unwrap()
}

fn localize_json(trace: &Path) -> Value {
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_mppd"))
        .args(["localize", "--format", "json", trace.to_str().unwrap()])
        .output()
        .unwrap();
    serde_json::from_slice(&o.stdout).unwrap()
}

#[tokio::test]
async fn localization_matches_cli() {
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "cycle_deadlock",
        "crash_chain",
        "redundant_send",
        "truncated_pair",
        "ring_ok",
    ] {
        let trace = make_trace(dir.path(), name);
        let app = app(&trace, None);
        assert_eq!(
            get_json(&app, "/api/localization").await,
            localize_json(&trace),
            "{name}"
        );
    }
}

#[tokio::test]
async fn trace_endpoint_has_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "crash_chain");
    let loaded = read_trace_file(&trace).unwrap();
    let v = get_json(&app(&trace, None), "/api/trace").await;
    assert_eq!(v["header"]["scenario_name"], "crash_chain");
    assert_eq!(v["events"].as_array().unwrap().len(), loaded.graph.len());
    assert_eq!(
        v["relations"].as_array().unwrap().len(),
        loaded.graph.edges().count()
    );
    assert_eq!(v["outcome"]["terminated_abnormally"], true);
    // Each event object matches its line in the trace file.
    let text = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (i, e) in v["events"].as_array().unwrap().iter().enumerate() {
        assert_eq!(e, &lines[1 + i]);
    }
}

#[tokio::test]
async fn view_endpoint_modes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "crash_chain");
    let loaded = read_trace_file(&trace).unwrap();
    let app = app(&trace, None);
    let count = |v: &Value| v["events"].as_array().unwrap().len();

    let all = get_json(&app, "/api/view?mode=all").await;
    assert_eq!(count(&all), loaded.graph.len());
    let def = get_json(&app, "/api/view").await;
    assert_eq!(count(&def), loaded.graph.default_view().len());
    let ranks = get_json(&app, "/api/view?mode=ranks&ranks=2").await;
    let related = get_json(&app, "/api/view?mode=ranks&ranks=2&related=true").await;
    assert!(count(&ranks) <= count(&related) && count(&related) <= count(&all));
    assert!(ranks["events"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["rank"] == 2));

    let (status, _) = get(&app, "/api/view?mode=ranks&ranks=zz").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, "/api/view?mode=ranks&ranks=99").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, "/api/view?mode=sideways").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "ring_ok");
    let assets = dir.path().join("www");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<p>viewer</p>").unwrap();

    let with = app(&trace, Some(assets));
    let (status, body) = get(&with, "/index.html").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>viewer</p>");
    let (status, _) = get(&with, "/").await;
    assert_eq!(status, StatusCode::OK);

    let without = app(&trace, None);
    let (status, _) = get(&without, "/index.html").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    get_json(&without, "/api/localization").await;
}

#[tokio::test]
async fn concurrent_readers() {
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "cycle_deadlock");
    let app = app(&trace, None);
    let first = get_json(&app, "/api/trace").await;
    let tasks: Vec<_> = (0..16)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { get_json(&app, "/api/trace").await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), first);
    }
}

#[test]
fn serve_binds_and_answers() {
    use std::io::{BufRead, BufReader, Read, Write};
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "cycle_deadlock");
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_mppd"))
        .args(["serve", trace.to_str().unwrap(), "--bind", "127.0.0.1:0"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("serving on http://")
        .expect(&line)
        .to_string();
    let mut conn = std::net::TcpStream::connect(&addr).unwrap();
    write!(
        conn,
        "GET /api/localization HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body = resp.split("\r\n\r\n").nth(1).unwrap();
    let v: Value = serde_json::from_str(body).unwrap();
    assert_eq!(v, localize_json(&trace));
}

#[test]
fn serve_bind_failure() {
    let dir = tempfile::tempdir().unwrap();
    let trace = make_trace(dir.path(), "ring_ok");
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_mppd"))
        .args(["serve", trace.to_str().unwrap(), "--bind", &addr])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
