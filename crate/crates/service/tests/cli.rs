use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use concept_probe::pipeline::PipelineConfig;
use concept_probe::snapshot::load_snapshot;
use concept_probe_service::cli::FIXTURE_CONFIG;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concept-probe"))
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Generates the fixture through the CLI and writes a reduced config next
/// to the default one, with paths relative to the config directory.
fn fixture_with_small_config(dir: &Path) -> PathBuf {
    let stdout = ok(bin().args(["fixture", "--out"]).arg(dir).args(["--seed", "2"]).output().unwrap());
    let default_cfg = PathBuf::from(stdout.trim());
    assert_eq!(default_cfg, dir.join(FIXTURE_CONFIG));
    let full: PipelineConfig = serde_json::from_slice(&std::fs::read(&default_cfg).unwrap()).unwrap();
    assert_eq!(full, PipelineConfig { dataset_path: "dataset.json".into(), model_path: "model".into(), layer: "pool1".into(), ..Default::default() });
    let small = serde_json::json!({
        "dataset_path": "dataset.json",
        "model_path": "model",
        "layer": "pool1",
        "images_per_class": 6,
        "segment_resolutions": [15],
        "concepts_per_class": 3,
        "min_concept_size": 4,
        "n_cavs": 4
    });
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_vec(&small).unwrap()).unwrap();
    path
}

#[test]
fn run_inspect_export_serve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_with_small_config(dir.path());
    let out_root = dir.path().join("out");

    let stdout = ok(bin().args(["run", "--config"]).arg(&cfg).args(["--seed", "11", "--out"]).arg(&out_root).output().unwrap());
    let mut lines = stdout.lines();
    let snap_dir = PathBuf::from(lines.next().unwrap());
    let id = lines.next().unwrap().strip_prefix("snapshot_id ").unwrap().to_string();
    let snap = load_snapshot(&snap_dir).unwrap();
    assert_eq!(snap.snapshot_id, id);
    assert_eq!(snap.config.seed, 11);
    assert!(snap.config.dataset_path.is_absolute());

    let again = ok(bin().args(["run", "--config"]).arg(&cfg).args(["--seed", "11", "--out"]).arg(&out_root).output().unwrap());
    assert!(again.contains(&id));

    let summary = ok(bin().args(["inspect", "--snapshot"]).arg(&snap_dir).output().unwrap());
    assert!(summary.starts_with(&format!("snapshot {id}")));
    for name in ["striped", "spotted", "plain"] {
        assert!(summary.contains(name), "{summary}");
    }
    let class0 = ok(bin().args(["inspect", "--snapshot"]).arg(&snap_dir).args(["--class", "0"]).output().unwrap());
    for c in snap.concepts.iter().chain(&snap.discarded).filter(|c| c.record.class_k == 0) {
        assert!(class0.contains(&c.record.concept_id));
    }
    assert!(!bin().args(["inspect", "--snapshot"]).arg(&snap_dir).args(["--class", "7"]).output().unwrap().status.success());

    let exported: serde_json::Value =
        serde_json::from_str(&ok(bin().args(["export", "--snapshot"]).arg(&snap_dir).args(["--format", "json"]).output().unwrap())).unwrap();
    assert_eq!(exported["snapshot_id"], id.as_str());
    assert!(!bin().args(["export", "--snapshot"]).arg(&snap_dir).args(["--format", "xml"]).output().unwrap().status.success());

    // Port already taken.
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = busy.local_addr().unwrap().to_string();
    let out = bin().args(["serve", "--snapshot"]).arg(&snap_dir).args(["--addr", &addr]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&addr));
    drop(busy);

    let mut child = bin().args(["serve", "--snapshot"]).arg(&snap_dir).args(["--addr", "127.0.0.1:0"]).stderr(Stdio::piped()).spawn().unwrap();
    let mut banner = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut banner).unwrap();
    let addr = banner.trim().rsplit("http://").next().unwrap().to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/snapshot HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(&id));
}

#[test]
fn corrupt_snapshot_is_rejected_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["serve", "--snapshot"]).arg(dir.path().join("missing")).args(["--addr", "127.0.0.1:0"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot load snapshot"));
}
