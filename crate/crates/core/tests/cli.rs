use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_ubfsim");

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn ubfsim(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env_remove("UBFSIM_SEED").output().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(ubfsim(&["run", &scenario("clean.json")]).status.code(), Some(0));
    assert_eq!(ubfsim(&["check", &scenario("newgrp.json")]).status.code(), Some(0));
    assert_eq!(ubfsim(&["run", &scenario("leaky.json")]).status.code(), Some(2));
    assert_eq!(ubfsim(&["run", "/nonexistent.json"]).status.code(), Some(1));
    assert_eq!(ubfsim(&[]).status.code(), Some(1));
    assert_eq!(ubfsim(&["--help"]).status.code(), Some(0));
    let bad_seed = Command::new(BIN)
        .args(["run", &scenario("clean.json")])
        .env("UBFSIM_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(1));
}

#[test]
fn text_report_lists_violations() {
    let out = ubfsim(&["run", &scenario("leaky.json")]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("records: "));
    assert_eq!(text.lines().filter(|l| l.starts_with("VIOLATION FILE")).count(), 1);
}

#[test]
fn json_report_and_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = ubfsim(&["run", &scenario("newgrp.json"), "--report", "json", "--trace", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["summary"]["violations"], 0);
    assert_eq!(report["mediated"][0]["channel"], "NETWORK");
    let golden = std::fs::read_to_string(format!("{}/tests/golden/newgrp.jsonl", env!("CARGO_MANIFEST_DIR"))).unwrap();
    assert_eq!(std::fs::read_to_string(&trace).unwrap(), golden);
}

#[test]
fn seed_from_environment_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ubfsim(&["run", &scenario("clean.json"), "--seed", "5", "--trace", a.to_str().unwrap()]);
    Command::new(BIN)
        .args(["run", &scenario("clean.json"), "--trace", b.to_str().unwrap()])
        .env("UBFSIM_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn ident_serve_answers() {
    let mut child = Command::new(BIN)
        .args(["ident-serve", "--registry", &scenario("registry.json"), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_owned();

    let ask = |req: &[u8]| {
        let mut s = TcpStream::connect(&addr).unwrap();
        s.write_all(req).unwrap();
        let mut buf = String::new();
        s.read_to_string(&mut buf).unwrap();
        buf
    };
    let ok = ask(b"UBFIDENT/1 TCP 127.0.0.1 40000 127.0.0.1 8888\n");
    let missing = ask(b"UBFIDENT/1 TCP 127.0.0.1 40001 127.0.0.1 8888\n");
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(ok, "OK 1001 20000 alice\n");
    assert_eq!(missing, "ERR NO-SOCKET\n");
}
