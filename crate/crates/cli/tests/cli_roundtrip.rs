use std::path::Path;
use std::process::{Command, Output};

fn chronophoto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chronophoto"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate_small(dir: &Path) {
    let out = chronophoto(&[
        "generate",
        "--seed",
        "4",
        "--scale",
        "0.1",
        "--edges",
        s(&dir.join("edges.csv")),
        "--partitions",
        s(&dir.join("parts.csv")),
        "--metadata",
        s(&dir.join("meta.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_run_validate() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let artifact = dir.path().join("a.json");
    let out = chronophoto(&[
        "run",
        "--edges",
        s(&dir.path().join("edges.csv")),
        "--partitions",
        s(&dir.path().join("parts.csv")),
        "--metadata",
        s(&dir.path().join("meta.csv")),
        "--deterministic",
        "--out",
        s(&artifact),
        "--dump",
        "links,layout",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("links.csv").exists());
    assert!(dir.path().join("layout.csv").exists());

    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&artifact).unwrap()).unwrap();
    assert_eq!(value["schema_version"], 1);
    assert_eq!(value["meta"]["n_phases"], 11);
    let labels: Vec<&str> = value["groups"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|g| g["phase"] == 0)
        .map(|g| g["dominant_label"].as_str().unwrap())
        .collect();
    assert_eq!(labels.len(), 2);
    assert!(labels.contains(&"core") && labels.contains(&"periphery"));

    let out = chronophoto(&["validate", s(&artifact)]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validate_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let artifact = dir.path().join("a.json");
    let out = chronophoto(&[
        "run",
        "--edges",
        s(&dir.path().join("edges.csv")),
        "--partitions",
        s(&dir.path().join("parts.csv")),
        "--out",
        s(&artifact),
    ]);
    assert!(out.status.success());

    let mut value: serde_json::Value = serde_json::from_slice(&std::fs::read(&artifact).unwrap()).unwrap();
    value["groups"][0]["x"] = serde_json::Value::Null;
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, serde_json::to_vec(&value).unwrap()).unwrap();
    let out = chronophoto(&["validate", s(&broken)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("non-finite coordinate"));

    let out = chronophoto(&["validate", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.csv");
    std::fs::write(&edges, "phase,src,dst,weight\n0,a,b,not-a-number\n").unwrap();
    let artifact = dir.path().join("a.json");
    let out = chronophoto(&["run", "--edges", s(&edges), "--out", s(&artifact)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
    assert!(!artifact.exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"seed": 11, "skipgram": {"dim": 8}}"#).unwrap();
    let run = |seed: &str, out: &str| {
        let out_path = dir.path().join(out);
        let o = chronophoto(&[
            "run",
            "--edges",
            s(&dir.path().join("edges.csv")),
            "--partitions",
            s(&dir.path().join("parts.csv")),
            "--config",
            s(&config),
            "--seed",
            seed,
            "--deterministic",
            "--out",
            s(&out_path),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<serde_json::Value>(&std::fs::read(out_path).unwrap()).unwrap()
    };
    let a = run("5", "a.json");
    assert_eq!(a["meta"]["seed"], 5);
    assert_eq!(a["meta"]["config"]["skipgram"]["dim"], 8);
}
