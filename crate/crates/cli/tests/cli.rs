//! End-to-end runs of the `hcp` binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn hcp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcp"))
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .env_remove("HCP_OUT")
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hcp(tmp.path(), &["route"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("route");
    let manifest: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let mut on_disk = files(&dir);
    on_disk.remove("manifest.json");
    assert_eq!(manifest.keys().collect::<Vec<_>>(), on_disk.keys().collect::<Vec<_>>());
    for (name, bytes) in on_disk {
        assert_eq!(manifest[&name], hex::encode(Sha256::digest(&bytes)), "{name}");
    }
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for cmd in ["build", "exec", "passes", "extract-scm"] {
            assert!(hcp(tmp.path(), &["--seed", "4", cmd]).status.success(), "{cmd}");
        }
        snapshots.push(["build", "exec", "passes", "extract-scm"].map(|c| files(&tmp.path().join(c))));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn unknown_key_is_rejected_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[routing]\nlamda1 = 0.3\n").unwrap();
    let o = hcp(tmp.path(), &["--config", cfg.to_str().unwrap(), "route"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("did you mean `lambda1`"), "{err}");
}

#[test]
fn echoed_config_reproduces_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 7\n[routing]\nlambda1 = 0.25\niters = 5\n").unwrap();
    assert!(hcp(tmp.path(), &["--config", cfg.to_str().unwrap(), "route"]).status.success());
    let echoed = tmp.path().join("route").join("config.toml");
    let first = std::fs::read_to_string(&echoed).unwrap();
    assert!(first.contains("lambda1 = 0.25") && first.contains("seed = 7"), "{first}");
    let copy = tmp.path().join("echo.toml");
    std::fs::copy(&echoed, &copy).unwrap();
    assert!(hcp(tmp.path(), &["--config", copy.to_str().unwrap(), "route"]).status.success());
    assert_eq!(std::fs::read_to_string(&echoed).unwrap(), first);
}

#[test]
fn built_graph_feeds_passes_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(hcp(tmp.path(), &["build"]).status.success());
    let g = tmp.path().join("build").join("ceg.json");
    let o = hcp(tmp.path(), &["export", "--ceg", g.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(tmp.path().join("export").join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,node,index,value"));
    assert!(std::fs::read_to_string(tmp.path().join("export").join("ceg.dot")).unwrap().starts_with("digraph"));
}

#[test]
fn bench_and_single_criterion_verify() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(hcp(tmp.path(), &["bench-routing", "--sizes", "16,64"]).status.success());
    let csv = std::fs::read_to_string(tmp.path().join("bench-routing").join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(hcp(tmp.path(), &["verify", "--criterion", "9"]).status.success());
    assert_eq!(hcp(tmp.path(), &["verify", "--criterion", "14"]).status.code(), Some(2));
}

#[test]
fn missing_referenced_file_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "world = \"does/not/exist.json\"\n").unwrap();
    assert_eq!(hcp(tmp.path(), &["--config", cfg.to_str().unwrap(), "exec"]).status.code(), Some(2));
}

#[test]
fn world_file_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world.json");
    std::fs::write(
        &w,
        r#"{"names":["A","B"],"coef":{"rows":2,"cols":2,"data":[0.0,2.0,0.0,0.0]},"noise_sd":[1.0,1.0]}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("world = {:?}\n", w.to_str().unwrap())).unwrap();
    let o = hcp(tmp.path(), &["--config", cfg.to_str().unwrap(), "exec", "--samples", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("exec").join("final_states.csv")).unwrap();
    assert!(csv.starts_with("sample,A,B\n") && csv.lines().count() == 4, "{csv}");
}
