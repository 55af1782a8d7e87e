#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const ENV_VARS: [&str; 6] = ["ENDPOINT", "MODEL", "API_KEY", "MOCK_SCRIPT", "SEED", "BUDGET"];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Runs the binary in `cwd` with a scrubbed `REVSEARCH_*` environment.
pub fn revsearch_env(cwd: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_revsearch"));
    cmd.current_dir(cwd).args(args);
    for v in ENV_VARS {
        cmd.env_remove(format!("REVSEARCH_{v}"));
    }
    cmd.env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn revsearch(cwd: &Path, args: &[&str]) -> Output {
    revsearch_env(cwd, args, &[])
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Relative path -> bytes of every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Writes the toy-suite tasks whose ids are listed to `dir/name`.
pub fn toy_subset(dir: &Path, name: &str, ids: &[&str]) -> PathBuf {
    let text = std::fs::read_to_string(fixtures().join("toy/tasks.jsonl")).unwrap();
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            ids.contains(&v["id"].as_str().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), ids.len());
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

/// Asserts both directories hold the same files with the same bytes, after
/// replacing each directory's own path with a placeholder.
pub fn assert_same_files(a: &Path, b: &Path) {
    let norm = |dir: &Path| -> BTreeMap<String, String> {
        let needle = dir.to_string_lossy().into_owned();
        snapshot(dir)
            .into_iter()
            .map(|(k, v)| (k, String::from_utf8_lossy(&v).replace(&needle, "<OUT>")))
            .collect()
    };
    let (x, y) = (norm(a), norm(b));
    let keys_x: Vec<&String> = x.keys().collect();
    let keys_y: Vec<&String> = y.keys().collect();
    assert_eq!(keys_x, keys_y, "file sets differ");
    let differing: Vec<&String> = x.keys().filter(|k| x[*k] != y[*k]).collect();
    assert!(differing.is_empty(), "files differ: {differing:?}");
}
