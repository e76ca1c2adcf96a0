//! End-to-end checks of the command-line driver.

use std::path::Path;
use std::process::{Command, Output};

fn randgrasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randgrasp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const TINY: &str = "[experiment]\nseeds = [1]\n[generate]\nobjects = 12\nattempts = 30\n";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn eval_without_config_is_a_usage_error() {
    let out = randgrasp(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(randgrasp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(randgrasp(&["eval", "--frob"]).status.code(), Some(1));
    assert_eq!(randgrasp(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    assert_eq!(randgrasp(&["train-planner", "--config", &cfg, "--out", out]).status.code(), Some(2));
    assert_eq!(randgrasp(&["eval", "--config", &cfg, "--out", out]).status.code(), Some(2));
    assert_eq!(randgrasp(&["report", "--out", out]).status.code(), Some(2));
    let bad = write_config(tmp.path(), "[eval]\nscenes = \"many\"\n");
    assert_eq!(randgrasp(&["generate", "--config", &bad, "--out", out]).status.code(), Some(2));
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = randgrasp(&["generate", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in ["", "objects", "scenes"] {
            for e in std::fs::read_dir(out.join("dataset").join(sub)).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    files.push((p.strip_prefix(&out).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        trees.push(files);
    }
    assert_eq!(trees[0].len(), 1 + 2 * 12);
    assert!(trees[0] == trees[1]);
}

#[test]
fn report_matches_golden_tables() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/report");
    let tmp = tempfile::tempdir().unwrap();
    std::fs::copy(data.join("metrics.csv"), tmp.path().join("metrics.csv")).unwrap();
    let o = randgrasp(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = std::fs::read_to_string(tmp.path().join("report/tables.txt")).unwrap();
    let want = std::fs::read_to_string(data.join("tables.txt")).unwrap();
    assert_eq!(got, want);
}
