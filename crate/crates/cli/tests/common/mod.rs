#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().expect("fixtures directory")
}

pub fn mock_dir() -> PathBuf {
    fixtures().join("mock")
}

/// Runs the binary with a pinned clock and returns its output.
pub fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomic-nli"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

/// Mock-mode arguments for a stage against `run_dir`, with the dataset only
/// when given.
pub fn mock_args(stage: &str, run_dir: &Path, dataset: Option<&str>) -> Vec<String> {
    let mut args = vec![
        stage.to_string(),
        "--mock".into(),
        "--fixtures".into(),
        mock_dir().display().to_string(),
        "--run-dir".into(),
        run_dir.display().to_string(),
    ];
    if let Some(name) = dataset {
        args.push("--dataset".into());
        args.push(fixtures().join(name).display().to_string());
    }
    args
}

pub fn ok(output: &Output) -> String {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Decomposes and prunes the defeasible corpus into `run_dir`.
pub fn pruned_defeasible_run(run_dir: &Path) {
    ok(&cli(&mock_args("decompose", run_dir, Some("dsnli20.jsonl"))));
    ok(&cli(&mock_args("prune", run_dir, None)));
}

/// Every stage of the defeasible chain, in order.
pub fn defeasible_chain(run_dir: &Path) {
    pruned_defeasible_run(run_dir);
    let mut eval = mock_args("eval-defeasible", run_dir, None);
    eval.push("--annotations".into());
    eval.push(fixtures().join("dsnli20_annotations.jsonl").display().to_string());
    ok(&cli(&eval));
    let mut group = mock_args("group", run_dir, None);
    group.push("--quds".into());
    ok(&cli(&group));
    ok(&cli(&mock_args("report", run_dir, None)));
    ok(&cli(&mock_args("rugplot", run_dir, None)));
}

/// Every stage of the traditional chain, in order.
pub fn nli_chain(run_dir: &Path) {
    ok(&cli(&mock_args("decompose", run_dir, Some("snli20.jsonl"))));
    ok(&cli(&mock_args("prune", run_dir, None)));
    ok(&cli(&mock_args("eval-nli", run_dir, None)));
    ok(&cli(&mock_args("report", run_dir, None)));
}

pub const NLI_GOLDEN: &[&str] = &["reports/nli.txt", "reports/nli.json", "reports/summary.txt"];
pub const DEFEASIBLE_GOLDEN: &[&str] = &[
    "reports/defeasible.txt",
    "reports/agreement.json",
    "reports/grouping.txt",
    "reports/summary.txt",
    "rugplot.svg",
    "rugplot.csv",
];

/// Files of `run` that differ from the stored goldens for `chain`. With
/// `UPDATE_GOLDEN` set the goldens are rewritten instead.
pub fn golden_mismatches(chain: &str, run: &Path, files: &[&str]) -> Vec<String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(chain);
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut bad = Vec::new();
    for file in files {
        let Ok(actual) = std::fs::read(run.join(file)) else {
            bad.push(format!("{file}: missing from the run"));
            continue;
        };
        let golden = dir.join(file.replace('/', "__"));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&golden, &actual).unwrap();
        } else if std::fs::read(&golden).ok().as_deref() != Some(actual.as_slice()) {
            bad.push(format!("{file} differs from {}", golden.display()));
        }
    }
    bad
}

/// Paths whose presence or bytes differ between two run directories.
pub fn tree_differences(a: &Path, b: &Path) -> Vec<String> {
    let left: std::collections::BTreeMap<_, _> = snapshot(a).into_iter().collect();
    let right: std::collections::BTreeMap<_, _> = snapshot(b).into_iter().collect();
    let mut names: Vec<&String> = left.keys().chain(right.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| left.get(*n) != right.get(*n)).cloned().collect()
}

/// Relative paths and bytes of every file under `root` except the response cache.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == "cache" {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
