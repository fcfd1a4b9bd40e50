use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn layout(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../layouts").join(name)
}

fn relctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relctl"))
        .args(args)
        .env_remove("RELATTN_THREADS")
        .output()
        .expect("relctl runs")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("relctl-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON report")
}

fn csv_cells(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(str::to_owned).collect())
        .collect()
}

#[test]
fn masks_writes_all_artifacts() {
    let dir = scratch("showcase");
    let spec = layout("showcase.json");
    let out = relctl(&["masks", spec.to_str().unwrap(), "-o", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for f in ["csam.csv", "csam.pgm", "mcam.csv", "mcam.pgm", "positions.csv", "blocks.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    // 2 video frames + 7 condition frames of 16 tokens.
    let csam = csv_cells(&dir.join("csam.csv"));
    assert_eq!(csam.len(), 144);
    assert!(csam[..32].iter().all(|row| row.iter().all(|c| c == "1")));
    assert!(csam[32..].iter().all(|row| row[..32].iter().all(|c| c == "0")));
    let pgm = std::fs::read(dir.join("csam.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n144 144\n255\n"));
    assert_eq!(pgm.len(), b"P5\n144 144\n255\n".len() + 144 * 144);
    let positions = std::fs::read_to_string(dir.join("positions.csv")).unwrap();
    assert!(positions.starts_with("flat,i,j,k\n0,0,0,0\n"));
    assert_eq!(positions.lines().count(), 145);
    let blocks = std::fs::read_to_string(dir.join("blocks.csv")).unwrap();
    assert_eq!(blocks.lines().next(), Some("q0,q1,k0,k1"));
    assert_eq!(blocks.lines().nth(1), Some("0,32,0,144"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn masks_degenerate_layouts() {
    let dir = scratch("t2v");
    let out = relctl(&["masks", layout("t2v.json").to_str().unwrap(), "-o", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let csam = csv_cells(&dir.join("csam.csv"));
    assert!(csam.iter().flatten().all(|c| c == "1"));
    std::fs::remove_dir_all(&dir).unwrap();

    let dir = scratch("nospans");
    let out = relctl(&["masks", layout("no_spans.json").to_str().unwrap(), "-o", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let mcam = csv_cells(&dir.join("mcam.csv"));
    assert_eq!(mcam.len(), 4 * 15);
    assert!(mcam.iter().flatten().all(|c| c == "0"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn check_corpus_passes() {
    let out = relctl(&["check", "--corpus", "--json"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = json(&out);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() > 25 * 20);
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn check_names_the_broken_invariant() {
    let out = relctl(&["check", layout("overlapping_spans.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("entities[1].span"), "{stdout}");
    assert!(text(&out.stderr).contains("failed check: layout_invariant:entities[1].span"));
}

#[test]
fn check_four_groups() {
    let out = relctl(&["check", layout("large.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stdout));
}

#[test]
fn json_mirrors_text() {
    let spec = layout("showcase.json");
    let human = relctl(&["check", spec.to_str().unwrap()]);
    let machine = relctl(&["check", spec.to_str().unwrap(), "--json"]);
    let report = json(&machine);
    let human = text(&human.stdout);
    for c in report["checks"].as_array().unwrap() {
        let name = c["name"].as_str().unwrap();
        let line = human
            .lines()
            .find(|l| l.split_whitespace().nth(2) == Some(name))
            .unwrap_or_else(|| panic!("{name} missing from text output"));
        assert_eq!(line.starts_with("PASS"), c["passed"] == true);
    }
}

#[test]
fn bench_reports_timing() {
    let spec = layout("large.json");
    let out = relctl(&["bench", spec.to_str().unwrap(), "--head-dim", "32", "--reps", "3", "--json"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = json(&out);
    assert_eq!(report["checks"][0]["name"], "bench_equivalence");
    let timing = &report["timing"];
    assert_eq!(timing["reps"], 3);
    // Many condition branches leave most of the mask empty.
    assert!(timing["ratio"].as_f64().unwrap() <= 1.0, "{timing}");
}

#[test]
fn bench_zero_reps() {
    let spec = layout("showcase.json");
    let out = relctl(&["bench", spec.to_str().unwrap(), "--head-dim", "8", "--reps", "0"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("timing: none"));
    let out = relctl(&["bench", spec.to_str().unwrap(), "--head-dim", "8", "--reps", "0", "--json"]);
    assert!(json(&out).get("timing").is_none());
}

fn forward_loss(args: &[&str]) -> (f64, String) {
    let spec = layout("showcase.json");
    let mut full = vec!["forward", spec.to_str().unwrap(), "--json"];
    full.extend_from_slice(args);
    let out = relctl(&full);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = json(&out);
    let loss = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "loss")
        .unwrap()
        .clone();
    (loss["value"].as_f64().unwrap(), loss["bits"].as_str().unwrap().to_owned())
}

#[test]
fn forward_is_seeded() {
    let (a, bits_a) = forward_loss(&["--seed", "5"]);
    let (_, bits_b) = forward_loss(&["--seed", "5"]);
    assert_eq!(bits_a, bits_b);
    assert_eq!(format!("{:016x}", a.to_bits()), bits_a);
    let (zero_r, _) = forward_loss(&["--seed", "5", "--r", "0"]);
    assert!((a - zero_r).abs() > 1e-6);
    let (other_seed, _) = forward_loss(&["--seed", "6"]);
    assert_ne!(a, other_seed);
}

#[test]
fn forward_defaults_match_explicit_flags() {
    assert_eq!(
        forward_loss(&["--seed", "3"]).1,
        forward_loss(&["--seed", "3", "--r", "0.5", "--d", "8"]).1
    );
}

#[test]
fn thread_cap_does_not_change_results() {
    let spec = layout("showcase.json");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_relctl"))
            .args(["forward", spec.to_str().unwrap(), "--seed", "11"])
            .env("RELATTN_THREADS", threads)
            .output()
            .unwrap()
    };
    let (one, four) = (run("1"), run("4"));
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);
    let bad = run("zero");
    assert_eq!(bad.status.code(), Some(2));
    assert!(text(&bad.stderr).contains("RELATTN_THREADS"));
}

#[test]
fn usage_errors_exit_2() {
    let out = relctl(&["forward", "/nonexistent/layout.json", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("/nonexistent/layout.json"));

    let dir = scratch("bad-schema");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"T":1,"H":2,"W":2,"text_len":0,"entities":[{"kind":"face"}]}"#).unwrap();
    let out = relctl(&["masks", bad.to_str().unwrap(), "-o", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("entities[0].group"), "{}", text(&out.stderr));
    std::fs::remove_dir_all(dir).unwrap();

    assert!(!relctl(&["check"]).status.success());
}

/// The value quoted in the README.
#[test]
fn documented_forward_loss() {
    let (loss, bits) = forward_loss(&["--seed", "42"]);
    assert_eq!(bits, "40106e3397f0cb7a");
    assert_eq!(relattn::export::fmt_e6(loss), "4.107619e+00");
}
