use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

const BIN: &str = env!("CARGO_BIN_EXE_imagetar");

fn imagetar(data: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("IMAGETAR_DATA_DIR")
        .output()
        .expect("run imagetar")
}

fn ok(data: &Path, args: &[&str]) -> Output {
    let out = imagetar(data, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pattern(seed: u32) -> RgbImage {
    let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    let tint = (seed % 5) as u8 * 50;
    RgbImage::from_fn(24, 24, |x, y| {
        state = state.wrapping_mul(1_103_515_245).wrapping_add(12_345);
        let noise = (state >> 24) as u8 / 8;
        Rgb([tint.wrapping_add(noise), (x * 10) as u8, (y * 10) as u8 ^ noise])
    })
}

/// 20 distinct images, one of them copied three more times, one copied
/// once, and two undecodable files: 26 files.
fn corpus(root: &Path) {
    fs::create_dir_all(root.join("a/b")).unwrap();
    for i in 0..20 {
        let dir = if i % 2 == 0 { "a" } else { "a/b" };
        pattern(i).save(root.join(format!("{dir}/img{i:02}.png"))).unwrap();
    }
    let logo = fs::read(root.join("a/img00.png")).unwrap();
    for i in 0..3 {
        fs::write(root.join(format!("logo-copy{i}.png")), &logo).unwrap();
    }
    fs::copy(root.join("a/b/img01.png"), root.join("dup.png")).unwrap();
    fs::write(root.join("broken.png"), b"not an image").unwrap();
    fs::write(root.join("empty.jpg"), b"").unwrap();
    fs::write(root.join("notes.txt"), b"ignored").unwrap();
}

const STAGES: &[&[&str]] = &[
    &["dedup"],
    &["tally"],
    &["exclude", "--min-frequency", "4"],
    &["embed", "--dim", "64", "--batch-size", "4"],
    &["cluster", "--k", "4"],
    &["knn", "--row", "0", "--k", "5"],
    &["precision", "--k", "5", "--queries", "10"],
    &["report"],
];

fn pipeline(corpus_root: &Path, data: &Path) {
    ok(data, &["scan", corpus_root.to_str().unwrap()]);
    for stage in STAGES {
        ok(data, stage);
    }
}

/// `#TOTALS` section of a report CSV.
fn totals(csv: &str) -> Vec<(String, usize)> {
    csv.split("#TOTALS\n")
        .nth(1)
        .expect("totals section")
        .lines()
        .map(|l| {
            let (name, n) = l.split_once(',').unwrap();
            (name.to_string(), n.parse().unwrap())
        })
        .collect()
}

fn total(t: &[(String, usize)], name: &str) -> usize {
    t.iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn help_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "scan", "dedup", "tally", "exclude", "embed", "cluster", "knn", "precision", "report", "serve",
    ] {
        let out = imagetar(dir.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = imagetar(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = imagetar(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn scan_of_empty_directory_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty");
    fs::create_dir(&corpus).unwrap();
    let data = dir.path().join("data/nested");
    let out = imagetar(&data, &["scan", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(data.join("manifest.jsonl")).unwrap(), b"");
    assert!(out.stdout.is_empty());
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let missing = dir.path().join("nope");
    let cases: &[&[&str]] = &[
        &["scan", missing.to_str().unwrap()],
        &["cluster", "--k", "0"],
        &["cluster", "--k", "five"],
        &["exclude", "--min-frequency", "1"],
        &["embed", "--dim", "60"],
        &["embed", "--batch-size", "0"],
        &["knn", "--row", "0", "--checks", "0"],
        &["knn"],
    ];
    for args in cases {
        assert_eq!(imagetar(&data, args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(imagetar(&data, &["dedup"]).status.code(), Some(2));
    fs::write(data.join("vectors.fvec"), b"garbage").unwrap();
    assert_eq!(imagetar(&data, &["cluster"]).status.code(), Some(2));
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    fs::create_dir(&corpus).unwrap();
    let data = dir.path().join("from-env");
    let out = Command::new(BIN)
        .args(["scan", corpus.to_str().unwrap()])
        .env("IMAGETAR_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(data.join("manifest.jsonl").exists());
}

#[test]
fn pipeline_composes_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);
    let data = dir.path().join("data");
    pipeline(&root, &data);

    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 26);
    let groups = fs::read_to_string(data.join("groups.jsonl")).unwrap();
    assert_eq!(groups.lines().count(), 20);
    let tally = fs::read_to_string(data.join("tally.csv")).unwrap();
    assert!(tally.lines().nth(1).unwrap().contains(",4,"), "{tally}");

    let report = fs::read_to_string(data.join("report.csv")).unwrap();
    let t = totals(&report);
    assert_eq!(total(&t, "corpus_images"), 26);
    assert_eq!(total(&t, "images_excluded_prefilter"), 4);
    assert_eq!(total(&t, "images_invalid"), 2);
    assert_eq!(total(&t, "images_untagged"), 20);
    let six: usize = t.iter().filter(|(n, _)| n.starts_with("images_")).map(|(_, n)| n).sum();
    assert_eq!(six, 26);
    assert_eq!(report.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 4);

    let knn = fs::read_to_string(data.join("knn.csv")).unwrap();
    assert_eq!(knn.lines().next(), Some("rank,row,ordinal,image_id,distance"));
    assert_eq!(knn.lines().count(), 6);
    let precision = fs::read_to_string(data.join("precision.csv")).unwrap();
    assert!(precision.starts_with("# k=5 queries=10"));
    assert!(precision.contains("similarity_matrix_bytes=1444"));

    // JSON report, and knn by image id through a duplicate
    ok(&data, &["report", "--format", "json"]);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["corpus_images"], 26);
    let dup_id = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["path"] == "dup.png")
        .unwrap()["image_id"]
        .as_str()
        .unwrap()
        .to_string();
    let dup_out = dir.path().join("dup.csv");
    ok(&data, &["knn", "--image", &dup_id, "--k", "3", "--exact", "--out", dup_out.to_str().unwrap()]);
    let dup = fs::read_to_string(&dup_out).unwrap();
    assert_eq!(dup.lines().count(), 4);
    // the duplicate shares its original's vector, so the original comes first
    let original_id = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["path"] == "a/b/img01.png")
        .unwrap()["image_id"]
        .as_str()
        .unwrap()
        .to_string();
    ok(&data, &["knn", "--image", &original_id, "--k", "3", "--exact", "--out", dup_out.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&dup_out).unwrap(), dup);
}

#[test]
fn reports_honor_tags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);
    let data = dir.path().join("data");
    pipeline(&root, &data);
    let summaries: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("summaries.json")).unwrap()).unwrap();
    let size0 = summaries[0]["size_total_images"].as_u64().unwrap() as usize;
    let events = [
        r#"{"seq":1,"round":1,"cluster_index":0,"label":"not_responsive","note":"","author":"a","timestamp":"2024-01-01T00:00:00Z"}"#,
        r#"{"seq":2,"round":1,"cluster_index":0,"label":"responsive","note":"final","author":"b","timestamp":"2024-01-01T00:01:00Z"}"#,
        r#"{"seq":3,"round":2,"cluster_index":1,"label":"responsive","note":"other round","author":"b","timestamp":"2024-01-01T00:02:00Z"}"#,
    ];
    fs::write(data.join("tags.jsonl"), events.join("\n") + "\n").unwrap();
    ok(&data, &["report"]);
    let report = fs::read_to_string(data.join("report.csv")).unwrap();
    let t = totals(&report);
    assert_eq!(total(&t, "images_responsive"), size0);
    assert_eq!(total(&t, "images_not_responsive"), 0);
    assert!(report.lines().any(|l| l.starts_with("0,") && l.ends_with(",responsive,final")));
}

fn read_all(data: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "corpus_root.txt")
        .map(|p| {
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == "precision.csv" {
                // the first line carries wall-clock timings
                let body = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
                bytes.drain(..body);
            }
            (p.file_name().unwrap().into(), bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn rerunning_stages_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    pipeline(&root, &first);
    pipeline(&root, &second);
    let a = read_all(&first);
    assert_eq!(a.len(), 10);
    assert_eq!(a, read_all(&second));

    // rerun in place, stage by stage
    ok(&first, &["scan", root.to_str().unwrap()]);
    for stage in STAGES {
        ok(&first, stage);
    }
    assert_eq!(a, read_all(&first));
}

#[cfg(unix)]
#[test]
fn external_embedder_matches_reference() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);
    let data = dir.path().join("data");
    ok(&data, &["scan", root.to_str().unwrap()]);
    ok(&data, &["dedup"]);
    ok(&data, &["embed", "--dim", "64", "--batch-size", "4"]);

    let script = dir.path().join("worker.sh");
    fs::write(&script, format!("#!/bin/sh\nexec {BIN} embed-worker \"$@\"\n")).unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    ok(
        &data,
        &[
            "embed",
            "--dim",
            "64",
            "--batch-size",
            "4",
            "--external",
            script.to_str().unwrap(),
            "--out",
            data.join("external.fvec").to_str().unwrap(),
            "--failures",
            data.join("external-failures.jsonl").to_str().unwrap(),
        ],
    );
    assert_eq!(
        fs::read(data.join("vectors.fvec")).unwrap(),
        fs::read(data.join("external.fvec")).unwrap()
    );
    assert_eq!(fs::read(data.join("external-failures.jsonl")).unwrap(), b"");
}

#[test]
fn embed_failures_count_as_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);
    let data = dir.path().join("data");
    ok(&data, &["scan", root.to_str().unwrap()]);
    ok(&data, &["dedup"]);
    // decodable at scan time, gone by embed time
    fs::write(root.join("a/img02.png"), b"truncated").unwrap();
    ok(&data, &["embed", "--dim", "64"]);
    let failures = fs::read_to_string(data.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1);
    ok(&data, &["cluster", "--k", "3"]);
    ok(&data, &["report"]);
    let t = totals(&fs::read_to_string(data.join("report.csv")).unwrap());
    assert_eq!(total(&t, "images_invalid"), 3);
    assert_eq!(total(&t, "images_untagged"), 23);
}
