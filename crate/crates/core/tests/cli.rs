use std::path::Path;
use std::process::{Command, Output};

use embnum::dataset::{generate_synthetic, write_dataset, SyntheticSpec};

fn embnum(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embnum"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path, labels: usize, sources: usize) {
    let d = generate_synthetic(&SyntheticSpec::with_defaults(labels, sources, 4)).unwrap();
    write_dataset(&d, &dir.join("data")).unwrap();
}

#[test]
fn sample_prints_grid_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.txt"), "1\n2\n3\n4\n").unwrap();
    let o = embnum(&["sample", "a.txt", "--h", "4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1,2,3,4");
    let o = embnum(&["sample", "a.txt", "--h", "2"], dir.path());
    assert_eq!(stdout(&o).trim(), "2,4");
}

#[test]
fn usage_and_domain_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(embnum(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(embnum(&["sample"], dir.path()).status.code(), Some(2));
    let o = embnum(&["sample", "missing.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error ["), "{}", stderr(&o));
    assert_eq!(embnum(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn benchmark_reports_every_experiment() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 3, 5);
    let o = embnum(&["benchmark", "data", "--method", "semantictyper"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["total_experiments"], 75);
    assert_eq!(report["per_count"].as_array().unwrap().len(), 4);
}

#[test]
fn train_index_label_export_flow() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4, 3);
    let p = dir.path();
    let o = embnum(
        &[
            "train", "data", "--out", "m.embn", "--preset", "desk", "--epochs", "2", "--h", "32", "--k", "8",
            "--width-multiplier", "1/16", "--batch-labels", "3",
        ],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(p.join("m.embn.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let o = embnum(&["index", "data", "--method", "embnum", "--model", "m.embn", "--out", "s.json"], p);
    assert!(o.status.success(), "{}", stderr(&o));

    let query = std::fs::read_dir(p.join("data"))
        .unwrap()
        .flat_map(|s| std::fs::read_dir(s.unwrap().path()).unwrap())
        .map(|f| f.unwrap().path())
        .find(|f| f.is_file())
        .unwrap();
    let q = query.to_str().unwrap();
    let o = embnum(&["label", "--store", "s.json", "--model", "m.embn", q, "--top", "3"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "rank,label,source,score");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));

    let o = embnum(&["label", "--store", "s.json", q], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MissingModel"), "{}", stderr(&o));

    let o = embnum(&["export-embeddings", "--model", "m.embn", "data"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("label,source,e0,"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 3, 2);
    std::fs::write(dir.path().join("bad.embn"), b"EMBN\x01\x00\x00\x00garbage").unwrap();
    let o = embnum(&["index", "data", "--method", "embnum", "--model", "bad.embn", "--out", "s.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("s.json").exists());
}
