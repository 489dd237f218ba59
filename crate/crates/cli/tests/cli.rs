use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use wmguard::data::synthetic::{write_synthetic_root, SyntheticSizes};

fn tiny_toml() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn wmguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmguard"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    root_override: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_synthetic_root(&root, SyntheticSizes::default(), 3).unwrap();
    Fixture {
        out: tmp.path().join("runs"),
        root_override: format!("data.root=\"{}\"", root.display()),
        _tmp: tmp,
    }
}

impl Fixture {
    fn stage(&self, stage: &str, extra: &[&str]) -> Output {
        let cfg = tiny_toml();
        let mut args = vec![
            stage,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
            self.root_override.as_str(),
        ];
        args.extend_from_slice(extra);
        wmguard(&args)
    }

    fn provenance(&self) -> Vec<Value> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(self.out.join("provenance"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| serde_json::from_slice(&std::fs::read(f).unwrap()).unwrap())
            .collect()
    }
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = wmguard(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn schema_violation_names_key_path() {
    let f = fixture();
    let o = f.stage("data", &["data.adversary_fraction=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("data.adversary_fraction"),
        "{}",
        stderr(&o)
    );

    let o = f.stage("data", &["data.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.bogus"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_exits_3_naming_prior_subcommand() {
    let f = fixture();
    let o = f.stage("mark", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`data`"), "{}", stderr(&o));
}

#[test]
fn seed_flag_changes_only_the_stage_seed() {
    let f = fixture();
    assert!(f.stage("data", &[]).status.success());
    assert!(f.stage("data", &["--seed", "7"]).status.success());
    let recs = f.provenance();
    assert_eq!(recs.len(), 2);
    let (a, b) = (&recs[0]["config"], &recs[1]["config"]);
    assert_eq!(b["seeds"]["data"], 7);
    let mut b2 = b.clone();
    b2["seeds"]["data"] = a["seeds"]["data"].clone();
    assert_eq!(&b2, a);
    assert_ne!(recs[0]["config_hash"], recs[1]["config_hash"]);
}

#[test]
fn full_sequence_report_force_and_replay() {
    let f = fixture();
    for stage in ["data", "trigger", "mark", "defend", "eval"] {
        let o = f.stage(stage, &[]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let recs = f.provenance();
    let eval_key = recs[4]["stage_key"].as_str().unwrap().to_string();
    let eval_dir = f
        .out
        .join("cache")
        .join(format!("eval-{}", &eval_key[..16]));
    let report = std::fs::read(eval_dir.join("report.json")).unwrap();
    wmguard::harness::revalidate(&eval_dir).unwrap();

    let defend_key = recs[3]["stage_key"].as_str().unwrap().to_string();
    let defend_dir = f
        .out
        .join("cache")
        .join(format!("defend-{}", &defend_key[..16]));
    let before = std::fs::read(defend_dir.join("stage.json")).unwrap();
    let o = f.stage("defend", &["--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let after = std::fs::read(defend_dir.join("stage.json")).unwrap();
    assert_ne!(before, after, "forced stage must be retrained");

    let rep_out = f.out.join("tables");
    let o = wmguard(&[
        "report",
        "--format",
        "csv",
        "--out",
        rep_out.to_str().unwrap(),
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = wmguard::harness::report::read_csv(&rep_out.join("reports.csv")).unwrap();
    assert_eq!(rows.len(), 1);

    // Replay the stage invocations from provenance alone into an empty cache.
    let saved = f.out.join("provenance-saved");
    std::fs::rename(f.out.join("provenance"), &saved).unwrap();
    std::fs::remove_dir_all(f.out.join("cache")).unwrap();
    let replayed = wmguard::harness::replay(&saved).unwrap();
    assert_eq!(replayed.len(), 6);
    assert_eq!(std::fs::read(eval_dir.join("report.json")).unwrap(), report);
}
