use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gram_core::data::load_tile_directory;

const SMALL: &str = r#"
[data]
tiles_per_region = 24
val_tiles_per_region = 8
tile_size = 32

[source]
epochs = 2

[target]
epochs = 1

[adapt]
temporal_checkpoints = 2

[analysis]
num_clusters = 4
seeds = [0]
"#;

fn gram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gram"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_loadable_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = gram(&["synth", "--seed", "0", "--regions", "3", "--tiles-per-region", "16", "--tile-size", "32", "--set", "data.val_tiles_per_region=4", "-o", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let src = load_tile_directory(a.join("source")).unwrap();
    assert_eq!(src.len(), 48);
    assert_eq!(load_tile_directory(a.join("target")).unwrap().len(), 16);
    assert_eq!(files_under(&a), files_under(&b));
    assert!(a.join("config.resolved.toml").exists());
}

#[test]
fn single_region_synth_warns_but_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gram(&["synth", "--regions", "1", "--tiles-per-region", "20", "--tile-size", "32", "--set", "data.val_tiles_per_region=4", "-o", s(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("degenerate"));
}

#[test]
fn config_errors_exit_2_and_name_the_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gram(&["train-source", "-o", s(tmp.path()), "--set", "filter.rho_s=0", "--set", "source.momentum=2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("filter.rho_s") && err.contains("source.momentum"), "{err}");

    let o = gram(&["synth", "-o", s(tmp.path()), "--set", "data.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    let o = gram(&["synth", "-o", s(tmp.path()), "--tile-size", "48"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let o = gram(&["adapt", "--config", s(&cfg), "-o", s(&run)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("source.ckpt"));
    let o = gram(&["evaluate", "--config", s(&tmp.path().join("absent.toml")), "-o", s(&run)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = gram(&["train-source", "--config", s(&cfg), "-o", s(tmp.path()), "--set", "source.learning_rate=1e150"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn full_pipeline_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let bench = tmp.path().join("bench");
    let run = tmp.path().join("run");
    let o = gram(&["synth", "--config", s(&cfg), "--seed", "4", "-o", s(&bench)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let common = ["--config", s(&cfg), "--seed", "4", "--data", s(&bench), "-o", s(&run)];
    for cmd in ["train-source", "train-region-classifier", "adapt"] {
        let o = gram(&[&[cmd][..], &common[..]].concat());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = gram(&[&["evaluate", "--overlays"][..], &common[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gram(&[&["similarity"][..], &common[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));

    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 6);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "epoch", "l_seg", "l_mi", "l_dom", "l_total", "mutual_info"] {
        assert!(first.get(k).is_some(), "missing {k}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["slum"]["iou"].is_number());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("adaptation_report.json")).unwrap()).unwrap();
    assert_eq!(report["tiles"].as_array().unwrap().len(), 24);
    let overlays = fs::read_dir(run.join("overlays")).unwrap().count();
    assert_eq!(overlays, 24);
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 4") && resolved.contains("tiles_per_region = 24"));
    assert!(run.join("similarity.json").exists());
    assert!(run.join("source_epoch1.ckpt").exists());
}

#[test]
fn ablate_emits_six_named_rows_and_five_rho_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = gram(&["ablate", "--config", s(&cfg), "-o", s(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 11);
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        &names[..6],
        ["Full Component", "w/o L_dom", "w/o L_MI", "No Filtering", "Confidence Filtering", "Temporal Consistency"]
    );
    assert!(names[6..].iter().all(|n| n.starts_with("rho_s=")));
}
