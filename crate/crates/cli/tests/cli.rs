use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
episodes = 2
steps = 30
batch_size = 16
updates_per_episode = 2
buffer_capacity = 1000

[eval]
routes = 3
steps = 40
friction = 0.5
"#;

fn snowlane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snowlane")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = snowlane(&["train", "--config", "/nonexistent/run.toml", "--variant", "ddpg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/run.toml"));
}

#[test]
fn variant_typo_lists_valid_names() {
    let out = snowlane(&["train", "--variant", "ar-dpg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["ddpg", "ar-ddpg", "ar-rdpg", "ar-cadpg"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nepisodez = 2\n").unwrap();
    let out = snowlane(&["train", "--config", path.to_str().unwrap(), "--variant", "ddpg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = dir.path().join("run");
    let out = snowlane(&[
        "train",
        "--config",
        &config,
        "--variant",
        "ar-ddpg",
        "--seed",
        "4",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["checkpoint.json", "curve.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_file_hash"));

    let report = dir.path().join("eval");
    let out =
        snowlane(&["eval", "--config", &config, "--run", run.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["friction"], 0.5);
    assert_eq!(json["routes"], 3);

    let out = snowlane(&[
        "eval",
        "--config",
        &config,
        "--run",
        run.to_str().unwrap(),
        "--friction",
        "0.4",
        "--routes",
        "2",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["friction"], 0.4);
    assert_eq!(fs::read_to_string(report.join("report.csv")).unwrap().lines().count(), 1 + 2);
}

#[test]
fn eval_of_missing_run_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = snowlane(&["eval", "--run", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_layer() {
    let out = snowlane(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report = String::from_utf8_lossy(&out.stdout).into_owned();
    for layer in ["dense", "conv", "rnn_step", "spatial_attention", "fusion"] {
        assert!(report.contains(layer), "{report}");
    }
    let out = snowlane(&["gradcheck", "--seeds", "2", "--inject-fault", "dense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dataset_render_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = snowlane(&["render-dataset", "--count", "10", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let mut names: Vec<String> =
        fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 10);
    assert_eq!(names.iter().filter(|n| n.starts_with("frame_") && n.ends_with(".json")).count(), 10);
    assert!(names.contains(&"manifest.json".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn dataset_into_unwritable_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = snowlane(&["render-dataset", "--count", "2", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn defaults_parse_back() {
    let out = snowlane(&["defaults"]);
    assert_eq!(out.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defaults.toml");
    fs::write(&path, &out.stdout).unwrap();
    let o = snowlane(&[
        "render-dataset",
        "--config",
        path.to_str().unwrap(),
        "--count",
        "2",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
