use std::path::Path;
use std::process::{Command, Output};

fn tmclass(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmclass"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
[paths]
data_dir = "data"
output_dir = "run"

[estimator]
dim = 16
num_condition_layers = 2
trunk = "mlp-baseline"
trunk_depth = 1
trunk_width = 32
time_embed_dim = 8

[train]
batch_size = 16
total_steps = 40
eval_every = 20

[sampler]
num_steps = 5
sweep = [1, 5]

[data.synthetic]
num_classes = 3
dim = 16
layers = 2
samples_per_class = 20
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn full_workflow() {
    let dir = workspace();
    let d = dir.path();
    let out = ok(&tmclass(d, &["gen-data", "-c", "exp.toml"]));
    assert!(out.contains("train.gsf: 42 records"), "{out}");
    assert!(d.join("data/effective_config.toml").exists());

    let out = ok(&tmclass(d, &["inspect-dataset", "data/test.gsf"]));
    assert!(
        out.contains("records 9") && out.contains("dim 16") && out.contains("class2\t3"),
        "{out}"
    );

    let out = ok(&tmclass(d, &["train", "-c", "exp.toml"]));
    assert!(out.contains("step 40"), "{out}");
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 40);
    assert!(lines[19]["val_accuracy"].is_number());
    assert!(lines[0].get("val_accuracy").is_none());
    assert!(d.join("run/model.gsck").exists());
    assert!(d.join("run/effective_config.toml").exists());

    let out = ok(&tmclass(d, &["eval", "-c", "exp.toml"]));
    assert!(out.contains("samples 9"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/eval_test.json")).unwrap())
            .unwrap();
    assert_eq!(report["count"], 9);
    assert!(std::fs::read_to_string(d.join("run/confusion_test.csv"))
        .unwrap()
        .starts_with("truth,class0,class1,class2\n"));

    ok(&tmclass(
        d,
        &["sweep-steps", "-c", "exp.toml", "--split", "validation"],
    ));
    let sweep = std::fs::read_to_string(d.join("run/sweep_validation.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("num_steps,accuracy\n1,"));

    let out = ok(&tmclass(
        d,
        &[
            "dump-trajectory",
            "-c",
            "exp.toml",
            "--record",
            "2",
            "--set",
            "sampler.num_steps=94",
        ],
    ));
    assert_eq!(out.matches("cosine to x0").count(), 4, "{out}");
    let traj = std::fs::read_to_string(d.join("run/trajectory_test_2/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 95);
    let panels = std::fs::read_to_string(d.join("run/trajectory_test_2/panels.csv")).unwrap();
    assert_eq!(panels.lines().count(), 5);
    assert!(panels.lines().next().unwrap().starts_with("0.750000000,"));

    // resuming with a larger step budget appends to the metrics log
    ok(&tmclass(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--resume",
            "--set",
            "train.total_steps=50",
        ],
    ));
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 50);
}

#[test]
fn runs_are_reproducible() {
    let dir = workspace();
    let d = dir.path();
    ok(&tmclass(d, &["gen-data", "-c", "exp.toml"]));
    for name in ["a", "b"] {
        let set = format!("paths.output_dir={name}");
        ok(&tmclass(d, &["train", "-c", "exp.toml", "--set", &set]));
        ok(&tmclass(d, &["eval", "-c", "exp.toml", "--set", &set]));
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/model.gsck"), read("b/model.gsck"));
    assert_eq!(read("a/confusion_test.csv"), read("b/confusion_test.csv"));
    let strip_wall = |p: &str| -> Vec<serde_json::Value> {
        String::from_utf8(read(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip_wall("a/metrics.jsonl"), strip_wall("b/metrics.jsonl"));
}

#[test]
fn encode_taxonomy_prints_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tmclass(
        dir.path(),
        &[
            "encode-taxonomy",
            "--labels",
            "neutral,happy,sad",
            "--dim",
            "16",
            "--codebook",
            "cb.csv",
        ],
    ));
    let manifest: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(manifest["dim"], 16);
    assert_eq!(manifest["labels"][1], "happy");
    assert_eq!(manifest["checksums"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("cb.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "happy");
    assert_eq!(row.len(), 17);
    // sin(2π·4/16·2) = sin(π) ≈ 0
    assert!(row[1 + 4].parse::<f64>().unwrap().abs() < 1e-9);
    assert_eq!(row[1 + 2], "1.00000000");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = workspace();
    let d = dir.path();

    let out = tmclass(
        d,
        &["train", "-c", "exp.toml", "--set", "train.total_steps=0"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = tmclass(d, &["eval", "-c", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));

    // no data generated yet
    let out = tmclass(d, &["train", "-c", "exp.toml"]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(d.join("junk.gsf"), b"GSF1\x02\0\0\0").unwrap();
    let out = tmclass(d, &["inspect-dataset", "junk.gsf"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset 4"));

    ok(&tmclass(d, &["gen-data", "-c", "exp.toml"]));
    let out = tmclass(
        d,
        &[
            "train",
            "-c",
            "exp.toml",
            "--set",
            "train.learning_rate=1e38",
            "--set",
            "train.clip_norm=0",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = tmclass(d, &["encode-taxonomy", "--labels", "a,b,c,d", "--dim", "8"]);
    assert_eq!(out.status.code(), Some(1));
}
