use std::path::Path;
use std::process::{Command, Output};

fn gsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsa"))
        .args(args)
        .output()
        .expect("run gsa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_resnet50_rounds_to_table_units() {
    let o = gsa(&["count", "--preset", "resnet50"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("25.6M"), "{text}");
    assert!(text.contains("8.2G"), "{text}");
}

#[test]
fn count_json_is_parseable() {
    let o = gsa(&["count", "--preset", "gsa-resnet50", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["row"]["structure"], "GSA-ResNet-50");
}

#[test]
fn describe_resnet50_has_53_convolutions() {
    let o = gsa(&["describe", "--preset", "resnet50"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let convs = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["kind"] == "conv")
        .count();
    assert_eq!(convs, 53);
}

#[test]
fn unknown_preset_is_usage_error() {
    let o = gsa(&["count", "--preset", "resnet51"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gsa-resnet50"));
}

#[test]
fn malformed_spec_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"depth\": 50,\n  \"heads\": \"eight\"\n}\n").unwrap();
    let o = gsa(&["describe", "--spec", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_spec_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    std::fs::write(&path, r#"{"depth": 50, "heads": 0}"#).unwrap();
    let o = gsa(&["count", "--spec", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_flag_exits_2() {
    assert_eq!(
        gsa(&["verify", "--suite", "everything"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_output_is_reproducible() {
    let args = ["verify", "--suite", "all", "--seed", "3", "--cases", "2"];
    let a = gsa(&args);
    let b = gsa(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    for line in stdout(&a).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn verify_is_independent_of_thread_count() {
    let a = gsa(&[
        "--threads",
        "1",
        "verify",
        "--suite",
        "positional",
        "--cases",
        "4",
    ]);
    let b = gsa(&[
        "--threads",
        "3",
        "verify",
        "--suite",
        "positional",
        "--cases",
        "4",
    ]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bench_content_analytic_slope_is_linear() {
    let o = gsa(&[
        "bench",
        "--kernel",
        "content",
        "--sizes",
        "8,16,32,64",
        "--reps",
        "1",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["analytic_slope"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["threads"], 1);
}

#[test]
fn bench_rejects_narrow_size_range() {
    let o = gsa(&[
        "bench", "--kernel", "naive", "--sizes", "8,9", "--reps", "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_toy_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let o = gsa(&[
        "train-toy",
        "--steps",
        "5",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let first: f64 = lines
        .next()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((first - 10f64.ln()).abs() < 1e-9);
}

#[test]
fn build_then_inspect_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let o = gsa(&[
        "build",
        "--preset",
        "table5:0001",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("spec.json").exists());
    let fc = find(&out, "fc.weight").expect("fc.weight tensor");
    let info = stdout(&gsa(&["tensor", "info", fc.to_str().unwrap()]));
    assert!(info.contains("[2048, 1000]"), "{info}");
    let cat = stdout(&gsa(&[
        "tensor",
        "cat",
        fc.to_str().unwrap(),
        "--limit",
        "4",
    ]));
    let row: Vec<f64> = cat.lines().nth(1).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 4);
}

fn find(dir: &Path, stem: &str) -> Option<std::path::PathBuf> {
    std::fs::read_dir(dir)
        .ok()?
        .flatten()
        .map(|e| e.path())
        .find(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(stem))
        })
}
