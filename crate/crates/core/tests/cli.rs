//! End-to-end tests of the `pda` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pda::cli::{parse_metrics_csv, METRICS_HEADER};
use pda::config::ExperimentConfig;
use pda::data::load_csv;

const MINIMAL: &str = r#"
name = "smoke"
test_size = 20

[run]
outer_steps = 3
particles = 16
batch_size = 8
eta0 = 0.01
inner0 = 2.0
risk_mode = "streaming"
risk_samples = 100

[run.model]
input_dim = 1

[data]
kind = "teacher"
"#;

fn pda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pda"))
        .args(args)
        .env("PDA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_metrics_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exp.toml", MINIMAL);
    let out = tmp.path().join("out");
    let res = pda(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    let text = fs::read_to_string(out.join("smoke/metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let rows = parse_metrics_csv(&text, "metrics.csv").unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.t).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
    assert!(rows
        .iter()
        .all(|r| r.test_risk.is_some() && r.objective_est.is_some()));
    assert!(rows
        .windows(2)
        .all(|w| w[0].cumulative_inner_steps <= w[1].cumulative_inner_steps));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("smoke/summary.json")).unwrap()).unwrap();
    let idx = summary["output_index"].as_u64().unwrap();
    assert!((2..=4).contains(&idx));
    assert_eq!(summary["final_t"].as_u64(), Some(4));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exp.toml", MINIMAL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(
        pda(&["run", "--config", &cfg, "--out", a.to_str().unwrap()])
            .status
            .success()
    );
    assert!(
        pda(&["run", "--config", &cfg, "--out", b.to_str().unwrap()])
            .status
            .success()
    );
    for file in ["metrics.csv", "summary.json"] {
        let x = fs::read(a.join("smoke").join(file)).unwrap();
        let y = fs::read(b.join("smoke").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between reruns");
    }
}

#[test]
fn replicates_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "test_size = 20",
        "test_size = 20\nseeds = [4, 9]\nwrite_snapshots = true",
    );
    let cfg = write(tmp.path(), "exp.toml", &text);
    let out = tmp.path().join("out");
    let res = pda(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    for seed in [4, 9] {
        let dir = out.join(format!("smoke/seed_{seed}"));
        assert!(dir.join("metrics.csv").exists());
        let snap = fs::read_to_string(dir.join("ensemble_t4.csv")).unwrap();
        assert_eq!(snap.lines().count(), 1 + 16);
    }
    let a = fs::read(out.join("smoke/seed_4/metrics.csv")).unwrap();
    let b = fs::read(out.join("smoke/seed_9/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn noisy_sgd_baseline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "test_size = 20",
        "test_size = 20\nalgorithm = \"noisy_sgd\"",
    );
    let cfg = write(tmp.path(), "exp.toml", &text);
    let out = tmp.path().join("out");
    let res = pda(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows = parse_metrics_csv(
        &fs::read_to_string(out.join("smoke/metrics.csv")).unwrap(),
        "m",
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn missing_required_field_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("name = \"smoke\"", "");
    let cfg = write(tmp.path(), "exp.toml", &text);
    let res = pda(&[
        "run",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("name"));
}

#[test]
fn unknown_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("batch_size = 8", "batch_size = 8\nbatchsize = 3");
    let cfg = write(tmp.path(), "exp.toml", &text);
    let res = pda(&["run", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("batchsize"));
}

#[test]
fn divergent_run_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("eta0 = 0.01", "eta0 = 1e12");
    let cfg = write(tmp.path(), "exp.toml", &text);
    let res = pda(&[
        "run",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn csv_dataset_config_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("train.csv");
    let res = pda(&[
        "gen-data",
        "--kind",
        "circles",
        "--n",
        "60",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert!(res.status.success());
    let text = r#"
name = "csv"
test_size = 10
[run]
outer_steps = 2
particles = 12
batch_size = 5
loss = "logistic"
[run.model]
input_dim = 2
[data]
kind = "csv"
path = "train.csv"
"#;
    let cfg = write(tmp.path(), "exp.toml", text);
    let out = tmp.path().join("out");
    let res = pda(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows = parse_metrics_csv(
        &fs::read_to_string(out.join("csv/metrics.csv")).unwrap(),
        "m",
    )
    .unwrap();
    assert!(rows.iter().all(|r| r.test_zero_one.is_some()));
}

#[test]
fn gen_data_teacher_csv_shape_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    let args = |p: &Path| {
        vec![
            "gen-data".to_owned(),
            "--kind".into(),
            "teacher".into(),
            "--n".into(),
            "50".into(),
            "--d".into(),
            "4".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            p.to_str().unwrap().into(),
        ]
    };
    let run = |p: &Path| {
        let owned = args(p);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        pda(&refs)
    };
    assert!(run(&a).status.success());
    assert!(run(&b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x1,x2,x3,x4,y");
    let ds = load_csv(&a).unwrap();
    assert_eq!((ds.len(), ds.dim()), (50, 4));
    assert!(ds.ys.iter().all(|y| y.abs() <= 1.0));
}

#[test]
fn gen_data_circles_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.csv");
    let res = pda(&[
        "gen-data",
        "--kind",
        "circles",
        "--n",
        "40",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let ds = load_csv(&path).unwrap();
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.ys.iter().filter(|&&y| y == 1.0).count(), 20);
    assert_eq!(ds.ys.iter().filter(|&&y| y == -1.0).count(), 20);
}

#[test]
fn gen_data_invalid_kind_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("x.csv");
    let res = pda(&[
        "gen-data",
        "--kind",
        "spirals",
        "--n",
        "10",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let res = pda(&[
        "gen-data",
        "--kind",
        "teacher",
        "--teacher-kind",
        "quadratic",
        "--n",
        "10",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!path.exists());
}

#[test]
fn rate_fit_recovers_synthetic_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for t in 1..=100 {
        let obj = 0.5 + 3.0 / t as f64;
        text.push_str(&format!("{t},{},0.5,,,1.0,0.0,{obj:.17e},\n", 10 * t));
    }
    let path = write(tmp.path(), "metrics.csv", &text);
    let res = pda(&["rate-fit", "--metrics", &path, "--floor", "0.5"]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let slope: f64 = String::from_utf8_lossy(&res.stdout).trim().parse().unwrap();
    assert!((slope + 1.0).abs() < 1e-6, "slope {slope}");

    let res = pda(&["rate-fit", "--metrics", &path]);
    assert!(res.status.success());
    let slope: f64 = String::from_utf8_lossy(&res.stdout).trim().parse().unwrap();
    assert!(slope < 0.0);
}

#[test]
fn rate_fit_on_malformed_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write(tmp.path(), "metrics.csv", "t,objective\n1,abc\n");
    let res = pda(&["rate-fit", "--metrics", &path]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_4() {
    let res = pda(&["run", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::from_path(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate()
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 4);
}
