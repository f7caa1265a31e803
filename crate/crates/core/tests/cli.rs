use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn edgepop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgepop"))
        .args(args)
        .env_remove("EDGEPOP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, algorithm: &str, epochs: usize, extra: &str) -> String {
    let text = format!(
        r#"
algorithm = "{algorithm}"
k = 50
epochs = {epochs}
seed = 7
{extra}
[arch]
name = "mlp"
width_multiplier = "1/8"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.05
momentum = 0.9
weight_decay = 1e-4
[dataset]
name = "blobs"
batch_size = 32
classes = 4
dim = 16
per_class = 50
spread = 2.0
"#
    );
    let p = dir.join(format!("{algorithm}.toml"));
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn metrics_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "edge_popup", 3, "");
    let out = dir.path().join("run");
    let o = edgepop(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let rows = metrics_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 3);
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("epoch,train_loss"));
    assert!(out.join("config.toml").exists());

    let e = edgepop(&["eval", out.join("checkpoint.bin").to_str().unwrap()]);
    assert!(e.status.success());
    let text = stdout(&e);
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    let last_acc = rows.last().unwrap()[4];
    assert!((acc - last_acc).abs() < 1e-4, "{acc} vs {last_acc}");
    assert!(text.contains("k 0.5"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("edges ")));
}

#[test]
fn same_seed_same_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zhou", 2, "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(edgepop(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let c = dir.path().join("c");
    assert!(edgepop(&["train", "--config", &cfg, "--seed", "8", "--out", c.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn dense_sgd_loss_mostly_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dense_sgd", 5, "");
    let out = dir.path().join("dense");
    assert!(edgepop(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let rows = metrics_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 5);
    let mut prev = f64::INFINITY;
    let mut non_increasing = 0;
    for r in &rows {
        non_increasing += usize::from(r[1] <= prev);
        prev = r[1];
    }
    assert!(non_increasing >= 4, "{rows:?}");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "edge_popup", 1, "colour = 3");
    let o = edgepop(&["train", "--config", &bad, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists(), "no output before validation");

    let o = edgepop(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = edgepop(&["verify", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), "edge_popup", 1, "");
    let o = edgepop(&["sweep", "--config", &cfg, "--axis", "depth", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "edge_popup", 1, "");
    let out = dir.path().join("run");
    assert!(edgepop(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let ck = out.join("checkpoint.bin");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = edgepop(&["eval", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
}

#[test]
fn diverging_run_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dense_sgd", 2, "").replace(".toml", "");
    let text = fs::read_to_string(format!("{cfg}.toml")).unwrap().replace("lr = 0.05", "lr = 1e30");
    let path = dir.path().join("boom.toml");
    fs::write(&path, text).unwrap();
    let o = edgepop(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lr") && err.contains("step"), "{err}");
}

#[test]
fn verify_suites_report_and_exit_zero() {
    for suite in ["topk", "gradients", "variance"] {
        let o = edgepop(&["verify", suite]);
        assert!(o.status.success(), "{suite}: {}", stdout(&o));
        assert!(stdout(&o).contains("PASS"));
    }
}

#[test]
fn sweep_writes_csv_and_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "edge_popup", 1, "");
    let run = |workers: &str, out: &str| {
        let o = edgepop(&[
            "sweep", "--config", &cfg, "--axis", "k", "--values", "0.3,0.7", "--seeds", "2", "--workers", workers,
            "--out", dir.path().join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join(out).join("sweep.csv")).unwrap()
    };
    let a = run("1", "w1");
    let b = run("2", "w2");
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    assert!(a.starts_with("axis,value,k,width,edges,runs,test_acc_mean,test_acc_std"));
}

#[test]
fn fixed_params_sweep_reports_equal_edges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "edge_popup", 1, "");
    let o = edgepop(&[
        "sweep", "--config", &cfg, "--axis", "fixed_params", "--values", "1/8,1/4,1/2,1/16",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let edges: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(edges.len(), 3, "{text}");
    assert!(edges.iter().all(|e| *e == edges[0]), "{text}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped fixed_params=1/16"));
}
