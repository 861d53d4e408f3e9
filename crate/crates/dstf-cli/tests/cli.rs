//! Black-box CLI checks on synthetic-data configs: artifact sets, resume
//! and redirect flags, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
seed = 5
model = "cnn_toy"

[data]
source = "synthetic"
n_train = 96
n_test = 48
classes = 3

[regularizer]
kind = "tl1"
alpha = 1e-4
beta = 1e-2

[prune]
target_rate = 0.5
induce_epochs = 1
finetune_epochs = 1

[stage1]
epochs = 2
batch_size = 32
lr = 0.05

[stage2]
batch_size = 32

[stage3]
epochs = 1
batch_size = 32

[compare]
epochs = 1

[grid]
alphas = [1e-4, 1e-3]
betas = [1e-2]
epochs = 1
accuracy_floor = 0.05
"#;

fn dstf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dstf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_toy(dir: &Path) -> String {
    let path = dir.join("toy.toml");
    std::fs::write(&path, TOY).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn dual_writes_the_full_artifact_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy(tmp.path());
    let out = tmp.path().join("run");
    let res = dstf(&["dual", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "metrics.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,top1,act_sparsity,weight_sparsity,reg_value,loss"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["stage"], "dual");
}

#[test]
fn compare_and_grid_and_report_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy(tmp.path());

    let cmp_dir = tmp.path().join("cmp");
    let res = dstf(&["compare-regularizers", &cfg, "--out", cmp_dir.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(cmp_dir.join("compare.csv")).unwrap();
    assert!(table.starts_with("variant,top1,act_sparsity,euclidean,cosine"));
    for v in ["baseline", "l1", "hoyer_sq", "tl1"] {
        assert!(table.contains(&format!("\n{v},")), "missing row {v}");
    }

    let grid_dir = tmp.path().join("grid");
    let from = cmp_dir.join("stage1.ckpt");
    let res = dstf(&[
        "grid-search",
        &cfg,
        "--from",
        from.to_str().unwrap(),
        "--out",
        grid_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let grid = std::fs::read_to_string(grid_dir.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3, "two cells plus header");
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(grid_dir.join("grid_selected.json")).unwrap())
            .unwrap();
    assert_eq!(sel["feasible"], true);

    let rep_dir = tmp.path().join("rep");
    let res = dstf(&[
        "report",
        &cfg,
        from.to_str().unwrap(),
        "--out",
        rep_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["act_sparsity.csv", "weight_sparsity.csv", "flops.csv", "report.json"] {
        assert!(rep_dir.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "definitely_not_a_key = 1\n").unwrap();
    let res = dstf(&["train", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    // tl1 without beta is a config error even with valid syntax.
    std::fs::write(&bad, "[regularizer]\nkind = \"tl1\"\nalpha = 1e-8\n").unwrap();
    let res = dstf(&["dual", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("nodata.toml");
    std::fs::write(
        &cfg,
        format!(
            "model = \"lenet5\"\n[data]\nsource = \"mnist\"\nmnist_dir = \"{}\"\n",
            tmp.path().join("absent").display()
        ),
    )
    .unwrap();
    let res = dstf(&["train", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn stage_precondition_errors_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy(tmp.path());
    let out = tmp.path().join("run");
    assert!(dstf(&["dual", &cfg, "--out", out.to_str().unwrap()]).status.success());

    // actsparse from a finished dual checkpoint: wrong stage.
    let res = dstf(&[
        "actsparse",
        &cfg,
        "--from",
        out.join("stage3.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn resume_from_mismatched_config_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy(tmp.path());
    let out = tmp.path().join("run");
    assert!(dstf(&["train", &cfg, "--out", out.to_str().unwrap()]).status.success());

    let other = tmp.path().join("other.toml");
    std::fs::write(&other, TOY.replace("seed = 5", "seed = 6")).unwrap();
    let res = dstf(&[
        "train",
        other.to_str().unwrap(),
        "--resume",
        out.join("stage1.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}
