//! End-to-end runs of the `ge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ge")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let text = format!(
        r#"
name = "{name}"
seed = 2
output_dir = "{out}"
placement = "theta:global:all"
{extra}
[arch]
family = "cifar-resnet-8"
width_divisor = 4

[data]
synthetic = {{ train = 64, test = 20 }}

[train]
batch_size = 16
epochs = 2
schedule = {{ kind = "fixed-step", lr = 0.05 }}
"#,
        out = dir.display()
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn count_prints_totals() {
    let o = ge(&["count", "--arch", "resnet50"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("params: 25.56M"), "{text}");
    assert!(text.contains("GFLOPs: 3.86"), "{text}");

    let o = ge(&[
        "count",
        "--arch",
        "cifar-resnet-110",
        "--ge",
        "theta-minus:e4:stage3",
        "--json",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("\"placement\": \"theta-minus:e4:stage3\""), "{text}");
    assert!(text.contains("\"totals\""), "{text}");
}

#[test]
fn count_options_change_the_report() {
    let full = stdout(&ge(&["count", "--arch", "wrn-16-8"]));
    let half = stdout(&ge(&["count", "--arch", "wrn-16-8", "--width-divisor", "2"]));
    assert_ne!(full, half);
    let small = stdout(&ge(&["count", "--arch", "resnet50", "--input-size", "112"]));
    assert!(small.contains("@3x112x112"), "{small}");
}

#[test]
fn bad_arguments_exit_with_two() {
    for args in [
        &["count", "--arch", "resnet51"][..],
        &["count", "--arch", "resnet50", "--ge", "se:e2:all"],
        &["count", "--arch", "resnet50", "--ge", "theta:e3:all"],
        &["count", "--arch", "resnet50", "--ge", "theta:global:stage9"],
        &["count", "--arch", "resnet50", "--width-divisor", "7"],
        &["count"],
        &["train", "/nonexistent/run.toml"],
    ] {
        let o = ge(args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn gradcheck_passes_for_every_unit() {
    let o = ge(&["gradcheck", "--model", "all"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = ge(&["gradcheck", "--op", "no-such-op"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_analyse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny", "");
    let o = ge(&["train", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("tiny");

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,train_top1,val_top1,val_top5");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert!(run.join("checkpoints/last.gekt").exists());
    assert!(run.join("checkpoints/epoch-0002.gekt").exists());
    assert!(run.join("config.toml").exists());

    let o = ge(&["eval", &cfg]);
    assert!(o.status.success());
    let eval = fs::read_to_string(run.join("analysis/eval.csv")).unwrap();
    assert_eq!(stdout(&o), eval);
    let top1: f64 = eval.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    let last_val: f64 = lines[2].split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(top1, last_val);

    let o = ge(&["selectivity", &cfg, "--layer", "conv4-1-relu"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sel = fs::read_to_string(run.join("analysis/selectivity-conv4-1-relu.csv")).unwrap();
    assert!(sel.lines().count() > 1);

    let o = ge(&["prune", &cfg, "--block", "conv3-1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let prune = fs::read_to_string(run.join("analysis/prune-conv3-1.csv")).unwrap();
    assert_eq!(prune.lines().next(), Some("ratio,order,top1"));
    assert_eq!(prune.lines().count(), 1 + 22);

    let o = ge(&["prune", &cfg, "--block", "conv9-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ge(&["selectivity", &cfg, "--layer", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a", "");
    assert!(ge(&["train", &a]).status.success());
    let ck = dir.path().join("a/checkpoints/last.gekt");
    let b = write_config(dir.path(), "b", "");
    fs::write(&b, fs::read_to_string(&b).unwrap().replace("seed = 2", "seed = 3")).unwrap();
    let o = ge(&["train", &b, "--resume", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", "colour = \"blue\"");
    let o = ge(&["train", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    assert!(!dir.path().join("bad").exists());
}
