use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use timemil::{load_checkpoint, parse_ts};

fn timemil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timemil")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"output_dim": 8, "bottleneck_dim": 4, "kernel_sizes": [3, 5, 9], "d_model": 8,
"num_heads": 2, "batch_size": 8, "epochs": 2, "mask_p_choices": [0.0, 0.5], "validation_fraction": 0.2}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("pulse.ts");
    let o = timemil(&["synth", "--n-pos", "6", "--n-neg", "6", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{o:?}");
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    Fixture {
        _dir: dir,
        root,
        data,
        config,
    }
}

#[test]
fn synth_writes_a_parseable_dataset_and_windows() {
    let f = fixture();
    let (meta, bags) = parse_ts(&f.data).unwrap();
    assert_eq!(meta.num_bags, 12);
    assert_eq!(bags.iter().filter(|b| b.label == 1).count(), 6);
    let expected = timemil::synthetic::to_bags(&timemil::synthetic::gen_dataset(6, 6, 3), "SyntheticPulse3");
    for (a, b) in bags.iter().zip(&expected) {
        assert_eq!(a.values, b.values);
        assert_eq!(a.label, b.label);
    }
    let windows = std::fs::read_to_string(f.root.join("pulse.ts.windows.csv")).unwrap();
    let lines: Vec<&str> = windows.lines().collect();
    assert_eq!(lines[0], "bag_id,start,end");
    assert_eq!(lines.len(), 7);
    let bad = timemil(&["synth", "--n-pos", "0", "--n-neg", "0", "--out", s(&f.root.join("x.ts"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_explain_round_trip() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        let o = timemil(&[
            "train", "--config", s(&f.config), "--data", s(&f.data), "--test", s(&f.data), "--out", s(&out), "--seed", "4",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    for file in ["metrics.csv", "validation.csv", "summary.json", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,loss,accuracy,macro_f1,macro_precision,macro_recall,auc_roc");
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["train_bags"], 10);
    assert_eq!(summary["validation_bags"], 2);
    assert_eq!(summary["seed"], 4);
    assert_eq!(summary["epochs"], 2);
    assert!(summary["test"]["accuracy"].is_number());

    let ckpt = a.join("checkpoint");
    let o = timemil(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data)]);
    assert!(o.status.success());
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    let (_, bags) = parse_ts(&f.data).unwrap();
    let m = timemil::trainer::evaluate(&model, &bags).unwrap();
    assert!(stdout(&o).contains(&format!("accuracy {:.4}", m.accuracy)), "{}", stdout(&o));
    assert!(stdout(&o).contains(&format!("auc_roc {:.4}", m.auc_roc)));

    let imp = f.root.join("imp.csv");
    let windows = f.root.join("pulse.ts.windows.csv");
    let o = timemil(&["explain", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&imp), "--windows", s(&windows)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("localization over 6 bags"));
    let text = std::fs::read_to_string(&imp).unwrap();
    assert_eq!(text.lines().next().unwrap(), "bag_id,t,x0,importance,predicted_class");
    assert_eq!(text.lines().count(), 1 + 12 * 120);
}

#[test]
fn errors_map_to_exit_codes() {
    let f = fixture();
    let missing = f.root.join("missing.ts");
    let o = timemil(&["train", "--data", s(&missing), "--out", s(&f.root.join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ts"));

    let o = timemil(&["eval", "--checkpoint", s(&f.root.join("nope")), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2));

    let broken = f.root.join("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("manifest.json"), "{}").unwrap();
    let o = timemil(&["eval", "--checkpoint", s(&broken), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2));

    let bad_cfg = f.root.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"d_model": 7, "num_heads": 2}"#).unwrap();
    let o = timemil(&["train", "--config", s(&bad_cfg), "--data", s(&f.data), "--out", s(&f.root.join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(timemil(&["entropy"]).status.code(), Some(2));
    assert_eq!(timemil(&["entropy", "--prop2", "--theorem3"]).status.code(), Some(2));
    assert_eq!(timemil(&["gradcheck", "--module", "nope"]).status.code(), Some(2));
    assert_eq!(timemil(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn entropy_commands() {
    let o = timemil(&["entropy", "--prop2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ordered: 0.700"));
    assert!(stdout(&o).contains("permuted: 1.159"));

    let o = timemil(&["entropy", "--theorem3", "--trials", "200"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("200 trials, 0 violations"));

    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("t.txt");
    std::fs::write(&text, "so long as men can breathe or eyes can see, so long lives this and this gives life to thee").unwrap();
    let out = dir.path().join("shuffle.csv");
    let o = timemil(&["entropy", "--text", s(&text), "--seeds", "3", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches("mean block entropy").count(), 5);
    let rows: Vec<String> = std::fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "rate,seed,block_entropy");
    assert_eq!(rows.len(), 16);
}

#[test]
fn gradcheck_command() {
    let o = timemil(&["gradcheck", "--module", "loss", "--seed", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("classifier_ovr_bce"));
    assert!(out.contains("0 failed"));
}
