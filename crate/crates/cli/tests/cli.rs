use std::path::Path;
use std::process::{Command, Output};

fn moka(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moka"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn out_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_variant_and_flag_exit_two() {
    assert_eq!(moka(&["train", "--variant", "nope"]).status.code(), Some(2));
    assert_eq!(moka(&["train", "--nope"]).status.code(), Some(2));
    assert_eq!(moka(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        moka(&["train", "--variant", "lora", "--cross-mode", "naive"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn misspelled_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"variant": "moka", "lamda": 0.5}"#).unwrap();
    let o = moka(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn train_eval_partial_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = moka(&[
        "train",
        "--variant",
        "moka",
        "--cross-mode",
        "none",
        "--steps",
        "30",
        "--seed",
        "3",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("moka_none/seed-3/model.moka");
    for f in ["config.json", "metrics.csv", "report.json"] {
        assert!(ckpt.with_file_name(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(ckpt.with_file_name("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,split,loss,accuracy,lr\n"));

    let e = moka(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(e.status.success());
    let eval: serde_json::Value = serde_json::from_str(stdout(&e).trim()).unwrap();

    let p = moka(&[
        "partial-infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--modalities",
        "text",
        "--out",
        &out,
    ]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let text = stdout(&p);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("subset,tag,accuracy,loss,note"));
    let full: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(full[1], "full");
    assert_eq!(full[2].parse::<f64>().unwrap(), eval["accuracy"].as_f64().unwrap());
    assert!(lines.next().unwrap().contains(",text-only,"));
    assert!(dir.path().join("partial.csv").exists());
}

#[test]
fn corrupt_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert!(moka(&[
        "train",
        "--variant",
        "lora",
        "--steps",
        "2",
        "--seed",
        "0",
        "--out",
        &out
    ])
    .status
    .success());
    let ckpt = dir.path().join("lora/seed-0/model.moka");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[20] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(
        moka(&["eval", "--checkpoint", ckpt.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn ablate_emits_four_methods_by_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = moka(&["ablate", "--steps", "3", "--out", &out_arg(dir.path())]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    for m in ["lora,", "multiple_lora,", "moka_none,", "moka_task_centric,"] {
        assert_eq!(
            rows.iter().filter(|r| r.starts_with(&format!("ablate,{m}"))).count(),
            3,
            "{m}"
        );
    }
    assert!(dir.path().join("ablate/results.csv").exists());
    assert!(dir.path().join("ablate/summary.json").exists());
}

#[test]
fn efficiency_lora_row_is_unit() {
    let dir = tempfile::tempdir().unwrap();
    let o = moka(&["efficiency", "--variant", "lora", "--out", &out_arg(dir.path())]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lora = text.lines().nth(1).unwrap();
    assert!(lora.starts_with("lora,1,1,"));
    assert!(lora.ends_with(",1.0"), "{lora}");
    assert!(text.lines().any(|l| l.starts_with("moka_task_centric,3,1,")));
}

#[test]
fn dump_attention_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let d = moka(&["dump-attention", "--out", &out]);
    assert!(d.status.success());
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("attention/attention.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 4);
    let g = moka(&["gradcheck", "--out", &out]);
    assert!(g.status.success());
    assert!(dir.path().join("gradcheck.csv").exists());
    assert_eq!(
        moka(&["gradcheck", "--threshold", "1e-30", "--out", &out])
            .status
            .code(),
        Some(1)
    );
}
