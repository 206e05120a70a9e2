use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
mode = "uda"

[data.toy]
height = 40
width = 40
source_count = 6
target_train_count = 6
target_val_count = 3

[model.encoder]
patch_size = 8
embed_dim = 16
depth = 2
num_heads = 2

[model.adapter]
prior_channels = [4, 6, 6, 8]

[model.decoder]
channel_schedule = [16, 12, 8, 4]

[model.projector]
teacher_dim = 12

[fd.reference]
patch_size = 8
embed_dim = 12
depth = 1
num_heads = 2

[schedule]
total_iters = 6
warmup_iters = 2
batch_size = 2

[augment]
crop_size = 32

[eval]
window = 32
stride = 24

[run]
log_every = 0
checkpoint_every = 3
"#;

fn cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uda-forge"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("UDA_FORGE_DEVICE");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn unknown_key_exits_with_config_code() {
    let out = cli(&["train", "--set", "toggles.hrda=true"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("toggles.hrda"));
}

#[test]
fn unsupported_device_is_a_config_error() {
    let out = cli(&["stats"], &[("UDA_FORGE_DEVICE", "cuda:0")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = cli(&["train", "--config", &cfg, "--seed", "2", "--out", &s(&run)], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mIoU"));
    let dump = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(dump.contains("seed = 2"));
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(),
        6
    );

    let ckpt = run.join("checkpoints").join("final.safetensors");
    let out = cli(&["eval", "--config", &cfg, "--checkpoint", &s(&ckpt)], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));

    let resumed = dir.path().join("resumed");
    let mid = run.join("checkpoints").join("step_000003.safetensors");
    let out = cli(
        &[
            "train",
            "--config",
            &cfg,
            "--seed",
            "2",
            "--out",
            &s(&resumed),
            "--resume",
            &s(&mid),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(resumed.join("report_target_val.json")).unwrap(),
        fs::read_to_string(run.join("report_target_val.json")).unwrap()
    );
}

#[test]
fn toygen_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let toy = dir.path().join("toy");
    let out = cli(&["toygen", "--config", &cfg, "--out", &s(&toy)], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for split in ["source", "target_train", "target_val"] {
        assert!(toy.join(split).join("manifest.json").is_file(), "{split}");
    }
    let out = cli(&["stats", "--config", &cfg], &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().next().unwrap().starts_with("class"));
    assert_eq!(text.lines().count(), 7);

    // the written datasets train in directory mode; a missing image is a data error
    let names = r#"data.class_names=["ground","sky","disc","block","pole","wedge"]"#;
    let src = format!("data.source=\"{}\"", s(&toy.join("source")));
    let tgt = format!("data.target=\"{}\"", s(&toy.join("target_train")));
    let val = format!("data.target_val=\"{}\"", s(&toy.join("target_val")));
    let run = dir.path().join("dirs");
    let args = |out: &str| {
        vec![
            "train".to_string(),
            "--config".into(),
            cfg.clone(),
            "--set".into(),
            names.into(),
            "--set".into(),
            src.clone(),
            "--set".into(),
            tgt.clone(),
            "--set".into(),
            val.clone(),
            "--out".into(),
            out.into(),
        ]
    };
    let a = args(&s(&run));
    let out = cli(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::remove_file(toy.join("source").join("images").join("src_00001.png")).unwrap();
    let b = args(&s(&dir.path().join("broken")));
    let out = cli(&b.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_run_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("nan");
    let out = cli(
        &[
            "train",
            "--config",
            &cfg,
            "--set",
            "schedule.base_lr_decoder=1e30",
            "--set",
            "schedule.base_lr_encoder=1e30",
            "--out",
            &s(&run),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(run.join("run.log")).unwrap().contains("aborted"));
}

#[test]
fn stability_and_ablation_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cli(
        &[
            "stability",
            "--config",
            &cfg,
            "--set",
            "mode=\"source_only\"",
            "--seeds",
            "3,3",
            "--out",
            &s(&dir.path().join("st")),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("std dev 0.00"));
    let out = cli(
        &[
            "ablate",
            "--config",
            &cfg,
            "--toggles",
            "dacs",
            "--out",
            &s(&dir.path().join("ab")),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("(none)") && text.contains("dacs"));
    let out = cli(&["ablate", "--config", &cfg, "--toggles", "hrda"], &[]);
    assert_eq!(out.status.code(), Some(2));
}
