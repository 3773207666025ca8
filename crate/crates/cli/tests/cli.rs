use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn c3net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3net"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("c.toml");
    let out = dir.join("run");
    fs::write(
        &path,
        format!(
            r#"
[run]
seed = 3
out = "{}"
[data]
n_unimodal = 24
n_paired = 16
n_test = 8
[pretrain]
steps = 2
batch = 4
[align]
steps = 2
finetune_steps = 2
batch = 4
[diffusion]
steps = 6
train_steps = 0
batch = 4
outputs = ["audio"]
[eval]
n_samples = 8
probe_steps = 2
{extra}
"#,
            out.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = c3net(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = c3net(&["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_condition_list_is_usage_error() {
    let o = c3net(&["sample", "--conditions", "image,smell"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_alpha_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = c3net(&["gen-data", "--config", cfg.to_str().unwrap(), "--alpha", "-1"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config:"), "{err}");
}

#[test]
fn unknown_key_names_the_nearest_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "[control]\nalpah = 0.2\n");
    let o = c3net(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("control.alpha"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(c3net(&["gen-data", "--config", cfg]).status.code(), Some(0));
    let o = c3net(&["eval", "--config", cfg]);
    assert_eq!(o.status.code(), Some(3));
    let want = format!(
        "error: checkpoint not found: {}",
        tmp.path().join("run/checkpoints/encoders.ckpt").display()
    );
    assert_eq!(stderr(&o).trim_end(), want);
}

fn payloads(dir: &Path) -> Vec<Vec<u8>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn stages_chain_and_fresh_control_equals_base_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    for stage in ["gen-data", "pretrain", "align", "train"] {
        let o = c3net(&[stage, "--config", cfg]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let run = tmp.path().join("run");
    for f in [
        "config/train.toml",
        "seeds.json",
        "checkpoints/encoders.ckpt",
        "checkpoints/diffusion-audio.ckpt",
        "logs/align.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let samples = run.join("samples/audio/image+text");
    assert_eq!(
        c3net(&["sample", "--config", cfg, "--conditions", "image,text"])
            .status
            .code(),
        Some(0)
    );
    let with_control = payloads(&samples);
    assert_eq!(with_control.len(), 8);
    let manifest = fs::read_to_string(samples.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    assert!(manifest.contains(r#""conditions":["image","text"]"#));
    assert_eq!(
        c3net(&["sample", "--config", cfg, "--conditions", "text,image", "--alpha", "0"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(payloads(&samples), with_control);

    let o = c3net(&["eval", "--config", cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics/eval.csv")).unwrap();
    assert!(metrics.starts_with("metric,conditions,value,seed,n\n"));
    assert!(metrics.contains("image+text->audio[alpha=0]"));
    assert_eq!(c3net(&["demo-contradict", "--config", cfg]).status.code(), Some(0));
    assert_eq!(c3net(&["report", "--config", cfg]).status.code(), Some(0));
    assert!(run.join("report/probe_accuracy.svg").exists());
    assert!(run.join("report/summary.md").exists());
}
