use std::fs;
use std::path::Path;

use c3net::config::RunConfig;
use c3net::pipeline::{self, read_metrics};
use c3net::Error;
use sha2::{Digest, Sha256};

fn tiny(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse(
        r#"
[data]
n_unimodal = 32
n_paired = 16
n_test = 12
[pretrain]
steps = 3
batch = 4
[align]
steps = 3
finetune_steps = 3
batch = 4
[diffusion]
steps = 8
train_steps = 3
batch = 4
[eval]
n_samples = 12
probe_steps = 3
"#,
    )
    .unwrap();
    cfg.run.out = out.display().to_string();
    cfg.run.seed = seed;
    cfg
}

fn metrics_digest(root: &Path) -> String {
    let mut h = Sha256::new();
    for stage in ["align", "eval"] {
        h.update(fs::read(root.join("metrics").join(format!("{stage}.csv"))).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn same_seed_same_metrics_and_stages_rerun_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    pipeline::run_all(&tiny(&a, 5)).unwrap();
    pipeline::run_all(&tiny(&b, 5)).unwrap();
    pipeline::run_all(&tiny(&c, 6)).unwrap();
    assert_eq!(metrics_digest(&a), metrics_digest(&b));
    assert_ne!(metrics_digest(&a), metrics_digest(&c));

    let before = fs::read(a.join("metrics/eval.csv")).unwrap();
    pipeline::eval(&tiny(&a, 5)).unwrap();
    assert_eq!(fs::read(a.join("metrics/eval.csv")).unwrap(), before);

    let rows = read_metrics(&a.join("metrics/eval.csv")).unwrap();
    assert!(rows.iter().all(|r| r.seed == 5 && r.n == 12));
    for label in [
        "image+text->audio",
        "image+text->audio[alpha=0]",
        "audio->image",
        "real->text",
    ] {
        assert!(rows.iter().any(|r| r.conditions == label), "missing {label}");
    }
    let seeds: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("seeds.json")).unwrap()).unwrap();
    assert_eq!(seeds["global"], 5);
    assert_eq!(seeds["stages"]["align"], c3net::rng::derive_seed(5, "align"));
}

#[test]
fn changed_architecture_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), 1);
    cfg.diffusion.outputs = vec![c3net::data::Modality::Text];
    pipeline::gen_data(&cfg).unwrap();
    pipeline::pretrain(&cfg).unwrap();
    pipeline::align(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let mut wider = cfg.clone();
    wider.diffusion.widths = vec![16, 24, 32];
    match pipeline::eval(&wider) {
        Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains("architecture"), "{msg}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let mut other_data = cfg.clone();
    other_data.data.n_test = 14;
    other_data.eval.n_samples = 14;
    assert!(pipeline::align(&other_data).is_err());
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 1);
    pipeline::gen_data(&cfg).unwrap();
    match pipeline::align(&cfg) {
        Err(Error::CheckpointNotFound(p)) => assert!(p.ends_with("checkpoints/pretrain-image.ckpt")),
        other => panic!("expected a missing checkpoint, got {other:?}"),
    }
    assert!(pipeline::report(&cfg).is_err());
}
