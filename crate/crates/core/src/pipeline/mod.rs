//! File-based pipeline stages. Each stage reads its inputs from and writes its
//! outputs to one run directory, so every stage can be rerun on its own:
//!
//! ```text
//! <out>/config/<stage>.toml        effective configuration of the last run of a stage
//! <out>/seeds.json                 global seed and every derived stage seed
//! <out>/data/                      dataset (see `data::io`)
//! <out>/checkpoints/pretrain-<m>.ckpt, encoders.ckpt, diffusion-<m>.ckpt
//! <out>/logs/<stage>.csv           step, loss, lr, wall_time
//! <out>/metrics/<stage>.csv        metric, conditions, value, seed, n
//! <out>/samples/<m>/<conditions>/  generated samples with a manifest
//! <out>/report/                    SVG charts and summary tables
//! ```
//!
//! Stage seeds are `derive_seed(run.seed, name)` with the names listed in
//! `seeds.json`; no stage shares a random stream with another.

pub mod recipe;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, RngState};
use crate::config::RunConfig;
use crate::control::ControlConfig;
use crate::data::{build_dataset, export_dataset, import_dataset, write_samples, Dataset, Modality, SampleRecord};
use crate::encoders::{AlignmentEncoder, EncoderSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{ControlNet32, UNet32};
use recipe::{Generation, GenerationScores};

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.csv"))
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{stage}.csv"))
    }

    pub fn samples(&self, output: Modality, conditions: &str) -> PathBuf {
        self.root.join("samples").join(output.as_str()).join(conditions)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// One row of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub conditions: String,
    pub value: f64,
    pub seed: u64,
    pub n: usize,
}

#[derive(Serialize)]
struct LogRow {
    step: usize,
    loss: f64,
    lr: f64,
    wall_time: f64,
}

/// Every derived seed of a run, by stage name.
pub fn stage_seeds(cfg: &RunConfig) -> Vec<(String, u64)> {
    let mut names = vec!["data".to_string()];
    names.extend(Modality::ALL.iter().map(|m| format!("pretrain.{m}")));
    names.push("align".into());
    for m in Modality::ALL {
        names.push(format!("train.{m}"));
        names.push(format!("probe.{m}"));
        names.push(format!("eval.{m}"));
        names.push(format!("sample.{m}"));
        names.push(format!("demo.{m}"));
    }
    names
        .into_iter()
        .map(|n| {
            let s = derive_seed(cfg.run.seed, &n);
            (n, s)
        })
        .collect()
}

fn seed_of(cfg: &RunConfig, stage: &str) -> u64 {
    derive_seed(cfg.run.seed, stage)
}

/// Validates `cfg`, creates the run directory and echoes the effective
/// configuration and seeds into it.
pub fn prepare(cfg: &RunConfig, stage: &str) -> Result<RunDir> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run.out);
    for sub in ["config", "checkpoints", "logs", "metrics"] {
        fs::create_dir_all(dir.root.join(sub))?;
    }
    fs::write(dir.root.join("config").join(format!("{stage}.toml")), cfg.emit())?;
    let seeds: serde_json::Map<String, serde_json::Value> =
        stage_seeds(cfg).into_iter().map(|(k, v)| (k, json!(v))).collect();
    let doc = json!({ "global": cfg.run.seed, "derivation": "splitmix64(global ^ fnv1a64(stage))", "stages": seeds });
    fs::write(dir.root.join("seeds.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(dir)
}

/// Appends `(step, loss, lr, wall_time)` rows to a CSV log.
struct Logger {
    writer: csv::Writer<fs::File>,
    start: Instant,
    stage: String,
}

impl Logger {
    fn create(path: &Path, stage: &str) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path).map_err(csv_err)?,
            start: Instant::now(),
            stage: stage.to_string(),
        })
    }

    fn record(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        let wall_time = self.start.elapsed().as_secs_f64();
        if step.is_multiple_of(100) {
            log::info!("{} step {step} loss {loss:.5}", self.stage);
        }
        self.writer
            .serialize(LogRow {
                step,
                loss,
                lr,
                wall_time,
            })
            .map_err(csv_err)
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        k => Error::invalid(format!("csv: {k:?}")),
    }
}

/// Runs `f` with a logging callback that writes to `path`; the first write
/// error aborts nothing but is returned afterwards.
fn with_log<R>(path: &Path, stage: &str, f: impl FnOnce(recipe::LogFn) -> Result<R>) -> Result<R> {
    let mut logger = Logger::create(path, stage)?;
    let mut failure = None;
    let mut cb = |step: usize, loss: f64, lr: f64| {
        if failure.is_none() {
            failure = logger.record(step, loss, lr).err();
        }
    };
    let out = f(&mut cb)?;
    if let Some(e) = failure {
        return Err(e);
    }
    logger.finish()?;
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn provenance(cfg: &RunConfig, stage: &str, step: usize) -> Provenance {
    Provenance {
        config_digest: cfg.digest(),
        step: step as u64,
        stage: stage.to_string(),
    }
}

fn load_dataset(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    let path = dir.data();
    if !path.join("dataset.json").exists() {
        return Err(Error::invalid(format!(
            "dataset not found: {} (run gen-data first)",
            path.display()
        )));
    }
    let ds = import_dataset(&path)?;
    if ds.sizes != cfg.sizes() || ds.seed != seed_of(cfg, "data") {
        return Err(Error::invalid(format!(
            "dataset at {} was generated from a different configuration; rerun gen-data",
            path.display()
        )));
    }
    Ok(ds)
}

/// Renders the dataset into `data/`.
pub fn gen_data(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "gen-data")?;
    let ds = build_dataset(cfg.sizes(), seed_of(cfg, "data"))?;
    let path = dir.data();
    if path.exists() {
        fs::remove_dir_all(&path)?;
    }
    export_dataset(&ds, &path)?;
    log::info!("wrote {} concepts to {}", ds.len(), path.display());
    Ok(dir)
}

fn encoder_checkpoint(cfg: &RunConfig, stage: &str, step: usize, encoders: &[&AlignmentEncoder<f32>]) -> Checkpoint {
    let arch: serde_json::Map<String, serde_json::Value> = encoders
        .iter()
        .map(|e| (e.modality().to_string(), json!(e.config)))
        .collect();
    let mut ck = Checkpoint::new(
        "encoders",
        serde_json::Value::Object(arch),
        provenance(cfg, stage, step),
    );
    for e in encoders {
        ck.add_params(&format!("{}.", e.modality()), &e.params);
    }
    ck
}

fn load_encoder(ck: &Checkpoint, cfg: &RunConfig, m: Modality) -> Result<AlignmentEncoder<f32>> {
    let mut enc = AlignmentEncoder::skeleton(cfg.encoder_config(m));
    let stored = ck
        .architecture
        .get(m.as_str())
        .ok_or_else(|| Error::CheckpointMismatch(format!("no {m} encoder in checkpoint")))?;
    if *stored != json!(enc.config) {
        return Err(Error::CheckpointMismatch(format!(
            "{m} encoder architecture differs: file has {stored}, model expects {}",
            json!(enc.config)
        )));
    }
    ck.load_params(&format!("{m}."), &mut enc.params)?;
    Ok(enc)
}

/// Masked-reconstruction pretraining of every encoder.
pub fn pretrain(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "pretrain")?;
    let ds = load_dataset(cfg, &dir)?;
    for m in Modality::ALL {
        let stage = format!("pretrain.{m}");
        let mut rng = rng_from_seed(seed_of(cfg, &stage));
        let enc = AlignmentEncoder::new(cfg.encoder_config(m), &mut rng);
        let enc = with_log(&dir.log(&format!("pretrain-{m}")), &stage, |log| {
            recipe::pretrain_encoder(cfg, enc, &ds, &mut rng, log)
        })?;
        let mut ck = encoder_checkpoint(cfg, &stage, cfg.pretrain.steps, &[&enc]);
        ck.rng = Some(RngState::capture(&rng));
        save_checkpoint(&dir.checkpoint(&format!("pretrain-{m}")), &ck)?;
    }
    Ok(dir)
}

/// Contrastive alignment starting from the pretrained encoders; writes the
/// frozen encoders and their held-out retrieval scores.
pub fn align(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "align")?;
    let ds = load_dataset(cfg, &dir)?;
    let mut loaded = Vec::new();
    for m in Modality::ALL {
        let ck = load_checkpoint(&dir.checkpoint(&format!("pretrain-{m}")))?;
        loaded.push(load_encoder(&ck, cfg, m)?);
    }
    let [image, audio, text]: [AlignmentEncoder<f32>; 3] = loaded.try_into().expect("three encoders");
    let mut encoders = EncoderSet { image, audio, text };
    let mut rng = rng_from_seed(seed_of(cfg, "align"));
    with_log(&dir.log("align"), "align", |log| {
        recipe::align_encoders(cfg, &mut encoders, &ds, &mut rng, log)
    })?;
    let mut ck = encoder_checkpoint(
        cfg,
        "align",
        cfg.align.steps + cfg.align.finetune_steps,
        &[&encoders.image, &encoders.audio, &encoders.text],
    );
    ck.rng = Some(RngState::capture(&rng));
    save_checkpoint(&dir.checkpoint("encoders"), &ck)?;
    write_metrics(&dir.metrics("align"), &retrieval_rows(cfg, &encoders, &ds)?)?;
    Ok(dir)
}

fn retrieval_rows(cfg: &RunConfig, encoders: &EncoderSet<f32>, ds: &Dataset) -> Result<Vec<MetricRow>> {
    let k = cfg.eval.retrieval_k;
    Ok(recipe::retrieval_scores(encoders, ds, k)?
        .into_iter()
        .map(|(pair, value)| MetricRow {
            metric: format!("retrieval_top{k}"),
            conditions: pair,
            value,
            seed: cfg.run.seed,
            n: ds.sizes.n_test,
        })
        .collect())
}

/// Loads the aligned encoders, frozen.
pub fn load_encoders(cfg: &RunConfig, dir: &RunDir) -> Result<EncoderSet<f32>> {
    let ck = load_checkpoint(&dir.checkpoint("encoders"))?;
    let mut set = EncoderSet {
        image: load_encoder(&ck, cfg, Modality::Image)?,
        audio: load_encoder(&ck, cfg, Modality::Audio)?,
        text: load_encoder(&ck, cfg, Modality::Text)?,
    };
    set.freeze();
    Ok(set)
}

fn encoders_digest(encoders: &EncoderSet<f32>) -> String {
    Modality::ALL
        .iter()
        .map(|&m| encoders.get(m).params.digest())
        .collect::<Vec<_>>()
        .join(":")
}

/// Trains the denoiser and control branch of every configured output.
pub fn train(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "train")?;
    let ds = load_dataset(cfg, &dir)?;
    let encoders = load_encoders(cfg, &dir)?;
    for &m in &cfg.diffusion.outputs {
        let stage = format!("train.{m}");
        let mut rng = rng_from_seed(seed_of(cfg, &stage));
        let (base, control) = with_log(&dir.log(&format!("train-{m}")), &stage, |log| {
            recipe::train_denoiser(cfg, &encoders, &ds, m, &mut rng, log)
        })?;
        let mut ck = Checkpoint::new(
            "diffusion",
            json!(base.config),
            provenance(cfg, &stage, cfg.diffusion.train_steps),
        );
        ck.meta = json!({ "encoders": encoders_digest(&encoders), "freeze_base": cfg.control.freeze_base });
        ck.rng = Some(RngState::capture(&rng));
        ck.add_params("base.", &base.params);
        ck.add_params("control.", &control.params);
        save_checkpoint(&dir.checkpoint(&format!("diffusion-{m}")), &ck)?;
    }
    Ok(dir)
}

/// Loads the denoiser pair for `output`, checking it was trained against
/// `encoders`.
pub fn load_denoiser(
    cfg: &RunConfig,
    dir: &RunDir,
    output: Modality,
    encoders: &EncoderSet<f32>,
) -> Result<(UNet32, ControlNet32)> {
    let ck = load_checkpoint(&dir.checkpoint(&format!("diffusion-{output}")))?;
    let ucfg = cfg.unet_config(output);
    ck.expect_architecture(&ucfg)?;
    if ck.meta.get("encoders").and_then(|v| v.as_str()) != Some(encoders_digest(encoders).as_str()) {
        return Err(Error::CheckpointMismatch(format!(
            "{output} denoiser was trained against different encoders; rerun train"
        )));
    }
    let mut base = UNet32::skeleton(ucfg.clone())?;
    let mut control = ControlNet32::skeleton(ucfg)?;
    ck.load_params("base.", &mut base.params)?;
    ck.load_params("control.", &mut control.params)?;
    base.params.set_frozen(true);
    control.params.set_frozen(true);
    Ok((base, control))
}

/// `image+text`, in canonical modality order.
pub fn combo_name(conditions: &[Modality]) -> String {
    conditions.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("+")
}

/// Outputs to sample for a condition list: the configured outputs that are
/// not themselves conditions.
pub fn outputs_for(cfg: &RunConfig, conditions: &[Modality]) -> Vec<Modality> {
    cfg.diffusion
        .outputs
        .iter()
        .copied()
        .filter(|m| !conditions.contains(m))
        .collect()
}

/// Condition lists scored for `output`: each other modality alone, then both.
pub fn eval_combinations(output: Modality) -> Vec<Vec<Modality>> {
    let others = recipe::condition_modalities(output);
    let mut out: Vec<Vec<Modality>> = others.iter().map(|&m| vec![m]).collect();
    out.push(others);
    out
}

fn save_generation(dir: &Path, gen: &Generation, alpha: f64) -> Result<()> {
    let records: Vec<(SampleRecord, &crate::data::Payload)> = gen
        .samples
        .iter()
        .zip(&gen.condition_concepts)
        .enumerate()
        .map(|(i, (s, cc))| {
            (
                SampleRecord {
                    modality: gen.output,
                    concept_id: cc[0],
                    split: "generated".into(),
                    payload: format!("{i:06}.bin"),
                    conditions: Some(gen.conditions.clone()),
                    condition_concepts: Some(cc.clone()),
                    alpha: Some(alpha),
                },
                &s.payload,
            )
        })
        .collect();
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    write_samples(dir, &records)
}

#[allow(clippy::too_many_arguments)]
fn run_generation(
    cfg: &RunConfig,
    encoders: &EncoderSet<f32>,
    base: &UNet32,
    control: &ControlNet32,
    ds: &Dataset,
    conditions: &[Modality],
    rows: &[Vec<usize>],
    alpha: f64,
    seed: u64,
) -> Result<Generation> {
    let ccfg = ControlConfig {
        alpha,
        fusion: cfg.control.fusion,
    };
    let schedule = cfg.diffusion_config().schedule()?;
    let mut rng: Rng = rng_from_seed(seed);
    recipe::generate(
        encoders,
        base,
        control,
        ds,
        conditions,
        rows,
        &ccfg,
        cfg.control.renormalize_interpolation,
        &schedule,
        64,
        &mut rng,
    )
}

/// Generates each configured output (other than the conditions) from the
/// test concepts and writes the samples.
pub fn sample(cfg: &RunConfig, conditions: &[Modality]) -> Result<RunDir> {
    let dir = prepare(cfg, "sample")?;
    let outputs = outputs_for(cfg, conditions);
    if conditions.is_empty() || outputs.is_empty() {
        return Err(Error::invalid(
            "conditions must name at least one modality and leave a configured output",
        ));
    }
    let ds = load_dataset(cfg, &dir)?;
    let encoders = load_encoders(cfg, &dir)?;
    let ids = recipe::eval_concepts(&ds, cfg.eval.n_samples);
    for output in outputs {
        let (base, control) = load_denoiser(cfg, &dir, output, &encoders)?;
        let rows: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i; conditions.len()]).collect();
        let seed = seed_of(cfg, &format!("sample.{output}"));
        let gen = run_generation(
            cfg,
            &encoders,
            &base,
            &control,
            &ds,
            conditions,
            &rows,
            cfg.control.alpha,
            seed,
        )?;
        save_generation(&dir.samples(output, &combo_name(conditions)), &gen, cfg.control.alpha)?;
    }
    Ok(dir)
}

fn score_rows(label: &str, s: &GenerationScores, seed: u64, n: usize) -> Vec<MetricRow> {
    [
        ("probe_accuracy", s.probe_accuracy),
        ("condition_consistency", s.condition_consistency),
        ("frechet_distance", s.frechet),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow {
        metric: metric.into(),
        conditions: label.into(),
        value,
        seed,
        n,
    })
    .collect()
}

/// Retrieval of the aligned encoders plus, for every configured output and
/// condition combination, probe accuracy, condition consistency and
/// Fréchet distance of generated samples. Combinations of two conditions
/// are also scored with α = 0 on the same checkpoints and noise.
pub fn eval(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "eval")?;
    let ds = load_dataset(cfg, &dir)?;
    let encoders = load_encoders(cfg, &dir)?;
    let mut rows = retrieval_rows(cfg, &encoders, &ds)?;
    let ids = recipe::eval_concepts(&ds, cfg.eval.n_samples);
    let n = ids.len();
    for &output in &cfg.diffusion.outputs {
        let (base, control) = load_denoiser(cfg, &dir, output, &encoders)?;
        let probe = recipe::train_probe(
            cfg,
            &ds,
            output,
            &mut rng_from_seed(seed_of(cfg, &format!("probe.{output}"))),
        )?;
        let real: Vec<_> = ids.iter().map(|&i| ds.sample(output, i).clone()).collect();
        let targets: Vec<_> = ids.iter().map(|&i| ds.concepts[i]).collect();
        rows.push(MetricRow {
            metric: "probe_accuracy".into(),
            conditions: format!("real->{output}"),
            value: crate::eval::probe_accuracy(&probe, &real, &targets)?,
            seed: cfg.run.seed,
            n,
        });
        let seed = seed_of(cfg, &format!("eval.{output}"));
        for conds in eval_combinations(output) {
            let name = combo_name(&conds);
            let cr: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i; conds.len()]).collect();
            let mut arms = vec![(format!("{name}->{output}"), cfg.control.alpha)];
            if conds.len() > 1 {
                arms.push((format!("{name}->{output}[alpha=0]"), 0.0));
            }
            for (label, alpha) in arms {
                log::info!("eval {label}");
                let gen = run_generation(cfg, &encoders, &base, &control, &ds, &conds, &cr, alpha, seed)?;
                let scores = recipe::score_generation(&gen, &encoders, &probe, &ds)?;
                rows.extend(score_rows(&label, &scores, cfg.run.seed, n));
            }
        }
    }
    write_metrics(&dir.metrics("eval"), &rows)?;
    Ok(dir)
}

/// Renders charts and tables from the metric CSVs.
pub fn report(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "report")?;
    let mut rows = Vec::new();
    for stage in ["eval", "demo-contradict"] {
        let path = dir.metrics(stage);
        if path.exists() {
            rows.extend(read_metrics(&path)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "no metrics under {} (run eval first)",
            dir.root.join("metrics").display()
        )));
    }
    report::write_report(&dir.report(), &rows)?;
    Ok(dir)
}

/// Contradictory-condition scenarios for each configured output. Every
/// modality conditions the output: in the control scenario all three show
/// the same concept; in each other scenario one modality shows a second
/// concept. Reports, per scenario and α, how close the generated samples
/// sit to the majority and to the odd concept.
pub fn demo_contradict(cfg: &RunConfig) -> Result<RunDir> {
    let dir = prepare(cfg, "demo-contradict")?;
    let ds = load_dataset(cfg, &dir)?;
    let encoders = load_encoders(cfg, &dir)?;
    let ids = recipe::eval_concepts(&ds, cfg.eval.n_samples);
    if ids.len() < 2 {
        return Err(Error::invalid("demo-contradict needs at least two test concepts"));
    }
    let n = ids.len();
    let conditions = Modality::ALL.to_vec();
    let mut rows = Vec::new();
    for &output in &cfg.diffusion.outputs {
        let (base, control) = load_denoiser(cfg, &dir, output, &encoders)?;
        let probe = recipe::train_probe(
            cfg,
            &ds,
            output,
            &mut rng_from_seed(seed_of(cfg, &format!("probe.{output}"))),
        )?;
        let seed = seed_of(cfg, &format!("demo.{output}"));
        let mut scenarios: Vec<(String, Option<usize>)> = vec![("consistent".into(), None)];
        scenarios.extend((0..conditions.len()).map(|j| (format!("{}-differs", conditions[j]), Some(j))));
        for (scenario, odd) in scenarios {
            // Row i pairs test concept i (majority) with concept i+1 (odd one).
            let cr: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    (0..conditions.len())
                        .map(|j| if Some(j) == odd { ids[(i + 1) % n] } else { ids[i] })
                        .collect()
                })
                .collect();
            for (tag, alpha) in [("c3", cfg.control.alpha), ("interpolation", 0.0)] {
                let gen = run_generation(cfg, &encoders, &base, &control, &ds, &conditions, &cr, alpha, seed)?;
                let label = format!("{scenario}->{output}[{tag}]");
                save_generation(
                    &dir.samples(output, &format!("contradict-{scenario}-{tag}")),
                    &gen,
                    alpha,
                )?;
                let majority: Vec<usize> = cr.iter().map(|r| r[odd.map_or(0, |j| (j + 1) % r.len())]).collect();
                let minority: Vec<usize> = cr.iter().map(|r| r[odd.unwrap_or(0)]).collect();
                let compare: &[(&str, &Vec<usize>)] = if odd.is_some() {
                    &[("majority", &majority), ("odd", &minority)]
                } else {
                    &[("majority", &majority)]
                };
                for &(who, concepts) in compare {
                    let targets: Vec<_> = concepts.iter().map(|&c| ds.concepts[c]).collect();
                    let truth: Vec<_> = concepts.iter().map(|&c| ds.sample(output, c).clone()).collect();
                    let consistency = crate::eval::condition_consistency(
                        &gen.samples,
                        &encoders.get(output).encode_batch(&truth.iter().collect::<Vec<_>>())?,
                        &encoders,
                    )?;
                    rows.push(MetricRow {
                        metric: format!("probe_accuracy_vs_{who}"),
                        conditions: label.clone(),
                        value: crate::eval::probe_accuracy(&probe, &gen.samples, &targets)?,
                        seed: cfg.run.seed,
                        n,
                    });
                    rows.push(MetricRow {
                        metric: format!("consistency_vs_{who}"),
                        conditions: label.clone(),
                        value: consistency,
                        seed: cfg.run.seed,
                        n,
                    });
                }
            }
        }
    }
    write_metrics(&dir.metrics("demo-contradict"), &rows)?;
    Ok(dir)
}

/// Every stage in order, as one call.
pub fn run_all(cfg: &RunConfig) -> Result<RunDir> {
    gen_data(cfg)?;
    pretrain(cfg)?;
    align(cfg)?;
    train(cfg)?;
    eval(cfg)?;
    report(cfg)
}
