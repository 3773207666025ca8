//! In-memory training and evaluation recipes; the file-based stages in the
//! parent module wrap these.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::config::RunConfig;
use crate::control::ControlConfig;
use crate::data::{ConceptVector, Dataset, Modality, ModalitySample, Split};
use crate::diffusion::{ddpm_sample, NoiseSchedule, TrainBatch, Trainer};
use crate::encoders::{
    align_joint_step, finetune_align_step, interpolate_batches, mae_pretrain_step, mask_payload, resolve_weights,
    AlignmentEncoder, EncoderSet, MaeModel,
};
use crate::error::{Error, Result};
use crate::eval::{condition_consistency, frechet_distance, probe_accuracy, retrieval_accuracy, ProbeClassifier};
use crate::latent::decode_output;
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::unet::UNet;
use crate::{ControlNet32, Tensor32, UNet32};

/// Receives `(step, loss, lr)` after every optimizer step.
pub type LogFn<'a> = &'a mut dyn FnMut(usize, f64, f64);

fn draw<'a>(pool: &[&'a ModalitySample], batch: usize, rng: &mut Rng) -> Vec<&'a ModalitySample> {
    let n = batch.min(pool.len());
    sample_indices(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

fn refs(xs: &[ModalitySample]) -> Vec<&ModalitySample> {
    xs.iter().collect()
}

fn split_samples<'a>(ds: &'a Dataset, m: Modality, splits: &[Split]) -> Vec<&'a ModalitySample> {
    ds.samples(m)
        .iter()
        .zip(&ds.splits)
        .filter(|(_, s)| splits.contains(s))
        .map(|(x, _)| x)
        .collect()
}

/// Freshly initialized encoders for every modality.
pub fn random_encoders(cfg: &RunConfig, rng: &mut Rng) -> EncoderSet<f32> {
    EncoderSet {
        image: AlignmentEncoder::new(cfg.encoder_config(Modality::Image), rng),
        audio: AlignmentEncoder::new(cfg.encoder_config(Modality::Audio), rng),
        text: AlignmentEncoder::new(cfg.encoder_config(Modality::Text), rng),
    }
}

/// Masked-reconstruction pretraining of one encoder on the unimodal pool.
pub fn pretrain_encoder(
    cfg: &RunConfig,
    enc: AlignmentEncoder<f32>,
    ds: &Dataset,
    rng: &mut Rng,
    log: LogFn,
) -> Result<AlignmentEncoder<f32>> {
    let m = enc.modality();
    let pool = split_samples(ds, m, &[Split::TrainUnimodal]);
    let p = &cfg.pretrain;
    let mut model = MaeModel::new(enc, p.lr, rng);
    for step in 0..p.steps {
        let batch = draw(&pool, p.batch, rng);
        let loss = mae_pretrain_step(&mut model, &batch, p.mask_ratio, rng)?;
        log(step, loss, p.lr);
    }
    Ok(model.encoder)
}

/// Contrastive alignment on the paired pool: image and text jointly, then
/// audio against the frozen text encoder. Returns the encoders frozen.
pub fn align_encoders(
    cfg: &RunConfig,
    encoders: &mut EncoderSet<f32>,
    ds: &Dataset,
    rng: &mut Rng,
    log: LogFn,
) -> Result<()> {
    let a = &cfg.align;
    let adam = AdamConfig::default().with_lr(a.lr);
    let ids: Vec<usize> = ds.ids(Split::TrainPaired);
    let pick = |rng: &mut Rng| -> Vec<usize> {
        let n = a.batch.min(ids.len());
        sample_indices(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect()
    };
    // Random masking of both sides keeps the small paired pool from being memorized.
    let rows = |m: Modality, sel: &[usize], rng: &mut Rng| -> Result<Vec<ModalitySample>> {
        sel.iter()
            .map(|&i| mask_payload(ds.sample(m, i), a.augment_ratio, rng).map(|x| x.sample))
            .collect()
    };

    let EncoderSet { image, audio, text } = encoders;
    let mut image_opt = AdamState::new(&image.params, adam);
    let mut text_opt = AdamState::new(&text.params, adam);
    for step in 0..a.steps {
        let lr = cosine_lr(a.lr, step, a.steps);
        image_opt.config.lr = lr;
        text_opt.config.lr = lr;
        let sel = pick(rng);
        let (xi, xt) = (rows(Modality::Image, &sel, rng)?, rows(Modality::Text, &sel, rng)?);
        let loss = align_joint_step(image, &mut image_opt, text, &mut text_opt, &refs(&xi), &refs(&xt))?;
        log(step, loss, lr);
    }
    text.params.set_frozen(true);
    image.params.set_frozen(true);
    let mut audio_opt = AdamState::new(&audio.params, adam);
    for step in 0..a.finetune_steps {
        let lr = cosine_lr(a.lr, step, a.finetune_steps);
        audio_opt.config.lr = lr;
        let sel = pick(rng);
        let (xa, xt) = (rows(Modality::Audio, &sel, rng)?, rows(Modality::Text, &sel, rng)?);
        let loss = finetune_align_step(audio, &mut audio_opt, text, &refs(&xa), &refs(&xt))?;
        log(a.steps + step, loss, lr);
    }
    encoders.freeze();
    Ok(())
}

fn encode_split(encoders: &EncoderSet<f32>, ds: &Dataset, m: Modality, split: Split) -> Result<Tensor32> {
    let xs = split_samples(ds, m, &[split]);
    let mut out = Vec::new();
    for chunk in xs.chunks(256) {
        out.push(encoders.get(m).encode_batch(chunk)?);
    }
    Tensor::stack_rows(&out)
}

/// Held-out top-k retrieval of the text of each concept from its image and
/// from its audio.
pub fn retrieval_scores(encoders: &EncoderSet<f32>, ds: &Dataset, k: usize) -> Result<Vec<(String, f64)>> {
    let text = encode_split(encoders, ds, Modality::Text, Split::Test)?;
    let mut out = Vec::new();
    for m in [Modality::Image, Modality::Audio] {
        let q = encode_split(encoders, ds, m, Split::Test)?;
        out.push((format!("{m}->text"), retrieval_accuracy(&q, &text, k)?));
    }
    let q = encode_split(encoders, ds, Modality::Image, Split::Test)?;
    let g = encode_split(encoders, ds, Modality::Audio, Split::Test)?;
    out.push(("image->audio".to_string(), retrieval_accuracy(&q, &g, k)?));
    Ok(out)
}

/// Mean of image→text and audio→text top-k retrieval.
pub fn mean_text_retrieval(scores: &[(String, f64)]) -> f64 {
    let pick = |name: &str| scores.iter().find(|(n, _)| n == name).map_or(0.0, |(_, v)| *v);
    0.5 * (pick("image->text") + pick("audio->text"))
}

/// Modalities that condition generation of `output` during training.
pub fn condition_modalities(output: Modality) -> Vec<Modality> {
    Modality::ALL.into_iter().filter(|&m| m != output).collect()
}

/// Diffusion training of the base denoiser and its control branch for one
/// output modality. Each row is conditioned on one other modality of the
/// same concept, drawn uniformly.
pub fn train_denoiser(
    cfg: &RunConfig,
    encoders: &EncoderSet<f32>,
    ds: &Dataset,
    output: Modality,
    rng: &mut Rng,
    log: LogFn,
) -> Result<(UNet32, ControlNet32)> {
    let d = &cfg.diffusion;
    let schedule = cfg.diffusion_config().schedule()?;
    let base = UNet::new(cfg.unet_config(output), rng)?;
    let adam = AdamConfig::default().with_lr(d.lr);
    let mut trainer = Trainer::new(base, cfg.control_config(), adam, cfg.control.freeze_base)?;
    let ids: Vec<usize> = ds
        .splits
        .iter()
        .enumerate()
        .filter(|(_, s)| **s != Split::Test)
        .map(|(i, _)| i)
        .collect();
    let conds = condition_modalities(output);
    for step in 0..d.train_steps {
        let lr = cosine_lr(d.lr, step, d.train_steps);
        trainer.set_lr(lr);
        let sel = sample_indices(rng, ids.len(), d.batch.min(ids.len()));
        let pairs: Vec<(&ModalitySample, &ModalitySample)> = sel
            .into_iter()
            .map(|i| {
                let c = conds[rng.random_range(0..conds.len())];
                (ds.sample(output, ids[i]), ds.sample(c, ids[i]))
            })
            .collect();
        let batch = TrainBatch::build(encoders, &pairs, d.mask_ratio, rng)?;
        let loss = if !cfg.control.freeze_base && rng.random::<f64>() < d.base_only_fraction {
            trainer.base_step(&batch, &schedule, rng)?
        } else {
            trainer.training_step(&batch, &schedule, rng)?
        };
        log(step, loss, lr);
    }
    Ok((trainer.base, trainer.control))
}

/// One generation request: each generated row `i` is conditioned on the
/// samples of `condition_concepts[i][j]` in modality `conditions[j]`.
#[derive(Clone, Debug)]
pub struct Generation {
    pub output: Modality,
    pub conditions: Vec<Modality>,
    pub condition_concepts: Vec<Vec<usize>>,
    pub samples: Vec<ModalitySample>,
    /// Interpolated `[n, d]` condition each row was generated from.
    pub interpolated: Tensor32,
}

/// Samples `output` for the given rows of conditions, in chunks of `chunk`.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    encoders: &EncoderSet<f32>,
    base: &UNet32,
    control: &ControlNet32,
    ds: &Dataset,
    conditions: &[Modality],
    condition_concepts: &[Vec<usize>],
    ccfg: &ControlConfig,
    renormalize: bool,
    schedule: &NoiseSchedule,
    chunk: usize,
    rng: &mut Rng,
) -> Result<Generation> {
    if conditions.is_empty() {
        return Err(Error::invalid("at least one condition modality is required"));
    }
    if condition_concepts.iter().any(|r| r.len() != conditions.len()) {
        return Err(Error::invalid("every row needs one concept per condition"));
    }
    let output = base.config.modality;
    let weights = resolve_weights(conditions.len(), None)?;
    let mut samples = Vec::with_capacity(condition_concepts.len());
    let mut interp = Vec::new();
    for rows in condition_concepts.chunks(chunk.max(1)) {
        let latents = conditions
            .iter()
            .enumerate()
            .map(|(j, &m)| {
                let xs: Vec<&ModalitySample> = rows.iter().map(|r| ds.sample(m, r[j])).collect();
                encoders.get(m).encode_batch(&xs)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = ddpm_sample(
            base,
            control,
            &latents,
            Some(&weights),
            ccfg,
            renormalize,
            schedule,
            rng,
            None,
        )?;
        for (i, r) in rows.iter().enumerate() {
            samples.push(decode_output(
                &z.rows(i, 1).reshape(base.config.latent_shape().to_vec())?,
                output,
                r[0],
            )?);
        }
        interp.push(interpolate_batches(
            &latents.iter().collect::<Vec<_>>(),
            &weights,
            renormalize,
        )?);
    }
    Ok(Generation {
        output,
        conditions: conditions.to_vec(),
        condition_concepts: condition_concepts.to_vec(),
        samples,
        interpolated: Tensor::stack_rows(&interp)?,
    })
}

/// Scores of one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationScores {
    pub probe_accuracy: f64,
    pub condition_consistency: f64,
    pub frechet: f64,
}

/// Probe accuracy against the first condition's concept, consistency with
/// the interpolated condition, and Fréchet distance between the encodings of
/// generated and real test samples.
pub fn score_generation(
    gen: &Generation,
    encoders: &EncoderSet<f32>,
    probe: &ProbeClassifier<f32>,
    ds: &Dataset,
) -> Result<GenerationScores> {
    let targets: Vec<ConceptVector> = gen.condition_concepts.iter().map(|r| ds.concepts[r[0]]).collect();
    let enc = encoders.get(gen.output);
    let refs: Vec<&ModalitySample> = gen.samples.iter().collect();
    let fake = enc.encode_batch(&refs)?;
    let real = encode_split(encoders, ds, gen.output, Split::Test)?;
    let frechet = if fake.shape()[0] > fake.shape()[1] && real.shape()[0] > real.shape()[1] {
        frechet_distance(&fake, &real)?
    } else {
        f64::NAN
    };
    Ok(GenerationScores {
        probe_accuracy: probe_accuracy(probe, &gen.samples, &targets)?,
        condition_consistency: condition_consistency(&gen.samples, &gen.interpolated, encoders)?,
        frechet,
    })
}

/// Probe for `m`, trained on the real training splits.
pub fn train_probe(cfg: &RunConfig, ds: &Dataset, m: Modality, rng: &mut Rng) -> Result<ProbeClassifier<f32>> {
    let data: Vec<(&ModalitySample, &ConceptVector)> = ds
        .samples(m)
        .iter()
        .zip(&ds.concepts)
        .zip(&ds.splits)
        .filter(|(_, s)| **s != Split::Test)
        .map(|(p, _)| p)
        .collect();
    ProbeClassifier::train(m, &data, &cfg.probe_config(), rng)
}

/// Test concepts used for evaluation, at most `n`.
pub fn eval_concepts(ds: &Dataset, n: usize) -> Vec<usize> {
    ds.ids(Split::Test).into_iter().take(n).collect()
}
