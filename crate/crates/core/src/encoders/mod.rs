//! Alignment encoders into the shared condition space.
//!
//! Each modality is cut into a short token sequence (4x4 image patches,
//! 4-sample audio frames, or one-hot text tokens), embedded, mixed by
//! pre-norm self-attention blocks, mean-pooled and projected onto the unit
//! sphere of dimension `latent_dim`.

mod contrastive;
mod mask;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Modality, ModalitySample, Payload, AUDIO_LEN, IMAGE_SIDE, TEXT_LEN, VOCAB};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, Init, ParamBuilder, ParamId, ParamSet};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use contrastive::{contrastive_loss, contrastive_loss_value, log_softmax_rows};
pub use mask::{mask_payload, Masked};
pub use train::{align_joint_step, finetune_align_step, mae_pretrain_step, MaeDecoder, MaeModel};

pub const PATCH: usize = 4;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub width: usize,
    pub mlp_width: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub temperature_init: f64,
}

impl EncoderConfig {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            width: 32,
            mlp_width: 64,
            blocks: 2,
            latent_dim: 32,
            temperature_init: 0.07,
        }
    }

    /// Token count of the input sequence.
    pub fn seq_len(&self) -> usize {
        seq_len(self.modality)
    }

    /// Values per token.
    pub fn token_dim(&self) -> usize {
        token_dim(self.modality)
    }
}

pub fn seq_len(m: Modality) -> usize {
    match m {
        Modality::Image => (IMAGE_SIDE / PATCH) * (IMAGE_SIDE / PATCH),
        Modality::Audio => AUDIO_LEN / PATCH,
        Modality::Text => TEXT_LEN,
    }
}

pub fn token_dim(m: Modality) -> usize {
    match m {
        Modality::Image => PATCH * PATCH,
        Modality::Audio => PATCH,
        Modality::Text => VOCAB,
    }
}

/// Audio tokens: DFT bins `2k` and `2k + 1` as (re, im, re, im), scaled by
/// `1 / sqrt(AUDIO_LEN)`, for `k` in `0..AUDIO_LEN / 4`.
pub fn spectral_tokens(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    let scale = 1.0 / (n as f64).sqrt();
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let w = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (w.cos(), w.sin())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for bin in 0..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &v) in x.iter().enumerate() {
            let (c, s) = twiddle[(bin * j) % n];
            re += v as f64 * c;
            im += v as f64 * s;
        }
        out.push(re * scale);
        out.push(im * scale);
    }
    out
}

/// Splits a payload into `[seq_len, token_dim]` rows.
pub fn tokenize(sample: &ModalitySample) -> Vec<f64> {
    match &sample.payload {
        Payload::Image(px) => {
            let per_side = IMAGE_SIDE / PATCH;
            let mut out = Vec::with_capacity(px.len());
            for pr in 0..per_side {
                for pc in 0..per_side {
                    for r in 0..PATCH {
                        for c in 0..PATCH {
                            out.push(px[(pr * PATCH + r) * IMAGE_SIDE + pc * PATCH + c] as f64);
                        }
                    }
                }
            }
            out
        }
        Payload::Audio(x) => spectral_tokens(x),
        Payload::Text(toks) => {
            let mut out = vec![0.0; toks.len() * VOCAB];
            for (i, &t) in toks.iter().enumerate() {
                out[i * VOCAB + t as usize] = 1.0;
            }
            out
        }
    }
}

/// A point in the shared condition space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCondition<T> {
    pub v: Tensor<T>,
    /// `None` for interpolated (compound) latents.
    pub source: Option<Modality>,
}

impl<T: Scalar> LatentCondition<T> {
    pub fn norm(&self) -> f64 {
        self.v.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        cosine(self.v.data(), other.v.data())
    }
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-30)
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Linear,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<AttentionBlock>,
    final_ln: LayerNorm,
    head: Linear,
    log_tau: ParamId,
}

/// Modality-specific encoder with its own contrastive temperature.
#[derive(Clone, Debug)]
pub struct AlignmentEncoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> AlignmentEncoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut pb = ParamBuilder::random(&mut params, rng);
        let (d, l) = (config.width, config.seq_len());
        let embed = Linear::new(&mut pb, "embed", config.token_dim(), d);
        let pos = pb.param("pos", &[l, d], Init::Normal(0.1));
        let mask_token = pb.param("mask_token", &[d], Init::Normal(0.1));
        let blocks = (0..config.blocks)
            .map(|i| {
                pb.scope(&format!("block{i}"), |pb| AttentionBlock {
                    ln1: LayerNorm::new(pb, "ln1", d),
                    q: Linear::new(pb, "q", d, d),
                    k: Linear::new(pb, "k", d, d),
                    v: Linear::new(pb, "v", d, d),
                    o: Linear::new(pb, "o", d, d),
                    ln2: LayerNorm::new(pb, "ln2", d),
                    mlp: Mlp::new(pb, "mlp", d, config.mlp_width, d),
                })
            })
            .collect();
        let final_ln = LayerNorm::new(&mut pb, "final_ln", d);
        let head = Linear::new(&mut pb, "head", d, config.latent_dim);
        let log_tau = pb.param("log_tau", &[1], Init::Zeros);
        *params.get_mut(log_tau) = Tensor::full([1], T::of(config.temperature_init.ln()));
        Self {
            config,
            params,
            layout: Layout {
                embed,
                pos,
                mask_token,
                blocks,
                final_ln,
                head,
                log_tau,
            },
        }
    }

    /// Structure-only instance, to be filled from a checkpoint.
    pub fn skeleton(config: EncoderConfig) -> Self {
        Self::new(config, &mut rng_from_seed(0))
    }

    pub fn modality(&self) -> Modality {
        self.config.modality
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.layout.log_tau).item().as_f64().exp()
    }

    pub(crate) fn log_tau_id(&self) -> ParamId {
        self.layout.log_tau
    }

    /// Keeps the temperature inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        let id = self.layout.log_tau;
        let t = self.params.get(id).item().as_f64();
        let clamped = t.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        *self.params.get_mut(id) = Tensor::full([1], T::of(clamped));
    }

    fn check(&self, samples: &[&ModalitySample]) -> Result<()> {
        for s in samples {
            if s.modality() != self.config.modality {
                return Err(Error::ModalityMismatch {
                    expected: self.config.modality,
                    got: s.modality(),
                });
            }
        }
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    /// `[B, L, P]` token tensor for a batch.
    pub fn tokens(&self, samples: &[&ModalitySample]) -> Result<Tensor<T>> {
        self.check(samples)?;
        let (l, p) = (self.config.seq_len(), self.config.token_dim());
        let mut data = Vec::with_capacity(samples.len() * l * p);
        for s in samples {
            data.extend(tokenize(s).into_iter().map(T::of));
        }
        Tensor::new(vec![samples.len(), l, p], data)
    }

    /// Final-normalized token features `[B, L, D]`. `mask` holds one flag per
    /// token (`[B, L]`, 1 = masked); masked tokens are replaced by the mask token.
    pub fn hidden(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let lay = &self.layout;
        let shape = g.shape(tokens).to_vec();
        let (b, l, d) = (shape[0], shape[1], self.config.width);
        let mut h = lay.embed.forward(g, p, tokens)?;
        if let Some(m) = mask {
            if m.shape() != [b, l] {
                return Err(Error::shape("mask", format!("{:?} vs [{b}, {l}]", m.shape())));
            }
            let keep = Tensor::from_fn([b, l, d], |i| T::one() - m.data()[i / d]);
            let put = Tensor::from_fn([b, l, d], |i| m.data()[i / d]);
            let keep = g.constant(keep);
            let put = g.constant(put);
            let kept = g.mul(h, keep)?;
            let tok = g.expand(p.var(lay.mask_token), 0, b * l)?;
            let tok = g.reshape(tok, [b, l, d])?;
            let tok = g.mul(tok, put)?;
            h = g.add(kept, tok)?;
        }
        let pos = g.expand(p.var(lay.pos), 0, b)?;
        h = g.add(h, pos)?;
        let scale = T::of(1.0 / (d as f64).sqrt());
        for blk in &lay.blocks {
            let x = blk.ln1.forward(g, p, h)?;
            let q = blk.q.forward(g, p, x)?;
            let k = blk.k.forward(g, p, x)?;
            let v = blk.v.forward(g, p, x)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            let ctx = g.matmul(attn, v)?;
            let out = blk.o.forward(g, p, ctx)?;
            h = g.add(h, out)?;
            let x = blk.ln2.forward(g, p, h)?;
            let m = blk.mlp.forward(g, p, x)?;
            h = g.add(h, m)?;
        }
        lay.final_ln.forward(g, p, h)
    }

    /// Unit-norm latents `[B, latent_dim]` from hidden features.
    pub fn project(&self, g: &mut Graph<T>, p: &Bound, hidden: Var) -> Result<Var> {
        let pooled = g.mean_axis(hidden, 1)?;
        let z = self.layout.head.forward(g, p, pooled)?;
        g.l2_normalize(z)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        samples: &[&ModalitySample],
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let tokens = g.constant(self.tokens(samples)?);
        let h = self.hidden(g, p, tokens, mask)?;
        self.project(g, p, h)
    }

    /// Latents `[B, latent_dim]` for a batch, evaluated without gradients.
    pub fn encode_batch(&self, samples: &[&ModalitySample]) -> Result<Tensor<T>> {
        self.encode_batch_masked(samples, None)
    }

    pub fn encode_batch_masked(&self, samples: &[&ModalitySample], mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let z = self.forward(&mut g, &p, samples, mask)?;
        Ok(g.value(z).clone())
    }

    /// Encodes a masked sample; image/audio masks substitute the mask token.
    pub fn encode_masked(&self, masked: &[&Masked]) -> Result<Tensor<T>> {
        let samples: Vec<&ModalitySample> = masked.iter().map(|m| &m.sample).collect();
        match self.config.modality {
            Modality::Text => self.encode_batch(&samples),
            _ => {
                let l = self.config.seq_len();
                let flags = Tensor::from_fn([masked.len(), l], |i| {
                    if masked[i / l].mask[i % l] {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                self.encode_batch_masked(&samples, Some(&flags))
            }
        }
    }

    pub fn encode(&self, x: &ModalitySample) -> Result<LatentCondition<T>> {
        let z = self.encode_batch(&[x])?;
        let d = self.config.latent_dim;
        Ok(LatentCondition {
            v: z.reshape([d])?,
            source: Some(x.modality()),
        })
    }

    /// Ids of the token stem: everything except the projection head and the
    /// temperature.
    pub fn stem_ids(&self) -> Vec<ParamId> {
        let head = self.layout.head.ids();
        self.params
            .ids()
            .filter(|id| *id != self.layout.log_tau && !head.contains(id))
            .collect()
    }
}

/// Per-modality encoders that define the shared space.
#[derive(Clone, Debug)]
pub struct EncoderSet<T> {
    pub image: AlignmentEncoder<T>,
    pub audio: AlignmentEncoder<T>,
    pub text: AlignmentEncoder<T>,
}

impl<T: Scalar> EncoderSet<T> {
    pub fn get(&self, m: Modality) -> &AlignmentEncoder<T> {
        match m {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut AlignmentEncoder<T> {
        match m {
            Modality::Image => &mut self.image,
            Modality::Audio => &mut self.audio,
            Modality::Text => &mut self.text,
        }
    }

    pub fn freeze(&mut self) {
        for m in Modality::ALL {
            self.get_mut(m).params.set_frozen(true);
        }
    }

    pub fn all_frozen(&self) -> bool {
        Modality::ALL.iter().all(|&m| self.get(m).params.is_frozen())
    }

    pub fn latent_dim(&self) -> usize {
        self.text.config.latent_dim
    }
}

/// Weighted arithmetic mean `sum_i w_i v_i`, not renormalized. Uniform
/// weights when `weights` is `None`.
pub fn interpolate_conditions<T: Scalar>(
    latents: &[LatentCondition<T>],
    weights: Option<&[f64]>,
) -> Result<LatentCondition<T>> {
    let first = latents
        .first()
        .ok_or_else(|| Error::invalid("interpolation needs at least one latent"))?;
    let w = resolve_weights(latents.len(), weights)?;
    let mut acc = Tensor::zeros(first.v.shape().to_vec());
    for (l, &wi) in latents.iter().zip(&w) {
        if l.v.shape() != first.v.shape() {
            return Err(Error::shape(
                "interpolate",
                format!("{:?} vs {:?}", l.v.shape(), first.v.shape()),
            ));
        }
        let wi = T::of(wi);
        for (a, &x) in acc.data_mut().iter_mut().zip(l.v.data()) {
            *a += wi * x;
        }
    }
    let source = if latents.len() == 1 { first.source } else { None };
    Ok(LatentCondition { v: acc, source })
}

/// Validated weights: nonnegative, summing to one within 1e-9.
pub fn resolve_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("interpolation needs at least one latent"));
    }
    let w = match weights {
        None => vec![1.0 / n as f64; n],
        Some(w) => {
            if w.len() != n {
                return Err(Error::invalid(format!("{} weights for {n} latents", w.len())));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::invalid("interpolation weights must be nonnegative"));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("interpolation weights sum to {s}, not 1")));
            }
            w.to_vec()
        }
    };
    Ok(w)
}

/// Row-wise interpolation of `[B, d]` latent batches.
pub fn interpolate_batches<T: Scalar>(batches: &[&Tensor<T>], weights: &[f64], renormalize: bool) -> Result<Tensor<T>> {
    let first = batches
        .first()
        .ok_or_else(|| Error::invalid("interpolation needs at least one latent"))?;
    if batches.len() == 1 && weights == [1.0] && !renormalize {
        return Ok((*first).clone());
    }
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for (b, &w) in batches.iter().zip(weights) {
        if b.shape() != first.shape() {
            return Err(Error::shape(
                "interpolate",
                format!("{:?} vs {:?}", b.shape(), first.shape()),
            ));
        }
        let w = T::of(w);
        for (a, &x) in acc.data_mut().iter_mut().zip(b.data()) {
            *a += w * x;
        }
    }
    if renormalize {
        let d = *first.shape().last().expect("rank >= 1");
        for row in acc.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, sample_concept};
    use crate::rng::rng_from_seed;

    fn unit(v: &[f64]) -> LatentCondition<f64> {
        LatentCondition {
            v: Tensor::from_f64([v.len()], v).unwrap(),
            source: Some(Modality::Image),
        }
    }

    #[test]
    fn encode_is_unit_norm_for_all_modalities() {
        let mut rng = rng_from_seed(3);
        for m in Modality::ALL {
            let enc = AlignmentEncoder::<f32>::new(EncoderConfig::new(m), &mut rng);
            for _ in 0..5 {
                let c = sample_concept(&mut rng);
                let z = enc.encode(&render(m, &c, 0)).unwrap();
                assert!((z.norm() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fresh_encoder_separates_inputs() {
        let mut rng = rng_from_seed(4);
        let enc = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Audio), &mut rng);
        let a = enc
            .encode(&render(Modality::Audio, &sample_concept(&mut rng), 0))
            .unwrap();
        let b = enc
            .encode(&render(Modality::Audio, &sample_concept(&mut rng), 1))
            .unwrap();
        assert_ne!(a.v.digest(), b.v.digest());
        let a2 = enc.encode(&render(Modality::Audio, &sample_concept(&mut rng_from_seed(4)), 0));
        assert!(a2.is_ok());
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let mut rng = rng_from_seed(5);
        let enc = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Image), &mut rng);
        let s = render(Modality::Text, &sample_concept(&mut rng), 0);
        assert!(matches!(enc.encode(&s), Err(Error::ModalityMismatch { .. })));
    }

    #[test]
    fn temperature_starts_at_init_and_clamps() {
        let mut rng = rng_from_seed(6);
        let mut enc = AlignmentEncoder::<f64>::new(EncoderConfig::new(Modality::Image), &mut rng);
        assert!((enc.temperature() - 0.07).abs() < 1e-12);
        let id = enc.log_tau_id();
        *enc.params.get_mut(id) = Tensor::full([1], 100.0);
        enc.clamp_temperature();
        assert!((enc.temperature() - TAU_MAX).abs() < 1e-9);
    }

    #[test]
    fn interpolation_cases() {
        let u = unit(&[1., 0., 0.]);
        let w = unit(&[0., 1., 0.]);
        let same = interpolate_conditions(std::slice::from_ref(&u), Some(&[1.0])).unwrap();
        assert!(same.v.bits_eq(&u.v));
        let twice = interpolate_conditions(&[u.clone(), u.clone()], Some(&[0.5, 0.5])).unwrap();
        assert_eq!(twice.v, u.v);
        let mid = interpolate_conditions(&[u.clone(), w.clone()], None).unwrap();
        assert!((mid.norm() - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(interpolate_conditions::<f64>(&[], None).is_err());
        assert!(interpolate_conditions(&[u.clone(), w.clone()], Some(&[1.5, -0.5])).is_err());
        assert!(interpolate_conditions(&[u, w], Some(&[0.5, 0.6])).is_err());
    }
}
