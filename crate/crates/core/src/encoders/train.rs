use rand::Rng;

use super::{contrastive_loss, mask_payload, tokenize, AlignmentEncoder, Masked};
use crate::autodiff::Graph;
use crate::data::{Modality, ModalitySample};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::AdamState;
use crate::params::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-token reconstruction head used only during masked pretraining.
#[derive(Clone, Debug)]
pub struct MaeDecoder<T> {
    pub params: ParamSet<T>,
    mlp: Mlp,
}

impl<T: Scalar> MaeDecoder<T> {
    pub fn new(width: usize, token_dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut pb = ParamBuilder::random(&mut params, rng);
        let mlp = Mlp::new(&mut pb, "decoder", width, 2 * width, token_dim);
        Self { params, mlp }
    }
}

/// Encoder plus reconstruction head and their optimizer states.
#[derive(Clone, Debug)]
pub struct MaeModel<T> {
    pub encoder: AlignmentEncoder<T>,
    pub decoder: MaeDecoder<T>,
    pub enc_opt: AdamState<T>,
    pub dec_opt: AdamState<T>,
}

impl<T: Scalar> MaeModel<T> {
    pub fn new(encoder: AlignmentEncoder<T>, lr: f64, rng: &mut impl Rng) -> Self {
        let decoder = MaeDecoder::new(encoder.config.width, encoder.config.token_dim(), rng);
        let adam = crate::optim::AdamConfig::default().with_lr(lr);
        Self {
            enc_opt: AdamState::new(&encoder.params, adam),
            dec_opt: AdamState::new(&decoder.params, adam),
            encoder,
            decoder,
        }
    }

    /// Mean squared reconstruction error over masked tokens only.
    pub fn loss(&self, masked: &[Masked]) -> Result<f64> {
        let targets: Vec<Vec<f64>> = masked.iter().map(|m| tokenize(&m.original)).collect();
        self.loss_with_targets(masked, &targets)
    }

    /// [`Self::loss`] against explicit token-space targets, one
    /// `seq_len * token_dim` vector per sample.
    pub fn loss_with_targets(&self, masked: &[Masked], targets: &[Vec<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let pe = g.bind(&self.encoder.params, false);
        let pd = g.bind(&self.decoder.params, false);
        let (loss, _) = self.build(&mut g, &pe, &pd, masked, Some(targets))?;
        Ok(g.value(loss).item().as_f64())
    }

    fn build(
        &self,
        g: &mut Graph<T>,
        pe: &crate::params::Bound,
        pd: &crate::params::Bound,
        masked: &[Masked],
        targets: Option<&[Vec<f64>]>,
    ) -> Result<(crate::autodiff::Var, usize)> {
        let enc = &self.encoder;
        let (l, p) = (enc.config.seq_len(), enc.config.token_dim());
        let b = masked.len();
        let inputs: Vec<&ModalitySample> = masked.iter().map(|m| &m.sample).collect();
        let tokens = g.constant(enc.tokens(&inputs)?);
        let flags = Tensor::from_fn([b, l], |i| if masked[i / l].mask[i % l] { T::one() } else { T::zero() });
        let mask = (enc.modality() != Modality::Text).then_some(&flags);
        let h = enc.hidden(g, pe, tokens, mask)?;
        let pred = self.decoder.mlp.forward(g, pd, h)?;
        let mut target = Vec::with_capacity(b * l * p);
        match targets {
            Some(ts) => {
                if ts.len() != b || ts.iter().any(|t| t.len() != l * p) {
                    return Err(Error::invalid("one target of seq_len * token_dim per sample"));
                }
                ts.iter().for_each(|t| target.extend(t.iter().map(|&x| T::of(x))));
            }
            None => masked
                .iter()
                .for_each(|m| target.extend(tokenize(&m.original).into_iter().map(T::of))),
        }
        let target = g.constant(Tensor::new(vec![b, l, p], target)?);
        let count: usize = masked.iter().map(|m| m.count()).sum();
        let weight = g.constant(Tensor::from_fn([b, l, p], |i| flags.data()[i / p]));
        let d = g.sub(pred, target)?;
        let d = g.mul(d, weight)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq)?;
        let loss = g.scale(s, T::of(1.0 / (count.max(1) * p) as f64))?;
        Ok((loss, count))
    }
}

/// One masked-reconstruction update. With nothing masked the loss is zero
/// and no parameter moves.
pub fn mae_pretrain_step<T: Scalar>(
    model: &mut MaeModel<T>,
    batch: &[&ModalitySample],
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let masked = batch
        .iter()
        .map(|s| mask_payload(s, ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    if masked.iter().all(|m| m.count() == 0) {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let pe = g.bind(&model.encoder.params, true);
    let pd = g.bind(&model.decoder.params, true);
    let (loss, _) = model.build(&mut g, &pe, &pd, &masked, None)?;
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let name = format!("{} encoder", model.encoder.modality());
    model
        .enc_opt
        .step(&mut model.encoder.params, &pe.grads(&grads), &name)?;
    model
        .dec_opt
        .step(&mut model.decoder.params, &pd.grads(&grads), "mae decoder")?;
    Ok(value)
}

fn check_pairs(a: &[&ModalitySample], b: &[&ModalitySample]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} paired samples", a.len(), b.len())));
    }
    if a.iter().zip(b).any(|(x, y)| x.concept_id != y.concept_id) {
        return Err(Error::invalid("paired batches must share concepts row by row"));
    }
    Ok(())
}

/// Contrastive update of two encoders together; the temperature of `a` is used.
pub fn align_joint_step<T: Scalar>(
    a: &mut AlignmentEncoder<T>,
    a_opt: &mut AdamState<T>,
    b: &mut AlignmentEncoder<T>,
    b_opt: &mut AdamState<T>,
    a_batch: &[&ModalitySample],
    b_batch: &[&ModalitySample],
) -> Result<f64> {
    check_pairs(a_batch, b_batch)?;
    let mut g = Graph::new();
    let pa = g.bind(&a.params, true);
    let pb = g.bind(&b.params, true);
    let za = a.forward(&mut g, &pa, a_batch, None)?;
    let zb = b.forward(&mut g, &pb, b_batch, None)?;
    let loss = contrastive_loss(&mut g, za, zb, pa.var(a.log_tau_id()))?;
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let (na, nb) = (format!("{} encoder", a.modality()), format!("{} encoder", b.modality()));
    a_opt.step(&mut a.params, &pa.grads(&grads), &na)?;
    b_opt.step(&mut b.params, &pb.grads(&grads), &nb)?;
    a.clamp_temperature();
    b.clamp_temperature();
    Ok(value)
}

/// Contrastive update of `enc` towards a fixed `anchor` encoder.
pub fn finetune_align_step<T: Scalar>(
    enc: &mut AlignmentEncoder<T>,
    opt: &mut AdamState<T>,
    anchor: &AlignmentEncoder<T>,
    batch: &[&ModalitySample],
    anchor_batch: &[&ModalitySample],
) -> Result<f64> {
    check_pairs(batch, anchor_batch)?;
    let mut g = Graph::new();
    let p = g.bind(&enc.params, true);
    let pa = g.bind(&anchor.params, false);
    let z = enc.forward(&mut g, &p, batch, None)?;
    let za = anchor.forward(&mut g, &pa, anchor_batch, None)?;
    let loss = contrastive_loss(&mut g, z, za, p.var(enc.log_tau_id()))?;
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    let name = format!("{} encoder", enc.modality());
    opt.step(&mut enc.params, &p.grads(&grads), &name)?;
    enc.clamp_temperature();
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, sample_concept};
    use crate::encoders::EncoderConfig;
    use crate::optim::AdamConfig;
    use crate::rng::rng_from_seed;

    fn batch(m: Modality, n: usize, seed: u64) -> Vec<ModalitySample> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|i| render(m, &sample_concept(&mut rng), i)).collect()
    }

    #[test]
    fn zero_ratio_is_a_no_op() {
        let mut rng = rng_from_seed(1);
        let enc = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Image), &mut rng);
        let mut model = MaeModel::new(enc, 1e-3, &mut rng);
        let before = model.encoder.params.digest();
        let data = batch(Modality::Image, 4, 2);
        let refs: Vec<_> = data.iter().collect();
        assert_eq!(mae_pretrain_step(&mut model, &refs, 0.0, &mut rng).unwrap(), 0.0);
        assert_eq!(model.encoder.params.digest(), before);
        assert_eq!(model.enc_opt.step, 0);
    }

    #[test]
    fn mae_reduces_reconstruction_error() {
        let mut rng = rng_from_seed(3);
        let enc = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Audio), &mut rng);
        let mut model = MaeModel::new(enc, 3e-3, &mut rng);
        let data = batch(Modality::Audio, 16, 4);
        let refs: Vec<_> = data.iter().collect();
        let mut eval_rng = rng_from_seed(9);
        let probe: Vec<Masked> = refs
            .iter()
            .map(|s| mask_payload(s, 0.5, &mut eval_rng).unwrap())
            .collect();
        let start = model.loss(&probe).unwrap();
        for _ in 0..60 {
            mae_pretrain_step(&mut model, &refs, 0.5, &mut rng).unwrap();
        }
        let end = model.loss(&probe).unwrap();
        assert!(end < 0.7 * start, "{start} -> {end}");
    }

    #[test]
    fn frozen_anchor_is_untouched_and_loss_drops() {
        let mut rng = rng_from_seed(5);
        let mut img = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Image), &mut rng);
        let mut txt = AlignmentEncoder::<f32>::new(EncoderConfig::new(Modality::Text), &mut rng);
        txt.params.set_frozen(true);
        let ims = batch(Modality::Image, 8, 6);
        let txs = batch(Modality::Text, 8, 6);
        let (ri, rt): (Vec<_>, Vec<_>) = (ims.iter().collect(), txs.iter().collect());
        let mut opt = AdamState::new(&img.params, AdamConfig::default().with_lr(3e-3));
        let anchor_digest = txt.params.digest();
        let first = finetune_align_step(&mut img, &mut opt, &txt, &ri, &rt).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = finetune_align_step(&mut img, &mut opt, &txt, &ri, &rt).unwrap();
        }
        assert_eq!(txt.params.digest(), anchor_digest);
        assert!(last < first, "{first} -> {last}");
        let mut topt = AdamState::new(&txt.params, AdamConfig::default());
        let mut iopt = AdamState::new(&img.params, AdamConfig::default());
        let err = align_joint_step(&mut img, &mut iopt, &mut txt, &mut topt, &ri, &rt);
        assert!(matches!(err, Err(Error::FrozenUpdate(_))));
    }
}
