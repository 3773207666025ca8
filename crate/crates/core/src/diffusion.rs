//! DDPM noise schedule, forward noising, the noise-prediction objective and
//! the ancestral sampler.
//!
//! Time steps are 0-based internally: index `t` in `0..T` is step `t + 1`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::control::{c3net_denoise, denoise_graph, ControlConfig, ControlNet};
use crate::data::{Modality, ModalitySample};
use crate::encoders::{mask_payload, EncoderSet};
use crate::error::{Error, Result};
use crate::latent::to_latent;
use crate::nn::mse;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{standard_normal, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linearly spaced `beta` from `beta_start` to `beta_end` over `steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!("time step {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`, with one `t` per leading-axis row.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        ));
    }
    let rows = z0.shape()[0];
    if t.len() != rows {
        return Err(Error::shape("q_sample", format!("{} steps for {rows} rows", t.len())));
    }
    for &ti in t {
        schedule.check(ti)?;
    }
    let per = z0.len() / rows;
    Ok(Tensor::from_fn(z0.shape().to_vec(), |i| {
        let ab = schedule.alpha_bars[t[i / per]];
        T::of(ab.sqrt()) * z0.data()[i] + T::of((1.0 - ab).sqrt()) * eps.data()[i]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mask_ratio: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            mask_ratio: 0.5,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Targets and the paired full / masked condition latents for one update.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub output: Modality,
    /// `[B, L, C]` clean latents.
    pub z0: Tensor<T>,
    /// `[B, d]` latents of the full conditions, `C(x)`.
    pub cond_full: Tensor<T>,
    /// `[B, d]` latents of the masked conditions, `C(x_m)`.
    pub cond_masked: Tensor<T>,
}

impl<T: Scalar> TrainBatch<T> {
    /// `pairs` holds (target sample, condition sample) for each row.
    pub fn build(
        encoders: &EncoderSet<T>,
        pairs: &[(&ModalitySample, &ModalitySample)],
        mask_ratio: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (first, _) = pairs.first().ok_or_else(|| Error::invalid("empty training batch"))?;
        let output = first.modality();
        for m in Modality::ALL {
            if !encoders.get(m).params.is_frozen() {
                return Err(Error::EncoderNotFrozen(m));
            }
        }
        let mut z0 = Vec::with_capacity(pairs.len());
        for (x, _) in pairs {
            if x.modality() != output {
                return Err(Error::MixedModality);
            }
            z0.push(to_latent::<T>(x));
        }
        let d = encoders.latent_dim();
        let mut full = vec![T::zero(); pairs.len() * d];
        let mut masked = vec![T::zero(); pairs.len() * d];
        for m in Modality::ALL {
            let rows: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].1.modality() == m).collect();
            if rows.is_empty() {
                continue;
            }
            let enc = encoders.get(m);
            let xs: Vec<&ModalitySample> = rows.iter().map(|&i| pairs[i].1).collect();
            let xm = xs
                .iter()
                .map(|x| mask_payload(x, mask_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            let cf = enc.encode_batch(&xs)?;
            let cm = enc.encode_masked(&xm.iter().collect::<Vec<_>>())?;
            for (k, &i) in rows.iter().enumerate() {
                full[i * d..(i + 1) * d].copy_from_slice(&cf.data()[k * d..(k + 1) * d]);
                masked[i * d..(i + 1) * d].copy_from_slice(&cm.data()[k * d..(k + 1) * d]);
            }
        }
        let b = pairs.len();
        let [l, c] = crate::latent::latent_shape(output);
        Ok(Self {
            output,
            z0: Tensor::stack_rows(&z0)?.reshape([b, l, c])?,
            cond_full: Tensor::new(vec![b, d], full)?,
            cond_masked: Tensor::new(vec![b, d], masked)?,
        })
    }

    pub fn len(&self) -> usize {
        self.z0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared error between `eps` and `predict(z_t, t)`, where
/// `z_t = q_sample(z0, t, eps)`.
pub fn noise_objective<T: Scalar, F>(
    g: &mut Graph<T>,
    z0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph<T>, Var, &[usize]) -> Result<Var>,
{
    let zt = g.constant(q_sample(z0, t, eps, schedule)?);
    let eps_hat = predict(g, zt, t)?;
    let target = g.constant(eps.clone());
    mse(g, eps_hat, target)
}

/// Base and control networks for one output modality with their optimizers.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub base: UNet<T>,
    pub control: ControlNet<T>,
    pub base_opt: AdamState<T>,
    pub control_opt: AdamState<T>,
    pub control_cfg: ControlConfig,
}

impl<T: Scalar> Trainer<T> {
    /// `freeze_base` trains only the control branch.
    pub fn new(base: UNet<T>, control_cfg: ControlConfig, adam: AdamConfig, freeze_base: bool) -> Result<Self> {
        control_cfg.validate()?;
        let control = ControlNet::init_copy(&base);
        let mut base = base;
        base.params.set_frozen(freeze_base);
        Ok(Self {
            base_opt: AdamState::new(&base.params, adam),
            control_opt: AdamState::new(&control.params, adam),
            base,
            control,
            control_cfg,
        })
    }

    pub fn from_parts(base: UNet<T>, control: ControlNet<T>, control_cfg: ControlConfig, adam: AdamConfig) -> Self {
        Self {
            base_opt: AdamState::new(&base.params, adam),
            control_opt: AdamState::new(&control.params, adam),
            base,
            control,
            control_cfg,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.base_opt.config.lr = lr;
        self.control_opt.config.lr = lr;
    }

    /// One noise-prediction update. The base network conditions on the masked
    /// latents and the control branch on the full ones.
    pub fn training_step(&mut self, batch: &TrainBatch<T>, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
        if batch.output != self.base.config.modality {
            return Err(Error::ModalityMismatch {
                expected: self.base.config.modality,
                got: batch.output,
            });
        }
        let b = batch.len();
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.steps())).collect();
        let eps = standard_normal::<T>(batch.z0.shape().to_vec(), rng);
        let train_base = !self.base.params.is_frozen();
        let mut g = Graph::new();
        let pb = g.bind(&self.base.params, train_base);
        let pc = g.bind(&self.control.params, true);
        let (base, control, cfg) = (&self.base, &self.control, self.control_cfg);
        let cm = g.constant(batch.cond_masked.clone());
        let cf = g.constant(batch.cond_full.clone());
        let loss = noise_objective(&mut g, &batch.z0, &t, &eps, schedule, |g, zt, t| {
            denoise_graph(
                g,
                base,
                &pb,
                Some((control, &pc)),
                zt,
                t,
                cm,
                &[cf],
                cfg.alpha,
                cfg.fusion,
            )
        })?;
        let value = g.value(loss).item().as_f64();
        let grads = g.backward(loss)?;
        self.control_opt
            .step(&mut self.control.params, &pc.grads(&grads), "control denoiser")?;
        if train_base {
            self.base_opt
                .step(&mut self.base.params, &pb.grads(&grads), "base denoiser")?;
        }
        Ok(value)
    }

    /// One update of the base network alone on the full condition latents,
    /// the path single-condition sampling takes.
    pub fn base_step(&mut self, batch: &TrainBatch<T>, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
        if batch.output != self.base.config.modality {
            return Err(Error::ModalityMismatch {
                expected: self.base.config.modality,
                got: batch.output,
            });
        }
        let b = batch.len();
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.steps())).collect();
        let eps = standard_normal::<T>(batch.z0.shape().to_vec(), rng);
        let mut g = Graph::new();
        let pb = g.bind(&self.base.params, true);
        let base = &self.base;
        let cf = g.constant(batch.cond_full.clone());
        let loss = noise_objective(&mut g, &batch.z0, &t, &eps, schedule, |g, zt, t| {
            base.forward_graph(g, &pb, zt, t, cf).map(|(eps, _)| eps)
        })?;
        let value = g.value(loss).item().as_f64();
        let grads = g.backward(loss)?;
        self.base_opt
            .step(&mut self.base.params, &pb.grads(&grads), "base denoiser")?;
        Ok(value)
    }
}

/// Ancestral sampling from `z_T` (drawn from `rng` when absent) down to `z_0`,
/// with variance `beta_t` at every step but the last.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<T: Scalar>(
    base: &UNet<T>,
    control: &ControlNet<T>,
    conditions: &[Tensor<T>],
    weights: Option<&[f64]>,
    cfg: &ControlConfig,
    renormalize: bool,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    z_t: Option<Tensor<T>>,
) -> Result<Tensor<T>> {
    let b = conditions
        .first()
        .ok_or_else(|| Error::invalid("at least one condition is required"))?
        .shape()[0];
    sample_loop(base, schedule, b, rng, z_t, |z, t| {
        c3net_denoise(base, control, z, t, conditions, weights, cfg, renormalize)
    })
}

/// The same loop driven by the base network alone.
pub fn ddpm_sample_base<T: Scalar>(
    base: &UNet<T>,
    condition: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    z_t: Option<Tensor<T>>,
) -> Result<Tensor<T>> {
    sample_loop(base, schedule, condition.shape()[0], rng, z_t, |z, t| {
        base.forward(z, t, condition).map(|(eps, _)| eps)
    })
}

fn sample_loop<T: Scalar>(
    base: &UNet<T>,
    schedule: &NoiseSchedule,
    b: usize,
    rng: &mut Rng,
    z_t: Option<Tensor<T>>,
    mut predict: impl FnMut(&Tensor<T>, &[usize]) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if schedule.steps() > base.config.steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps but the model embeds only {}",
            schedule.steps(),
            base.config.steps
        )));
    }
    let [l, c] = base.config.latent_shape();
    let mut z = match z_t {
        Some(z) => {
            if z.shape() != [b, l, c] {
                return Err(Error::shape(
                    "ddpm_sample",
                    format!("{:?} vs [{b}, {l}, {c}]", z.shape()),
                ));
            }
            z
        }
        None => standard_normal([b, l, c], rng),
    };
    for t in (0..schedule.steps()).rev() {
        let eps = predict(&z, &vec![t; b])?;
        z = posterior_step(&z, &eps, t, schedule, rng)?;
    }
    Ok(z)
}

/// `(z - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`, plus `sqrt(beta_t)`
/// noise when `t > 0`.
pub fn posterior_step<T: Scalar>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    schedule.check(t)?;
    let (beta, alpha, ab) = (schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]);
    let k = T::of(beta / (1.0 - ab).sqrt());
    let inv = T::of(1.0 / alpha.sqrt());
    let mean = z.zip_map(eps, |zi, ei| (zi - k * ei) * inv)?;
    if t == 0 {
        return Ok(mean);
    }
    let noise = standard_normal::<T>(z.shape().to_vec(), rng);
    let s = T::of(beta.sqrt());
    mean.zip_map(&noise, |m, n| m + s * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::unet::UNetConfig;

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5]);
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        let want = [0.9, 0.81, 0.729];
        for (a, w) in s.alpha_bars.iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
        let s = DiffusionConfig::default().schedule().unwrap();
        for t in 1..s.steps() {
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            assert_eq!(s.alpha_bars[t], s.alpha_bars[t - 1] * s.alphas[t]);
            assert_eq!(s.alphas[t], 1.0 - s.betas[t]);
        }
        assert!(s.alpha_bars[s.steps() - 1] < 1e-3);
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = make_schedule(10, 0.05, 0.3).unwrap();
        let z0 = Tensor::<f64>::ones([2, 3]);
        let zero = Tensor::zeros([2, 3]);
        let zt = q_sample(&z0, &[4, 9], &zero, &s).unwrap();
        assert_eq!(zt.data()[0], s.alpha_bars[4].sqrt());
        assert_eq!(zt.data()[5], s.alpha_bars[9].sqrt());
        assert!(q_sample(&z0, &[10, 0], &zero, &s).is_err());
        assert!(q_sample(&z0, &[1], &zero, &s).is_err());
        // Deep in the chain the sample is almost pure noise.
        let long = DiffusionConfig::default().schedule().unwrap();
        let eps = Tensor::<f64>::from_f64([1, 3], &[0.3, -1.2, 0.8]).unwrap();
        let zt = q_sample(&Tensor::ones([1, 3]), &[99], &eps, &long).unwrap();
        assert!(zt.max_abs_diff(&eps) < 0.05);
    }

    #[test]
    fn one_step_sampler_matches_hand_algebra() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let z = Tensor::<f64>::from_f64([1, 2], &[1.0, -2.0]).unwrap();
        let eps = Tensor::from_f64([1, 2], &[0.5, 0.25]).unwrap();
        let out = posterior_step(&z, &eps, 0, &s, &mut rng_from_seed(0)).unwrap();
        for i in 0..2 {
            let want = (z.data()[i] - 0.3f64.sqrt() * eps.data()[i]) / 0.7f64.sqrt();
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_gradient() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let mut rng = rng_from_seed(1);
        let z0 = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let eps = Tensor::randn([3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = g.param(Tensor::full([1], 2.0));
        let loss = noise_objective(&mut g, &z0, &[0, 5, 9], &eps, &s, |g, zt, _| {
            // Ignores its input entirely and returns eps through a unit weight.
            let zero = g.scale(zt, 0.0)?;
            let e = g.constant(eps.clone());
            let e = g.add(e, zero)?;
            let wz = g.scale_by(zero, w)?;
            g.add(e, wz)
        })
        .unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).item(), 0.0);
    }

    #[test]
    fn sampling_is_reproducible_and_single_condition_matches_base() {
        let cfg = UNetConfig {
            steps: 8,
            ..UNetConfig::desk(Modality::Audio)
        };
        let base = UNet::<f32>::new(cfg.clone(), &mut rng_from_seed(2)).unwrap();
        let mut control = ControlNet::init_copy(&base);
        for id in control.zero_conv_ids() {
            control.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.05);
        }
        let s = make_schedule(8, 1e-3, 0.2).unwrap();
        let c = Tensor::randn([2, cfg.cond_dim], 0.2, &mut rng_from_seed(3));
        let ccfg = ControlConfig::default();
        let a = ddpm_sample(
            &base,
            &control,
            std::slice::from_ref(&c),
            None,
            &ccfg,
            false,
            &s,
            &mut rng_from_seed(9),
            None,
        )
        .unwrap();
        let b = ddpm_sample(
            &base,
            &control,
            std::slice::from_ref(&c),
            None,
            &ccfg,
            false,
            &s,
            &mut rng_from_seed(9),
            None,
        )
        .unwrap();
        assert!(a.bits_eq(&b));
        let plain = ddpm_sample_base(&base, &c, &s, &mut rng_from_seed(9), None).unwrap();
        assert!(a.bits_eq(&plain));
    }
}
