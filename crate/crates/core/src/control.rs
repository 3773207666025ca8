//! Trainable copy of the denoiser trunk that injects per-condition residuals
//! into the base skip stack through zero-initialized linear maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::interpolate_batches;
use crate::encoders::resolve_weights;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamBuilder, ParamId, ParamSet};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{Trunk, UNet, UNetConfig};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// How residual stacks from several conditions are combined before scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Sum,
    Mean,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Sum => "sum",
            Fusion::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "mean" => Ok(Fusion::Mean),
            _ => Err(Error::invalid(format!(
                "unknown fusion mode `{s}` (expected sum or mean)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub alpha: f64,
    pub fusion: Fusion,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            fusion: Fusion::Sum,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// The injection scale actually used for `n` conditions: zero for one.
    pub fn effective_alpha(&self, n: usize) -> f64 {
        if n == 1 {
            0.0
        } else {
            self.alpha
        }
    }
}

/// Control branch for one output modality.
#[derive(Clone, Debug)]
pub struct ControlNet<T> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
    trunk: Trunk,
    zero: Vec<Linear>,
    trunk_len: usize,
}

impl<T: Scalar> ControlNet<T> {
    /// Bitwise copy of `base`'s trunk plus one all-zero linear map per skip.
    pub fn init_copy(base: &UNet<T>) -> Self {
        let config = base.config.clone();
        let mut params = ParamSet::new();
        let trunk = Trunk::declare(
            &mut ParamBuilder::<T, Rng>::copying(&mut params, &base.params, ""),
            &config,
        );
        let trunk_len = params.len();
        let mut rng = rng_from_seed(0);
        let mut pb = ParamBuilder::random(&mut params, &mut rng);
        let zero = config
            .skip_shapes()
            .iter()
            .enumerate()
            .map(|(i, &[_, w])| Linear::zeroed(&mut pb, &format!("zero{i}"), w, w))
            .collect();
        Self {
            config,
            params,
            trunk,
            zero,
            trunk_len,
        }
    }

    /// Structure-only instance, to be filled from a checkpoint.
    pub fn skeleton(config: UNetConfig) -> Result<Self> {
        Ok(Self::init_copy(&UNet::skeleton(config)?))
    }

    pub fn trunk_ids(&self) -> Vec<ParamId> {
        self.params.ids().take(self.trunk_len).collect()
    }

    pub fn zero_conv_ids(&self) -> Vec<ParamId> {
        self.zero.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn num_sites(&self) -> usize {
        self.zero.len()
    }

    /// Residual stack for one condition `c` (`[B, cond_dim]`), using the
    /// base network's time embedding `temb`.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var, temb: Var, c: Var) -> Result<Vec<Var>> {
        let ce = self.trunk.condition(g, p, &self.config, c)?;
        let emb = g.add(temb, ce)?;
        let skips = self.trunk.encode(g, p, &self.config, z, emb)?;
        skips
            .iter()
            .zip(&self.zero)
            .map(|(&s, zc)| zc.forward(g, p, s))
            .collect()
    }

    /// Residuals evaluated without gradients.
    pub fn residuals(&self, base: &UNet<T>, z: &Tensor<T>, t: &[usize], c: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        base.check_input(z.shape(), t)?;
        let mut g = Graph::new();
        let pb = g.bind(&base.params, false);
        let pc = g.bind(&self.params, false);
        let temb = base.time_embedding(&mut g, &pb, t)?;
        let zv = g.constant(z.clone());
        let cv = g.constant(c.clone());
        let r = self.forward_graph(&mut g, &pc, zv, temb, cv)?;
        Ok(r.iter().map(|&v| g.value(v).clone()).collect())
    }
}

fn check_stacks(base_len: usize, residuals: &[Vec<impl Sized>]) -> Result<()> {
    if let Some(r) = residuals.iter().find(|r| r.len() != base_len) {
        return Err(Error::shape(
            "fuse",
            format!("residual stack of {} vs base of {base_len}", r.len()),
        ));
    }
    Ok(())
}

/// `base[i] + alpha * combine_j residuals[j][i]`. Returns `base` untouched
/// when `alpha` is zero or there are no residuals.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    base: &[Var],
    residuals: &[Vec<Var>],
    alpha: f64,
    mode: Fusion,
) -> Result<Vec<Var>> {
    check_stacks(base.len(), residuals)?;
    if alpha == 0.0 || residuals.is_empty() {
        return Ok(base.to_vec());
    }
    let k = match mode {
        Fusion::Sum => alpha,
        Fusion::Mean => alpha / residuals.len() as f64,
    };
    (0..base.len())
        .map(|i| {
            let mut acc = residuals[0][i];
            for r in &residuals[1..] {
                acc = g.add(acc, r[i])?;
            }
            let scaled = g.scale(acc, T::of(k))?;
            g.add(base[i], scaled)
        })
        .collect()
}

/// [`fuse`] on plain tensors, with the same operation order.
pub fn fuse_tensors<T: Scalar>(
    base: &[Tensor<T>],
    residuals: &[Vec<Tensor<T>>],
    alpha: f64,
    mode: Fusion,
) -> Result<Vec<Tensor<T>>> {
    check_stacks(base.len(), residuals)?;
    if alpha == 0.0 || residuals.is_empty() {
        return Ok(base.to_vec());
    }
    let k = T::of(match mode {
        Fusion::Sum => alpha,
        Fusion::Mean => alpha / residuals.len() as f64,
    });
    (0..base.len())
        .map(|i| {
            let mut acc = residuals[0][i].clone();
            for r in &residuals[1..] {
                acc = acc.zip_map(&r[i], |a, b| a + b)?;
            }
            base[i].zip_map(&acc, |b, a| b + a * k)
        })
        .collect()
}

/// Base prediction with condition `c_base`, plus control residuals for each
/// of `c_control` fused at scale `alpha`. No single-condition rule here; the
/// training objective uses this directly.
#[allow(clippy::too_many_arguments)]
pub fn denoise_graph<T: Scalar>(
    g: &mut Graph<T>,
    base: &UNet<T>,
    pb: &Bound,
    control: Option<(&ControlNet<T>, &Bound)>,
    z: Var,
    t: &[usize],
    c_base: Var,
    c_control: &[Var],
    alpha: f64,
    fusion: Fusion,
) -> Result<Var> {
    base.check_input(g.shape(z), t)?;
    let temb = base.time_embedding(g, pb, t)?;
    let ce = base.condition_embedding(g, pb, c_base)?;
    let emb = g.add(temb, ce)?;
    let mut skips = base.encode(g, pb, z, emb)?;
    if let Some((ctrl, pc)) = control {
        if alpha != 0.0 && !c_control.is_empty() {
            let residuals = c_control
                .iter()
                .map(|&c| ctrl.forward_graph(g, pc, z, temb, c))
                .collect::<Result<Vec<_>>>()?;
            skips = fuse(g, &skips, &residuals, alpha, fusion)?;
        }
    }
    base.decode(g, pb, &skips, emb)
}

/// Compound-conditioned noise prediction.
///
/// `conditions` holds one `[B, d]` latent batch per condition modality. The
/// base network sees their weighted interpolation; the control branch sees
/// each one separately. With a single condition the control branch is
/// skipped, so the result equals the base network alone.
#[allow(clippy::too_many_arguments)]
pub fn c3net_denoise<T: Scalar>(
    base: &UNet<T>,
    control: &ControlNet<T>,
    z: &Tensor<T>,
    t: &[usize],
    conditions: &[Tensor<T>],
    weights: Option<&[f64]>,
    cfg: &ControlConfig,
    renormalize: bool,
) -> Result<Tensor<T>> {
    if conditions.is_empty() {
        return Err(Error::invalid("at least one condition is required"));
    }
    cfg.validate()?;
    let w = resolve_weights(conditions.len(), weights)?;
    let refs: Vec<&Tensor<T>> = conditions.iter().collect();
    let cbar = interpolate_batches(&refs, &w, renormalize)?;
    let alpha = cfg.effective_alpha(conditions.len());
    let mut g = Graph::new();
    let pb = g.bind(&base.params, false);
    let pc = g.bind(&control.params, false);
    let zv = g.constant(z.clone());
    let cb = g.constant(cbar);
    let cs: Vec<Var> = conditions.iter().map(|c| g.constant(c.clone())).collect();
    let ctrl = (alpha != 0.0).then_some((control, &pc));
    let eps = denoise_graph(&mut g, base, &pb, ctrl, zv, t, cb, &cs, alpha, cfg.fusion)?;
    Ok(g.value(eps).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::optim::{AdamConfig, AdamState};

    fn setup(m: Modality, seed: u64) -> (UNet<f64>, ControlNet<f64>) {
        let base = UNet::new(UNetConfig::desk(m), &mut rng_from_seed(seed)).unwrap();
        let ctrl = ControlNet::init_copy(&base);
        (base, ctrl)
    }

    fn inputs(cfg: &UNetConfig, b: usize, seed: u64) -> (Tensor<f64>, Vec<usize>, Vec<Tensor<f64>>) {
        let mut rng = rng_from_seed(seed);
        let [l, c] = cfg.latent_shape();
        let z = Tensor::randn([b, l, c], 1.0, &mut rng);
        let t = (0..b).map(|i| (i * 13 + seed as usize) % cfg.steps).collect();
        let conds = (0..2)
            .map(|_| Tensor::randn([b, cfg.cond_dim], 0.2, &mut rng))
            .collect();
        (z, t, conds)
    }

    #[test]
    fn copy_is_bitwise_and_zero_convs_are_zero() {
        let (base, ctrl) = setup(Modality::Audio, 1);
        assert_eq!(
            ctrl.params.digest_of(ctrl.trunk_ids()),
            base.params.digest_of(base.trunk_ids())
        );
        for id in ctrl.zero_conv_ids() {
            assert!(ctrl.params.get(id).data().iter().all(|&v| v.to_bits() == 0));
        }
        assert_eq!(ctrl.num_sites(), base.config.skip_shapes().len());
        let mut ctrl2 = ctrl.clone();
        let before = base.params.digest();
        let id = ctrl2.trunk_ids()[0];
        ctrl2.params.get_mut(id).data_mut()[0] += 1.0;
        assert_eq!(base.params.digest(), before);
    }

    #[test]
    fn fresh_control_has_zero_residuals_and_no_effect() {
        let (base, ctrl) = setup(Modality::Text, 2);
        let (z, t, conds) = inputs(&base.config, 3, 3);
        let r = ctrl.residuals(&base, &z, &t, &conds[0]).unwrap();
        for (ri, [l, w]) in r.iter().zip(base.config.skip_shapes()) {
            assert_eq!(ri.shape(), &[3, l, w]);
            assert!(ri.data().iter().all(|&v| v == 0.0));
        }
        let cfg = ControlConfig {
            alpha: 0.7,
            fusion: Fusion::Sum,
        };
        let out = c3net_denoise(&base, &ctrl, &z, &t, &conds, None, &cfg, false).unwrap();
        let cbar = interpolate_batches(&[&conds[0], &conds[1]], &[0.5, 0.5], false).unwrap();
        let (want, _) = base.forward(&z, &t, &cbar).unwrap();
        assert_eq!(out.max_abs_diff(&want), 0.0);
    }

    #[test]
    fn single_condition_ignores_control_weights() {
        let (base, mut ctrl) = setup(Modality::Audio, 4);
        for id in ctrl.zero_conv_ids() {
            ctrl.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3);
        }
        let (z, t, conds) = inputs(&base.config, 2, 5);
        let out = c3net_denoise(
            &base,
            &ctrl,
            &z,
            &t,
            &conds[..1],
            None,
            &ControlConfig::default(),
            false,
        )
        .unwrap();
        let (want, _) = base.forward(&z, &t, &conds[0]).unwrap();
        assert!(out.bits_eq(&want));
        let two = c3net_denoise(&base, &ctrl, &z, &t, &conds, None, &ControlConfig::default(), false).unwrap();
        let cbar = interpolate_batches(&[&conds[0], &conds[1]], &[0.5, 0.5], false).unwrap();
        let (plain, _) = base.forward(&z, &t, &cbar).unwrap();
        assert!(two.max_abs_diff(&plain) > 0.0);
        assert!(c3net_denoise(&base, &ctrl, &z, &t, &[], None, &ControlConfig::default(), false).is_err());
    }

    #[test]
    fn fuse_cases() {
        let base: Vec<Tensor<f64>> = vec![Tensor::from_f64([2], &[1.0, -2.0]).unwrap()];
        let r = vec![Tensor::from_f64([2], &[0.5, 4.0]).unwrap()];
        let same = fuse_tensors(&base, std::slice::from_ref(&r), 0.0, Fusion::Sum).unwrap();
        assert!(same[0].bits_eq(&base[0]));
        let one = fuse_tensors(&base, std::slice::from_ref(&r), 0.1, Fusion::Sum).unwrap();
        assert_eq!(one[0].data(), &[1.0 + 0.1 * 0.5, -2.0 + 0.1 * 4.0]);
        let two = fuse_tensors(&base, &[r.clone(), r.clone()], 0.1, Fusion::Sum).unwrap();
        let doubled = fuse_tensors(&base, std::slice::from_ref(&r), 0.2, Fusion::Sum).unwrap();
        assert!(two[0].bits_eq(&doubled[0]));
        let mean = fuse_tensors(&base, &[r.clone(), r.clone()], 0.1, Fusion::Mean).unwrap();
        assert!((mean[0].max_abs_diff(&one[0])) < 1e-15);
        assert!(fuse_tensors(&base, &[vec![]], 0.1, Fusion::Sum).is_err());
    }

    #[test]
    fn zero_convs_receive_gradient_at_init() {
        let (base, mut ctrl) = setup(Modality::Audio, 6);
        let (z, t, conds) = inputs(&base.config, 2, 7);
        let mut g = Graph::new();
        let pb = g.bind(&base.params, false);
        let pc = g.bind(&ctrl.params, true);
        let zv = g.constant(z.clone());
        let cb = g.constant(conds[0].clone());
        let cc = g.constant(conds[1].clone());
        let eps = denoise_graph(
            &mut g,
            &base,
            &pb,
            Some((&ctrl, &pc)),
            zv,
            &t,
            cb,
            &[cc],
            0.1,
            Fusion::Sum,
        )
        .unwrap();
        let target = g.constant(Tensor::randn(z.shape().to_vec(), 1.0, &mut rng_from_seed(8)));
        let loss = crate::nn::mse(&mut g, eps, target).unwrap();
        let grads = pc.grads(&g.backward(loss).unwrap());
        let zero_ids = ctrl.zero_conv_ids();
        let gnorm: f64 = zero_ids
            .iter()
            .map(|id| grads[id.0].data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(gnorm > 0.0);
        // One step makes some residual nonzero.
        let mut opt = AdamState::new(&ctrl.params, AdamConfig::default());
        opt.step(&mut ctrl.params, &grads, "control").unwrap();
        let r = ctrl.residuals(&base, &z, &t, &conds[1]).unwrap();
        assert!(r.iter().any(|ri| ri.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn alpha_validation() {
        assert!(ControlConfig {
            alpha: -1.0,
            fusion: Fusion::Sum
        }
        .validate()
        .is_err());
        assert_eq!(ControlConfig::default().alpha, 0.1);
        assert_eq!(ControlConfig::default().effective_alpha(1), 0.0);
        assert_eq!(ControlConfig::default().effective_alpha(2), 0.1);
        assert_eq!(Fusion::parse("mean").unwrap(), Fusion::Mean);
        assert!(Fusion::parse("max").is_err());
    }
}
