#![allow(dead_code)]

use c3net::control::{denoise_graph, ControlNet, Fusion};
use c3net::data::{render, sample_concept, Modality, ModalitySample};
use c3net::diffusion::{make_schedule, noise_objective};
use c3net::encoders::{contrastive_loss, AlignmentEncoder, EncoderConfig};
use c3net::gradcheck::{check_primitive, grad_check_params, primitives};
use c3net::rng::{rng_from_seed, standard_normal};
use c3net::unet::{UNet, UNetConfig};
use c3net::{Graph64, Result, Tensor64};

/// Worst relative error per primitive over `trials` randomized checks, each
/// differentiating every operand slot.
pub fn primitive_sweep(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64, usize)>> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for p in primitives() {
        let slots = match p.name() {
            "add" | "sub" | "mul" | "scale_by" | "matmul" | "concat" => 2,
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            worst = worst.max(check_primitive(&p, trial % slots, &mut rng)?);
        }
        out.push((p.name(), worst, trials));
    }
    Ok(out)
}

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        modality: Modality::Audio,
        widths: vec![4, 6],
        blocks_per_level: 1,
        time_dim: 4,
        emb_dim: 6,
        cond_dim: 5,
        steps: 10,
    }
}

/// Finite-difference check of the noise-prediction loss through base and
/// control networks (two control conditions, α = 0.1) with respect to the
/// base parameters and to the control parameters. Zero convolutions are
/// perturbed first so every path carries gradient.
pub fn diffusion_loss_errors(seed: u64, coords: usize) -> Result<(f64, f64)> {
    let mut rng = rng_from_seed(seed);
    let cfg = tiny_unet();
    let base: UNet<f64> = UNet::new(cfg.clone(), &mut rng)?;
    let mut control = ControlNet::init_copy(&base);
    for id in control.zero_conv_ids() {
        *control.params.get_mut(id) = Tensor64::randn(control.params.get(id).shape().to_vec(), 0.3, &mut rng);
    }
    let schedule = make_schedule(cfg.steps, 1e-3, 0.2)?;
    let [l, c] = cfg.latent_shape();
    let b = 3;
    let z0: Tensor64 = standard_normal([b, l, c], &mut rng);
    let eps: Tensor64 = standard_normal([b, l, c], &mut rng);
    let t = vec![0, 4, 9];
    let cm = Tensor64::randn([b, cfg.cond_dim], 0.5, &mut rng);
    let cf: Vec<Tensor64> = (0..2)
        .map(|_| Tensor64::randn([b, cfg.cond_dim], 0.5, &mut rng))
        .collect();
    let loss = |g: &mut Graph64,
                base: &UNet<f64>,
                pb: &c3net::params::Bound,
                ctrl: &ControlNet<f64>,
                pc: &c3net::params::Bound| {
        let cmv = g.constant(cm.clone());
        let cfv: Vec<_> = cf.iter().map(|x| g.constant(x.clone())).collect();
        noise_objective(g, &z0, &t, &eps, &schedule, |g, zt, t| {
            denoise_graph(g, base, pb, Some((ctrl, pc)), zt, t, cmv, &cfv, 0.1, Fusion::Sum)
        })
    };
    let wrt_base = grad_check_params(
        |g, pb| {
            let pc = g.bind(&control.params, false);
            loss(g, &base, pb, &control, &pc)
        },
        &base.params,
        coords,
        1e-5,
        &mut rng,
    )?;
    let wrt_control = grad_check_params(
        |g, pc| {
            let pb = g.bind(&base.params, false);
            loss(g, &base, &pb, &control, pc)
        },
        &control.params,
        coords,
        1e-5,
        &mut rng,
    )?;
    Ok((wrt_base, wrt_control))
}

/// Finite-difference check of the contrastive loss with respect to the
/// parameters of a small image encoder, including its temperature.
pub fn contrastive_loss_error(seed: u64, coords: usize) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let small = |m| EncoderConfig {
        width: 8,
        mlp_width: 8,
        blocks: 1,
        latent_dim: 4,
        ..EncoderConfig::new(m)
    };
    let img: AlignmentEncoder<f64> = AlignmentEncoder::new(small(Modality::Image), &mut rng);
    let txt: AlignmentEncoder<f64> = AlignmentEncoder::new(small(Modality::Text), &mut rng);
    let concepts: Vec<_> = (0..4).map(|_| sample_concept(&mut rng)).collect();
    let xi: Vec<ModalitySample> = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| render(Modality::Image, c, i))
        .collect();
    let xt: Vec<ModalitySample> = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| render(Modality::Text, c, i))
        .collect();
    let tau = img.params.find("log_tau").expect("temperature parameter");
    grad_check_params(
        |g, p| {
            let pt = g.bind(&txt.params, false);
            let a = img.forward(g, p, &xi.iter().collect::<Vec<_>>(), None)?;
            let b = txt.forward(g, &pt, &xt.iter().collect::<Vec<_>>(), None)?;
            contrastive_loss(g, a, b, p.var(tau))
        },
        &img.params,
        coords,
        1e-5,
        &mut rng,
    )
}
