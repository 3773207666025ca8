//! Conditional denoiser with a skip-connected encoder, middle and decoder.
//!
//! Latents are `[B, L, C]` sequences. Encoder blocks run at `R` resolutions,
//! halving `L` between levels by folding neighbouring positions into channels;
//! the decoder mirrors this and concatenates the matching skip before each
//! block. Every block adds a projection of `time_emb + cond_emb`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::latent::latent_shape;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, Init, ParamBuilder, ParamSet};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub modality: Modality,
    /// Channel width per resolution level; its length is `R`.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
    /// Number of diffusion steps the time embedding accepts.
    pub steps: usize,
}

impl UNetConfig {
    /// Six blocks over three resolutions.
    pub fn desk(modality: Modality) -> Self {
        Self {
            modality,
            widths: vec![32, 48, 64],
            blocks_per_level: 2,
            time_dim: 32,
            emb_dim: 64,
            cond_dim: 32,
            steps: 100,
        }
    }

    /// Twelve blocks over four resolutions.
    pub fn full(modality: Modality) -> Self {
        Self {
            widths: vec![32, 48, 64, 96],
            blocks_per_level: 3,
            ..Self::desk(modality)
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.levels() * self.blocks_per_level
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        latent_shape(self.modality)
    }

    fn level_of(&self, block: usize) -> usize {
        block / self.blocks_per_level
    }

    /// `[positions, channels]` of each skip: one per encoder block, then the middle.
    pub fn skip_shapes(&self) -> Vec<[usize; 2]> {
        let l = self.latent_shape()[0];
        let mut out: Vec<[usize; 2]> = (0..self.num_blocks())
            .map(|j| {
                let r = self.level_of(j);
                [l >> r, self.widths[r]]
            })
            .collect();
        let last = self.levels() - 1;
        out.push([l >> last, self.widths[last]]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("unet config: {msg}")));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be nonempty and positive".into());
        }
        if self.blocks_per_level == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("need >= 1 block per level and an even time_dim".into());
        }
        if self.emb_dim == 0 || self.cond_dim == 0 || self.steps == 0 {
            return bad("emb_dim, cond_dim and steps must be positive".into());
        }
        let l = self.latent_shape()[0];
        if !l.is_multiple_of(1 << (self.levels() - 1)) {
            return bad(format!("{l} positions cannot be halved {} times", self.levels() - 1));
        }
        Ok(())
    }
}

/// Interleaved `[sin, cos]` features of step `t` at geometric frequencies.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let f = 1.0 / 10000f64.powf(k as f64 / half as f64);
        let a = t as f64 * f;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    ln: LayerNorm,
    fc1: Linear,
    emb: Linear,
    fc2: Linear,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        w_in: usize,
        w_out: usize,
        emb_dim: usize,
    ) -> Self {
        pb.scope(name, |pb| Self {
            ln: LayerNorm::new(pb, "ln", w_in),
            fc1: Linear::new(pb, "fc1", w_in, w_out),
            emb: Linear::new(pb, "emb", emb_dim, w_out),
            fc2: Linear::with_init(pb, "fc2", w_out, w_out, Init::FanIn(0.5)),
            skip: (w_in != w_out).then(|| Linear::new(pb, "skip", w_in, w_out)),
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let l = g.shape(x)[1];
        let h = self.ln.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let e = g.silu(emb)?;
        let e = self.emb.forward(g, p, e)?;
        let e = g.expand(e, 1, l)?;
        let h = g.add(h, e)?;
        let h = g.silu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let res = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(h, res)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MiddleBlock {
    res: ResBlock,
    ln: LayerNorm,
    mix: crate::params::ParamId,
    out: Linear,
}

impl MiddleBlock {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let h = self.res.forward(g, p, x, emb)?;
        let m = self.ln.forward(g, p, h)?;
        let m = g.matmul(p.var(self.mix), m)?;
        let m = self.out.forward(g, p, m)?;
        g.add(h, m)
    }
}

/// Input projection, encoder blocks, downsamplers, middle block and the
/// condition MLP: the part of the denoiser that the control branch copies.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    input: Linear,
    blocks: Vec<ResBlock>,
    downs: Vec<Linear>,
    middle: MiddleBlock,
    cond: Mlp,
}

impl Trunk {
    pub(crate) fn declare<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &UNetConfig) -> Self {
        let [l, c] = cfg.latent_shape();
        let input = Linear::new(pb, "input", c, cfg.widths[0]);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut w = cfg.widths[0];
        for j in 0..cfg.num_blocks() {
            let r = cfg.level_of(j);
            blocks.push(ResBlock::new(pb, &format!("enc{j}"), w, cfg.widths[r], cfg.emb_dim));
            w = cfg.widths[r];
            if (j + 1) % cfg.blocks_per_level == 0 && r + 1 < cfg.levels() {
                downs.push(Linear::new(pb, &format!("down{r}"), 2 * w, w));
            }
        }
        let lm = l >> (cfg.levels() - 1);
        let middle = pb.scope("middle", |pb| MiddleBlock {
            res: ResBlock::new(pb, "res", w, w, cfg.emb_dim),
            ln: LayerNorm::new(pb, "ln", w),
            mix: pb.param("mix", &[lm, lm], Init::FanIn(1.0)),
            out: Linear::with_init(pb, "out", w, w, Init::FanIn(0.5)),
        });
        let cond = Mlp::new(pb, "cond", cfg.cond_dim, cfg.emb_dim, cfg.emb_dim);
        Self {
            input,
            blocks,
            downs,
            middle,
            cond,
        }
    }

    /// Runs the input projection, encoder blocks and middle block, returning
    /// the skip stack (one entry per encoder block, then the middle output).
    pub(crate) fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cfg: &UNetConfig,
        z: Var,
        emb: Var,
    ) -> Result<Vec<Var>> {
        let mut h = self.input.forward(g, p, z)?;
        let mut skips = Vec::with_capacity(cfg.num_blocks() + 1);
        let mut downs = self.downs.iter();
        for (j, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(g, p, h, emb)?;
            skips.push(h);
            let r = cfg.level_of(j);
            if (j + 1) % cfg.blocks_per_level == 0 && r + 1 < cfg.levels() {
                let s = g.shape(h).to_vec();
                let folded = g.reshape(h, [s[0], s[1] / 2, 2 * s[2]])?;
                h = downs.next().expect("one downsampler per level").forward(g, p, folded)?;
            }
        }
        skips.push(self.middle.forward(g, p, h, emb)?);
        Ok(skips)
    }

    pub(crate) fn condition<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, cfg: &UNetConfig, c: Var) -> Result<Var> {
        let s = g.shape(c);
        if s.len() != 2 || s[1] != cfg.cond_dim {
            return Err(Error::shape(
                "encode_condition",
                format!("expected [B, {}], got {s:?}", cfg.cond_dim),
            ));
        }
        self.cond.forward(g, p, c)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<ResBlock>,
    ups: Vec<Option<Linear>>,
    out_ln: LayerNorm,
    out: Linear,
}

impl Decoder {
    fn declare<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &UNetConfig) -> Self {
        let e = cfg.num_blocks();
        let mut level = cfg.levels() - 1;
        let mut w = cfg.widths[level];
        let mut blocks = Vec::with_capacity(e);
        let mut ups = Vec::with_capacity(e);
        for i in 0..e {
            let r = cfg.level_of(e - 1 - i);
            ups.push((r < level).then(|| Linear::new(pb, &format!("up{r}"), w, 2 * cfg.widths[r])));
            if r < level {
                w = cfg.widths[r];
                level = r;
            }
            blocks.push(ResBlock::new(
                pb,
                &format!("dec{i}"),
                w + cfg.widths[r],
                cfg.widths[r],
                cfg.emb_dim,
            ));
            w = cfg.widths[r];
        }
        Self {
            blocks,
            ups,
            out_ln: LayerNorm::new(pb, "out_ln", w),
            out: Linear::new(pb, "out", w, cfg.latent_shape()[1]),
        }
    }
}

/// Base denoiser for one output modality.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
    trunk: Trunk,
    trunk_len: usize,
    time: Mlp,
    decoder: Decoder,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut pb = ParamBuilder::random(&mut params, rng);
        let trunk = Trunk::declare(&mut pb, &config);
        let time = Mlp::new(&mut pb, "time", config.time_dim, config.emb_dim, config.emb_dim);
        let decoder = Decoder::declare(&mut pb, &config);
        let net = Self {
            trunk_len: 0,
            config,
            params,
            trunk,
            time,
            decoder,
        };
        Ok(Self {
            trunk_len: net.params.find("time.fc1.w").map_or(0, |id| id.0),
            ..net
        })
    }

    /// Structure-only instance, to be filled from a checkpoint.
    pub fn skeleton(config: UNetConfig) -> Result<Self> {
        Self::new(config, &mut rng_from_seed(0))
    }

    /// Ids of the parameters the control branch copies.
    pub fn trunk_ids(&self) -> Vec<crate::params::ParamId> {
        self.params.ids().take(self.trunk_len).collect()
    }

    /// Ids of the output projection (weight, bias).
    pub fn output_ids(&self) -> [crate::params::ParamId; 2] {
        self.decoder.out.ids()
    }

    pub fn check_input(&self, z_shape: &[usize], t: &[usize]) -> Result<()> {
        let [l, c] = self.config.latent_shape();
        if z_shape.len() != 3 || z_shape[1] != l || z_shape[2] != c {
            return Err(Error::shape(
                "unet_forward",
                format!("expected [B, {l}, {c}], got {z_shape:?}"),
            ));
        }
        if t.len() != z_shape[0] {
            return Err(Error::shape(
                "unet_forward",
                format!("{} steps for batch of {}", t.len(), z_shape[0]),
            ));
        }
        if let Some(&bad) = t.iter().find(|&&t| t >= self.config.steps) {
            return Err(Error::invalid(format!(
                "time step {bad} outside [0, {})",
                self.config.steps
            )));
        }
        Ok(())
    }

    /// Raw sinusoidal features `[B, time_dim]`.
    pub fn raw_time_features(&self, t: &[usize]) -> Result<Tensor<T>> {
        if let Some(&bad) = t.iter().find(|&&t| t >= self.config.steps) {
            return Err(Error::invalid(format!(
                "time step {bad} outside [0, {})",
                self.config.steps
            )));
        }
        let d = self.config.time_dim;
        let data = t.iter().flat_map(|&t| sinusoidal(t, d)).map(T::of).collect();
        Tensor::new(vec![t.len(), d], data)
    }

    pub fn time_embedding(&self, g: &mut Graph<T>, p: &Bound, t: &[usize]) -> Result<Var> {
        let raw = g.constant(self.raw_time_features(t)?);
        self.time.forward(g, p, raw)
    }

    pub fn condition_embedding(&self, g: &mut Graph<T>, p: &Bound, c: Var) -> Result<Var> {
        self.trunk.condition(g, p, &self.config, c)
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, z: Var, emb: Var) -> Result<Vec<Var>> {
        self.trunk.encode(g, p, &self.config, z, emb)
    }

    /// Decodes a (possibly fused) skip stack into the noise prediction.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, skips: &[Var], emb: Var) -> Result<Var> {
        let e = self.config.num_blocks();
        if skips.len() != e + 1 {
            return Err(Error::shape(
                "unet_decode",
                format!("{} skips, expected {}", skips.len(), e + 1),
            ));
        }
        let mut h = skips[e];
        for (i, (blk, up)) in self.decoder.blocks.iter().zip(&self.decoder.ups).enumerate() {
            if let Some(up) = up {
                let y = up.forward(g, p, h)?;
                let s = g.shape(y).to_vec();
                h = g.reshape(y, [s[0], s[1] * 2, s[2] / 2])?;
            }
            let cat = g.concat(&[h, skips[e - 1 - i]], 2)?;
            h = blk.forward(g, p, cat, emb)?;
        }
        let h = self.decoder.out_ln.forward(g, p, h)?;
        self.decoder.out.forward(g, p, h)
    }

    /// Noise prediction and skip stack on a graph.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var, t: &[usize], c: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(g.shape(z), t)?;
        let te = self.time_embedding(g, p, t)?;
        let ce = self.condition_embedding(g, p, c)?;
        let emb = g.add(te, ce)?;
        let skips = self.encode(g, p, z, emb)?;
        let eps = self.decode(g, p, &skips, emb)?;
        Ok((eps, skips))
    }

    /// `z` is `[B, L, C]`, `c` is `[B, cond_dim]`.
    pub fn forward(&self, z: &Tensor<T>, t: &[usize], c: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(c.clone());
        let (eps, skips) = self.forward_graph(&mut g, &p, zv, t, cv)?;
        Ok((
            g.value(eps).clone(),
            skips.iter().map(|&s| g.value(s).clone()).collect(),
        ))
    }
}
