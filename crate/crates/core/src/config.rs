//! Run configuration: a TOML document of sections, every key optional.
//!
//! ```toml
//! [run]        seed, out
//! [data]       n_unimodal, n_paired, n_test
//! [encoder]    width, mlp_width, blocks, latent_dim, temperature
//! [pretrain]   steps, batch, lr, mask_ratio
//! [align]      steps, finetune_steps, batch, lr, augment_ratio
//! [diffusion]  steps, beta_start, beta_end, train_steps, batch, lr, mask_ratio,
//!              base_only_fraction, widths, blocks_per_level, time_dim, emb_dim, outputs
//! [control]    alpha, fusion, freeze_base, renormalize_interpolation
//! [eval]       n_samples, probe_steps, probe_hidden, retrieval_k
//! ```
//!
//! Unknown sections or keys are rejected with the nearest valid key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlConfig, Fusion};
use crate::data::{DatasetSizes, Modality};
use crate::diffusion::DiffusionConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/c3net".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_unimodal: usize,
    pub n_paired: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_unimodal: 2000,
            n_paired: 200,
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub width: usize,
    pub mlp_width: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub temperature: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::new(Modality::Image);
        Self {
            width: e.width,
            mlp_width: e.mlp_width,
            blocks: e.blocks,
            latent_dim: e.latent_dim,
            temperature: e.temperature_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 2e-3,
            mask_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSection {
    /// Joint image/text contrastive steps.
    pub steps: usize,
    /// Audio steps against the frozen text encoder.
    pub finetune_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of each paired sample masked as augmentation.
    pub augment_ratio: f64,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            steps: 300,
            finetune_steps: 300,
            batch: 128,
            lr: 2e-3,
            augment_ratio: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    /// Share of steps that train the base alone on the full condition.
    pub base_only_fraction: f64,
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub outputs: Vec<Modality>,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionConfig::default();
        let u = UNetConfig::desk(Modality::Image);
        Self {
            steps: d.steps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            train_steps: 1500,
            batch: 32,
            lr: 3e-3,
            mask_ratio: d.mask_ratio,
            base_only_fraction: 0.3,
            widths: u.widths,
            blocks_per_level: u.blocks_per_level,
            time_dim: u.time_dim,
            emb_dim: u.emb_dim,
            outputs: Modality::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSection {
    pub alpha: f64,
    pub fusion: Fusion,
    pub freeze_base: bool,
    pub renormalize_interpolation: bool,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = ControlConfig::default();
        Self {
            alpha: c.alpha,
            fusion: c.fusion,
            freeze_base: false,
            renormalize_interpolation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub probe_steps: usize,
    pub probe_hidden: usize,
    pub retrieval_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            n_samples: 64,
            probe_steps: p.steps,
            probe_hidden: p.hidden,
            retrieval_k: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub align: AlignSection,
    pub diffusion: DiffusionSection,
    pub control: ControlSection,
    pub eval: EvalSection,
}

fn nearest<'a>(key: &str, candidates: impl IntoIterator<Item = &'a String>) -> Option<&'a String> {
    candidates.into_iter().min_by_key(|c| strsim::levenshtein(key, c))
}

fn check_keys(doc: &toml::Table) -> Result<()> {
    let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let all: Vec<String> = known
        .iter()
        .flat_map(|(s, v)| {
            v.as_table()
                .into_iter()
                .flat_map(move |t| t.keys().map(move |k| format!("{s}.{k}")))
        })
        .collect();
    for (section, value) in doc {
        let Some(expected) = known.get(section).and_then(|v| v.as_table()) else {
            let hint = nearest(section, known.keys()).map_or(String::new(), |n| format!("; nearest valid key: `{n}`"));
            return Err(Error::Config(format!("unknown section `{section}`{hint}")));
        };
        let Some(table) = value.as_table() else {
            return Err(Error::Config(format!("`{section}` must be a section")));
        };
        for key in table.keys() {
            if !expected.contains_key(key) {
                let full = format!("{section}.{key}");
                let hint = nearest(&full, &all).map_or(String::new(), |n| format!("; nearest valid key: `{n}`"));
                return Err(Error::Config(format!("unknown key `{full}`{hint}")));
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses, applies defaults for missing keys and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        check_keys(&doc)?;
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The full effective configuration as TOML.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.emit().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.seed > i64::MAX as u64 {
            return bad("run.seed must fit in a signed 64-bit integer".into());
        }
        if self.run.out.is_empty() {
            return bad("run.out must not be empty".into());
        }
        self.sizes().validate().map_err(|e| Error::Config(e.to_string()))?;
        let e = &self.encoder;
        if e.width == 0 || e.mlp_width == 0 || e.blocks == 0 || e.latent_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !(e.temperature > 0.0 && e.temperature.is_finite()) {
            return bad("encoder.temperature must be positive".into());
        }
        for (name, r) in [
            ("pretrain.mask_ratio", self.pretrain.mask_ratio),
            ("align.augment_ratio", self.align.augment_ratio),
            ("diffusion.mask_ratio", self.diffusion.mask_ratio),
            ("diffusion.base_only_fraction", self.diffusion.base_only_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        for (name, lr) in [
            ("pretrain.lr", self.pretrain.lr),
            ("align.lr", self.align.lr),
            ("diffusion.lr", self.diffusion.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [
            ("pretrain.batch", self.pretrain.batch),
            ("align.batch", self.align.batch),
            ("diffusion.batch", self.diffusion.batch),
        ] {
            if b == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.align.batch < 2 {
            return bad("align.batch must be at least 2 for the contrastive loss".into());
        }
        self.diffusion_config()
            .schedule()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.diffusion.outputs.is_empty() {
            return bad("diffusion.outputs must name at least one modality".into());
        }
        for m in &self.diffusion.outputs {
            self.unet_config(*m)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        self.control_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = self.data.n_test;
        if self.eval.n_samples == 0 || self.eval.n_samples > n {
            return bad(format!("eval.n_samples must lie in 1..={n} (the test split)"));
        }
        if self.eval.retrieval_k == 0 {
            return bad("eval.retrieval_k must be positive".into());
        }
        if self.eval.probe_hidden == 0 {
            return bad("eval.probe_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn sizes(&self) -> DatasetSizes {
        DatasetSizes {
            n_unimodal: self.data.n_unimodal,
            n_paired: self.data.n_paired,
            n_test: self.data.n_test,
        }
    }

    pub fn encoder_config(&self, m: Modality) -> EncoderConfig {
        EncoderConfig {
            modality: m,
            width: self.encoder.width,
            mlp_width: self.encoder.mlp_width,
            blocks: self.encoder.blocks,
            latent_dim: self.encoder.latent_dim,
            temperature_init: self.encoder.temperature,
        }
    }

    pub fn unet_config(&self, m: Modality) -> UNetConfig {
        UNetConfig {
            modality: m,
            widths: self.diffusion.widths.clone(),
            blocks_per_level: self.diffusion.blocks_per_level,
            time_dim: self.diffusion.time_dim,
            emb_dim: self.diffusion.emb_dim,
            cond_dim: self.encoder.latent_dim,
            steps: self.diffusion.steps,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            steps: self.diffusion.steps,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            mask_ratio: self.diffusion.mask_ratio,
        }
    }

    pub fn control_config(&self) -> ControlConfig {
        ControlConfig {
            alpha: self.control.alpha,
            fusion: self.control.fusion,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.eval.probe_hidden,
            steps: self.eval.probe_steps,
            ..ProbeConfig::default()
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.control.alpha, 0.1);
        assert_eq!(c.control.fusion, Fusion::Sum);
        assert_eq!(c.diffusion.mask_ratio, 0.5);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.run.seed = 17;
        c.control.fusion = Fusion::Mean;
        c.diffusion.outputs = vec![Modality::Audio];
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn rejects_invalid_values() {
        let e = RunConfig::parse("[control]\nalpha = -1\n").unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
        assert!(RunConfig::parse("[control]\nfusion = \"max\"\n").is_err());
        assert!(RunConfig::parse("[data]\nn_paired = 0\n").is_err());
    }

    #[test]
    fn unknown_key_names_nearest() {
        let e = RunConfig::parse("[control]\nalpah = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("control.alpha"), "{e}");
        let e = RunConfig::parse("[diffusion]\nalpha = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("nearest valid key"), "{e}");
        let e = RunConfig::parse("[contrl]\nalpha = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("`control`"), "{e}");
    }
}
