//! Synthetic tri-modal data: a hidden concept vector rendered as an image,
//! an audio clip and a token sequence.
//!
//! All rendering constants come from [`RENDER_SEED`] through the crate's
//! ChaCha8 stream, so payloads are identical on every platform.

mod dataset;
mod io;

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

pub use dataset::{build_dataset, Dataset, DatasetSizes, Split};
pub use io::{export_dataset, import_dataset, read_samples, write_samples, SampleRecord};

pub const CONCEPT_DIM: usize = 8;
pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const AUDIO_LEN: usize = 64;
pub const TEXT_LEN: usize = 12;
pub const VOCAB: usize = 32;
pub const BINS: usize = 4;

/// Seed of the fixed rendering tensors.
pub const RENDER_SEED: u64 = 0x00C3_5EED;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const EMPTY: u32 = 3;
const ATTR_BASE: u32 = 4;
/// Attribute token groups; factor `i` uses group `i % ATTR_GROUPS`.
const ATTR_GROUPS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::invalid(format!(
                "unknown modality `{other}` (expected image, audio or text)"
            ))),
        }
    }

    /// Parses a comma separated list such as `image,text`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let out: Vec<_> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Self::parse)
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::invalid("empty modality list"));
        }
        Ok(out)
    }

    pub fn payload_len(self) -> usize {
        match self {
            Modality::Image => IMAGE_LEN,
            Modality::Audio => AUDIO_LEN,
            Modality::Text => TEXT_LEN,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hidden generative factors, each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector(pub [f64; CONCEPT_DIM]);

impl ConceptVector {
    pub fn zero() -> Self {
        Self([0.0; CONCEPT_DIM])
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Quantized attribute bins, one per factor.
    pub fn bins(&self) -> [u8; CONCEPT_DIM] {
        let mut out = [0; CONCEPT_DIM];
        for (o, &x) in out.iter_mut().zip(&self.0) {
            *o = quantize(x);
        }
        out
    }
}

/// Four bins with edges at -0.5, 0 and 0.5; a value on an edge belongs to the lower bin.
pub fn quantize(x: f64) -> u8 {
    [-0.5, 0.0, 0.5].iter().filter(|&&e| x > e).count() as u8
}

pub fn sample_concept(rng: &mut Rng) -> ConceptVector {
    let mut c = [0.0; CONCEPT_DIM];
    for v in &mut c {
        *v = rng.random_range(-1.0..=1.0);
    }
    ConceptVector(c)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// 16x16 grid, row major, values in `[-1, 1]`.
    Image(Vec<f32>),
    /// 64 samples in `[-1, 1]`.
    Audio(Vec<f32>),
    /// 12 token ids below [`VOCAB`].
    Text(Vec<u32>),
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Payload::Image(_) => Modality::Image,
            Payload::Audio(_) => Modality::Audio,
            Payload::Text(_) => Modality::Text,
        }
    }

    pub fn as_real(&self) -> Option<&[f32]> {
        match self {
            Payload::Image(v) | Payload::Audio(v) => Some(v),
            Payload::Text(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[u32]> {
        match self {
            Payload::Text(t) => Some(t),
            _ => None,
        }
    }

    /// Little-endian bytes: f32 for image/audio, u32 for text.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Payload::Image(v) | Payload::Audio(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::Text(t) => t.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(modality: Modality, bytes: &[u8]) -> Result<Self> {
        let n = modality.payload_len();
        if bytes.len() != n * 4 {
            return Err(Error::DatasetFormat(format!(
                "{modality} payload must be {} bytes, got {}",
                n * 4,
                bytes.len()
            )));
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let p = match modality {
            Modality::Image => Payload::Image(words.map(f32::from_le_bytes).collect()),
            Modality::Audio => Payload::Audio(words.map(f32::from_le_bytes).collect()),
            Modality::Text => Payload::Text(words.map(u32::from_le_bytes).collect()),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modality();
        let len = match self {
            Payload::Image(v) | Payload::Audio(v) => {
                if v.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                    return Err(Error::DatasetFormat(format!("{m} value outside [-1, 1]")));
                }
                v.len()
            }
            Payload::Text(t) => {
                if t.iter().any(|&x| x as usize >= VOCAB) {
                    return Err(Error::DatasetFormat("token id outside vocabulary".into()));
                }
                t.len()
            }
        };
        if len != m.payload_len() {
            return Err(Error::DatasetFormat(format!(
                "{m} payload has {len} entries, expected {}",
                m.payload_len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub payload: Payload,
    pub concept_id: usize,
}

impl ModalitySample {
    pub fn modality(&self) -> Modality {
        self.payload.modality()
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.payload.to_le_bytes()))
    }
}

struct Renderer {
    img_w: Vec<f64>, // IMAGE_LEN x CONCEPT_DIM
    img_b: Vec<f64>,
    aud_freq0: [f64; 4],
    aud_amp0: [f64; 4],
    aud_phase0: [f64; 4],
    aud_freq_w: [[f64; CONCEPT_DIM]; 4],
    aud_amp_w: [[f64; CONCEPT_DIM]; 4],
    aud_phase_w: [[f64; CONCEPT_DIM]; 4],
}

const BUMP_HEIGHT: f64 = 0.8;
const BUMP_WIDTH: f64 = 2.0;
const FREQ_STD: f64 = 0.03;
const PHASE_GAIN: f64 = 1.5;
const AMP_GAIN: f64 = 0.6;

fn renderer() -> &'static Renderer {
    static R: OnceLock<Renderer> = OnceLock::new();
    R.get_or_init(|| {
        let mut rng = rng_from_seed(RENDER_SEED);
        let img_w = Tensor::<f64>::randn([IMAGE_LEN, CONCEPT_DIM], 0.6, &mut rng).into_data();
        let img_b = Tensor::<f64>::randn([IMAGE_LEN], 0.3, &mut rng).into_data();
        // Component k has its phase driven mainly by factor k and its
        // amplitude by factor 4 + k; `std` adds dense cross-talk.
        let mut mat = |lead: Option<(usize, f64)>, std: f64| {
            let mut m = [[0.0; CONCEPT_DIM]; 4];
            for (k, row) in m.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = Tensor::<f64>::randn([1], std, &mut rng).item();
                }
                if let Some((offset, gain)) = lead {
                    row[offset + k] += gain;
                }
            }
            m
        };
        let aud_freq_w = mat(None, FREQ_STD);
        let aud_amp_w = mat(Some((4, AMP_GAIN)), 0.02);
        let aud_phase_w = mat(Some((0, PHASE_GAIN)), 0.05);
        let mut aud_phase0 = [0.0; 4];
        for p in &mut aud_phase0 {
            *p = rng.random_range(0.0..2.0 * PI);
        }
        Renderer {
            img_w,
            img_b,
            aud_freq0: [2.0, 5.0, 9.0, 14.0],
            aud_amp0: [1.0; 4],
            aud_phase0,
            aud_freq_w,
            aud_amp_w,
            aud_phase_w,
        }
    })
}

fn dot(w: &[f64], c: &ConceptVector) -> f64 {
    w.iter().zip(&c.0).map(|(a, b)| a * b).sum()
}

/// Gaussian bump centred at `(c[0], c[1])` mapped onto the grid.
pub fn image_bump(c: &ConceptVector, row: usize, col: usize) -> f64 {
    let span = (IMAGE_SIDE - 1) as f64;
    let cy = (c.0[0] + 1.0) / 2.0 * span;
    let cx = (c.0[1] + 1.0) / 2.0 * span;
    let d2 = (row as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
    BUMP_HEIGHT * (-d2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
}

/// `tanh(W c + b)` blended toward 1 by the bump: `base * (1 - g) + g`.
pub fn render_image(c: &ConceptVector, concept_id: usize) -> ModalitySample {
    let r = renderer();
    let mut out = Vec::with_capacity(IMAGE_LEN);
    for p in 0..IMAGE_LEN {
        let base = (dot(&r.img_w[p * CONCEPT_DIM..(p + 1) * CONCEPT_DIM], c) + r.img_b[p]).tanh();
        let g = image_bump(c, p / IMAGE_SIDE, p % IMAGE_SIDE);
        out.push((base * (1.0 - g) + g) as f32);
    }
    ModalitySample {
        payload: Payload::Image(out),
        concept_id,
    }
}

/// Image with `c = 0` and no bump, i.e. `tanh(b)`.
pub fn image_bias_only() -> Vec<f64> {
    renderer().img_b.iter().map(|b| b.tanh()).collect()
}

/// Per-component (frequency in cycles per clip, amplitude, phase) for a concept.
pub fn audio_components(c: &ConceptVector) -> [(f64, f64, f64); 4] {
    let r = renderer();
    let mut out = [(0.0, 0.0, 0.0); 4];
    for (k, o) in out.iter_mut().enumerate() {
        let f = r.aud_freq0[k] + dot(&r.aud_freq_w[k], c);
        let a = (r.aud_amp0[k] + dot(&r.aud_amp_w[k], c)).max(0.05);
        let p = r.aud_phase0[k] + dot(&r.aud_phase_w[k], c);
        *o = (f, a, p);
    }
    out
}

/// Largest total amplitude any concept in `[-1, 1]^8` can produce.
pub fn audio_amplitude_bound() -> f64 {
    let r = renderer();
    (0..4)
        .map(|k| r.aud_amp0[k] + r.aud_amp_w[k].iter().map(|w| w.abs()).sum::<f64>())
        .sum()
}

/// Sum of four sinusoids divided by [`audio_amplitude_bound`], so `|x| <= 1`
/// while absolute amplitudes stay observable.
pub fn render_audio(c: &ConceptVector, concept_id: usize) -> ModalitySample {
    let comps = audio_components(c);
    let total = audio_amplitude_bound();
    let out = (0..AUDIO_LEN)
        .map(|n| {
            let s: f64 = comps
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * n as f64 / AUDIO_LEN as f64 + p).sin())
                .sum();
            (s / total).clamp(-1.0, 1.0) as f32
        })
        .collect();
    ModalitySample {
        payload: Payload::Audio(out),
        concept_id,
    }
}

pub fn attribute_token(factor: usize, bin: u8) -> u32 {
    ATTR_BASE + (BINS * (factor % ATTR_GROUPS)) as u32 + bin as u32
}

/// `[BOS, a0..a7, EOS, PAD, PAD]`.
pub fn render_text(c: &ConceptVector, concept_id: usize) -> ModalitySample {
    let mut t = Vec::with_capacity(TEXT_LEN);
    t.push(BOS);
    for (i, b) in c.bins().iter().enumerate() {
        t.push(attribute_token(i, *b));
    }
    t.push(EOS);
    while t.len() < TEXT_LEN {
        t.push(PAD);
    }
    ModalitySample {
        payload: Payload::Text(t),
        concept_id,
    }
}

/// Recovers the per-factor bins from a token sequence. Positions holding
/// anything other than a valid attribute token decode to `None`.
pub fn decode_text(tokens: &[u32]) -> [Option<u8>; CONCEPT_DIM] {
    let mut out = [None; CONCEPT_DIM];
    for (i, o) in out.iter_mut().enumerate() {
        let Some(&tok) = tokens.get(i + 1) else { continue };
        let group_base = attribute_token(i, 0);
        if tok >= group_base && tok < group_base + BINS as u32 {
            *o = Some((tok - group_base) as u8);
        }
    }
    out
}

/// Token positions that masking may replace.
pub fn is_maskable_token(tok: u32) -> bool {
    tok >= ATTR_BASE
}

pub fn render(modality: Modality, c: &ConceptVector, concept_id: usize) -> ModalitySample {
    match modality {
        Modality::Image => render_image(c, concept_id),
        Modality::Audio => render_audio(c, concept_id),
        Modality::Text => render_text(c, concept_id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concepts(n: usize, seed: u64) -> Vec<ConceptVector> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| sample_concept(&mut rng)).collect()
    }

    #[test]
    fn seed_zero_is_stable() {
        let a = concepts(1, 0)[0];
        let b = concepts(1, 0)[0];
        assert_eq!(a, b);
        assert!(a.0.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn component_means_near_zero() {
        let cs = concepts(10_000, 11);
        for j in 0..CONCEPT_DIM {
            let m: f64 = cs.iter().map(|c| c.0[j]).sum::<f64>() / cs.len() as f64;
            assert!(m.abs() < 0.05, "factor {j} mean {m}");
            assert!(cs.iter().all(|c| c.0[j].abs() <= 1.0));
        }
    }

    #[test]
    fn zero_concept_image_is_bias_plus_centre_bump() {
        let img = render_image(&ConceptVector::zero(), 0);
        let Payload::Image(px) = &img.payload else {
            unreachable!()
        };
        let base = image_bias_only();
        for (p, (&v, &b)) in px.iter().zip(&base).enumerate() {
            let (r, c) = (p / IMAGE_SIDE, p % IMAGE_SIDE);
            let d2 = (r as f64 - 7.5).powi(2) + (c as f64 - 7.5).powi(2);
            let g = 0.8 * (-d2 / 8.0).exp();
            assert!((v as f64 - (b * (1.0 - g) + g)).abs() < 1e-6);
        }
        assert_eq!(img.digest(), render_image(&ConceptVector::zero(), 0).digest());
    }

    #[test]
    fn zero_concept_audio_closed_form() {
        let r = renderer();
        let a = render_audio(&ConceptVector::zero(), 0);
        let Payload::Audio(x) = &a.payload else { unreachable!() };
        let total = audio_amplitude_bound();
        for (n, &v) in x.iter().enumerate() {
            let s: f64 = (0..4)
                .map(|k| r.aud_amp0[k] * (2.0 * PI * r.aud_freq0[k] * n as f64 / 64.0 + r.aud_phase0[k]).sin())
                .sum();
            assert!((v as f64 - s / total).abs() < 1e-6);
        }
    }

    #[test]
    fn payloads_respect_ranges() {
        for c in concepts(300, 3) {
            render_image(&c, 0).payload.validate().unwrap();
            render_audio(&c, 0).payload.validate().unwrap();
            render_text(&c, 0).payload.validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip_and_tie_break() {
        let zero = render_text(&ConceptVector::zero(), 0);
        let toks = zero.payload.as_tokens().unwrap();
        assert_eq!(toks[0], BOS);
        assert_eq!(toks[9], EOS);
        assert_eq!(&toks[10..], &[PAD, PAD]);
        assert!(decode_text(toks).iter().all(|b| *b == Some(1)));
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(0.5), 2);
        assert_eq!(quantize(0.5000001), 3);
        for c in concepts(200, 4) {
            let t = render_text(&c, 0);
            let bins = decode_text(t.payload.as_tokens().unwrap());
            for (d, b) in bins.iter().zip(c.bins()) {
                assert_eq!(*d, Some(b));
            }
        }
    }

    #[test]
    fn same_bins_same_tokens() {
        let a = ConceptVector([0.1, -0.9, 0.6, 0.2, -0.2, 0.4, -0.6, 0.9]);
        let b = ConceptVector([0.2, -0.8, 0.7, 0.3, -0.1, 0.45, -0.7, 0.8]);
        assert_eq!(render_text(&a, 0).payload, render_text(&b, 1).payload);
    }

    #[test]
    fn vocabulary_fits() {
        let max = (0..CONCEPT_DIM).map(|i| attribute_token(i, 3)).max().unwrap();
        assert_eq!(max as usize, VOCAB - 1);
    }
}
