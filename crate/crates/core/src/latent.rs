//! Continuous `[positions, channels]` latents for each modality.
//!
//! Image: 2x2 space-to-depth of the 16x16 grid, giving 64 positions by 4
//! channels. Audio: 16 frames of 4 consecutive samples. Text: one 4-d vector
//! per token from a fixed codebook, read back by nearest codeword.

use crate::data::{Modality, ModalitySample, Payload, AUDIO_LEN, IMAGE_SIDE, TEXT_LEN, VOCAB};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 4;

pub fn latent_shape(m: Modality) -> [usize; 2] {
    match m {
        Modality::Image => [(IMAGE_SIDE / 2) * (IMAGE_SIDE / 2), CHANNELS],
        Modality::Audio => [AUDIO_LEN / CHANNELS, CHANNELS],
        Modality::Text => [TEXT_LEN, CHANNELS],
    }
}

/// Codeword for every token: the 24 roots `±e_i ± e_j` followed by the 8
/// scaled axes `±sqrt(2) e_i`. All have norm `sqrt(2)`.
#[allow(clippy::needless_range_loop)]
pub fn token_codebook() -> [[f64; CHANNELS]; VOCAB] {
    let mut book = [[0.0; CHANNELS]; VOCAB];
    let mut k = 0;
    for i in 0..CHANNELS {
        for j in i + 1..CHANNELS {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                book[k][i] = si;
                book[k][j] = sj;
                k += 1;
            }
        }
    }
    for i in 0..CHANNELS {
        for s in [1.0, -1.0] {
            book[k][i] = s * std::f64::consts::SQRT_2;
            k += 1;
        }
    }
    debug_assert_eq!(k, VOCAB);
    book
}

fn image_index(pos: usize, ch: usize) -> usize {
    let half = IMAGE_SIDE / 2;
    let (i, j) = (pos / half, pos % half);
    let (di, dj) = (ch / 2, ch % 2);
    (2 * i + di) * IMAGE_SIDE + 2 * j + dj
}

/// Latent `[L, C]` of a payload.
pub fn to_latent<T: Scalar>(x: &ModalitySample) -> Tensor<T> {
    let shape = latent_shape(x.modality());
    match &x.payload {
        Payload::Image(px) => Tensor::from_fn(shape, |k| T::of(px[image_index(k / CHANNELS, k % CHANNELS)] as f64)),
        Payload::Audio(s) => Tensor::from_fn(shape, |k| T::of(s[k] as f64)),
        Payload::Text(toks) => {
            let book = token_codebook();
            Tensor::from_fn(shape, |k| T::of(book[toks[k / CHANNELS] as usize][k % CHANNELS]))
        }
    }
}

/// Nearest codeword; ties go to the lower token id.
pub fn nearest_token(v: &[f64]) -> u32 {
    let book = token_codebook();
    let mut best = (f64::INFINITY, 0);
    for (id, w) in book.iter().enumerate() {
        let d: f64 = w.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, id);
        }
    }
    best.1 as u32
}

/// Maps a generated latent back to a payload: image and audio are clamped to
/// `[-1, 1]`, text is read out token by token.
pub fn decode_output<T: Scalar>(z: &Tensor<T>, m: Modality, concept_id: usize) -> Result<ModalitySample> {
    let shape = latent_shape(m);
    if z.shape() != shape {
        return Err(Error::shape("decode_output", format!("{:?} vs {:?}", z.shape(), shape)));
    }
    let v: Vec<f64> = z.data().iter().map(|x| x.as_f64()).collect();
    let clamp = |x: f64| x.clamp(-1.0, 1.0) as f32;
    let payload = match m {
        Modality::Image => {
            let mut px = vec![0.0f32; IMAGE_SIDE * IMAGE_SIDE];
            for (k, &x) in v.iter().enumerate() {
                px[image_index(k / CHANNELS, k % CHANNELS)] = clamp(x);
            }
            Payload::Image(px)
        }
        Modality::Audio => Payload::Audio(v.iter().map(|&x| clamp(x)).collect()),
        Modality::Text => Payload::Text(v.chunks(CHANNELS).map(nearest_token).collect()),
    };
    Ok(ModalitySample { payload, concept_id })
}
