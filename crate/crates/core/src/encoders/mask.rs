use rand::seq::index::sample;
use rand::Rng;

use super::{seq_len, PATCH};
use crate::data::{is_maskable_token, ModalitySample, Payload, EMPTY, IMAGE_SIDE};
use crate::error::{Error, Result};

/// A sample with some of its encoder tokens hidden.
///
/// Text positions are overwritten with the empty token; image patches and
/// audio frames are zeroed in the payload and flagged in `mask` so the encoder
/// substitutes its learned mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub sample: ModalitySample,
    pub original: ModalitySample,
    /// One flag per encoder token.
    pub mask: Vec<bool>,
}

impl Masked {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hides exactly `round(ratio * maskable)` positions chosen uniformly.
/// For text only attribute tokens are maskable.
pub fn mask_payload(x: &ModalitySample, ratio: f64, rng: &mut impl Rng) -> Result<Masked> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let l = seq_len(x.modality());
    let maskable: Vec<usize> = match &x.payload {
        Payload::Text(toks) => (0..l).filter(|&i| is_maskable_token(toks[i])).collect(),
        _ => (0..l).collect(),
    };
    let k = (ratio * maskable.len() as f64).round() as usize;
    let mut mask = vec![false; l];
    for i in sample(rng, maskable.len(), k) {
        mask[maskable[i]] = true;
    }
    let payload = match &x.payload {
        Payload::Text(toks) => Payload::Text(
            toks.iter()
                .zip(&mask)
                .map(|(&t, &m)| if m { EMPTY } else { t })
                .collect(),
        ),
        Payload::Audio(v) => {
            let mut v = v.clone();
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                v[p * PATCH..(p + 1) * PATCH].fill(0.0);
            }
            Payload::Audio(v)
        }
        Payload::Image(v) => {
            let mut v = v.clone();
            let per_side = IMAGE_SIDE / PATCH;
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let (pr, pc) = (p / per_side, p % per_side);
                for r in 0..PATCH {
                    let row = (pr * PATCH + r) * IMAGE_SIDE + pc * PATCH;
                    v[row..row + PATCH].fill(0.0);
                }
            }
            Payload::Image(v)
        }
    };
    Ok(Masked {
        sample: ModalitySample {
            payload,
            concept_id: x.concept_id,
        },
        original: x.clone(),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, sample_concept, Modality, CONCEPT_DIM};
    use crate::rng::rng_from_seed;

    #[test]
    fn masks_exact_count() {
        let mut rng = rng_from_seed(1);
        let c = sample_concept(&mut rng);
        let t = render(Modality::Text, &c, 0);
        let m = mask_payload(&t, 0.5, &mut rng).unwrap();
        assert_eq!(m.count(), CONCEPT_DIM / 2);
        let toks = m.sample.payload.as_tokens().unwrap();
        assert_eq!(toks.iter().filter(|&&t| t == EMPTY).count(), CONCEPT_DIM / 2);
        // Structural tokens are never hidden.
        assert_eq!(toks[0], t.payload.as_tokens().unwrap()[0]);

        let im = render(Modality::Image, &c, 0);
        let m = mask_payload(&im, 0.25, &mut rng).unwrap();
        assert_eq!(m.count(), 4);
        let zeros = m
            .sample
            .payload
            .as_real()
            .unwrap()
            .iter()
            .filter(|&&v| v == 0.0)
            .count();
        assert!(zeros >= 4 * PATCH * PATCH);
    }

    #[test]
    fn ratio_extremes() {
        let mut rng = rng_from_seed(2);
        let a = render(Modality::Audio, &sample_concept(&mut rng), 0);
        let none = mask_payload(&a, 0.0, &mut rng).unwrap();
        assert_eq!(none.count(), 0);
        assert_eq!(none.sample, a);
        let all = mask_payload(&a, 1.0, &mut rng).unwrap();
        assert_eq!(all.count(), 16);
        assert!(mask_payload(&a, 1.5, &mut rng).is_err());
    }
}
