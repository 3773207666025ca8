//! Retrieval accuracy, Fréchet distance, condition consistency and probe
//! classifiers. Every metric is a pure function of its inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::data::{decode_text, ConceptVector, Modality, ModalitySample, BINS, CONCEPT_DIM};
use crate::encoders::{cosine, log_softmax_rows, EncoderSet};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape("metric", format!("expected [n, d], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Fraction of queries whose partner (same row index) is among the `k`
/// gallery items of highest cosine similarity. The rank of the partner is the
/// number of gallery items scoring strictly higher.
pub fn retrieval_accuracy<T: Scalar>(queries: &Tensor<T>, gallery: &Tensor<T>, k: usize) -> Result<f64> {
    let (n, d) = rows(queries)?;
    let (m, e) = rows(gallery)?;
    if n != m || d != e {
        return Err(Error::shape(
            "retrieval_accuracy",
            format!("{:?} vs {:?}", queries.shape(), gallery.shape()),
        ));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let q = queries.data();
    let g = gallery.data();
    let mut hits = 0;
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let sims: Vec<f64> = (0..n).map(|j| cosine(qi, &g[j * d..(j + 1) * d])).collect();
        let rank = sims.iter().filter(|&&s| s > sims[i]).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Sample mean and unbiased covariance of the rows.
fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

const EIG_TOL: f64 = 1e-10;

/// Symmetric square root by eigendecomposition, clamping eigenvalues at 0.
/// Returns the root and the most negative eigenvalue seen.
fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (root, min)
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ra, min_a) = sqrtm_psd(a);
    let inner = &ra * b * &ra;
    let scale = inner.diagonal().abs().max().max(1.0);
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min.min(min_a) < -EIG_TOL * scale {
        log::warn!("frechet: covariance product has eigenvalue {min:.3e}; clamped to zero");
    }
    eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two `[n, d]` feature sets.
pub fn frechet_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (na, d) = rows(a)?;
    let (nb, e) = rows(b)?;
    if d != e {
        return Err(Error::shape("frechet_distance", format!("dimension {d} vs {e}")));
    }
    if na < d + 1 || nb < d + 1 {
        return Err(Error::invalid(format!(
            "Fréchet distance needs at least d + 1 = {} samples per set, got {na} and {nb}",
            d + 1
        )));
    }
    let to_mat = |t: &Tensor<T>, n: usize| DMatrix::from_row_iterator(n, d, t.data().iter().map(|v| v.as_f64()));
    let (ma, ca) = gaussian_fit(&to_mat(a, na));
    let (mb, cb) = gaussian_fit(&to_mat(b, nb));
    let mean_term = (&ma - &mb).norm_squared();
    // Averaging both orderings makes the result exactly symmetric.
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    let fd = mean_term + (ca.trace() + cb.trace()) - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Mean cosine between the encoding of each generated sample and its condition.
pub fn condition_consistency<T: Scalar>(
    generated: &[ModalitySample],
    conditions: &Tensor<T>,
    encoders: &EncoderSet<T>,
) -> Result<f64> {
    let (n, d) = rows(conditions)?;
    if generated.len() != n {
        return Err(Error::shape(
            "condition_consistency",
            format!("{} samples vs {n} conditions", generated.len()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("condition_consistency needs at least one sample"));
    }
    let m = generated[0].modality();
    let refs: Vec<&ModalitySample> = generated.iter().collect();
    let z = encoders.get(m).encode_batch(&refs)?;
    let c = conditions.data();
    let total: f64 = (0..n)
        .map(|i| cosine(&z.data()[i * d..(i + 1) * d], &c[i * d..(i + 1) * d]))
        .sum();
    Ok(total / n as f64)
}

/// Classifier from a payload to the quantized bin of every concept factor.
/// Text needs no training: its attribute tokens are decoded directly.
#[derive(Clone, Debug)]
pub struct ProbeClassifier<T> {
    pub modality: Modality,
    pub params: ParamSet<T>,
    mlp: Option<Mlp>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 600,
            batch: 64,
            lr: 3e-3,
        }
    }
}

fn payload_features<T: Scalar>(samples: &[&ModalitySample]) -> Result<Tensor<T>> {
    let n = samples.len();
    let len = samples[0].modality().payload_len();
    let mut data = Vec::with_capacity(n * len);
    for s in samples {
        let v = s
            .payload
            .as_real()
            .ok_or_else(|| Error::invalid("probe features need a real-valued payload"))?;
        data.extend(v.iter().map(|&x| T::of(x as f64)));
    }
    Tensor::new(vec![n, len], data)
}

impl<T: Scalar> ProbeClassifier<T> {
    /// Trains on `(sample, concept)` pairs of one modality, then freezes.
    pub fn train(
        modality: Modality,
        data: &[(&ModalitySample, &ConceptVector)],
        cfg: &ProbeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        if modality == Modality::Text {
            params.set_frozen(true);
            return Ok(Self {
                modality,
                params,
                mlp: None,
            });
        }
        if data.is_empty() {
            return Err(Error::invalid("probe needs training data"));
        }
        let mut pb = ParamBuilder::random(&mut params, rng);
        let mlp = Mlp::new(&mut pb, "probe", modality.payload_len(), cfg.hidden, CONCEPT_DIM * BINS);
        let mut probe = Self {
            modality,
            params,
            mlp: Some(mlp),
        };
        let mut opt = AdamState::new(&probe.params, AdamConfig::default().with_lr(cfg.lr));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut idx = Vec::with_capacity(cfg.batch);
            while idx.len() < cfg.batch.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let xs: Vec<&ModalitySample> = idx.iter().map(|&i| data[i].0).collect();
            let bins: Vec<[u8; CONCEPT_DIM]> = idx.iter().map(|&i| data[i].1.bins()).collect();
            let mut g = Graph::new();
            let p = g.bind(&probe.params, true);
            let x = g.constant(payload_features(&xs)?);
            let logits = probe.mlp.as_ref().expect("trained probe").forward(&mut g, &p, x)?;
            let b = xs.len();
            let flat = g.reshape(logits, [b * CONCEPT_DIM, BINS])?;
            let lp = log_softmax_rows(&mut g, flat)?;
            let onehot = Tensor::from_fn([b * CONCEPT_DIM, BINS], |i| {
                let (r, k) = (i / BINS, i % BINS);
                if bins[r / CONCEPT_DIM][r % CONCEPT_DIM] as usize == k {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let onehot = g.constant(onehot);
            let picked = g.mul(lp, onehot)?;
            let s = g.sum(picked)?;
            let loss = g.scale(s, T::of(-1.0 / (b * CONCEPT_DIM) as f64))?;
            let grads = g.backward(loss)?;
            opt.step(&mut probe.params, &p.grads(&grads), "probe")?;
        }
        probe.params.set_frozen(true);
        Ok(probe)
    }

    /// Predicted bin per factor; `None` where a text attribute is unreadable.
    pub fn predict(&self, samples: &[&ModalitySample]) -> Result<Vec<[Option<u8>; CONCEPT_DIM]>> {
        if let Some(s) = samples.iter().find(|s| s.modality() != self.modality) {
            return Err(Error::ModalityMismatch {
                expected: self.modality,
                got: s.modality(),
            });
        }
        let Some(mlp) = &self.mlp else {
            return Ok(samples
                .iter()
                .map(|s| decode_text(s.payload.as_tokens().expect("text payload")))
                .collect());
        };
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(payload_features(samples)?);
        let logits = mlp.forward(&mut g, &p, x)?;
        let v = g.value(logits).data();
        Ok(v.chunks(CONCEPT_DIM * BINS)
            .map(|row| {
                let mut out = [None; CONCEPT_DIM];
                for (f, o) in out.iter_mut().enumerate() {
                    let l = &row[f * BINS..(f + 1) * BINS];
                    let best = (0..BINS).fold(0, |b, k| if l[k] > l[b] { k } else { b });
                    *o = Some(best as u8);
                }
                out
            })
            .collect())
    }
}

/// Mean per-factor bin accuracy of the probe on `generated` against the bins
/// of `targets`.
pub fn probe_accuracy<T: Scalar>(
    probe: &ProbeClassifier<T>,
    generated: &[ModalitySample],
    targets: &[ConceptVector],
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::invalid("probe_accuracy needs at least one sample"));
    }
    if generated.len() != targets.len() {
        return Err(Error::shape(
            "probe_accuracy",
            format!("{} samples vs {} targets", generated.len(), targets.len()),
        ));
    }
    let refs: Vec<&ModalitySample> = generated.iter().collect();
    let preds = probe.predict(&refs)?;
    let mut hits = 0;
    for (p, c) in preds.iter().zip(targets) {
        let bins = c.bins();
        hits += p.iter().zip(bins).filter(|(p, b)| **p == Some(*b)).count();
    }
    Ok(hits as f64 / (generated.len() * CONCEPT_DIM) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, sample_concept};
    use crate::rng::rng_from_seed;

    fn unit(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut t = Tensor::randn([n, d], 1.0, &mut rng_from_seed(seed));
        for r in t.data_mut().chunks_mut(d) {
            let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= s);
        }
        t
    }

    #[test]
    fn retrieval_cases() {
        let q = unit(20, 8, 1);
        assert_eq!(retrieval_accuracy(&q, &q, 1).unwrap(), 1.0);
        let g = unit(20, 8, 2);
        assert_eq!(retrieval_accuracy(&q, &g, 20).unwrap(), 1.0);
        assert!(retrieval_accuracy(&q, &unit(19, 8, 2), 1).is_err());
        assert!(retrieval_accuracy(&q, &g, 0).is_err());
    }

    #[test]
    fn frechet_basics() {
        let x = Tensor::<f64>::randn([200, 3], 1.0, &mut rng_from_seed(3));
        assert!(frechet_distance(&x, &x).unwrap() <= 1e-6);
        let y = Tensor::randn([150, 3], 2.0, &mut rng_from_seed(4));
        assert_eq!(frechet_distance(&x, &y).unwrap(), frechet_distance(&y, &x).unwrap());
        assert!(frechet_distance(&x, &y).unwrap() > 0.0);
        assert!(frechet_distance(&x.rows(0, 3), &y).is_err());
    }

    #[test]
    fn frechet_matches_closed_form_for_diagonal_gaussians() {
        // N(0, I) vs N(0, 4I) in d dims: FD = d (1 + 4 - 2*2) = d.
        let x = Tensor::<f64>::randn([20000, 2], 1.0, &mut rng_from_seed(5));
        let y = Tensor::randn([20000, 2], 2.0, &mut rng_from_seed(6));
        let fd = frechet_distance(&x, &y).unwrap();
        assert!((fd - 2.0).abs() < 0.1, "{fd}");
    }

    #[test]
    fn text_probe_reads_tokens_and_image_probe_learns() {
        let mut rng = rng_from_seed(7);
        let concepts: Vec<ConceptVector> = (0..600).map(|_| sample_concept(&mut rng)).collect();
        let text: Vec<ModalitySample> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| render(Modality::Text, c, i))
            .collect();
        let tp = ProbeClassifier::<f32>::train(Modality::Text, &[], &ProbeConfig::default(), &mut rng).unwrap();
        assert_eq!(probe_accuracy(&tp, &text, &concepts).unwrap(), 1.0);

        let imgs: Vec<ModalitySample> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| render(Modality::Image, c, i))
            .collect();
        let train: Vec<_> = imgs[..500].iter().zip(&concepts[..500]).collect();
        let cfg = ProbeConfig {
            steps: 300,
            ..ProbeConfig::default()
        };
        let probe = ProbeClassifier::<f32>::train(Modality::Image, &train, &cfg, &mut rng).unwrap();
        assert!(probe.params.is_frozen());
        let acc = probe_accuracy(&probe, &imgs[500..], &concepts[500..]).unwrap();
        assert!(acc > 0.6, "{acc}");
        assert!(probe_accuracy(&probe, &[], &[]).is_err());
    }
}
