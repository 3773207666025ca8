use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render, sample_concept, ConceptVector, Modality, ModalitySample};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainUnimodal,
    TrainPaired,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainUnimodal => "train-unimodal",
            Split::TrainPaired => "train-paired",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train-unimodal" => Ok(Split::TrainUnimodal),
            "train-paired" => Ok(Split::TrainPaired),
            "test" => Ok(Split::Test),
            other => Err(Error::DatasetFormat(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub n_unimodal: usize,
    pub n_paired: usize,
    pub n_test: usize,
}

impl DatasetSizes {
    pub fn total(&self) -> usize {
        self.n_unimodal + self.n_paired + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unimodal == 0 || self.n_paired == 0 || self.n_test == 0 {
            return Err(Error::Split("split sizes must be positive".into()));
        }
        if self.n_unimodal < self.n_paired {
            return Err(Error::Split(format!(
                "unimodal pool ({}) must be at least as large as the paired pool ({})",
                self.n_unimodal, self.n_paired
            )));
        }
        Ok(())
    }
}

/// Concepts with one sample per modality and a split tag per concept.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub sizes: DatasetSizes,
    pub concepts: Vec<ConceptVector>,
    pub splits: Vec<Split>,
    pub image: Vec<ModalitySample>,
    pub audio: Vec<ModalitySample>,
    pub text: Vec<ModalitySample>,
}

/// Concepts `0..n_unimodal` are unimodal training data, the next `n_paired`
/// are paired training data and the remainder is the test split.
pub fn build_dataset(sizes: DatasetSizes, seed: u64) -> Result<Dataset> {
    sizes.validate()?;
    let mut rng = rng_from_seed(seed);
    let concepts: Vec<ConceptVector> = (0..sizes.total()).map(|_| sample_concept(&mut rng)).collect();
    let splits = (0..sizes.total())
        .map(|i| {
            if i < sizes.n_unimodal {
                Split::TrainUnimodal
            } else if i < sizes.n_unimodal + sizes.n_paired {
                Split::TrainPaired
            } else {
                Split::Test
            }
        })
        .collect();
    Dataset::from_concepts(seed, sizes, concepts, splits)
}

impl Dataset {
    /// Renders every modality for `concepts` and checks split consistency.
    pub fn from_concepts(
        seed: u64,
        sizes: DatasetSizes,
        concepts: Vec<ConceptVector>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if concepts.len() != splits.len() {
            return Err(Error::Split(format!(
                "{} concepts but {} split tags",
                concepts.len(),
                splits.len()
            )));
        }
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        let counted = DatasetSizes {
            n_unimodal: count(Split::TrainUnimodal),
            n_paired: count(Split::TrainPaired),
            n_test: count(Split::Test),
        };
        if counted != sizes {
            return Err(Error::Split(format!("split tags give {counted:?}, expected {sizes:?}")));
        }
        let render_all = |m: Modality| -> Vec<ModalitySample> {
            concepts.iter().enumerate().map(|(i, c)| render(m, c, i)).collect()
        };
        Ok(Self {
            seed,
            sizes,
            image: render_all(Modality::Image),
            audio: render_all(Modality::Audio),
            text: render_all(Modality::Text),
            concepts,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn samples(&self, m: Modality) -> &[ModalitySample] {
        match m {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    pub fn sample(&self, m: Modality, concept_id: usize) -> &ModalitySample {
        &self.samples(m)[concept_id]
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// SHA-256 over the manifest records and all payload bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for (i, c) in self.concepts.iter().enumerate() {
            for v in c.0 {
                h.update(v.to_le_bytes());
            }
            h.update(self.splits[i].as_str().as_bytes());
        }
        for m in Modality::ALL {
            for s in self.samples(m) {
                h.update(m.as_str().as_bytes());
                h.update((s.concept_id as u64).to_le_bytes());
                h.update(s.payload.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(u: usize, p: usize, t: usize) -> DatasetSizes {
        DatasetSizes {
            n_unimodal: u,
            n_paired: p,
            n_test: t,
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(build_dataset(sizes(10, 20, 5), 0).is_err());
        assert!(build_dataset(sizes(10, 0, 5), 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let d = build_dataset(sizes(50, 10, 10), 7).unwrap();
        let mut seen = vec![0; d.len()];
        for s in [Split::TrainUnimodal, Split::TrainPaired, Split::Test] {
            for i in d.ids(s) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        for i in d.ids(Split::Test) {
            for m in Modality::ALL {
                assert_eq!(d.sample(m, i).concept_id, i);
            }
        }
    }

    #[test]
    fn inconsistent_split_tags_rejected() {
        let d = build_dataset(sizes(5, 2, 2), 1).unwrap();
        let mut tags = d.splits.clone();
        tags[0] = Split::Test;
        assert!(Dataset::from_concepts(1, d.sizes, d.concepts.clone(), tags).is_err());
    }
}
