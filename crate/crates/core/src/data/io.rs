//! Directory format for datasets and generated samples.
//!
//! ```text
//! <dir>/dataset.json       {"format_version":1,"seed":..,"sizes":{..},"digest":".."}
//! <dir>/concepts.bin       n x 8 f64, little endian, concept order
//! <dir>/manifest.jsonl     one record per sample (see SampleRecord)
//! <dir>/<modality>/<id>.bin
//!     image: 256 f32 LE (row major 16x16)
//!     audio:  64 f32 LE
//!     text:   12 u32 LE token ids
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConceptVector, Dataset, DatasetSizes, Modality, ModalitySample, Payload, Split, CONCEPT_DIM};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub modality: Modality,
    pub concept_id: usize,
    pub split: String,
    /// Payload path relative to the manifest directory.
    pub payload: String,
    /// Condition modalities used to generate the sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<Modality>>,
    /// Concept each condition was rendered from, aligned with `conditions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_concepts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    seed: u64,
    sizes: DatasetSizes,
    digest: String,
}

fn payload_path(m: Modality, idx: usize) -> String {
    format!("{}/{idx:06}.bin", m.as_str())
}

/// Writes payload files and a manifest for arbitrary samples.
pub fn write_samples(dir: &Path, samples: &[(SampleRecord, &Payload)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for (rec, payload) in samples {
        let path = dir.join(&rec.payload);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, payload.to_le_bytes())?;
        serde_json::to_writer(&mut manifest, rec)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut concepts = Vec::with_capacity(ds.len() * CONCEPT_DIM * 8);
    for c in &ds.concepts {
        for v in c.0 {
            concepts.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("concepts.bin"), concepts)?;

    let mut records = Vec::new();
    for m in Modality::ALL {
        for s in ds.samples(m) {
            records.push((
                SampleRecord {
                    modality: m,
                    concept_id: s.concept_id,
                    split: ds.splits[s.concept_id].as_str().to_string(),
                    payload: payload_path(m, s.concept_id),
                    conditions: None,
                    condition_concepts: None,
                    alpha: None,
                },
                &s.payload,
            ));
        }
    }
    write_samples(dir, &records)?;

    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        seed: ds.seed,
        sizes: ds.sizes,
        digest: ds.digest(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a directory written by [`export_dataset`], rejecting concepts that
/// appear in more than one split and payloads that differ from a fresh render.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::DatasetFormat(format!(
            "format version {} unsupported",
            meta.format_version
        )));
    }
    let raw = fs::read(dir.join("concepts.bin"))?;
    if raw.len() != meta.sizes.total() * CONCEPT_DIM * 8 {
        return Err(Error::DatasetFormat("concepts.bin has the wrong length".into()));
    }
    let concepts: Vec<ConceptVector> = raw
        .chunks_exact(CONCEPT_DIM * 8)
        .map(|chunk| {
            let mut c = [0.0; CONCEPT_DIM];
            for (v, b) in c.iter_mut().zip(chunk.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            ConceptVector(c)
        })
        .collect();

    let mut split_of: BTreeMap<usize, Split> = BTreeMap::new();
    let mut payloads: BTreeMap<(Modality, usize), Payload> = BTreeMap::new();
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        let split = Split::parse(&rec.split)?;
        if rec.concept_id >= concepts.len() {
            return Err(Error::DatasetFormat(format!(
                "concept id {} out of range",
                rec.concept_id
            )));
        }
        if let Some(prev) = split_of.insert(rec.concept_id, split) {
            if prev != split {
                return Err(Error::Split(format!(
                    "concept {} appears in both {} and {}",
                    rec.concept_id,
                    prev.as_str(),
                    split.as_str()
                )));
            }
        }
        let bytes = fs::read(dir.join(&rec.payload))?;
        payloads.insert(
            (rec.modality, rec.concept_id),
            Payload::from_le_bytes(rec.modality, &bytes)?,
        );
    }
    if split_of.len() != concepts.len() {
        return Err(Error::DatasetFormat("manifest does not cover every concept".into()));
    }
    let splits: Vec<Split> = split_of.into_values().collect();
    let ds = Dataset::from_concepts(meta.seed, meta.sizes, concepts, splits)?;
    for m in Modality::ALL {
        for s in ds.samples(m) {
            let stored = payloads
                .get(&(m, s.concept_id))
                .ok_or_else(|| Error::DatasetFormat(format!("missing {m} sample for concept {}", s.concept_id)))?;
            if *stored != s.payload {
                return Err(Error::DatasetFormat(format!(
                    "{m} payload of concept {} differs from its render",
                    s.concept_id
                )));
            }
        }
    }
    if ds.digest() != meta.digest {
        return Err(Error::DatasetFormat("digest mismatch".into()));
    }
    Ok(ds)
}

/// Samples with their manifest records, read back from a sample directory.
pub fn read_samples(dir: &Path) -> Result<Vec<(SampleRecord, ModalitySample)>> {
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        let payload = Payload::from_le_bytes(rec.modality, &fs::read(dir.join(&rec.payload))?)?;
        let concept_id = rec.concept_id;
        out.push((rec, ModalitySample { payload, concept_id }));
    }
    Ok(out)
}
