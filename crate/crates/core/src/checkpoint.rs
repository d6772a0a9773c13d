//! On-disk checkpoints: a JSON `manifest` and a flat `tensors.bin` of
//! little-endian f32 values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CandidateGrid;
use crate::importance::{AggregationScheme, ImportanceScores, PermutationRecord, RpdReport};
use crate::model::{LoraAdapterSet, LoraSpec, SuperNetConfig, SuperNetWeights};
use crate::numerics::Tensor;
use crate::search::{SearchSpace, SubNetworkConfig};
use crate::train::{TrainConfig, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest";
pub const TENSORS: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub pretrain_steps: usize,
    pub epochs_done: usize,
    pub steps: usize,
    pub config: Option<TrainConfig>,
    pub report: Option<TrainReport>,
}

/// Everything in the manifest besides the model shape and tensor table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Metadata {
    pub seed: Option<u64>,
    pub space: Option<SearchSpace>,
    pub scheme: Option<AggregationScheme>,
    pub scores: Option<ImportanceScores>,
    pub permutation: Option<PermutationRecord>,
    pub rpd: Option<RpdReport>,
    pub grid: Option<CandidateGrid>,
    pub training: Option<TrainingMeta>,
    /// Set on standalone sub-networks.
    pub extracted_from: Option<SubNetworkConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: SuperNetConfig,
    pub block_rank: Option<Vec<usize>>,
    pub lora: Option<LoraSpec>,
    #[serde(flatten)]
    pub meta: Metadata,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: SuperNetWeights<f32>,
    pub meta: Metadata,
}

/// Writes `tensors.bin` then `manifest` into `dir`, creating it if needed.
pub fn save(dir: &Path, weights: &SuperNetWeights<f32>, meta: &Metadata) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut table = Vec::new();
    let mut bytes = Vec::with_capacity(4 * weights.num_params());
    for (name, t) in weights.named_tensors() {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        table.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    fs::write(dir.join(TENSORS), &bytes)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: weights.cfg.clone(),
        block_rank: weights.block_rank.clone(),
        lora: weights.lora.as_ref().map(|l| l.spec),
        meta: meta.clone(),
        tensors: table,
    };
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads only the manifest, after checking its schema version.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptTable("manifest has no schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::UnknownVersion(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    Ok(serde_json::from_value(raw)?)
}

fn check_table(m: &Manifest) -> Result<()> {
    let mut expected: BTreeMap<String, Vec<usize>> = SuperNetWeights::<f32>::expected_shapes(&m.config)
        .into_iter()
        .collect();
    if let Some(spec) = m.lora {
        expected.extend(LoraAdapterSet::<f32>::expected_shapes(&m.config, spec.rank));
    }
    let mut seen = BTreeSet::new();
    let mut end = 0u64;
    for e in &m.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::CorruptTable(format!("duplicate entry `{}`", e.name)));
        }
        match expected.get(&e.name) {
            None => return Err(Error::CorruptTable(format!("unexpected entry `{}`", e.name))),
            Some(s) if *s != e.shape => {
                return Err(Error::CorruptTable(format!(
                    "entry `{}` has shape {:?}, config implies {:?}",
                    e.name, e.shape, s
                )))
            }
            _ => {}
        }
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(Error::CorruptTable(format!(
                "entry `{}` spans {} bytes for {} values",
                e.name, e.length, numel
            )));
        }
        if e.offset < end {
            return Err(Error::CorruptTable(format!("entry `{}` overlaps its predecessor", e.name)));
        }
        end = e.offset + e.length;
    }
    if let Some(missing) = expected.keys().find(|k| !seen.contains(k.as_str())) {
        return Err(Error::CorruptTable(format!("missing entry `{missing}`")));
    }
    Ok(())
}

/// Validates version and tensor table before reading any tensor bytes.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    check_table(&m)?;
    let actual = fs::metadata(dir.join(TENSORS))?.len();
    for e in &m.tensors {
        if e.offset + e.length > actual {
            return Err(Error::ShortFile {
                entry: e.name.clone(),
                needed: e.offset + e.length,
                actual,
            });
        }
    }
    let bytes = fs::read(dir.join(TENSORS))?;
    let mut tensors = BTreeMap::new();
    for e in &m.tensors {
        let raw = &bytes[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let weights = SuperNetWeights::from_named(m.config, tensors, m.block_rank, m.lora)?;
    Ok(Checkpoint { weights, meta: m.meta })
}
