//! Hard-gated mixture of per-task experts.
//!
//! A gate classifies a prompt into one of `K` tasks; only the expert for
//! that task is evaluated. The manifest ties the pieces together:
//!
//! ```toml
//! version = 1
//! cfe = true
//! gate = "gate.ckpt"          # optional when there is a single expert
//!
//! [[expert]]
//! id = 0
//! task_id = "vpn"
//! checkpoint = "experts/vpn.ckpt"
//! classes = ["chat", "stream"]
//! ```
//!
//! Paths are relative to the directory holding the manifest.


use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TrafficRecord;
use crate::model::{
    argmax, count_flops, count_params, encode_records, forward, load_checkpoint, softmax_row,
    Checkpoint, ModelConfig, ModelError, ParameterSet, INFER_CHUNK,
};
use crate::training::{make_examples, train_supervised, EpochStats, TrainConfig, TrainError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("expert {id}: {source}")]
    Expert { id: usize, source: ModelError },
    #[error("gate: {0}")]
    Gate(ModelError),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    pub id: usize,
    pub task_id: String,
    pub checkpoint: PathBuf,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertManifest {
    pub version: u32,
    /// Whether prompts carry the contextual fields.
    #[serde(default = "default_cfe")]
    pub cfe: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<PathBuf>,
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertEntry>,
    /// Directory the relative paths hang off; not part of the file.
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_cfe() -> bool {
    true
}

impl ExpertManifest {
    pub fn task_ids(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.task_id.clone()).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Structural checks that need no files.
    pub fn validate(&self) -> Result<(), MoeError> {
        let bad = |m: String| Err(MoeError::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.experts.is_empty() {
            return bad("no experts".into());
        }
        let mut seen = HashSet::new();
        for (i, e) in self.experts.iter().enumerate() {
            if e.id != i {
                return bad(format!("expert ids must run 0..K-1 in order; entry {i} has id {}", e.id));
            }
            if e.classes.is_empty() {
                return bad(format!("expert {i} lists no classes"));
            }
            if !seen.insert(e.task_id.as_str()) {
                return bad(format!("task `{}` has two experts", e.task_id));
            }
        }
        if self.experts.len() > 1 && self.gate.is_none() {
            return bad(format!("{} experts need a gate", self.experts.len()));
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &ExpertManifest, path: &Path) -> Result<(), MoeError> {
    manifest.validate()?;
    let text = toml::to_string(manifest).map_err(|e| MoeError::Manifest(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses and validates a manifest, including the checkpoints it names.
pub fn load_manifest(path: &Path) -> Result<ExpertManifest, MoeError> {
    let text = std::fs::read_to_string(path)?;
    let mut m: ExpertManifest = toml::from_str(&text).map_err(|e| MoeError::Manifest(e.to_string()))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    MixtureOfExperts::from_manifest(m.clone())?;
    Ok(m)
}

/// One-hot expert selection.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Exactly one entry is 1.
    pub onehot: Vec<u8>,
    pub chosen: usize,
    /// Softmax of the gate logits; diagnostic only.
    pub posterior: Vec<f32>,
}

impl GateDecision {
    fn from_logits(logits: &[f32]) -> Self {
        let chosen = argmax(logits);
        let mut onehot = vec![0; logits.len()];
        onehot[chosen] = 1;
        Self {
            onehot,
            chosen,
            posterior: softmax_row(logits),
        }
    }
}

/// Result of classifying one record.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub expert: usize,
    pub task_id: String,
    pub class: String,
    pub class_index: usize,
    /// Softmax probability of the chosen class.
    pub posterior: f32,
    pub logits: Vec<f32>,
    pub gate: GateDecision,
}

/// Per-classification compute: the gate plus the one selected expert.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub gate_flops: u64,
    pub expert_flops: Vec<u64>,
    pub gate_params: u64,
    pub expert_params: Vec<u64>,
}

impl FlopReport {
    /// FLOPs when `expert` is selected.
    pub fn per_classification(&self, expert: usize) -> u64 {
        self.gate_flops + self.expert_flops[expert]
    }

    /// Parameters touched when `expert` is selected.
    pub fn activated_params(&self, expert: usize) -> u64 {
        self.gate_params + self.expert_params[expert]
    }

    pub fn total_params(&self) -> u64 {
        self.gate_params + self.expert_params.iter().sum::<u64>()
    }
}

/// Loaded gate and experts; immutable once built.
#[derive(Clone, Debug)]
pub struct MixtureOfExperts {
    pub manifest: ExpertManifest,
    pub gate: Option<ParameterSet>,
    pub experts: Vec<ParameterSet>,
}

impl MixtureOfExperts {
    pub fn load(path: &Path) -> Result<Self, MoeError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: ExpertManifest = toml::from_str(&text).map_err(|e| MoeError::Manifest(e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(m)
    }

    /// Loads every checkpoint named by `manifest` and checks the head sizes.
    pub fn from_manifest(manifest: ExpertManifest) -> Result<Self, MoeError> {
        manifest.validate()?;
        let k = manifest.experts.len();
        let gate = match &manifest.gate {
            Some(p) if k > 1 => {
                let ck = load_checkpoint(&manifest.resolve(p)).map_err(MoeError::Gate)?;
                if ck.params.config().n_classes != k {
                    return Err(MoeError::Manifest(format!(
                        "gate head has {} outputs for {k} experts",
                        ck.params.config().n_classes
                    )));
                }
                Some(ck.params)
            }
            _ => None,
        };
        let mut experts = Vec::with_capacity(k);
        for e in &manifest.experts {
            let ck = load_checkpoint(&manifest.resolve(&e.checkpoint))
                .map_err(|source| MoeError::Expert { id: e.id, source })?;
            if ck.classes != e.classes {
                return Err(MoeError::Manifest(format!(
                    "expert {} classes {:?} disagree with its checkpoint {:?}",
                    e.id, e.classes, ck.classes
                )));
            }
            experts.push(ck.params);
        }
        Ok(Self {
            manifest,
            gate,
            experts,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    /// Gate decisions for `records`, batched.
    pub fn route_all(&self, records: &[TrafficRecord]) -> Result<Vec<GateDecision>, MoeError> {
        match &self.gate {
            None => Ok(records.iter().map(|_| GateDecision::from_logits(&[0.0])).collect()),
            Some(g) => Ok(logits_for(g, records, self.manifest.cfe)
                .map_err(MoeError::Gate)?
                .iter()
                .map(|z| GateDecision::from_logits(z))
                .collect()),
        }
    }

    pub fn route(&self, record: &TrafficRecord) -> Result<GateDecision, MoeError> {
        Ok(self.route_all(std::slice::from_ref(record))?.remove(0))
    }

    /// Classifies `record` with the selected expert alone.
    pub fn classify(&self, record: &TrafficRecord) -> Result<Classification, MoeError> {
        Ok(self.classify_all(std::slice::from_ref(record))?.remove(0))
    }

    /// Batched [`Self::classify`]; records are grouped by selected expert.
    pub fn classify_all(&self, records: &[TrafficRecord]) -> Result<Vec<Classification>, MoeError> {
        let decisions = self.route_all(records)?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, d) in decisions.iter().enumerate() {
            groups.entry(d.chosen).or_default().push(i);
        }
        let mut logits: Vec<Vec<f32>> = vec![Vec::new(); records.len()];
        for (&e, idx) in &groups {
            let subset: Vec<TrafficRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            let z = self.expert_logits(e, &subset)?;
            for (&i, row) in idx.iter().zip(z) {
                logits[i] = row;
            }
        }
        Ok(decisions
            .into_iter()
            .zip(logits)
            .map(|(gate, logits)| {
                let entry = &self.manifest.experts[gate.chosen];
                let c = argmax(&logits);
                Classification {
                    expert: gate.chosen,
                    task_id: entry.task_id.clone(),
                    class: entry.classes[c].clone(),
                    class_index: c,
                    posterior: softmax_row(&logits)[c],
                    logits,
                    gate,
                }
            })
            .collect())
    }

    /// Logits of expert `id` alone, bypassing the gate.
    pub fn expert_logits(&self, id: usize, records: &[TrafficRecord]) -> Result<Vec<Vec<f32>>, MoeError> {
        let params = self
            .experts
            .get(id)
            .ok_or_else(|| MoeError::Contract(format!("no expert {id}")))?;
        logits_for(params, records, self.manifest.cfe).map_err(|source| MoeError::Expert { id, source })
    }

    pub fn flop_report(&self, seq_len: usize) -> Result<FlopReport, MoeError> {
        let gate_cfg = self.gate.as_ref().map(|g| g.config());
        let gate_flops = match gate_cfg {
            Some(c) => count_flops(c, seq_len).map_err(MoeError::Gate)?.total(),
            None => 0,
        };
        let mut expert_flops = Vec::with_capacity(self.k());
        for (id, e) in self.experts.iter().enumerate() {
            let f = count_flops(e.config(), seq_len).map_err(|source| MoeError::Expert { id, source })?;
            expert_flops.push(f.total());
        }
        Ok(FlopReport {
            seq_len,
            gate_flops,
            expert_flops,
            gate_params: gate_cfg.map_or(0, count_params),
            expert_params: self.experts.iter().map(|e| count_params(e.config())).collect(),
        })
    }
}

fn logits_for(params: &ParameterSet, records: &[TrafficRecord], cfe: bool) -> Result<Vec<Vec<f32>>, ModelError> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(INFER_CHUNK) {
        let z = forward(params, &encode_records(chunk, cfe, params.config().max_seq)?)?;
        out.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    Ok(out)
}

/// Trains a task classifier over `tasks` (manifest order). The head size
/// is forced to `K`. A single task needs no gate and yields `None`.
pub fn train_gate(
    records: &[TrafficRecord],
    tasks: &[String],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    cfe: bool,
) -> Result<Option<(Checkpoint, Vec<EpochStats>)>, MoeError> {
    if tasks.is_empty() {
        return Err(MoeError::Contract("gate needs at least one task".into()));
    }
    if tasks.len() == 1 {
        return Ok(None);
    }
    let index: BTreeMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    if index.len() != tasks.len() {
        return Err(MoeError::Contract("duplicate task ids".into()));
    }
    let data = make_examples(records, cfe, |r| index.get(r.task_id.as_str()).copied())?;
    let gate_cfg = ModelConfig {
        n_classes: tasks.len(),
        ..model_cfg.clone()
    };
    let (params, trace) = train_supervised(&data, &gate_cfg, cfg)?;
    let ck = Checkpoint::new(params, tasks.to_vec()).map_err(MoeError::Gate)?;
    Ok(Some((ck, trace)))
}
