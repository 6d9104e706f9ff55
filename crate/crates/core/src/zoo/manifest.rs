//! Persisted checkpoint zoos and backbone weight files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{Tensor, TensorData, WeightFile};
use crate::corpus::TaskDataset;
use crate::error::{domain, Error, Result};
use crate::seed;

use super::backbone::{BackboneConfig, BackboneWeights};
use super::lora::LoraCheckpoint;
use super::train::{collect_checkpoints, ZooRecipe};

pub const BACKBONE_KIND: &str = "backbone";

pub fn save_backbone(w: &BackboneWeights, path: &Path) -> Result<()> {
    let tensors = w
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| Tensor {
            name,
            shape,
            data: TensorData::F32(data.to_vec()),
        })
        .collect();
    WeightFile {
        kind: BACKBONE_KIND.into(),
        meta: serde_json::to_value(&w.config)?,
        tensors,
    }
    .save(path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneWeights> {
    let f = WeightFile::load_kind(path, BACKBONE_KIND)?;
    let config: BackboneConfig = serde_json::from_value(f.meta.clone())?;
    let mut w = BackboneWeights::init(&config)?;
    let expected: Vec<(String, Vec<usize>)> = w
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != f.tensors.len() {
        return Err(Error::Format {
            path: path.into(),
            detail: "tensor count does not match the backbone config".into(),
        });
    }
    for ((slot, (name, shape)), t) in w.tensors_mut().into_iter().zip(expected).zip(&f.tensors) {
        match &t.data {
            TensorData::F32(v) if t.name == name && t.shape == shape => slot.copy_from_slice(v),
            _ => {
                return Err(Error::Format {
                    path: path.into(),
                    detail: format!("tensor '{}' does not match expected '{name}' {shape:?}", t.name),
                })
            }
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub pretrain: f64,
    pub finetune: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub task_id: String,
    pub step_id: usize,
    /// Relative to the manifest's directory.
    pub file_path: String,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub learning_rates: LearningRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub backbone: BackboneConfig,
    pub backbone_file: String,
    pub backbone_digest: String,
    pub recipe: ZooRecipe,
    pub entries: Vec<ZooEntry>,
    /// Unix seconds. Excluded from [`ZooManifest::content_hash`].
    pub created_at: u64,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "zoo.json";

impl ZooManifest {
    /// Collects checkpoints for every task and writes them, the backbone and the
    /// manifest under `dir`.
    pub fn collect(
        dir: &Path,
        base: &BackboneWeights,
        tasks: &[TaskDataset],
        recipe: &ZooRecipe,
    ) -> Result<Self> {
        let backbone_file = "backbone.bin";
        save_backbone(base, &dir.join(backbone_file))?;
        let mut entries = Vec::new();
        for task in tasks {
            let ckpts = collect_checkpoints(base, task, recipe).map_err(|e| match e {
                Error::Training { step, detail } => Error::Training {
                    step,
                    detail: format!("task '{}': {detail}", task.task_id),
                },
                other => other,
            })?;
            for c in ckpts {
                let rel = format!("checkpoints/{}/step_{:05}.lora", task.task_id, c.step_id);
                c.save(&dir.join(&rel))?;
                entries.push(ZooEntry {
                    task_id: task.task_id.clone(),
                    step_id: c.step_id,
                    file_path: rel,
                    pretrain_steps: recipe.pretrain.steps,
                    finetune_steps: recipe.finetune.steps,
                    learning_rates: LearningRates {
                        pretrain: recipe.pretrain.lr,
                        finetune: recipe.finetune.lr,
                    },
                });
            }
        }
        let m = Self {
            backbone: base.config.clone(),
            backbone_file: backbone_file.into(),
            backbone_digest: base.digest(),
            recipe: recipe.clone(),
            entries,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            root: dir.to_path_buf(),
        };
        m.save()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a manifest and checks that every referenced file exists and parses.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        m.root = dir.to_path_buf();
        let mut seen = std::collections::HashSet::new();
        for e in &m.entries {
            if !seen.insert((e.task_id.as_str(), e.step_id)) {
                return Err(Error::Format {
                    path: path.clone(),
                    detail: format!("duplicate entry ({}, {})", e.task_id, e.step_id),
                });
            }
            LoraCheckpoint::load(&dir.join(&e.file_path))?;
        }
        Ok(m)
    }

    pub fn backbone(&self) -> Result<BackboneWeights> {
        load_backbone(&self.root.join(&self.backbone_file))
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.task_id) {
                ids.push(e.task_id.clone());
            }
        }
        ids
    }

    pub fn checkpoint_paths(&self, task_id: &str) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.task_id == task_id)
            .map(|e| self.root.join(&e.file_path))
            .collect()
    }

    pub fn load_task(&self, task_id: &str) -> Result<Vec<LoraCheckpoint>> {
        let paths = self.checkpoint_paths(task_id);
        if paths.is_empty() {
            return Err(domain!("zoo has no checkpoints for task '{task_id}'"));
        }
        paths.iter().map(|p| LoraCheckpoint::load(p)).collect()
    }

    /// Hash of the manifest content and every checkpoint payload, ignoring the
    /// creation time.
    pub fn content_hash(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.created_at = 0;
        let mut bytes = serde_json::to_vec(&clone)?;
        for e in &self.entries {
            let p = self.root.join(&e.file_path);
            bytes.extend(std::fs::read(&p).map_err(|err| Error::io(&p, err))?);
        }
        Ok(seed::content_hash(&bytes))
    }
}

/// Mean of several adapters, entry by entry.
pub fn average_adapters(adapters: &[LoraCheckpoint]) -> Result<LoraCheckpoint> {
    let first = adapters.first().ok_or_else(|| domain!("cannot average zero adapters"))?;
    let mut out = first.clone();
    let n = adapters.len() as f32;
    for (li, l) in out.layers.iter_mut().enumerate() {
        let mut a = Array2::zeros(l.a.raw_dim());
        let mut b = Array2::zeros(l.b.raw_dim());
        for c in adapters {
            let cl = c.layers.get(li).filter(|cl| cl.name == l.name && cl.a.dim() == a.dim() && cl.b.dim() == b.dim())
                .ok_or_else(|| domain!("adapters have different schemas"))?;
            a += &cl.a;
            b += &cl.b;
        }
        l.a = a / n;
        l.b = b / n;
    }
    out.task_id = "average".into();
    Ok(out)
}

