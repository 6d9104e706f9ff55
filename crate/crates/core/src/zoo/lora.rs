//! LoRA adapters on the query and value projections, merging, and the
//! adapter file format.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{Tensor, TensorData, WeightFile};
use crate::error::{structural, Error, Result};

use super::backbone::{uniform_matrix, BackboneConfig, BackboneWeights};

pub const CHECKPOINT_KIND: &str = "lora_checkpoint";

/// Low-rank update for one projection: `ΔW = B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    /// `[r, k]`
    pub a: Array2<f32>,
    /// `[d, r]`
    pub b: Array2<f32>,
}

impl LoraLayer {
    pub fn delta(&self) -> Array2<f32> {
        self.b.dot(&self.a)
    }
}

/// Name and shapes of one adapted layer: `(name, [r, k], [d, r])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchema {
    pub name: String,
    pub a_shape: [usize; 2],
    pub b_shape: [usize; 2],
}

impl LayerSchema {
    pub fn flat_len(&self) -> usize {
        self.a_shape[0] * self.a_shape[1] + self.b_shape[0] * self.b_shape[1]
    }
}

/// Canonical adapter layout for a backbone: q then v for every layer.
pub fn adapter_schema(config: &BackboneConfig, rank: usize) -> Result<Vec<LayerSchema>> {
    let d = config.d_model;
    if rank == 0 || rank * 4 > d {
        return Err(structural!(
            "rank {rank} must satisfy 1 <= r <= min(d, k)/4 = {}",
            d / 4
        ));
    }
    Ok((0..config.n_layers)
        .flat_map(|i| {
            ["q", "v"].into_iter().map(move |p| LayerSchema {
                name: format!("layers.{i}.attn.{p}"),
                a_shape: [rank, d],
                b_shape: [d, rank],
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraCheckpoint {
    pub task_id: String,
    pub step_id: usize,
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
}

impl LoraCheckpoint {
    /// Standard init: `B = 0`, `A ~ U(-1/√k, 1/√k)`. The delta is exactly zero.
    pub fn init(config: &BackboneConfig, rank: usize, seed: u64) -> Result<Self> {
        let schema = adapter_schema(config, rank)?;
        let mut rng = crate::seed::rng(crate::seed::derive(seed, "lora-init"));
        let layers = schema
            .iter()
            .map(|s| LoraLayer {
                name: s.name.clone(),
                a: uniform_matrix(&mut rng, s.a_shape[0], s.a_shape[1], 1.0 / (s.a_shape[1] as f32).sqrt()),
                b: Array2::zeros((s.b_shape[0], s.b_shape[1])),
            })
            .collect();
        Ok(Self {
            task_id: String::new(),
            step_id: 0,
            rank,
            layers,
        })
    }

    pub fn zeros(config: &BackboneConfig, rank: usize) -> Result<Self> {
        let layers = adapter_schema(config, rank)?
            .iter()
            .map(|s| LoraLayer {
                name: s.name.clone(),
                a: Array2::zeros((s.a_shape[0], s.a_shape[1])),
                b: Array2::zeros((s.b_shape[0], s.b_shape[1])),
            })
            .collect();
        Ok(Self {
            task_id: String::new(),
            step_id: 0,
            rank,
            layers,
        })
    }

    pub fn schema(&self) -> Vec<LayerSchema> {
        self.layers
            .iter()
            .map(|l| LayerSchema {
                name: l.name.clone(),
                a_shape: [l.a.nrows(), l.a.ncols()],
                b_shape: [l.b.nrows(), l.b.ncols()],
            })
            .collect()
    }

    /// All adapter values in codec order: per layer, `A` then `B`, row-major.
    pub fn flatten(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.a.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.a.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn to_file(&self) -> WeightFile {
        let tensors = self
            .layers
            .iter()
            .flat_map(|l| {
                [
                    Tensor {
                        name: format!("{}.A", l.name),
                        shape: l.a.shape().to_vec(),
                        data: TensorData::F32(l.a.iter().copied().collect()),
                    },
                    Tensor {
                        name: format!("{}.B", l.name),
                        shape: l.b.shape().to_vec(),
                        data: TensorData::F32(l.b.iter().copied().collect()),
                    },
                ]
            })
            .collect();
        WeightFile {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({
                "task_id": self.task_id,
                "step_id": self.step_id,
                "rank": self.rank,
            }),
            tensors,
        }
    }

    pub fn from_file(f: &WeightFile, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.into(),
            detail,
        };
        if f.kind != CHECKPOINT_KIND {
            return Err(bad(format!("expected {CHECKPOINT_KIND}, found {}", f.kind)));
        }
        let task_id = f.meta["task_id"].as_str().unwrap_or_default().to_string();
        let step_id = f.meta["step_id"].as_u64().ok_or_else(|| bad("missing step_id".into()))? as usize;
        let rank = f.meta["rank"].as_u64().ok_or_else(|| bad("missing rank".into()))? as usize;
        if !f.tensors.len().is_multiple_of(2) {
            return Err(bad("odd number of adapter tensors".into()));
        }
        let to_arr = |t: &Tensor| -> Result<Array2<f32>> {
            let TensorData::F32(v) = &t.data else {
                return Err(bad(format!("{} is not f32", t.name)));
            };
            if t.shape.len() != 2 {
                return Err(bad(format!("{} is not a matrix", t.name)));
            }
            Array2::from_shape_vec((t.shape[0], t.shape[1]), v.clone()).map_err(|e| bad(e.to_string()))
        };
        let layers = f
            .tensors
            .chunks_exact(2)
            .map(|pair| {
                let name = pair[0]
                    .name
                    .strip_suffix(".A")
                    .ok_or_else(|| bad(format!("expected an A tensor, got {}", pair[0].name)))?;
                if pair[1].name != format!("{name}.B") {
                    return Err(bad(format!("expected {name}.B, got {}", pair[1].name)));
                }
                Ok(LoraLayer {
                    name: name.to_string(),
                    a: to_arr(&pair[0])?,
                    b: to_arr(&pair[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task_id,
            step_id,
            rank,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightFile::load(path)?, path)
    }
}

/// Parses `layers.{i}.attn.{q|v}`.
fn parse_target(name: &str) -> Option<(usize, char)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, proj) = rest.split_once(".attn.")?;
    let proj = match proj {
        "q" => 'q',
        "v" => 'v',
        _ => return None,
    };
    Some((idx.parse().ok()?, proj))
}

/// Effective weights `W₀ + B·A` for every adapted layer. Other weights are
/// copied unchanged.
pub fn merge(base: &BackboneWeights, adapter: &LoraCheckpoint) -> Result<BackboneWeights> {
    let mut out = base.clone();
    for l in &adapter.layers {
        let (i, proj) = parse_target(&l.name)
            .filter(|(i, _)| *i < base.layers.len())
            .ok_or_else(|| structural!("adapter layer '{}' does not exist in the backbone", l.name))?;
        let target = match proj {
            'q' => &mut out.layers[i].wq,
            _ => &mut out.layers[i].wv,
        };
        let (d, k) = target.dim();
        if l.b.nrows() != d || l.a.ncols() != k || l.b.ncols() != l.a.nrows() {
            return Err(structural!(
                "layer '{}': B {:?} · A {:?} does not fit W {:?}",
                l.name,
                l.b.dim(),
                l.a.dim(),
                (d, k)
            ));
        }
        *target += &l.delta();
    }
    Ok(out)
}
