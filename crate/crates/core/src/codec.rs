//! Lossless tokenization of adapters into `[N_w, L_w, C_w]` grids.
//!
//! Each layer's values (A then B, row-major) are cut into tokens of `C_w`
//! values, the last token of a layer zero-padded. Tokens of all layers are laid
//! out in declaration order, `L_w` tokens per grid row; unused trailing slots of
//! the final row are also padding.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::binio::{Tensor, TensorData, WeightFile};
use crate::error::{domain, structural, Error, Result};
use crate::zoo::{LayerSchema, LoraCheckpoint, LoraLayer};

pub const GRID_KIND: &str = "weight_grid";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayout {
    pub layers: Vec<LayerSchema>,
    pub token_len: usize,
    pub row_len: usize,
    pub tokens_per_layer: Vec<usize>,
    pub pad_counts: Vec<usize>,
    /// `(N_w, L_w, C_w)`
    pub grid: (usize, usize, usize),
}

impl WeightLayout {
    pub fn total_tokens(&self) -> usize {
        self.tokens_per_layer.iter().sum()
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, |l| l.a_shape[0])
    }

    /// Flat grid offsets `(start, len)` of each layer's real values; token `t`
    /// of the grid begins at offset `t * C_w`.
    fn layer_spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut token = 0;
        self.layers.iter().zip(&self.tokens_per_layer).map(move |(l, &n)| {
            let start = token * self.token_len;
            token += n;
            (start, l.flat_len())
        })
    }

    /// `true` at padded positions of the flattened grid.
    pub fn pad_mask(&self) -> Vec<bool> {
        let (n, l, c) = self.grid;
        let mut mask = vec![true; n * l * c];
        for (start, len) in self.layer_spans() {
            mask[start..start + len].iter_mut().for_each(|m| *m = false);
        }
        mask
    }

    pub fn grid_len(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }
}

pub fn build_layout(schema: &[LayerSchema], token_len: usize, row_len: usize) -> Result<WeightLayout> {
    if schema.is_empty() {
        return Err(domain!("cannot build a layout for an empty schema"));
    }
    if token_len == 0 || row_len == 0 {
        return Err(domain!("token_len and row_len must be >= 1"));
    }
    let tokens_per_layer: Vec<usize> = schema.iter().map(|l| l.flat_len().div_ceil(token_len)).collect();
    let pad_counts = schema
        .iter()
        .zip(&tokens_per_layer)
        .map(|(l, t)| t * token_len - l.flat_len())
        .collect();
    let total: usize = tokens_per_layer.iter().sum();
    Ok(WeightLayout {
        layers: schema.to_vec(),
        token_len,
        row_len,
        tokens_per_layer,
        pad_counts,
        grid: (total.div_ceil(row_len), row_len, token_len),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTokenGrid {
    /// `[N_w, L_w, C_w]`
    pub values: Array3<f64>,
    pub layout: WeightLayout,
}

pub fn encode(checkpoint: &LoraCheckpoint, layout: &WeightLayout) -> Result<WeightTokenGrid> {
    if checkpoint.schema() != layout.layers {
        return Err(structural!(
            "checkpoint schema does not match the layout ({} vs {} layers)",
            checkpoint.layers.len(),
            layout.layers.len()
        ));
    }
    let mut flat = vec![0.0f64; layout.grid_len()];
    for (layer, (start, len)) in checkpoint.layers.iter().zip(layout.layer_spans()) {
        let dst = &mut flat[start..start + len];
        for (d, v) in dst.iter_mut().zip(layer.a.iter().chain(layer.b.iter())) {
            *d = f64::from(*v);
        }
    }
    Ok(WeightTokenGrid {
        values: Array3::from_shape_vec(layout.grid, flat).expect("grid length matches layout"),
        layout: layout.clone(),
    })
}

/// Inverse of [`encode`]; padded positions are ignored.
pub fn decode_values(values: ArrayView3<f64>, layout: &WeightLayout) -> Result<LoraCheckpoint> {
    if values.dim() != layout.grid {
        return Err(structural!(
            "grid dims {:?} do not match layout {:?}",
            values.dim(),
            layout.grid
        ));
    }
    let flat: Vec<f64> = values.iter().copied().collect();
    let layers = layout
        .layers
        .iter()
        .zip(layout.layer_spans())
        .map(|(s, (start, len))| {
            let vals: Vec<f32> = flat[start..start + len].iter().map(|&v| v as f32).collect();
            let na = s.a_shape[0] * s.a_shape[1];
            LoraLayer {
                name: s.name.clone(),
                a: Array2::from_shape_vec((s.a_shape[0], s.a_shape[1]), vals[..na].to_vec()).expect("A shape"),
                b: Array2::from_shape_vec((s.b_shape[0], s.b_shape[1]), vals[na..].to_vec()).expect("B shape"),
            }
        })
        .collect();
    Ok(LoraCheckpoint {
        task_id: String::new(),
        step_id: 0,
        rank: layout.rank(),
        layers,
    })
}

pub fn decode(grid: &WeightTokenGrid) -> Result<LoraCheckpoint> {
    decode_values(grid.values.view(), &grid.layout)
}

impl WeightTokenGrid {
    pub fn save(&self, path: &Path) -> Result<()> {
        WeightFile {
            kind: GRID_KIND.into(),
            meta: serde_json::to_value(&self.layout)?,
            tensors: vec![Tensor {
                name: "values".into(),
                shape: self.values.shape().to_vec(),
                data: TensorData::F64(self.values.iter().copied().collect()),
            }],
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = WeightFile::load_kind(path, GRID_KIND)?;
        let layout: WeightLayout = serde_json::from_value(f.meta.clone())?;
        let bad = |d: &str| Error::Format {
            path: path.into(),
            detail: d.into(),
        };
        let t = f.tensor("values").ok_or_else(|| bad("missing values tensor"))?;
        let TensorData::F64(v) = &t.data else {
            return Err(bad("grid values must be f64"));
        };
        let values = Array3::from_shape_vec(layout.grid, v.clone()).map_err(|_| bad("grid shape mismatch"))?;
        Ok(Self { values, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn schema_with_flat_lengths() -> Vec<LayerSchema> {
        // 2*3 + 2*2 = 10 and 1*3 + 4*1 = 7
        vec![
            LayerSchema {
                name: "l0".into(),
                a_shape: [2, 3],
                b_shape: [2, 2],
            },
            LayerSchema {
                name: "l1".into(),
                a_shape: [1, 3],
                b_shape: [4, 1],
            },
        ]
    }

    #[test]
    fn segment_counts() {
        let s = schema_with_flat_lengths();
        // oracle: count segments by walking each layer C_w values at a time
        let mut expected_tokens = Vec::new();
        for l in &s {
            let (mut left, mut n) = (l.flat_len() as i64, 0);
            while left > 0 {
                left -= 4;
                n += 1;
            }
            expected_tokens.push(n);
        }
        let lay = build_layout(&s, 4, 2).unwrap();
        assert_eq!(lay.tokens_per_layer, expected_tokens);
        assert_eq!(lay.tokens_per_layer, vec![3, 2]);
        assert_eq!(lay.pad_counts, vec![2, 1]);
        assert_eq!(lay.total_tokens(), 5);
        assert_eq!(lay.grid, (3, 2, 4));
    }

    #[test]
    fn exact_multiple_has_no_pad() {
        let s = vec![LayerSchema {
            name: "x".into(),
            a_shape: [2, 4],
            b_shape: [4, 2],
        }];
        let lay = build_layout(&s, 8, 1).unwrap();
        assert_eq!(lay.pad_counts, vec![0]);
    }

    #[test]
    fn empty_schema_is_rejected() {
        assert!(matches!(build_layout(&[], 4, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn ones_grid_decodes_to_ones() {
        let lay = build_layout(&schema_with_flat_lengths(), 4, 2).unwrap();
        let c = decode_values(Array3::ones(lay.grid).view(), &lay).unwrap();
        assert!(c.flatten().iter().all(|&v| v == 1.0));
        assert!(decode_values(Array3::ones((1, 1, 1)).view(), &lay).is_err());
    }
}
