//! Cascaded hyper-convolutional decoder: condition tensors `[B, N, L, C]` to
//! weight grids `[B, N_w, L_w, C_w]`.
//!
//! Each block runs two branches, width-then-height and height-then-width, sums
//! them with a learnable bias, divides by three and applies a layer-wise conv:
//!
//! ```text
//! c_W = Conv¹_H(Conv¹_W(x))
//! c_H = Conv²_W(Conv²_H(x))
//! y   = Conv_L((c_W + c_H + b) / 3)
//! ```
//!
//! Width convs resize `C`, height convs resize `L`, and the layer-wise conv
//! resizes `N`, so both branches end at `(N, L', C')`. GELU follows each
//! branch conv when activations are enabled; `Conv_L` is linear.

pub mod conv;

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::binio::{Tensor, TensorData, WeightFile};
use crate::error::{structural, Error, Result};
use crate::seed;

pub use conv::{ConvCache, ConvRole, Dims, PlaneConv};

pub const DECODER_KIND: &str = "hyper_decoder";

fn default_kernel() -> (usize, usize) {
    (3, 3)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_dims: Dims,
    pub out_dims: Dims,
    /// `(k_L, k_C)` for the width convs.
    #[serde(default = "default_kernel")]
    pub kernel_w: (usize, usize),
    /// `(k_L, k_N)` for the height convs.
    #[serde(default = "default_kernel")]
    pub kernel_h: (usize, usize),
    /// `(k_N, k_L)` for the layer-wise conv.
    #[serde(default = "default_kernel")]
    pub kernel_l: (usize, usize),
}

impl BlockSpec {
    pub fn new(in_dims: Dims, out_dims: Dims) -> Self {
        Self {
            in_dims,
            out_dims,
            kernel_w: default_kernel(),
            kernel_h: default_kernel(),
            kernel_l: default_kernel(),
        }
    }

    pub fn with_kernels(mut self, k: (usize, usize)) -> Self {
        self.kernel_w = k;
        self.kernel_h = k;
        self.kernel_l = k;
        self
    }

    /// Shape of the summed branches, `(N, L', C')`.
    pub fn branch_dims(&self) -> Dims {
        (self.in_dims.0, self.out_dims.1, self.out_dims.2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// `(N, L, C)` of the condition embedding.
    pub input: Dims,
    /// Learnable linear projection of `L` to this length before the blocks.
    #[serde(default)]
    pub front_len: Option<usize>,
    pub blocks: Vec<BlockSpec>,
    #[serde(default = "yes")]
    pub activation: bool,
}

fn yes() -> bool {
    true
}

impl DecoderSpec {
    /// Dims entering the first block.
    pub fn front_dims(&self) -> Dims {
        match self.front_len {
            Some(l) => (self.input.0, l, self.input.2),
            None => self.input,
        }
    }

    pub fn output_dims(&self) -> Dims {
        self.blocks.last().map_or(self.front_dims(), |b| b.out_dims)
    }

    /// A chain through the given stage dims, 3×3 kernels throughout.
    pub fn chain(input: Dims, front_len: Option<usize>, stages: &[Dims]) -> Self {
        let mut prev = match front_len {
            Some(l) => (input.0, l, input.2),
            None => input,
        };
        let blocks = stages
            .iter()
            .map(|&s| {
                let b = BlockSpec::new(prev, s);
                prev = s;
                b
            })
            .collect();
        Self {
            input,
            front_len,
            blocks,
            activation: true,
        }
    }
}

/// First violation found by [`validate_spec`]. `block` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecDiagnostic {
    pub block: Option<usize>,
    pub message: String,
}

impl fmt::Display for SpecDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "block {b}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks dim chaining, kernel sizes, branch shape equality and (when given)
/// that the final output equals the grid dims.
pub fn validate_spec(spec: &DecoderSpec, grid: Option<Dims>) -> std::result::Result<(), SpecDiagnostic> {
    let diag = |block: Option<usize>, message: String| Err(SpecDiagnostic { block, message });
    let positive = |d: Dims| d.0 > 0 && d.1 > 0 && d.2 > 0;
    if !positive(spec.input) || spec.front_len == Some(0) {
        return diag(None, format!("input dims {:?} must be positive", spec.input));
    }
    if spec.blocks.is_empty() {
        return diag(None, "decoder has no blocks".into());
    }
    let mut prev = spec.front_dims();
    for (i, b) in spec.blocks.iter().enumerate() {
        let idx = Some(i + 1);
        if !positive(b.out_dims) {
            return diag(idx, format!("output dims {:?} must be positive", b.out_dims));
        }
        if b.in_dims != prev {
            return diag(
                idx,
                format!("expects input {:?} but the previous stage emits {:?}", b.in_dims, prev),
            );
        }
        for (name, k) in [("width", b.kernel_w), ("height", b.kernel_h), ("layer", b.kernel_l)] {
            if k.0 == 0 || k.1 == 0 || k.0 % 2 == 0 || k.1 % 2 == 0 {
                return diag(idx, format!("{name} kernel {k:?} must be odd and positive"));
            }
        }
        let (n, l, c) = b.in_dims;
        let (_, l2, c2) = b.out_dims;
        let width_branch = ConvRole::Height.output_dims(ConvRole::Width.output_dims((n, l, c), c2), l2);
        let height_branch = ConvRole::Width.output_dims(ConvRole::Height.output_dims((n, l, c), l2), c2);
        if width_branch != height_branch || width_branch != b.branch_dims() {
            return diag(
                idx,
                format!("branch shapes differ: {width_branch:?} vs {height_branch:?}"),
            );
        }
        prev = b.out_dims;
    }
    if let Some(g) = grid {
        if prev != g {
            return diag(
                None,
                format!("decoder emits {prev:?} but the weight grid is {g:?}"),
            );
        }
    }
    Ok(())
}

#[inline]
fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub conv_w1: PlaneConv,
    pub conv_h1: PlaneConv,
    pub conv_h2: PlaneConv,
    pub conv_w2: PlaneConv,
    pub conv_l: PlaneConv,
    /// `[N, L', C']`
    pub bias: Array3<f64>,
}

struct BlockCache {
    w1: ConvCache,
    a1: Vec<f64>,
    h1: ConvCache,
    a2: Vec<f64>,
    h2: ConvCache,
    b1: Vec<f64>,
    w2: ConvCache,
    b2: Vec<f64>,
    l: ConvCache,
}

impl Block {
    fn new<R: rand::Rng>(spec: &BlockSpec, rng: &mut R) -> Self {
        let (n, l, c) = spec.in_dims;
        let (n2, l2, c2) = spec.out_dims;
        let mid_w = (n, l, c2);
        let mid_h = (n, l2, c);
        let branch = (n, l2, c2);
        Self {
            conv_w1: PlaneConv::new(ConvRole::Width, spec.in_dims, mid_w, spec.kernel_w, rng),
            conv_h1: PlaneConv::new(ConvRole::Height, mid_w, branch, spec.kernel_h, rng),
            conv_h2: PlaneConv::new(ConvRole::Height, spec.in_dims, mid_h, spec.kernel_h, rng),
            conv_w2: PlaneConv::new(ConvRole::Width, mid_h, branch, spec.kernel_w, rng),
            conv_l: PlaneConv::new(ConvRole::Layer, branch, (n2, l2, c2), spec.kernel_l, rng),
            bias: Array3::zeros(branch),
            spec: spec.clone(),
        }
    }

    fn convs(&self) -> [&PlaneConv; 5] {
        [&self.conv_w1, &self.conv_h1, &self.conv_h2, &self.conv_w2, &self.conv_l]
    }

    fn forward(&self, x: &[f64], act: bool) -> (Vec<f64>, BlockCache) {
        let f = |v: &[f64]| -> Vec<f64> {
            if act {
                v.iter().map(|&u| gelu(u)).collect()
            } else {
                v.to_vec()
            }
        };
        let (a1, w1) = self.conv_w1.forward(x);
        let (a2, h1) = self.conv_h1.forward(&f(&a1));
        let (b1, h2) = self.conv_h2.forward(x);
        let (b2, w2) = self.conv_w2.forward(&f(&b1));
        let (cw, ch) = (f(&a2), f(&b2));
        let bias = self.bias.as_slice().expect("standard layout");
        let s: Vec<f64> = (0..cw.len()).map(|i| (cw[i] + ch[i] + bias[i]) / 3.0).collect();
        let (y, l) = self.conv_l.forward(&s);
        (
            y,
            BlockCache {
                w1,
                a1,
                h1,
                a2,
                h2,
                b1,
                w2,
                b2,
                l,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dy: &[f64], grads: &mut Block, act: bool) -> Vec<f64> {
        let through = |d: Vec<f64>, pre: &[f64]| -> Vec<f64> {
            if act {
                d.iter().zip(pre).map(|(g, &u)| g * gelu_grad(u)).collect()
            } else {
                d
            }
        };
        let ds: Vec<f64> = self
            .conv_l
            .backward(&cache.l, dy, &mut grads.conv_l.weight)
            .into_iter()
            .map(|g| g / 3.0)
            .collect();
        for (gb, d) in grads.bias.iter_mut().zip(&ds) {
            *gb += d;
        }
        let da2 = through(ds.clone(), &cache.a2);
        let dg1 = self.conv_h1.backward(&cache.h1, &da2, &mut grads.conv_h1.weight);
        let da1 = through(dg1, &cache.a1);
        let mut dx = self.conv_w1.backward(&cache.w1, &da1, &mut grads.conv_w1.weight);
        let db2 = through(ds, &cache.b2);
        let dg3 = self.conv_w2.backward(&cache.w2, &db2, &mut grads.conv_w2.weight);
        let db1 = through(dg3, &cache.b1);
        let dx2 = self.conv_h2.backward(&cache.h2, &db1, &mut grads.conv_h2.weight);
        for (a, b) in dx.iter_mut().zip(dx2) {
            *a += b;
        }
        dx
    }
}

/// Decoder parameters. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperDecoder {
    pub spec: DecoderSpec,
    /// `[front_len, L]`
    pub front: Option<Array2<f64>>,
    pub blocks: Vec<Block>,
}

/// Per-sample activations saved for [`HyperDecoder::backward`].
pub struct DecoderCache {
    inputs: Vec<Vec<f64>>,
    blocks: Vec<Vec<BlockCache>>,
}

impl HyperDecoder {
    /// Fan-in-scaled uniform kernels, zero biases. Fails on an invalid spec.
    pub fn init(spec: &DecoderSpec, seed: u64) -> Result<Self> {
        validate_spec(spec, None).map_err(|d| Error::Config(format!("invalid decoder spec: {d}")))?;
        let mut rng = seed::rng(seed::derive(seed, "decoder-init"));
        let front = spec.front_len.map(|l| {
            let bound = 1.0 / (spec.input.1 as f64).sqrt();
            Array2::from_shape_simple_fn((l, spec.input.1), || {
                rand::Rng::random_range(&mut rng, -bound..bound)
            })
        });
        let blocks = spec.blocks.iter().map(|b| Block::new(b, &mut rng)).collect();
        Ok(Self {
            spec: spec.clone(),
            front,
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Parameter tensors in canonical order with names.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(f) = &self.front {
            out.push(("front".to_string(), f.shape().to_vec(), f.as_slice().unwrap()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, c) in ["w1", "h1", "h2", "w2", "l"].iter().zip(b.convs()) {
                out.push((
                    format!("blocks.{i}.conv_{name}"),
                    c.weight.shape().to_vec(),
                    c.weight.as_slice().unwrap(),
                ));
            }
            out.push((format!("blocks.{i}.bias"), b.bias.shape().to_vec(), b.bias.as_slice().unwrap()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(f) = &mut self.front {
            out.push(f.as_slice_mut().unwrap());
        }
        for b in &mut self.blocks {
            let Block {
                conv_w1,
                conv_h1,
                conv_h2,
                conv_w2,
                conv_l,
                bias,
                ..
            } = b;
            for c in [conv_w1, conv_h1, conv_h2, conv_w2, conv_l] {
                out.push(c.weight.as_slice_mut().unwrap());
            }
            out.push(bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|p| p.2.len()).sum()
    }

    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.spec).expect("spec serializes");
        for (_, _, p) in self.named_params() {
            p.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        seed::content_hash(&bytes)
    }

    fn project_front(&self, x: &[f64]) -> Vec<f64> {
        let Some(p) = &self.front else {
            return x.to_vec();
        };
        let (n, l, c) = self.spec.input;
        let xs = ndarray::ArrayView3::from_shape((n, l, c), x).unwrap();
        let mut out = Array3::<f64>::zeros((n, p.nrows(), c));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i).assign(&p.dot(&xs.index_axis(Axis(0), i)));
        }
        out.into_raw_vec_and_offset().0
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, n, l, c) = x.dim();
        if (n, l, c) != self.spec.input {
            return Err(structural!(
                "decoder expects [B, {:?}] input, got [B, {:?}]",
                self.spec.input,
                (n, l, c)
            ));
        }
        Ok(())
    }

    /// `[B, N, L, C]` to `[B, N_w, L_w, C_w]`, keeping activations for backward.
    pub fn forward_train(&self, x: &Array4<f64>) -> Result<(Array4<f64>, DecoderCache)> {
        self.check_input(x)?;
        let out_dims = self.spec.output_dims();
        let b = x.dim().0;
        let mut out = Array4::zeros((b, out_dims.0, out_dims.1, out_dims.2));
        let mut cache = DecoderCache {
            inputs: Vec::with_capacity(b),
            blocks: Vec::with_capacity(b),
        };
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let xi: Vec<f64> = xi.iter().copied().collect();
            let mut h = self.project_front(&xi);
            let mut caches = Vec::with_capacity(self.blocks.len());
            for blk in &self.blocks {
                let (y, c) = blk.forward(&h, self.spec.activation);
                caches.push(c);
                h = y;
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&ndarray::ArrayView3::from_shape(out_dims, &h).unwrap());
            cache.inputs.push(xi);
            cache.blocks.push(caches);
        }
        Ok((out, cache))
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_train(x)?.0)
    }

    /// Gradients of a loss w.r.t. every parameter, given `dL/d output`.
    pub fn backward(&self, cache: &DecoderCache, dout: &Array4<f64>) -> HyperDecoder {
        let mut grads = self.zeros_like();
        for (i, caches) in cache.blocks.iter().enumerate() {
            let mut d: Vec<f64> = dout.index_axis(Axis(0), i).iter().copied().collect();
            for (bi, blk) in self.blocks.iter().enumerate().rev() {
                d = blk.backward(&caches[bi], &d, &mut grads.blocks[bi], self.spec.activation);
            }
            if let (Some(p), Some(gp)) = (&self.front, &mut grads.front) {
                let (n, l, c) = self.spec.input;
                let fl = p.nrows();
                let xs = ndarray::ArrayView3::from_shape((n, l, c), &cache.inputs[i][..]).unwrap();
                let ds = ndarray::ArrayView3::from_shape((n, fl, c), &d[..]).unwrap();
                for j in 0..n {
                    *gp += &ds.index_axis(Axis(0), j).dot(&xs.index_axis(Axis(0), j).t());
                }
            }
        }
        grads
    }

    pub fn to_file(&self) -> WeightFile {
        WeightFile {
            kind: DECODER_KIND.into(),
            meta: serde_json::json!({ "spec": self.spec }),
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, shape, data)| Tensor {
                    name,
                    shape,
                    data: TensorData::F64(data.to_vec()),
                })
                .collect(),
        }
    }

    pub fn from_file(f: &WeightFile, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::Format {
            path: path.into(),
            detail: d,
        };
        if f.kind != DECODER_KIND {
            return Err(bad(format!("expected {DECODER_KIND}, found {}", f.kind)));
        }
        let spec: DecoderSpec = serde_json::from_value(f.meta["spec"].clone())?;
        let mut d = Self::init(&spec, 0)?;
        let names: Vec<(String, Vec<usize>)> = d.named_params().into_iter().map(|(n, s, _)| (n, s)).collect();
        if names.len() != f.tensors.len() {
            return Err(bad("parameter count does not match the spec".into()));
        }
        for ((slot, (name, shape)), t) in d.params_mut().into_iter().zip(names).zip(&f.tensors) {
            match &t.data {
                TensorData::F64(v) if t.name == name && t.shape == shape => slot.copy_from_slice(v),
                _ => return Err(bad(format!("tensor '{}' does not match '{name}'", t.name))),
            }
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightFile::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chained_spec_validates_and_breaks_are_named() {
        let good = DecoderSpec::chain((4, 8, 8), None, &[(4, 6, 10), (2, 4, 12)]);
        assert!(validate_spec(&good, Some((2, 4, 12))).is_ok());

        let mut bad = good.clone();
        bad.blocks[1].in_dims = (4, 6, 300);
        let d = validate_spec(&bad, None).unwrap_err();
        assert_eq!(d.block, Some(2));

        let d = validate_spec(&good, Some((2, 4, 16))).unwrap_err();
        assert_eq!(d.block, None);
        assert!(d.message.contains("(2, 4, 12)") && d.message.contains("(2, 4, 16)"));
    }

    #[test]
    fn even_kernels_are_rejected() {
        let mut s = DecoderSpec::chain((2, 4, 4), None, &[(2, 4, 4)]);
        s.blocks[0].kernel_l = (2, 3);
        assert_eq!(validate_spec(&s, None).unwrap_err().block, Some(1));
    }

    #[test]
    fn unit_block_hand_value() {
        // N = L = C = 1, 1x1 kernels all equal to one, zero bias: y = (v + v) / 3
        let mut spec = DecoderSpec::chain((1, 1, 1), None, &[(1, 1, 1)]);
        spec.blocks[0] = spec.blocks[0].clone().with_kernels((1, 1));
        spec.activation = false;
        let mut d = HyperDecoder::init(&spec, 0).unwrap();
        let b = &mut d.blocks[0];
        for c in [&mut b.conv_w1, &mut b.conv_h1, &mut b.conv_h2, &mut b.conv_w2, &mut b.conv_l] {
            c.weight.fill(1.0);
        }
        let v = 0.75;
        let y = d.forward(&Array4::from_elem((1, 1, 1, 1), v)).unwrap();
        assert!((y[[0, 0, 0, 0]] - 2.0 * v / 3.0).abs() < 1e-15);
    }

    #[test]
    fn save_load_round_trip() {
        let spec = DecoderSpec::chain((2, 6, 4), Some(4), &[(3, 2, 5)]);
        let d = HyperDecoder::init(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        d.save(&p).unwrap();
        assert_eq!(HyperDecoder::load(&p).unwrap(), d);
    }
}
