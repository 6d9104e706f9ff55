//! 2D convolutions over one plane of an `[N, L, C]` tensor, with the third
//! axis acting as channels.
//!
//! A conv may resize either spatial axis. Shrinking samples the input at
//! centers `⌊o·in/out⌋` (a strided convolution when the ratio is integral);
//! growing first repeats input positions (nearest-neighbor interpolation) and
//! then convolves with stride one. Borders are zero-padded.

use ndarray::{Array2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Dims = (usize, usize, usize);

/// Which plane a convolution acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    /// Plane `(L, C)`, channels `N`. Resizes `C`.
    Width,
    /// Plane `(L, N)`, channels `C`. Resizes `L`.
    Height,
    /// Plane `(N, L)`, channels `C`. Resizes `N`.
    Layer,
}

impl ConvRole {
    /// `(channel, spatial1, spatial2)` axis indices into `[N, L, C]`.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            ConvRole::Width => (0, 1, 2),
            ConvRole::Height => (2, 1, 0),
            ConvRole::Layer => (2, 0, 1),
        }
    }

    /// The axis this role is allowed to resize.
    pub fn resized_axis(self) -> usize {
        match self {
            ConvRole::Width => 2,
            ConvRole::Height => 1,
            ConvRole::Layer => 0,
        }
    }

    /// Output dims of this conv applied to `input` with target size `size` on
    /// its resized axis.
    pub fn output_dims(self, input: Dims, size: usize) -> Dims {
        let mut d = [input.0, input.1, input.2];
        d[self.resized_axis()] = size;
        (d[0], d[1], d[2])
    }
}

fn dim(d: Dims, axis: usize) -> usize {
    [d.0, d.1, d.2][axis]
}

fn strides(d: Dims) -> [usize; 3] {
    [d.1 * d.2, d.2, 1]
}

/// Source index in the un-resized input for output position `o` and tap `t`.
fn tap_source(o: usize, t: usize, k: usize, n_in: usize, n_out: usize) -> Option<usize> {
    let pad = (k - 1) / 2;
    if n_out >= n_in {
        let u = (o + t).checked_sub(pad)?;
        (u < n_out).then(|| u * n_in / n_out)
    } else {
        let center = o * n_in / n_out;
        let i = (center + t).checked_sub(pad)?;
        (i < n_in).then_some(i)
    }
}

/// A plane convolution with fixed geometry and its kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneConv {
    pub role: ConvRole,
    pub in_dims: Dims,
    pub out_dims: Dims,
    pub kernel: (usize, usize),
    /// `[channels, channels · k1 · k2]`
    pub weight: Array2<f64>,
    /// For every `(t1, t2, o1, o2)`: spatial offset into the input, if any.
    gather: Vec<Option<usize>>,
}

/// Saved im2col matrix for the backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
}

impl PlaneConv {
    pub fn new<R: Rng>(role: ConvRole, in_dims: Dims, out_dims: Dims, kernel: (usize, usize), rng: &mut R) -> Self {
        let (ch, a1, a2) = role.axes();
        let channels = dim(in_dims, ch);
        let fan_in = channels * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((channels, fan_in), || rng.random_range(-bound..bound));
        let (in1, in2) = (dim(in_dims, a1), dim(in_dims, a2));
        let (out1, out2) = (dim(out_dims, a1), dim(out_dims, a2));
        let st = strides(in_dims);
        let mut gather = Vec::with_capacity(kernel.0 * kernel.1 * out1 * out2);
        for t1 in 0..kernel.0 {
            for t2 in 0..kernel.1 {
                for o1 in 0..out1 {
                    for o2 in 0..out2 {
                        let i1 = tap_source(o1, t1, kernel.0, in1, out1);
                        let i2 = tap_source(o2, t2, kernel.1, in2, out2);
                        gather.push(match (i1, i2) {
                            (Some(i1), Some(i2)) => Some(i1 * st[a1] + i2 * st[a2]),
                            _ => None,
                        });
                    }
                }
            }
        }
        Self {
            role,
            in_dims,
            out_dims,
            kernel,
            weight,
            gather,
        }
    }

    fn channels(&self) -> usize {
        self.weight.nrows()
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    fn out_positions(&self) -> usize {
        let (_, a1, a2) = self.role.axes();
        dim(self.out_dims, a1) * dim(self.out_dims, a2)
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, ConvCache) {
        let (ch, _, _) = self.role.axes();
        let ch_stride = strides(self.in_dims)[ch];
        let (c, k, o) = (self.channels(), self.taps(), self.out_positions());
        let mut cols = Array2::<f64>::zeros((c * k, o));
        for ci in 0..c {
            let base = ci * ch_stride;
            for r in 0..k {
                let mut row = cols.row_mut(ci * k + r);
                let g = &self.gather[r * o..(r + 1) * o];
                for (dst, src) in row.iter_mut().zip(g) {
                    if let Some(off) = src {
                        *dst = x[base + off];
                    }
                }
            }
        }
        let y = self.weight.dot(&cols);
        (self.scatter_out(&y), ConvCache { cols })
    }

    /// `[channels, O]` matrix to a flat `[N', L', C']` tensor.
    fn scatter_out(&self, y: &Array2<f64>) -> Vec<f64> {
        let (ch, a1, a2) = self.role.axes();
        let st = strides(self.out_dims);
        let (out1, out2) = (dim(self.out_dims, a1), dim(self.out_dims, a2));
        let mut out = vec![0.0; self.out_dims.0 * self.out_dims.1 * self.out_dims.2];
        for co in 0..self.channels() {
            for o1 in 0..out1 {
                for o2 in 0..out2 {
                    out[co * st[ch] + o1 * st[a1] + o2 * st[a2]] = y[[co, o1 * out2 + o2]];
                }
            }
        }
        out
    }

    fn gather_out(&self, dy: &[f64]) -> Array2<f64> {
        let (ch, a1, a2) = self.role.axes();
        let st = strides(self.out_dims);
        let (out1, out2) = (dim(self.out_dims, a1), dim(self.out_dims, a2));
        Array2::from_shape_fn((self.channels(), out1 * out2), |(co, o)| {
            dy[co * st[ch] + (o / out2) * st[a1] + (o % out2) * st[a2]]
        })
    }

    /// Accumulates the kernel gradient into `dweight` and returns `dL/dx`.
    pub fn backward(&self, cache: &ConvCache, dy: &[f64], dweight: &mut Array2<f64>) -> Vec<f64> {
        let dym = self.gather_out(dy);
        *dweight += &dym.dot(&cache.cols.t());
        let dcols = self.weight.t().dot(&dym);
        let (ch, _, _) = self.role.axes();
        let ch_stride = strides(self.in_dims)[ch];
        let (c, k, o) = (self.channels(), self.taps(), self.out_positions());
        let mut dx = vec![0.0; self.in_dims.0 * self.in_dims.1 * self.in_dims.2];
        for ci in 0..c {
            let base = ci * ch_stride;
            for r in 0..k {
                let row = dcols.row(ci * k + r);
                let g = &self.gather[r * o..(r + 1) * o];
                for (d, src) in row.iter().zip(g) {
                    if let Some(off) = src {
                        dx[base + off] += d;
                    }
                }
            }
        }
        dx
    }

    /// Reference evaluation by direct summation; test oracle for `forward`.
    pub fn forward_direct(&self, x: ArrayView3<f64>) -> Vec<f64> {
        let (ch, a1, a2) = self.role.axes();
        let (in1, in2) = (dim(self.in_dims, a1), dim(self.in_dims, a2));
        let (out1, out2) = (dim(self.out_dims, a1), dim(self.out_dims, a2));
        let ost = strides(self.out_dims);
        let mut out = vec![0.0; self.out_dims.0 * self.out_dims.1 * self.out_dims.2];
        let c = self.channels();
        for co in 0..c {
            for o1 in 0..out1 {
                for o2 in 0..out2 {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for t1 in 0..self.kernel.0 {
                            for t2 in 0..self.kernel.1 {
                                let (Some(i1), Some(i2)) = (
                                    tap_source(o1, t1, self.kernel.0, in1, out1),
                                    tap_source(o2, t2, self.kernel.1, in2, out2),
                                ) else {
                                    continue;
                                };
                                let mut idx = [0usize; 3];
                                idx[ch] = ci;
                                idx[a1] = i1;
                                idx[a2] = i2;
                                acc += self.weight[[co, (ci * self.kernel.0 + t1) * self.kernel.1 + t2]]
                                    * x[[idx[0], idx[1], idx[2]]];
                            }
                        }
                    }
                    out[co * ost[ch] + o1 * ost[a1] + o2 * ost[a2]] = acc;
                }
            }
        }
        out
    }
}
