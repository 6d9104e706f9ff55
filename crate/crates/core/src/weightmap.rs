//! 2-D neighbor-embedding projection of flattened adapters, with scatter-plot
//! and CSV export.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::seed;
use crate::zoo::LoraCheckpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub label: String,
    pub generated: bool,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 10.0,
            iterations: 750,
            learning_rate: 100.0,
            exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Row-conditional affinities with the bandwidth bisected to `perplexity`.
fn affinities(d: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d.len();
    let target = perplexity.min((n - 1) as f64).ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        // distances are shifted by the row minimum for numerical range
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[i][j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-(d[i][j] - dmin) * beta).exp();
                p[i][j] = w;
                sum += w;
                hsum += w * (d[i][j] - dmin);
            }
            let entropy = sum.ln() + beta * hsum / sum;
            for j in 0..n {
                p[i][j] /= sum;
            }
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

/// Top-two principal coordinates by power iteration on the centered Gram
/// matrix, scaled to a 1e-4 standard deviation. Identical rows get identical
/// coordinates, which the gradient then preserves.
fn pca_init(x: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = x.len();
    let dim = x[0].len();
    let mean: Vec<f64> = (0..dim).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = xc[i].iter().zip(&xc[j]).map(|(a, b)| a * b).sum();
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    let mut rng = seed::rng(seed::derive(seed, "tsne-init"));
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..n).map(|i| g[i].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|a| a / norm).collect();
        }
        comps.push(v);
    }
    let sd = (comps[0].iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt().max(1e-300);
    (0..n).map(|i| [comps[0][i] / sd * 1e-4, comps[1][i] / sd * 1e-4]).collect()
}

/// Exact t-SNE. Deterministic for a fixed seed and input.
pub fn tsne(x: &[Vec<f64>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    if n < 3 {
        return Err(domain!("a weight map needs at least 3 points, got {n}"));
    }
    let mut d = sq_dists(x);
    let scale = d.iter().flatten().copied().fold(0.0, f64::max);
    if scale > 0.0 {
        d.iter_mut().flatten().for_each(|v| *v /= scale);
    }
    let cond = affinities(&d, params.perplexity);
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut y = pca_init(x, params.seed);
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut q = vec![vec![0.0; n]; n];
    for it in 0..params.iterations {
        let exag = if it < params.exaggeration_iters { params.exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    q[i][j] = 1.0 / (1.0 + dx * dx + dy * dy);
                    qsum += q[i][j];
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exag * p[i][j] - q[i][j] / qsum) * q[i][j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) == (vel[i][k] > 0.0) {
                    (gains[i][k] * 0.8f64).max(0.01)
                } else {
                    gains[i][k] + 0.2
                };
                vel[i][k] = momentum * vel[i][k] - params.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let mean = [
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        ];
        y.iter_mut().for_each(|p| {
            p[0] -= mean[0];
            p[1] -= mean[1];
        });
    }
    Ok(y)
}

fn flat(c: &LoraCheckpoint) -> Vec<f64> {
    c.flatten().into_iter().map(f64::from).collect()
}

/// Projects original and generated adapters together. Labels are task ids.
pub fn project(
    originals: &[LoraCheckpoint],
    generated: &[LoraCheckpoint],
    params: &TsneParams,
) -> Result<Vec<MapPoint>> {
    let x: Vec<Vec<f64>> = originals.iter().chain(generated).map(flat).collect();
    let y = tsne(&x, params)?;
    Ok(originals
        .iter()
        .map(|c| (c.task_id.clone(), false))
        .chain(generated.iter().map(|c| (c.task_id.clone(), true)))
        .zip(y)
        .map(|((label, generated), [x, y])| MapPoint { label, generated, x, y })
        .collect())
}

/// Mean pairwise 2-D distance within labels and across labels, over original
/// points only.
pub fn intra_inter(points: &[MapPoint]) -> (f64, f64) {
    let orig: Vec<&MapPoint> = points.iter().filter(|p| !p.generated).collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..orig.len() {
        for j in i + 1..orig.len() {
            let d = ((orig[i].x - orig[j].x).powi(2) + (orig[i].y - orig[j].y).powi(2)).sqrt();
            if orig[i].label == orig[j].label {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// Label of the original-cluster centroid nearest to each generated point.
pub fn nearest_centroids(points: &[MapPoint]) -> Vec<(String, String)> {
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for p in points.iter().filter(|p| !p.generated) {
        let e = sums.entry(&p.label).or_default();
        e.0 += p.x;
        e.1 += p.y;
        e.2 += 1;
    }
    points
        .iter()
        .filter(|p| p.generated)
        .map(|g| {
            let best = sums
                .iter()
                .map(|(l, (sx, sy, n))| {
                    let (cx, cy) = (sx / *n as f64, sy / *n as f64);
                    (((g.x - cx).powi(2) + (g.y - cy).powi(2)), *l)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, l)| l.to_string())
                .unwrap_or_default();
            (g.label.clone(), best)
        })
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Writes `weight_map.csv` and `weight_map.png` under `dir`. Original points
/// are filled discs, generated points are crosses.
pub fn write_map(points: &[MapPoint], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("weight_map.csv");
    let fmt = |e: csv::Error| Error::Format {
        path: csv_path.clone(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(fmt)?;
    for p in points {
        w.serialize(p).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let size = 512u32;
    let margin = 24.0;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.x), a.1.max(p.x)));
    let (ymin, ymax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.y), a.1.max(p.y)));
    let span = (xmax - xmin).max(ymax - ymin).max(1e-12);
    let px = |v: f64, lo: f64| margin + (v - lo) / span * (f64::from(size) - 2.0 * margin);
    let labels: Vec<&str> = {
        let mut l: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
        l.sort();
        l.dedup();
        l
    };
    for p in points {
        let c = PALETTE[labels.iter().position(|l| *l == p.label).unwrap_or(0) % PALETTE.len()];
        let (cx, cy) = (px(p.x, xmin) as i64, f64::from(size) as i64 - px(p.y, ymin) as i64);
        for dx in -5i64..=5 {
            for dy in -5i64..=5 {
                let on = if p.generated {
                    dx == dy || dx == -dy
                } else {
                    dx * dx + dy * dy <= 16
                };
                let (x, y) = (cx + dx, cy + dy);
                if on && (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb(c));
                }
            }
        }
    }
    let png = dir.join("weight_map.png");
    img.save(&png).map_err(|e| Error::Format {
        path: png.clone(),
        detail: e.to_string(),
    })
}

/// Projection plus file export.
pub fn export_weight_map(
    originals: &[LoraCheckpoint],
    generated: &[LoraCheckpoint],
    params: &TsneParams,
    dir: Option<&Path>,
) -> Result<Vec<MapPoint>> {
    let points = project(originals, generated, params)?;
    if let Some(d) = dir {
        write_map(&points, d)?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let mut x = Vec::new();
        let mut lab = Vec::new();
        for c in 0..3 {
            for _ in 0..10 {
                x.push((0..6).map(|k| if k == c { 5.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect());
                lab.push(c);
            }
        }
        (x, lab)
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (x, lab) = blobs(1);
        let y = tsne(&x, &TsneParams::default()).unwrap();
        let points: Vec<MapPoint> = y
            .iter()
            .zip(&lab)
            .map(|(p, l)| MapPoint { label: l.to_string(), generated: false, x: p[0], y: p[1] })
            .collect();
        let (intra, inter) = intra_inter(&points);
        assert!(intra < inter / 3.0, "intra {intra} inter {inter}");
    }

    #[test]
    fn too_few_points() {
        assert!(tsne(&[vec![0.0], vec![1.0]], &TsneParams::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let (x, _) = blobs(2);
        let p = TsneParams { iterations: 50, ..TsneParams::default() };
        assert_eq!(tsne(&x, &p).unwrap(), tsne(&x, &p).unwrap());
    }

    #[test]
    fn duplicates_coincide() {
        let (mut x, _) = blobs(3);
        x.push(x[0].clone());
        let y = tsne(&x, &TsneParams::default()).unwrap();
        let last = y.len() - 1;
        let d = ((y[0][0] - y[last][0]).powi(2) + (y[0][1] - y[last][1]).powi(2)).sqrt();
        // cluster scale: mean distance from the first blob's points to their centroid
        let c = (0..10).fold([0.0, 0.0], |a, i| [a[0] + y[i][0] / 10.0, a[1] + y[i][1] / 10.0]);
        let scale = (0..10).map(|i| ((y[i][0] - c[0]).powi(2) + (y[i][1] - c[1]).powi(2)).sqrt()).sum::<f64>() / 10.0;
        assert!(d < scale / 10.0, "duplicate distance {d} vs cluster scale {scale}");
    }
}
