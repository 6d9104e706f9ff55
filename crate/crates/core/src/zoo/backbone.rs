//! A tiny pre-LayerNorm decoder-only character transformer with manual
//! backpropagation.
//!
//! Weight matrices are stored `[out, in]`, so a projection is `x · Wᵀ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, structural, Result};
use crate::seed;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const N_SPECIAL: u32 = 4;

const LN_EPS: f32 = 1e-5;

pub fn default_alphabet() -> String {
    let mut a = String::from(" :+");
    a.extend('a'..='z');
    a.extend('0'..='9');
    a.extend('A'..='Z');
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub alphabet: String,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            context_len: 32,
            alphabet: default_alphabet(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(config_err!("backbone dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err!(
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if self.context_len < 4 {
            return Err(config_err!("context_len {} too short", self.context_len));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL as usize + self.alphabet.chars().count()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn encode_char(&self, c: char) -> Option<u32> {
        self.alphabet
            .chars()
            .position(|a| a == c)
            .map(|i| i as u32 + N_SPECIAL)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.encode_char(c)
                    .ok_or_else(|| structural!("character {c:?} is outside the vocabulary"))
            })
            .collect()
    }

    pub fn decode_token(&self, t: u32) -> Option<char> {
        t.checked_sub(N_SPECIAL)
            .and_then(|i| self.alphabet.chars().nth(i as usize))
    }

    /// `BOS prompt SEP answer EOS`, plus the index of `SEP`.
    pub fn sequence(&self, prompt: &str, answer: &str) -> Result<(Vec<u32>, usize)> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_text(prompt)?);
        let sep = ids.len();
        ids.push(SEP);
        ids.extend(self.encode_text(answer)?);
        ids.push(EOS);
        if ids.len() > self.context_len {
            return Err(structural!(
                "sequence of {} tokens exceeds context_len {}",
                ids.len(),
                self.context_len
            ));
        }
        Ok((ids, sep))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f32>,
    pub ln1_b: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub ln2_g: Array1<f32>,
    pub ln2_b: Array1<f32>,
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

/// All backbone parameters. The same struct doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub tok_emb: Array2<f32>,
    pub pos_emb: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f32>,
    pub lnf_b: Array1<f32>,
    pub head: Array2<f32>,
}

impl BackboneWeights {
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, "backbone-init"));
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let d = config.d_model;
        let mat = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Array2::from_shape_simple_fn((r, c), || normal.sample(rng))
        };
        let v = config.vocab_size();
        let tok_emb = mat(v, d, &mut rng);
        let pos_emb = mat(config.context_len, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: mat(d, d, &mut rng),
                wk: mat(d, d, &mut rng),
                wv: mat(d, d, &mut rng),
                wo: mat(d, d, &mut rng),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: mat(config.d_ff, d, &mut rng),
                b1: Array1::zeros(config.d_ff),
                w2: mat(d, config.d_ff, &mut rng),
                b2: Array1::zeros(d),
            })
            .collect();
        let head = mat(v, d, &mut rng);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        fn entry<D: ndarray::Dimension>(name: String, a: &ndarray::Array<f32, D>) -> (String, Vec<usize>, &[f32]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![entry("tok_emb".into(), &self.tok_emb), entry("pos_emb".into(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, a) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("w1", &l.w1), ("w2", &l.w2)] {
                out.push(entry(format!("layers.{i}.{n}"), a));
            }
        }
        out.push(entry("head".into(), &self.head));
        for (i, l) in self.layers.iter().enumerate() {
            for (n, a) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("b1", &l.b1),
                ("b2", &l.b2),
            ] {
                out.push(entry(format!("layers.{i}.{n}"), a));
            }
        }
        out.push(entry("lnf_g".into(), &self.lnf_g));
        out.push(entry("lnf_b".into(), &self.lnf_b));
        out
    }

    /// Mutable access in the same order as [`BackboneWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>) -> &mut [f32] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![sl(&mut self.tok_emb), sl(&mut self.pos_emb)];
        let mut vectors = Vec::new();
        for l in self.layers.iter_mut() {
            out.extend([sl(&mut l.wq), sl(&mut l.wk), sl(&mut l.wv), sl(&mut l.wo), sl(&mut l.w1), sl(&mut l.w2)]);
            vectors.extend([
                sl(&mut l.ln1_g),
                sl(&mut l.ln1_b),
                sl(&mut l.ln2_g),
                sl(&mut l.ln2_b),
                sl(&mut l.b1),
                sl(&mut l.b2),
            ]);
        }
        out.push(sl(&mut self.head));
        out.extend(vectors);
        out.push(sl(&mut self.lnf_g));
        out.push(sl(&mut self.lnf_b));
        out
    }

    /// SHA-256 over all parameters, in canonical order.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, _, data) in self.named_tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        seed::content_hash(&bytes)
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }
}

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

fn layer_norm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> (Array2<f32>, LnCache) {
    let d = x.ncols() as f32;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f32>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f32>,
    cache: &LnCache,
    g: &Array1<f32>,
    grads: Option<(&mut Array1<f32>, &mut Array1<f32>)>,
) -> Array2<f32> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f32;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn linear(x: &Array2<f32>, w: &Array2<f32>) -> Array2<f32> {
    x.dot(&w.t())
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Array2<f32>>,
    attn: Array2<f32>,
    ln2: LnCache,
    h2: Array2<f32>,
    u: Array2<f32>,
    g: Array2<f32>,
}

/// Activations saved by [`forward`] for the backward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f32>,
}

/// Which parameter gradients [`backward`] accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only the query and value projections (what LoRA on q/v needs).
    QueryValue,
}

/// Logits `[T, V]` for one token sequence.
pub fn forward(w: &BackboneWeights, ids: &[u32]) -> (Array2<f32>, ForwardCache) {
    let cfg = &w.config;
    let t = ids.len();
    assert!(t <= cfg.context_len, "sequence longer than context");
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let mut x = Array2::zeros((t, cfg.d_model));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&w.tok_emb.row(id as usize));
        row += &w.pos_emb.row(i);
    }
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (h1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = linear(&h1, &lw.wq);
        let k = linear(&h1, &lw.wk);
        let v = linear(&h1, &lw.wv);
        let mut attn = Array2::zeros((t, cfg.d_model));
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..t {
                let mut row = sc.row_mut(i);
                let m = row.slice(s![..=i]).fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0;
                for j in 0..t {
                    if j > i {
                        row[j] = 0.0;
                    } else {
                        row[j] = (row[j] - m).exp();
                        sum += row[j];
                    }
                }
                row.mapv_inplace(|p| p / sum);
            }
            attn.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        x += &linear(&attn, &lw.wo);
        let (h2, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let u = linear(&h2, &lw.w1) + &lw.b1;
        let g = u.mapv(gelu);
        x += &(linear(&g, &lw.w2) + &lw.b2);
        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let logits = linear(&hf, &w.head);
    (
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            layers,
            lnf,
            hf,
        },
    )
}

/// Accumulates `dL/dθ` into `grads` for the parameters in `scope`.
pub fn backward(
    w: &BackboneWeights,
    cache: &ForwardCache,
    dlogits: &Array2<f32>,
    grads: &mut BackboneWeights,
    scope: GradScope,
) {
    let cfg = &w.config;
    let all = scope == GradScope::All;
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let t = cache.ids.len();

    if all {
        grads.head += &dlogits.t().dot(&cache.hf);
    }
    let dhf = dlogits.dot(&w.head);
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.lnf,
        &w.lnf_g,
        all.then_some((&mut grads.lnf_g, &mut grads.lnf_b)),
    );

    for (li, (lw, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];
        // MLP
        let dm = &dx;
        if all {
            lg.w2 += &dm.t().dot(&lc.g);
            lg.b2 += &dm.sum_axis(Axis(0));
        }
        let dg = dm.dot(&lw.w2);
        let du = &dg * &lc.u.mapv(gelu_grad);
        if all {
            lg.w1 += &du.t().dot(&lc.h2);
            lg.b1 += &du.sum_axis(Axis(0));
        }
        let dh2 = du.dot(&lw.w1);
        let dx_ln2 = layer_norm_backward(
            &dh2,
            &lc.ln2,
            &lw.ln2_g,
            all.then_some((&mut lg.ln2_g, &mut lg.ln2_b)),
        );
        dx = &dx + &dx_ln2;

        // attention
        let da = &dx;
        if all {
            lg.wo += &da.t().dot(&lc.attn);
        }
        let dattn = da.dot(&lw.wo);
        let mut dq = Array2::zeros((t, cfg.d_model));
        let mut dk = Array2::zeros((t, cfg.d_model));
        let mut dv = Array2::zeros((t, cfg.d_model));
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &lc.probs[h];
            let dout = dattn.slice(cols);
            let dp = dout.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let mut ds = Array2::zeros((t, t));
            for i in 0..t {
                let dot: f32 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        lg.wq += &dq.t().dot(&lc.h1);
        lg.wv += &dv.t().dot(&lc.h1);
        if all {
            lg.wk += &dk.t().dot(&lc.h1);
        }
        let dh1 = dq.dot(&lw.wq) + dk.dot(&lw.wk) + dv.dot(&lw.wv);
        let dx_ln1 = layer_norm_backward(
            &dh1,
            &lc.ln1,
            &lw.ln1_g,
            all.then_some((&mut lg.ln1_g, &mut lg.ln1_b)),
        );
        dx = &dx + &dx_ln1;
    }

    if all {
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut te = grads.tok_emb.row_mut(id as usize);
            te += &dx.row(i);
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &dx.row(i);
        }
    }
}

/// Mean cross-entropy over answer positions (the tokens after `SEP`, including
/// `EOS`). Returns the summed loss, the number of scored positions, and the
/// gradient of the *summed* loss w.r.t. the logits.
pub fn answer_cross_entropy(logits: ArrayView2<f32>, ids: &[u32], sep: usize) -> (f64, usize, Array2<f32>) {
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0f64;
    let mut count = 0;
    for pos in sep..ids.len() - 1 {
        let target = ids[pos + 1] as usize;
        let row = logits.row(pos);
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f32> = row.iter().map(|&z| (z - m).exp()).collect();
        let sum: f32 = exps.iter().sum();
        loss += f64::from(sum.ln() + m - row[target]);
        let mut drow = dlogits.row_mut(pos);
        for (j, e) in exps.iter().enumerate() {
            drow[j] = e / sum;
        }
        drow[target] -= 1.0;
        count += 1;
    }
    (loss, count, dlogits)
}

/// First index of the maximum; ties resolve to the lowest token id.
pub fn argmax(row: ndarray::ArrayView1<f32>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of an answer for `prompt`, stopping at `EOS` or context end.
pub fn greedy_decode(w: &BackboneWeights, prompt: &str) -> Result<String> {
    let cfg = &w.config;
    let mut ids = vec![BOS];
    ids.extend(cfg.encode_text(prompt)?);
    ids.push(SEP);
    let mut out = String::new();
    while ids.len() < cfg.context_len {
        let (logits, _) = forward(w, &ids);
        let next = argmax(logits.row(ids.len() - 1));
        if next == EOS {
            break;
        }
        match cfg.decode_token(next) {
            Some(c) => out.push(c),
            None => out.push('\u{fffd}'),
        }
        ids.push(next);
    }
    Ok(out)
}

/// Exact-match check via a single teacher-forced pass. Greedy decoding emits
/// exactly `answer` iff every argmax along the gold continuation (including the
/// final `EOS`) is the gold token, so this agrees with [`greedy_decode`].
pub fn exact_match(w: &BackboneWeights, prompt: &str, answer: &str) -> Result<bool> {
    let (ids, sep) = w.config.sequence(prompt, answer)?;
    let (logits, _) = forward(w, &ids[..ids.len() - 1]);
    Ok((sep..ids.len() - 1).all(|pos| argmax(logits.row(pos)) == ids[pos + 1]))
}

/// Random uniform helper used for small inits elsewhere in the zoo.
pub(crate) fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f32) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}
