//! Prompt–checkpoint pairing, target noise, tokenized MSE and the generator
//! optimization loop.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Tensor, TensorData, WeightFile};
use crate::codec::{encode, WeightLayout, WeightTokenGrid};
use crate::corpus::{sample_prompt_batch, ConditionSource, Split, TaskDataset};
use crate::decoder::{validate_spec, DecoderSpec, HyperDecoder};
use crate::encoder::{encode_batch, ConditionEmbedding, ConditionEncoder};
use crate::error::{config_err, domain, structural, Error, Result};
use crate::optim::{clip_grad_norm, AdamW};
use crate::seed;
use crate::zoo::LoraCheckpoint;

/// How prompt batches are paired with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    /// The whole pool is the batch (`pool_size` is forced to `batch_len`).
    Strategy1,
    /// A `batch_len` subset is redrawn from a larger pool every time.
    #[default]
    Strategy2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub noise_amplitude: f64,
    pub strategy: PairingStrategy,
    pub pool_size: usize,
    pub batch_len: usize,
    pub condition_source: ConditionSource,
    pub seed: u64,
    /// Stop once the 100-step windowed loss has not improved by 1% for this
    /// many consecutive windows. `None` disables early stopping.
    pub early_stop_windows: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            steps: 2000,
            batch_size: 4,
            noise_amplitude: 1e-4,
            strategy: PairingStrategy::Strategy2,
            pool_size: 512,
            batch_len: 8,
            condition_source: ConditionSource::PromptOnly,
            seed: 0,
            early_stop_windows: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.max_grad_norm > 0.0) {
            return Err(config_err!("lr and weight_decay must be >= 0, max_grad_norm > 0"));
        }
        if self.batch_size == 0 || self.batch_len == 0 || self.pool_size == 0 {
            return Err(config_err!("batch_size, batch_len and pool_size must be positive"));
        }
        if self.noise_amplitude < 0.0 {
            return Err(config_err!("noise_amplitude must be >= 0"));
        }
        if self.strategy == PairingStrategy::Strategy2 && self.batch_len > self.pool_size {
            return Err(config_err!(
                "strategy2 needs batch_len ({}) <= pool_size ({})",
                self.batch_len,
                self.pool_size
            ));
        }
        Ok(())
    }

    /// Pool actually sampled from.
    pub fn effective_pool(&self) -> usize {
        match self.strategy {
            PairingStrategy::Strategy1 => self.batch_len,
            PairingStrategy::Strategy2 => self.pool_size,
        }
    }
}

/// One task's share of the training zoo: its prompts and tokenized checkpoints.
#[derive(Debug, Clone)]
pub struct ZooTask {
    pub dataset: TaskDataset,
    pub grids: Vec<(usize, WeightTokenGrid)>,
}

impl ZooTask {
    pub fn new(dataset: TaskDataset, checkpoints: &[LoraCheckpoint], layout: &WeightLayout) -> Result<Self> {
        let grids = checkpoints
            .iter()
            .map(|c| Ok((c.step_id, encode(c, layout)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dataset, grids })
    }
}

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub embedding: ConditionEmbedding,
    pub target: WeightTokenGrid,
    pub task_id: String,
    pub step_id: usize,
}

/// Uniform task, then independently a prompt batch and a checkpoint of it.
pub fn make_pair(
    tasks: &[ZooTask],
    encoder: &dyn ConditionEncoder,
    config: &RunConfig,
    seed: u64,
) -> Result<TrainPair> {
    if tasks.is_empty() {
        return Err(domain!("cannot pair from an empty zoo"));
    }
    let mut rng = seed::rng(seed);
    let task = &tasks[rng.random_range(0..tasks.len())];
    if task.grids.is_empty() {
        return Err(domain!("task '{}' has no checkpoints", task.dataset.task_id));
    }
    let batch = sample_prompt_batch(
        &task.dataset,
        config.batch_len,
        config.effective_pool(),
        rng.random(),
        config.condition_source,
    )?;
    let (step_id, grid) = &task.grids[rng.random_range(0..task.grids.len())];
    Ok(TrainPair {
        embedding: encode_batch(&batch, encoder)?,
        target: grid.clone(),
        task_id: task.dataset.task_id.clone(),
        step_id: *step_id,
    })
}

/// Adds `U(-amplitude, amplitude)` noise to every non-pad position.
pub fn augment_target(grid: &WeightTokenGrid, amplitude: f64, seed: u64) -> WeightTokenGrid {
    let mut out = grid.clone();
    if amplitude == 0.0 {
        return out;
    }
    let mut rng = seed::rng(seed);
    let mask = grid.layout.pad_mask();
    for (v, pad) in out.values.iter_mut().zip(mask) {
        if !pad {
            *v += rng.random_range(-amplitude..=amplitude);
        }
    }
    out
}

/// Mean squared error over every grid element, padding included.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(structural!(
            "prediction has {} elements, target {}",
            pred.len(),
            target.len()
        ));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// `d mse / d pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let k = 2.0 / pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| k * (p - t)).collect()
}

/// Zero-pads an embedding along `L` to the decoder's input length.
pub fn fit_embedding(emb: &ConditionEmbedding, input: (usize, usize, usize)) -> Result<Array3<f64>> {
    let (n, l, c) = emb.dims();
    if n != input.0 || c != input.2 || l > input.1 {
        return Err(structural!(
            "embedding [{n}, {l}, {c}] does not fit decoder input {input:?}"
        ));
    }
    let mut out = Array3::zeros(input);
    out.slice_mut(s![.., ..l, ..]).assign(&emb.values);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Generator optimization state; resumable from a run directory.
pub struct GeneratorTrainer {
    pub decoder: HyperDecoder,
    pub config: RunConfig,
    opt: AdamW,
    pub step: usize,
    pub trace: Vec<StepRecord>,
}

pub const GENERATOR_FILE: &str = "generator.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

impl GeneratorTrainer {
    pub fn new(spec: &DecoderSpec, layout: &WeightLayout, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        validate_spec(spec, Some(layout.grid)).map_err(|d| config_err!("decoder spec: {d}"))?;
        if spec.input.0 != config.batch_len {
            return Err(config_err!(
                "decoder input N = {} but batch_len = {}",
                spec.input.0,
                config.batch_len
            ));
        }
        Ok(Self {
            decoder: HyperDecoder::init(spec, seed::derive(config.seed, "init"))?,
            config: config.clone(),
            opt: AdamW::new(config.lr, config.weight_decay),
            step: 0,
            trace: Vec::new(),
        })
    }

    /// Builds the `B` pairs for `step`. Seeds depend only on the run seed and
    /// the step index.
    pub fn pairs_for_step(&self, tasks: &[ZooTask], encoder: &dyn ConditionEncoder, step: usize) -> Result<Vec<TrainPair>> {
        (0..self.config.batch_size)
            .map(|b| {
                let s = seed::derive_indexed(self.config.seed, &format!("pair-{b}"), step as u64);
                make_pair(tasks, encoder, &self.config, s)
            })
            .collect()
    }

    /// One optimization step on freshly drawn pairs.
    pub fn train_step(&mut self, tasks: &[ZooTask], encoder: &dyn ConditionEncoder) -> Result<StepRecord> {
        let step = self.step;
        let pairs = self.pairs_for_step(tasks, encoder, step)?;
        let spec = &self.decoder.spec;
        let grid = spec.output_dims();
        let b = pairs.len();
        let mut x = Array4::zeros((b, spec.input.0, spec.input.1, spec.input.2));
        let mut target = Array4::zeros((b, grid.0, grid.1, grid.2));
        for (i, p) in pairs.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&fit_embedding(&p.embedding, spec.input)?);
            let noisy = augment_target(
                &p.target,
                self.config.noise_amplitude,
                seed::derive_indexed(self.config.seed, &format!("noise-{i}"), step as u64),
            );
            target.index_axis_mut(Axis(0), i).assign(&noisy.values);
        }
        let (pred, cache) = self.decoder.forward_train(&x)?;
        let (ps, ts) = (pred.as_slice().unwrap(), target.as_slice().unwrap());
        let loss = mse_loss(ps, ts)?;
        if !loss.is_finite() {
            let meta: Vec<String> = pairs.iter().map(|p| format!("{}@{}", p.task_id, p.step_id)).collect();
            return Err(Error::Training {
                step,
                detail: format!("non-finite generator loss on pairs [{}]", meta.join(", ")),
            });
        }
        let dpred = Array4::from_shape_vec(pred.raw_dim(), mse_grad(ps, ts)).unwrap();
        let mut grads = self.decoder.backward(&cache, &dpred);
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grads.params_mut(), self.config.max_grad_norm);
        let g: Vec<Vec<f64>> = grads.params_mut().into_iter().map(|t| t.to_vec()).collect();
        let g_refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
        self.opt.lr = self.config.lr;
        self.opt.weight_decay = self.config.weight_decay;
        self.opt.step(&mut self.decoder.params_mut(), &g_refs);
        let rec = StepRecord {
            step,
            loss,
            grad_norm,
            clipped_norm,
        };
        self.trace.push(rec);
        self.step += 1;
        Ok(rec)
    }

    /// Runs until `config.steps` total steps (or early stop).
    pub fn run(&mut self, tasks: &[ZooTask], encoder: &dyn ConditionEncoder) -> Result<()> {
        if tasks.is_empty() {
            return Err(domain!("cannot train a generator on an empty zoo"));
        }
        while self.step < self.config.steps {
            self.train_step(tasks, encoder)?;
            if self.plateaued() {
                log::info!("early stop at step {}", self.step);
                break;
            }
        }
        Ok(())
    }

    fn plateaued(&self) -> bool {
        let Some(patience) = self.config.early_stop_windows else {
            return false;
        };
        if !self.step.is_multiple_of(100) {
            return false;
        }
        let w = windowed_means(&self.losses(), 100);
        if w.len() <= patience {
            return false;
        }
        let best_before = w[..w.len() - patience].iter().copied().fold(f64::INFINITY, f64::min);
        w[w.len() - patience..].iter().all(|&m| m > best_before * 0.99)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    /// Writes generator weights, optimizer state, loss trace and config.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.decoder.save(&dir.join(GENERATOR_FILE))?;
        let (m, v) = self.opt.moments();
        let mut tensors = Vec::new();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            tensors.push(Tensor {
                name: format!("m.{i}"),
                shape: vec![mi.len()],
                data: TensorData::F64(mi.clone()),
            });
            tensors.push(Tensor {
                name: format!("v.{i}"),
                shape: vec![vi.len()],
                data: TensorData::F64(vi.clone()),
            });
        }
        WeightFile {
            kind: "adamw_state".into(),
            meta: serde_json::json!({ "t": self.opt.t, "step": self.step }),
            tensors,
        }
        .save(&dir.join(OPTIMIZER_FILE))?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))?;
        write_trace(&dir.join(TRACE_FILE), &self.trace)
    }

    /// Restores a run saved by [`GeneratorTrainer::save`]. `config` may raise
    /// `steps`; other fields are taken from it as given.
    pub fn resume(dir: &Path, config: &RunConfig) -> Result<Self> {
        let decoder = HyperDecoder::load(&dir.join(GENERATOR_FILE))?;
        let opt_path = dir.join(OPTIMIZER_FILE);
        let f = WeightFile::load_kind(&opt_path, "adamw_state")?;
        let t = f.meta["t"].as_u64().unwrap_or(0);
        let step = f.meta["step"].as_u64().unwrap_or(0) as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for tensor in &f.tensors {
            let TensorData::F64(data) = &tensor.data else {
                return Err(Error::Format {
                    path: opt_path,
                    detail: "optimizer moments must be f64".into(),
                });
            };
            if tensor.name.starts_with("m.") {
                m.push(data.clone());
            } else {
                v.push(data.clone());
            }
        }
        let mut opt = AdamW::new(config.lr, config.weight_decay);
        opt.set_moments(m, v, t);
        let trace = read_trace(&dir.join(TRACE_FILE))?;
        if trace.len() != step {
            return Err(Error::Format {
                path: dir.join(TRACE_FILE),
                detail: format!("trace has {} rows but the optimizer is at step {step}", trace.len()),
            });
        }
        Ok(Self {
            decoder,
            config: config.clone(),
            opt,
            step,
            trace,
        })
    }
}

fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,loss,grad_norm,clipped_norm\n");
    for r in trace {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.loss, r.grad_norm, r.clipped_norm));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                path: path.into(),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Means of consecutive non-overlapping windows (a partial tail is dropped).
pub fn windowed_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Generator training from scratch: validates, runs, optionally persists.
pub fn train(
    tasks: &[ZooTask],
    encoder: &dyn ConditionEncoder,
    spec: &DecoderSpec,
    layout: &WeightLayout,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<GeneratorTrainer> {
    if tasks.is_empty() {
        return Err(domain!("cannot train a generator on an empty zoo"));
    }
    for t in tasks {
        let pool = config.effective_pool();
        if t.dataset.len(Split::Train) < pool {
            return Err(domain!(
                "task '{}' has {} train prompts, fewer than the pool of {pool}",
                t.dataset.task_id,
                t.dataset.len(Split::Train)
            ));
        }
    }
    let mut trainer = GeneratorTrainer::new(spec, layout, config)?;
    trainer.run(tasks, encoder)?;
    if let Some(dir) = out_dir {
        trainer.save(dir)?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mse_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(Error::Structural(_))));
    }

    #[test]
    fn strategy2_needs_pool_at_least_batch() {
        let c = RunConfig {
            batch_len: 16,
            pool_size: 8,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            strategy: PairingStrategy::Strategy1,
            ..c
        };
        assert!(c.validate().is_ok());
        assert_eq!(c.effective_pool(), 16);
    }

    #[test]
    fn windows() {
        assert_eq!(windowed_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
