//! Backbone pretraining, LoRA fine-tuning, checkpoint collection and
//! exact-match evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Split, TaskDataset};
use crate::error::{domain, Error, Result};
use crate::optim::{clip_grad_norm, AdamW};
use crate::seed;

use super::backbone::{answer_cross_entropy, backward, exact_match, forward, BackboneWeights, GradScope};
use super::lora::{merge, LoraCheckpoint};

type Example = (Vec<u32>, usize);

fn examples(w: &BackboneWeights, dataset: &TaskDataset, split: Split) -> Result<Vec<Example>> {
    dataset
        .split(split)
        .map(|s| w.config.sequence(&s.prompt, &s.answer))
        .collect()
}

/// Mean answer-token loss over `batch` and its gradient (already divided by the
/// number of scored tokens).
fn batch_gradient(w: &BackboneWeights, batch: &[&Example], scope: GradScope) -> (f64, BackboneWeights) {
    let mut grads = w.zeros_like();
    let mut total = 0.0;
    let mut count = 0;
    let mut dls = Vec::with_capacity(batch.len());
    for (ids, sep) in batch {
        let (logits, cache) = forward(w, &ids[..ids.len() - 1]);
        let (loss, n, dl) = answer_cross_entropy(logits.view(), ids, *sep);
        total += loss;
        count += n;
        dls.push((cache, dl));
    }
    let inv = 1.0 / count.max(1) as f32;
    for (cache, dl) in dls {
        backward(w, &cache, &(dl * inv), &mut grads, scope);
    }
    (total / count.max(1) as f64, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Full-parameter training of the backbone on a uniform mixture of tasks. This
/// produces the frozen `W₀` that adapters are later trained against.
pub fn pretrain_backbone(
    init: BackboneWeights,
    tasks: &[TaskDataset],
    cfg: &PretrainConfig,
) -> Result<(BackboneWeights, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(domain!("backbone pretraining needs at least one task"));
    }
    let mut w = init;
    let data = tasks
        .iter()
        .map(|t| examples(&w, t, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "pretrain-batch", step as u64));
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| {
                let t = &data[rng.random_range(0..data.len())];
                &t[rng.random_range(0..t.len())]
            })
            .collect();
        // cosine decay to 10% of the peak rate
        let progress = step as f64 / cfg.steps.max(1) as f64;
        opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let (loss, mut g) = batch_gradient(&w, &batch, GradScope::All);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: "backbone pretraining loss is not finite".into(),
            });
        }
        clip_grad_norm(&mut g.tensors_mut(), 1.0);
        let grads: Vec<Vec<f32>> = g.tensors_mut().into_iter().map(|t| t.to_vec()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        opt.step(&mut w.tensors_mut(), &grad_refs);
        losses.push(loss);
    }
    Ok((w, losses))
}

/// Stateful LoRA fine-tuning against a frozen backbone. Only `A` and `B`
/// receive updates.
pub struct LoraTrainer<'a> {
    base: &'a BackboneWeights,
    data: Vec<Example>,
    pub adapter: LoraCheckpoint,
    opt: AdamW,
    batch_size: usize,
    seed: u64,
    pub step: usize,
}

impl<'a> LoraTrainer<'a> {
    pub fn new(
        base: &'a BackboneWeights,
        dataset: &TaskDataset,
        rank: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let data = examples(base, dataset, Split::Train)?;
        if data.is_empty() {
            return Err(domain!("task '{}' has no train samples", dataset.task_id));
        }
        let mut adapter = LoraCheckpoint::init(&base.config, rank, seed)?;
        adapter.task_id = dataset.task_id.clone();
        Ok(Self {
            base,
            data,
            adapter,
            opt: AdamW::new(0.0, 0.0),
            batch_size: batch_size.max(1),
            seed,
            step: 0,
        })
    }

    /// Replaces the initial adapter with one drawn from `init_seed`. Only
    /// valid before the first step.
    pub fn with_init_seed(mut self, init_seed: u64) -> Result<Self> {
        if self.step != 0 {
            return Err(domain!("adapter init can only change before training starts"));
        }
        let task_id = std::mem::take(&mut self.adapter.task_id);
        self.adapter = LoraCheckpoint::init(&self.base.config, self.adapter.rank, init_seed)?;
        self.adapter.task_id = task_id;
        Ok(self)
    }

    /// One optimizer step at learning rate `lr`; returns the batch loss.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let mut rng = seed::rng(seed::derive_indexed(self.seed, "lora-batch", self.step as u64));
        let batch: Vec<&Example> = (0..self.batch_size)
            .map(|_| &self.data[rng.random_range(0..self.data.len())])
            .collect();
        let merged = merge(self.base, &self.adapter)?;
        let (loss, g) = batch_gradient(&merged, &batch, GradScope::QueryValue);
        if !loss.is_finite() {
            return Err(Error::Training {
                step: self.step,
                detail: format!("LoRA loss is not finite on task '{}'", self.adapter.task_id),
            });
        }
        // chain rule through W = W0 + B A: dB = dW Aᵀ, dA = Bᵀ dW
        let mut grads = Vec::with_capacity(self.adapter.layers.len() * 2);
        for (li, l) in self.adapter.layers.iter().enumerate() {
            let layer = &g.layers[li / 2];
            let dw = if li % 2 == 0 { &layer.wq } else { &layer.wv };
            grads.push(l.b.t().dot(dw));
            grads.push(dw.dot(&l.a.t()));
        }
        let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.as_slice().unwrap()).collect();
        let mut params: Vec<&mut [f32]> = self
            .adapter
            .layers
            .iter_mut()
            .flat_map(|l| [l.a.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect();
        self.opt.lr = lr;
        self.opt.step(&mut params, &grad_slices);
        self.step += 1;
        self.adapter.step_id = self.step;
        if !self.adapter.is_finite() {
            return Err(Error::Training {
                step: self.step - 1,
                detail: "adapter weights became non-finite".into(),
            });
        }
        Ok(loss)
    }
}

/// Trains a rank-`rank` adapter for `steps` steps. Returns the adapter and the
/// per-step loss trace.
pub fn train_lora(
    base: &BackboneWeights,
    dataset: &TaskDataset,
    rank: usize,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(LoraCheckpoint, Vec<f64>)> {
    if steps == 0 {
        return Err(domain!("train_lora needs steps >= 1"));
    }
    let mut t = LoraTrainer::new(base, dataset, rank, batch_size, seed)?;
    let losses = (0..steps).map(|_| t.step(lr)).collect::<Result<Vec<_>>>()?;
    Ok((t.adapter, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub lr: f64,
    pub steps: usize,
}

/// Two-phase collection recipe: an unsaved warm-up phase, then one saved
/// checkpoint per fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooRecipe {
    pub rank: usize,
    pub batch_size: usize,
    pub pretrain: Phase,
    pub finetune: Phase,
    pub seed: u64,
    /// Every task starts from the same `A` draw. Batch order stays per task.
    pub shared_init: bool,
}

impl Default for ZooRecipe {
    fn default() -> Self {
        Self {
            rank: 4,
            batch_size: 32,
            pretrain: Phase { lr: 1e-4, steps: 75 },
            finetune: Phase { lr: 1e-5, steps: 50 },
            seed: 0,
            shared_init: true,
        }
    }
}

pub fn collect_checkpoints(
    base: &BackboneWeights,
    dataset: &TaskDataset,
    recipe: &ZooRecipe,
) -> Result<Vec<LoraCheckpoint>> {
    if recipe.finetune.steps == 0 {
        return Err(domain!("finetune.steps must be >= 1"));
    }
    let seed = seed::derive(recipe.seed, &dataset.task_id);
    let init_seed = if recipe.shared_init {
        seed::derive(recipe.seed, "adapter-init")
    } else {
        seed
    };
    let mut t = LoraTrainer::new(base, dataset, recipe.rank, recipe.batch_size, seed)?.with_init_seed(init_seed)?;
    for _ in 0..recipe.pretrain.steps {
        t.step(recipe.pretrain.lr)?;
    }
    let mut out = Vec::with_capacity(recipe.finetune.steps);
    for _ in 0..recipe.finetune.steps {
        t.step(recipe.finetune.lr)?;
        out.push(t.adapter.clone());
    }
    Ok(out)
}

/// Exact-match accuracy of greedy decoding on one split.
pub fn evaluate_weights(w: &BackboneWeights, dataset: &TaskDataset, split: Split) -> Result<f64> {
    let samples: Vec<_> = dataset.split(split).collect();
    if samples.is_empty() {
        return Err(domain!("split {split:?} of '{}' is empty", dataset.task_id));
    }
    let mut correct = 0usize;
    for s in &samples {
        correct += usize::from(exact_match(w, &s.prompt, &s.answer)?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Accuracy of `base` with `adapter` merged in (or the bare backbone).
pub fn evaluate(
    base: &BackboneWeights,
    adapter: Option<&LoraCheckpoint>,
    dataset: &TaskDataset,
    split: Split,
) -> Result<f64> {
    match adapter {
        Some(a) => evaluate_weights(&merge(base, a)?, dataset, split),
        None => evaluate_weights(base, dataset, split),
    }
}
