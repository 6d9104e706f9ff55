//! Inference protocol, close-set / open-set / cross-domain evaluation and
//! efficiency timing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_values, WeightLayout};
use crate::corpus::{sample_prompt_batch, ConditionSource, PromptBatch, Split, TaskDataset};
use crate::decoder::{DecoderSpec, HyperDecoder};
use crate::encoder::{encode_batch, ConditionEncoder};
use crate::error::{domain, Error, Result};
use crate::seed;
use crate::trainer::{fit_embedding, train, PairingStrategy, RunConfig, ZooTask};
use crate::zoo::{collect_checkpoints, evaluate, BackboneWeights, LoraCheckpoint, ZooRecipe};

/// One forward pass from a prompt batch to an adapter. No gradients, no
/// answers unless the batch itself carries them.
pub fn generate_adapter(
    generator: &HyperDecoder,
    batch: &PromptBatch,
    encoder: &dyn ConditionEncoder,
    layout: &WeightLayout,
) -> Result<LoraCheckpoint> {
    let input = generator.spec.input;
    if batch.len() != input.0 {
        return Err(domain!(
            "prompt batch has {} items but the generator was trained with batch_len {}",
            batch.len(),
            input.0
        ));
    }
    let emb = encode_batch(batch, encoder)?;
    let x = fit_embedding(&emb, input)?.insert_axis(Axis(0));
    let y = generator.forward(&x)?;
    let mut adapter = decode_values(y.index_axis(Axis(0), 0), layout)?;
    adapter.task_id = format!("generated:{}", batch.task_id);
    Ok(adapter)
}

/// Everything a protocol needs: backbone, per-task data and checkpoints.
pub struct ZooContext<'a> {
    pub base: &'a BackboneWeights,
    pub tasks: Vec<(TaskDataset, Vec<LoraCheckpoint>)>,
    pub layout: &'a WeightLayout,
    pub encoder: &'a dyn ConditionEncoder,
}

impl ZooContext<'_> {
    fn task(&self, id: &str) -> Result<&(TaskDataset, Vec<LoraCheckpoint>)> {
        self.tasks
            .iter()
            .find(|(d, _)| d.task_id == id)
            .ok_or_else(|| domain!("unknown task '{id}'"))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|(d, _)| d.task_id.clone()).collect()
    }

    /// The adapter that stands for a task in baseline columns: its last checkpoint.
    pub fn final_adapter(&self, id: &str) -> Result<&LoraCheckpoint> {
        let (_, ckpts) = self.task(id)?;
        ckpts
            .iter()
            .max_by_key(|c| c.step_id)
            .ok_or_else(|| domain!("task '{id}' has no checkpoints"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Prompt batches per evaluated task; the generated accuracy is their mean.
    pub generations: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            generations: 3,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    /// Mean over `generated_runs`.
    pub generated: f64,
    pub generated_runs: Vec<f64>,
    /// Accuracy of each training task's adapter on this task.
    pub training_adapters: BTreeMap<String, f64>,
    pub training_average: Option<f64>,
    pub base: Option<f64>,
    /// The task's own final checkpoint. For held-out tasks this is a baseline
    /// only and never reaches the generator.
    pub full_shot: Option<f64>,
}

impl TaskRow {
    /// Generated minus training-adapter average; `None` without baselines.
    pub fn improvement(&self) -> Option<f64> {
        self.training_average.map(|a| self.generated - a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingMeta {
    pub strategy: PairingStrategy,
    pub pool_size: usize,
    pub batch_len: usize,
    pub condition_source: ConditionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generation_seconds: f64,
    pub tuning_seconds: f64,
    pub speedup_ratio: f64,
    /// First-call encoder cost, excluded from `generation_seconds`.
    pub encoder_warmup_seconds: f64,
}

/// Which tasks each stage touched. Checked by [`EvalReport::audit`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_checkpoints: BTreeSet<String>,
    pub generator_prompts: BTreeSet<String>,
    pub answers_read: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub train_tasks: Vec<String>,
    pub test_tasks: Vec<String>,
    pub rows: Vec<TaskRow>,
    pub pairing: PairingMeta,
    pub timing: Option<Timing>,
    pub seeds: BTreeMap<String, u64>,
    pub provenance: Provenance,
    pub final_loss: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, task_id: &str) -> Option<&TaskRow> {
        self.rows.iter().find(|r| r.task_id == task_id)
    }

    pub fn mean_improvement(&self) -> Option<f64> {
        let v = self.rows.iter().map(TaskRow::improvement).collect::<Option<Vec<f64>>>()?;
        Some(v.iter().sum::<f64>() / v.len().max(1) as f64)
    }

    /// Range and recomputation checks on every stored number.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for r in &self.rows {
            let all = [Some(r.generated), r.training_average, r.base, r.full_shot]
                .into_iter()
                .flatten()
                .chain(r.generated_runs.iter().copied())
                .chain(r.training_adapters.values().copied());
            for v in all {
                if !in_unit(v) {
                    return Err(domain!("accuracy {v} outside [0, 1] for '{}'", r.task_id));
                }
            }
            match (r.training_average, r.training_adapters.is_empty()) {
                (Some(avg), false) => {
                    let mean = r.training_adapters.values().sum::<f64>() / r.training_adapters.len() as f64;
                    if (mean - avg).abs() > 1e-9 {
                        return Err(domain!("stored training average for '{}' does not recompute", r.task_id));
                    }
                }
                (None, true) => {}
                _ => return Err(domain!("training average and adapter columns disagree for '{}'", r.task_id)),
            }
            if !r.generated_runs.is_empty() {
                let mean = r.generated_runs.iter().sum::<f64>() / r.generated_runs.len() as f64;
                if (mean - r.generated).abs() > 1e-9 {
                    return Err(domain!("stored generated mean for '{}' does not recompute", r.task_id));
                }
            }
        }
        Ok(())
    }

    /// No held-out task's checkpoints or answers may have reached the
    /// generator. Answers of held-out tasks are allowed only as conditions
    /// when the condition source uses them.
    pub fn audit(&self) -> Result<()> {
        let held_out: BTreeSet<&String> = self.test_tasks.iter().filter(|t| !self.train_tasks.contains(t)).collect();
        for t in held_out {
            if self.provenance.generator_checkpoints.contains(t) || self.provenance.generator_prompts.contains(t) {
                return Err(domain!("held-out task '{t}' leaked into generator training"));
            }
            if self.provenance.answers_read.contains(t) && !self.pairing.condition_source.uses_answers() {
                return Err(domain!("answers of held-out task '{t}' were read under prompt_only"));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["task_id", "column", "accuracy"]).map_err(|e| csv_err(&path, e))?;
        for r in &self.rows {
            let mut cols = vec![("generated".to_string(), r.generated)];
            let optional = [
                ("training_average", r.training_average),
                ("base", r.base),
                ("full_shot", r.full_shot),
            ];
            cols.extend(optional.iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
            cols.extend(r.training_adapters.iter().map(|(k, v)| (format!("adapter:{k}"), *v)));
            for (c, v) in cols {
                w.write_record([r.task_id.as_str(), c.as_str(), &format!("{v}")])
                    .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.into(),
        detail: e.to_string(),
    }
}

/// Evaluates an already trained generator on `test_ids`. `provenance` must
/// describe what the generator was trained on; this function adds the reads
/// it performs itself.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generator(
    ctx: &ZooContext,
    generator: &HyperDecoder,
    protocol: &str,
    train_ids: &[String],
    test_ids: &[String],
    run: &RunConfig,
    opts: &EvalOptions,
    mut provenance: Provenance,
    baselines: bool,
) -> Result<EvalReport> {
    if test_ids.is_empty() {
        return Err(domain!("{protocol}: at least one test task is required"));
    }
    let mut rows = Vec::new();
    for id in test_ids {
        let (dataset, _) = ctx.task(id)?;
        if run.condition_source.uses_answers() {
            provenance.answers_read.insert(id.clone());
        }
        let mut runs = Vec::with_capacity(opts.generations);
        for g in 0..opts.generations.max(1) {
            let s = seed::derive_indexed(opts.seed, &format!("inference-{id}"), g as u64);
            let batch = sample_prompt_batch(dataset, run.batch_len, run.effective_pool(), s, run.condition_source)?;
            let adapter = generate_adapter(generator, &batch, ctx.encoder, ctx.layout)?;
            runs.push(evaluate(ctx.base, Some(&adapter), dataset, opts.split)?);
        }
        let mut row = TaskRow {
            task_id: id.clone(),
            generated: runs.iter().sum::<f64>() / runs.len() as f64,
            generated_runs: runs,
            training_adapters: BTreeMap::new(),
            training_average: None,
            base: None,
            full_shot: None,
        };
        if baselines {
            for t in train_ids {
                let acc = evaluate(ctx.base, Some(ctx.final_adapter(t)?), dataset, opts.split)?;
                row.training_adapters.insert(t.clone(), acc);
            }
            if !row.training_adapters.is_empty() {
                row.training_average =
                    Some(row.training_adapters.values().sum::<f64>() / row.training_adapters.len() as f64);
            }
            row.base = Some(evaluate(ctx.base, None, dataset, opts.split)?);
            row.full_shot = Some(evaluate(ctx.base, Some(ctx.final_adapter(id)?), dataset, opts.split)?);
        }
        rows.push(row);
    }
    let seeds = BTreeMap::from([("run".to_string(), run.seed), ("eval".to_string(), opts.seed)]);
    let report = EvalReport {
        protocol: protocol.into(),
        train_tasks: train_ids.to_vec(),
        test_tasks: test_ids.to_vec(),
        rows,
        pairing: PairingMeta {
            strategy: run.strategy,
            pool_size: run.effective_pool(),
            batch_len: run.batch_len,
            condition_source: run.condition_source,
        },
        timing: None,
        seeds,
        provenance,
        final_loss: None,
    };
    report.validate()?;
    report.audit()?;
    Ok(report)
}

/// Training-side provenance for a generator trained on `train_ids`.
pub fn training_provenance(train_ids: &[String], run: &RunConfig) -> Provenance {
    let ids: BTreeSet<String> = train_ids.iter().cloned().collect();
    Provenance {
        generator_checkpoints: ids.clone(),
        generator_prompts: ids.clone(),
        answers_read: if run.condition_source.uses_answers() { ids } else { BTreeSet::new() },
    }
}

/// Tokenized zoo for the given tasks.
pub fn zoo_tasks(ctx: &ZooContext, ids: &[String]) -> Result<Vec<ZooTask>> {
    ids.iter()
        .map(|id| {
            let (d, c) = ctx.task(id)?;
            ZooTask::new(d.clone(), c, ctx.layout)
        })
        .collect()
}

/// Trains a generator on `train` tasks and evaluates it on `test` tasks with
/// every baseline column. `test` may overlap `train` (close-set) or not.
pub fn run_protocol(
    ctx: &ZooContext,
    protocol: &str,
    train_ids: &[String],
    test_ids: &[String],
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<(EvalReport, HyperDecoder)> {
    if train_ids.is_empty() {
        return Err(domain!("{protocol}: at least one training task is required"));
    }
    let zoo = zoo_tasks(ctx, train_ids)?;
    let trainer = train(&zoo, ctx.encoder, spec, ctx.layout, run, None)?;
    let final_loss = trainer.losses().last().copied();
    let generator = trainer.decoder;
    let provenance = training_provenance(train_ids, run);
    let mut report = evaluate_generator(ctx, &generator, protocol, train_ids, test_ids, run, opts, provenance, true)?;
    report.final_loss = final_loss;
    Ok((report, generator))
}

/// Generator trained on every task, evaluated on the same tasks.
pub fn closeset_protocol(
    ctx: &ZooContext,
    tasks: &[String],
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    Ok(run_protocol(ctx, "closeset", tasks, tasks, spec, run, opts)?.0)
}

/// Generator trained on everything except `holdout`, evaluated on `holdout`.
pub fn openset_protocol(
    ctx: &ZooContext,
    tasks: &[String],
    holdout: &str,
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if !tasks.iter().any(|t| t == holdout) {
        return Err(domain!("holdout '{holdout}' is not among the tasks"));
    }
    let train_ids: Vec<String> = tasks.iter().filter(|t| *t != holdout).cloned().collect();
    Ok(run_protocol(ctx, "openset", &train_ids, &[holdout.to_string()], spec, run, opts)?.0)
}

/// Cyclic `k`-train / `(n-k)`-test arrangements: rotation `i` tests on tasks
/// `i, i+1, …, i+n-k-1` (mod n) and trains on the rest.
pub fn arrangements(tasks: &[String], k_train: usize) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let n = tasks.len();
    if k_train == 0 || k_train >= n {
        return Err(domain!("k_train must be in 1..{n}, got {k_train}"));
    }
    Ok((0..n)
        .map(|i| {
            let test: Vec<String> = (0..n - k_train).map(|j| tasks[(i + j) % n].clone()).collect();
            let train = tasks.iter().filter(|t| !test.contains(t)).cloned().collect();
            (train, test)
        })
        .collect())
}

/// One report per arrangement rotation.
pub fn arrangement_protocol(
    ctx: &ZooContext,
    tasks: &[String],
    k_train: usize,
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    arrangements(tasks, k_train)?
        .iter()
        .map(|(train, test)| {
            Ok(run_protocol(ctx, &format!("arrangement_{k_train}v{}", tasks.len() - k_train), train, test, spec, run, opts)?.0)
        })
        .collect()
}

/// Family-level holdout. Families must not share a task kind.
pub fn crossdomain_protocol(
    ctx: &ZooContext,
    train_family: &[String],
    test_family: &[String],
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let kinds = |ids: &[String]| -> Result<BTreeSet<String>> {
        ids.iter().map(|id| Ok(ctx.task(id)?.0.kind.name().to_string())).collect()
    };
    let (a, b) = (kinds(train_family)?, kinds(test_family)?);
    if let Some(k) = a.intersection(&b).next() {
        return Err(domain!("task kind '{k}' appears in both families"));
    }
    Ok(run_protocol(ctx, "crossdomain", train_family, test_family, spec, run, opts)?.0)
}

/// Same open-set run repeated for each condition source.
pub fn condition_ablation(
    ctx: &ZooContext,
    tasks: &[String],
    holdout: &str,
    spec: &DecoderSpec,
    run: &RunConfig,
    opts: &EvalOptions,
) -> Result<BTreeMap<String, EvalReport>> {
    let sources = [
        ("prompt_only", ConditionSource::PromptOnly),
        ("prompt_plus_answer", ConditionSource::PromptPlusAnswer),
        ("mixed", ConditionSource::Mixed),
    ];
    let mut out = BTreeMap::new();
    for (name, source) in sources {
        let cfg = RunConfig {
            condition_source: source,
            ..run.clone()
        };
        out.insert(name.to_string(), openset_protocol(ctx, tasks, holdout, spec, &cfg, opts)?);
    }
    Ok(out)
}

/// Wall clock of one generation versus the full collection recipe for `task`.
pub fn efficiency_report(
    ctx: &ZooContext,
    generator: &HyperDecoder,
    task: &str,
    recipe: &ZooRecipe,
    run: &RunConfig,
    seed: u64,
) -> Result<Timing> {
    let (dataset, _) = ctx.task(task)?;
    let batch = sample_prompt_batch(dataset, run.batch_len, run.effective_pool(), seed, run.condition_source)?;

    let t = Instant::now();
    encode_batch(&batch, ctx.encoder)?;
    let encoder_warmup_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let adapter = generate_adapter(generator, &batch, ctx.encoder, ctx.layout)?;
    let generation_seconds = t.elapsed().as_secs_f64();
    std::hint::black_box(adapter);

    let t = Instant::now();
    let ckpts = collect_checkpoints(ctx.base, dataset, recipe)?;
    let tuning_seconds = t.elapsed().as_secs_f64();
    std::hint::black_box(ckpts);

    Ok(Timing {
        generation_seconds,
        tuning_seconds,
        speedup_ratio: tuning_seconds / generation_seconds.max(1e-12),
        encoder_warmup_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl ColumnStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: String,
    pub train_tasks: Vec<String>,
    pub test_task: String,
    pub generated: f64,
    pub training_average: Option<f64>,
    pub base: Option<f64>,
    pub full_shot: Option<f64>,
    pub improvement: Option<f64>,
}

/// Rows of several reports in one table, with per-column mean and std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    pub columns: BTreeMap<String, ColumnStats>,
}

pub fn aggregate_reports(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(domain!("no reports to aggregate"));
    }
    let rows: Vec<AggregateRow> = reports
        .iter()
        .flat_map(|rep| {
            rep.rows.iter().map(|r| AggregateRow {
                protocol: rep.protocol.clone(),
                train_tasks: rep.train_tasks.clone(),
                test_task: r.task_id.clone(),
                generated: r.generated,
                training_average: r.training_average,
                base: r.base,
                full_shot: r.full_shot,
                improvement: r.improvement(),
            })
        })
        .collect();
    let mut columns = BTreeMap::new();
    let pick: [(&str, fn(&AggregateRow) -> Option<f64>); 5] = [
        ("generated", |r| Some(r.generated)),
        ("training_average", |r| r.training_average),
        ("base", |r| r.base),
        ("full_shot", |r| r.full_shot),
        ("improvement", |r| r.improvement),
    ];
    for (name, f) in pick {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        if let Some(s) = ColumnStats::of(&v) {
            columns.insert(name.to_string(), s);
        }
    }
    Ok(Aggregate { rows, columns })
}

impl Aggregate {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("aggregate.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("aggregate.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["column", "mean", "std", "n"]).map_err(|e| csv_err(&path, e))?;
        for (k, s) in &self.columns {
            w.write_record([k.clone(), s.mean.to_string(), s.std.to_string(), s.n.to_string()])
                .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Stacks a batch of embeddings for the decoder.
pub fn stack_inputs(inputs: &[ndarray::Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("inputs share one shape")
}
