use std::path::{Path, PathBuf};

use adaptgen::config::ExperimentConfig;
use adaptgen::corpus::{sample_prompt_batch, TaskDataset};
use adaptgen::decoder::{validate_spec, HyperDecoder};
use adaptgen::eval::{
    aggregate_reports, efficiency_report, evaluate_generator, generate_adapter, training_provenance, zoo_tasks,
    EvalReport, ZooContext,
};
use adaptgen::trainer::{make_pair, GeneratorTrainer, GENERATOR_FILE};
use adaptgen::weightmap::{export_weight_map, intra_inter, nearest_centroids, TsneParams};
use adaptgen::zoo::{pretrain_backbone, BackboneWeights, LoraCheckpoint, ZooManifest, MANIFEST_FILE};
use adaptgen::{seed, Error, Result};
use serde_json::{json, Value};

use crate::lock::RunLock;
use crate::{Baselines, Cli, Command};

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn corpus_path(&self, task: &str) -> PathBuf {
        self.dir.join("corpus").join(format!("{task}.jsonl"))
    }
    fn zoo_dir(&self) -> PathBuf {
        self.dir.join("zoo")
    }
    fn generator_dir(&self) -> PathBuf {
        self.dir.join("generator")
    }

    fn load_corpus(&self, task: &str) -> Result<TaskDataset> {
        let p = self.corpus_path(task);
        if !p.exists() {
            return Err(Error::Config(format!(
                "corpus file {} is missing; run `adaptgen corpus` first",
                p.display()
            )));
        }
        TaskDataset::load_jsonl(&p)
    }

    fn load_zoo(&self) -> Result<ZooManifest> {
        let dir = self.zoo_dir();
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!(
                "zoo manifest {} is missing; run `adaptgen collect-zoo` first",
                dir.join(MANIFEST_FILE).display()
            )));
        }
        ZooManifest::load(&dir)
    }

    fn load_generator(&self) -> Result<HyperDecoder> {
        let p = self.generator_dir().join(GENERATOR_FILE);
        if !p.exists() {
            return Err(Error::Config(format!(
                "generator {} is missing; run `adaptgen train-generator` first",
                p.display()
            )));
        }
        HyperDecoder::load(&p)
    }
}

fn resolve(cli: &Cli) -> Result<Run> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &cli.overrides)?,
        None => ExperimentConfig::with_overrides(&cli.overrides)?,
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    let dir = cli.run_dir.clone().unwrap_or_else(|| cfg.run_dir());
    Ok(Run { cfg, dir })
}

fn write_snapshot(run: &Run) -> Result<()> {
    let path = run.dir.join("config.toml");
    let text = toml::to_string_pretty(&run.cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn run(cli: Cli) -> Result<Value> {
    if let Command::Report { runs, dest } = &cli.command {
        return report(runs, dest);
    }
    let run = resolve(&cli)?;
    let _lock = RunLock::acquire(&run.dir)?;
    write_snapshot(&run)?;
    let mut out = match &cli.command {
        Command::Corpus => corpus(&run),
        Command::CollectZoo => collect_zoo(&run),
        Command::TrainGenerator { dry_run, resume } => train_generator(&run, *dry_run, *resume),
        Command::Generate { task, draw } => generate(&run, task, *draw),
        Command::Evaluate { baselines } => evaluate(&run, *baselines),
        Command::WeightMap => weight_map(&run),
        Command::Efficiency { task } => efficiency(&run, task.as_deref()),
        Command::Report { .. } => unreachable!("handled above"),
    }?;
    out["run_dir"] = json!(run.dir);
    out["config_hash"] = json!(run.cfg.hash());
    Ok(out)
}

fn corpus(run: &Run) -> Result<Value> {
    let mut files = Vec::new();
    for d in run.cfg.build_corpus()? {
        let p = run.corpus_path(&d.task_id);
        std::fs::create_dir_all(p.parent().expect("has parent")).map_err(|e| Error::io(&p, e))?;
        d.save_jsonl(&p)?;
        files.push(json!({ "task_id": d.task_id, "path": p, "samples": d.samples.len() }));
    }
    Ok(json!({ "command": "corpus", "files": files }))
}

fn collect_zoo(run: &Run) -> Result<Value> {
    let tasks = run
        .cfg
        .task_ids()
        .iter()
        .map(|t| run.load_corpus(t))
        .collect::<Result<Vec<_>>>()?;
    let init = BackboneWeights::init(&run.cfg.backbone.config)?;
    let (base, losses) = pretrain_backbone(init, &run.cfg.pretrain_corpus()?, &run.cfg.backbone.pretrain)?;
    let manifest = ZooManifest::collect(&run.zoo_dir(), &base, &tasks, &run.cfg.zoo)?;
    Ok(json!({
        "command": "collect-zoo",
        "entries": manifest.entries.len(),
        "tasks": manifest.task_ids(),
        "backbone_final_loss": losses.last(),
        "content_hash": manifest.content_hash()?,
    }))
}

/// Backbone, datasets and checkpoints of every zoo task.
fn context_parts(run: &Run) -> Result<(BackboneWeights, Vec<(TaskDataset, Vec<LoraCheckpoint>)>)> {
    let zoo = run.load_zoo()?;
    let base = zoo.backbone()?;
    let tasks = zoo
        .task_ids()
        .iter()
        .map(|t| Ok((run.load_corpus(t)?, zoo.load_task(t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((base, tasks))
}

fn train_generator(run: &Run, dry_run: bool, resume: bool) -> Result<Value> {
    let cfg = &run.cfg;
    let layout = cfg.layout()?;
    let spec = cfg.decoder_spec(&layout);
    validate_spec(&spec, Some(layout.grid)).map_err(|d| {
        Error::Config(format!(
            "decoder spec does not fit the weight grid: {d} (spec output {:?}, layout grid {:?})",
            spec.output_dims(),
            layout.grid
        ))
    })?;
    let (train_ids, _) = cfg.split_tasks()?;
    let (base, tasks) = context_parts(run)?;
    let encoder = cfg.encoder()?;
    let ctx = ZooContext { base: &base, tasks, layout: &layout, encoder: encoder.as_ref() };
    let zoo = zoo_tasks(&ctx, &train_ids)?;
    // pre-flight: one pair end to end
    let pair = make_pair(&zoo, encoder.as_ref(), &cfg.run, seed::derive(cfg.run.seed, "preflight"))?;
    adaptgen::trainer::fit_embedding(&pair.embedding, spec.input)?;
    if dry_run {
        return Ok(json!({
            "command": "train-generator",
            "dry_run": true,
            "train_tasks": train_ids,
            "steps": 0,
            "decoder_params": HyperDecoder::init(&spec, cfg.run.seed)?.n_params(),
        }));
    }
    let dir = run.generator_dir();
    let mut trainer = if resume {
        let t = GeneratorTrainer::resume(&dir, &cfg.run)?;
        if t.decoder.spec != spec {
            return Err(Error::Config("saved generator spec differs from the configured spec".into()));
        }
        t
    } else {
        GeneratorTrainer::new(&spec, &layout, &cfg.run)?
    };
    let start = trainer.step;
    trainer.run(&zoo, encoder.as_ref())?;
    trainer.save(&dir)?;
    Ok(json!({
        "command": "train-generator",
        "train_tasks": train_ids,
        "resumed_from": if resume { Some(start) } else { None },
        "steps": trainer.step,
        "final_loss": trainer.losses().last(),
        "generator_digest": trainer.decoder.digest(),
    }))
}

fn generate(run: &Run, task: &str, draw: u64) -> Result<Value> {
    let cfg = &run.cfg;
    let generator = run.load_generator()?;
    let dataset = run.load_corpus(task)?;
    let layout = cfg.layout()?;
    let encoder = cfg.encoder()?;
    let s = seed::derive_indexed(cfg.eval.options.seed, &format!("inference-{task}"), draw);
    let batch = sample_prompt_batch(&dataset, cfg.run.batch_len, cfg.run.effective_pool(), s, cfg.run.condition_source)?;
    let adapter = generate_adapter(&generator, &batch, encoder.as_ref(), &layout)?;
    let path = run.dir.join("generated").join(format!("{task}.lora"));
    adapter.save(&path)?;
    Ok(json!({ "command": "generate", "task_id": task, "path": path }))
}

fn evaluate(run: &Run, baselines: Baselines) -> Result<Value> {
    let cfg = &run.cfg;
    let generator = run.load_generator()?;
    let layout = cfg.layout()?;
    let (base, tasks) = context_parts(run)?;
    let encoder = cfg.encoder()?;
    let ctx = ZooContext { base: &base, tasks, layout: &layout, encoder: encoder.as_ref() };
    let (train_ids, test_ids) = cfg.split_tasks()?;
    let protocol = serde_json::to_value(cfg.eval.protocol)?;
    let report = evaluate_generator(
        &ctx,
        &generator,
        protocol.as_str().unwrap_or("openset"),
        &train_ids,
        &test_ids,
        &cfg.run,
        &cfg.eval.options,
        training_provenance(&train_ids, &cfg.run),
        matches!(baselines, Baselines::All),
    )?;
    let dir = run.dir.join("eval");
    report.save(&dir)?;
    Ok(json!({
        "command": "evaluate",
        "report": dir.join("report.json"),
        "mean_improvement": report.mean_improvement(),
        "rows": report.rows,
    }))
}

fn report(runs: &[PathBuf], dest: &Path) -> Result<Value> {
    let reports = runs
        .iter()
        .map(|r| EvalReport::load(&r.join("eval")))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_reports(&reports)?;
    agg.save(dest)?;
    Ok(json!({ "command": "report", "dest": dest, "columns": agg.columns, "rows": agg.rows.len() }))
}

fn weight_map(run: &Run) -> Result<Value> {
    let zoo = run.load_zoo()?;
    let mut originals = Vec::new();
    for t in zoo.task_ids() {
        originals.extend(zoo.load_task(&t)?);
    }
    let mut generated = Vec::new();
    let gen_dir = run.dir.join("generated");
    if gen_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&gen_dir)
            .map_err(|e| Error::io(&gen_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "lora"))
            .collect();
        paths.sort();
        for p in paths {
            let mut c = LoraCheckpoint::load(&p)?;
            c.task_id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            generated.push(c);
        }
    }
    let params = TsneParams {
        seed: seed::derive(run.cfg.seed, "weight-map"),
        ..TsneParams::default()
    };
    let dir = run.dir.join("weight_map");
    let points = export_weight_map(&originals, &generated, &params, Some(&dir))?;
    let (intra, inter) = intra_inter(&points);
    Ok(json!({
        "command": "weight-map",
        "points": points.len(),
        "mean_intra_distance": intra,
        "mean_inter_distance": inter,
        "nearest_centroids": nearest_centroids(&points),
        "plot": dir.join("weight_map.png"),
        "csv": dir.join("weight_map.csv"),
    }))
}

fn efficiency(run: &Run, task: Option<&str>) -> Result<Value> {
    let cfg = &run.cfg;
    let generator = run.load_generator()?;
    let layout = cfg.layout()?;
    let (base, tasks) = context_parts(run)?;
    let encoder = cfg.encoder()?;
    let ctx = ZooContext { base: &base, tasks, layout: &layout, encoder: encoder.as_ref() };
    let (_, test_ids) = cfg.split_tasks()?;
    let task = task.map(str::to_string).unwrap_or_else(|| test_ids[0].clone());
    let timing = efficiency_report(&ctx, &generator, &task, &cfg.zoo, &cfg.run, seed::derive(cfg.seed, "efficiency"))?;
    let path = run.dir.join("efficiency.json");
    std::fs::write(&path, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&path, e))?;
    Ok(json!({ "command": "efficiency", "task_id": task, "timing": timing, "path": path }))
}
