//! Acceptance suite: one PASS/FAIL line per criterion. Expensive fixtures
//! (backbone, zoo, open-set generators) are built once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use adaptgen::codec::{build_layout, decode, encode};
use adaptgen::config::ExperimentConfig;
use adaptgen::corpus::{make_task, sample_prompt_batch, ConditionSource, Split, TaskDataset, TaskKind};
use adaptgen::decoder::{validate_spec, BlockSpec, DecoderSpec, HyperDecoder};
use adaptgen::encoder::ConditionEncoder;
use adaptgen::eval::{
    efficiency_report, generate_adapter, run_protocol, arrangements, EvalReport, ZooContext,
};
use adaptgen::trainer::{augment_target, mse_grad, mse_loss, GeneratorTrainer, ZooTask};
use adaptgen::weightmap::{export_weight_map, intra_inter, TsneParams};
use adaptgen::zoo::{
    adapter_schema, backbone::forward, collect_checkpoints, merge, pretrain_backbone, BackboneConfig, BackboneWeights,
    LoraCheckpoint,
};
use ndarray::Array4;
use rand::Rng;

type Outcome = Result<(bool, String), String>;

struct Fixture {
    cfg: ExperimentConfig,
    base: BackboneWeights,
    tasks: Vec<(TaskDataset, Vec<LoraCheckpoint>)>,
    layout: adaptgen::codec::WeightLayout,
    encoder: Box<dyn ConditionEncoder>,
    spec: DecoderSpec,
}

impl Fixture {
    fn ctx(&self) -> ZooContext<'_> {
        ZooContext {
            base: &self.base,
            tasks: self.tasks.clone(),
            layout: &self.layout,
            encoder: self.encoder.as_ref(),
        }
    }
    fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|(d, _)| d.task_id.clone()).collect()
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();
/// One open-set report and generator per holdout rotation.
static OPENSET: OnceLock<Vec<(EvalReport, HyperDecoder)>> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let t = Instant::now();
        let cfg = ExperimentConfig::default().resolved().expect("desk config");
        let init = BackboneWeights::init(&cfg.backbone.config).expect("backbone init");
        let (base, _) = pretrain_backbone(init, &cfg.pretrain_corpus().unwrap(), &cfg.backbone.pretrain).unwrap();
        let tasks = cfg
            .build_corpus()
            .unwrap()
            .into_iter()
            .map(|d| {
                let c = collect_checkpoints(&base, &d, &cfg.zoo).unwrap();
                (d, c)
            })
            .collect();
        let layout = cfg.layout().unwrap();
        let spec = cfg.decoder_spec(&layout);
        let encoder = cfg.encoder().unwrap();
        eprintln!("      (fixture: backbone + zoo built in {:.0}s)", t.elapsed().as_secs_f64());
        Fixture { cfg, base, tasks, layout, encoder, spec }
    })
}

fn openset() -> &'static Vec<(EvalReport, HyperDecoder)> {
    OPENSET.get_or_init(|| {
        let f = fixture();
        let ctx = f.ctx();
        arrangements(&f.ids(), 4)
            .unwrap()
            .iter()
            .map(|(train, test)| run_protocol(&ctx, "openset", train, test, &f.spec, &f.cfg.run, &f.cfg.eval.options).unwrap())
            .collect()
    })
}

fn random_checkpoint(cfg: &BackboneConfig, rank: usize, seed: u64) -> LoraCheckpoint {
    let mut c = LoraCheckpoint::zeros(cfg, rank).unwrap();
    let mut rng = adaptgen::seed::rng(seed);
    for l in &mut c.layers {
        for v in l.a.iter_mut().chain(l.b.iter_mut()) {
            // mix ordinary values with extreme magnitudes and signed zeros
            *v = match rng.random_range(0..10) {
                0 => f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff),
                1 => -0.0,
                _ => rng.random_range(-1.0f32..1.0),
            };
        }
    }
    c
}

fn c1_codec_bijectivity() -> Outcome {
    let layouts = [(1, 3, 1), (2, 17, 5), (4, 128, 8), (8, 64, 3), (16, 100, 7), (4, 7, 2)];
    let mut checked = 0;
    for (li, &(rank, token_len, row_len)) in layouts.iter().enumerate() {
        let cfg = BackboneConfig::default();
        let layout = build_layout(&adapter_schema(&cfg, rank).unwrap(), token_len, row_len).unwrap();
        for k in 0..17 {
            let c = random_checkpoint(&cfg, rank, (li * 100 + k) as u64);
            let back = decode(&encode(&c, &layout).unwrap()).unwrap();
            let bits = |c: &LoraCheckpoint| c.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if bits(&back) != bits(&c) {
                return Ok((false, format!("layout {li} checkpoint {k} differs after round trip")));
            }
            checked += 1;
        }
    }
    Ok((checked >= 100, format!("{checked} checkpoints over {} layouts bit-exact", layouts.len())))
}

fn c2_decoder_shapes() -> Outcome {
    let desk = fixture_free_desk_spec();
    // wide schedule: many output tokens from a large square input
    let wide = DecoderSpec::chain((16, 96, 96), None, &[(64, 48, 112), (256, 24, 128), (537, 8, 128)]);
    let mut front = DecoderSpec::chain((8, 40, 32), Some(16), &[(4, 12, 48), (3, 8, 64)]);
    front.blocks[1] = BlockSpec::new((4, 12, 48), (3, 8, 64)).with_kernels((5, 3));
    let mut details = Vec::new();
    for (name, spec) in [("desk", desk), ("wide", wide), ("front-projection", front)] {
        let grid = spec.output_dims();
        if let Err(d) = validate_spec(&spec, Some(grid)) {
            return Ok((false, format!("{name}: {d}")));
        }
        let dec = HyperDecoder::init(&spec, 1).map_err(|e| e.to_string())?;
        for b in [1, 4] {
            let x = Array4::from_shape_fn((b, spec.input.0, spec.input.1, spec.input.2), |(i, j, k, l)| {
                ((i * 31 + j * 7 + k * 3 + l) % 13) as f64 / 13.0 - 0.5
            });
            let y = dec.forward(&x).map_err(|e| e.to_string())?;
            if y.dim() != (b, grid.0, grid.1, grid.2) || !y.iter().all(|v| v.is_finite()) {
                return Ok((false, format!("{name}: B={b} gave {:?}", y.dim())));
            }
        }
        details.push(format!("{name}->{grid:?}"));
    }
    Ok((true, details.join(", ")))
}

fn fixture_free_desk_spec() -> DecoderSpec {
    let cfg = ExperimentConfig::default();
    cfg.decoder_spec(&cfg.layout().unwrap())
}

fn c3_gradients() -> Outcome {
    let mut spec = DecoderSpec::chain((3, 4, 4), Some(3), &[(2, 4, 3), (3, 2, 4)]);
    spec.blocks[1] = BlockSpec::new((2, 4, 3), (3, 2, 4)).with_kernels((3, 1));
    let mut dec = HyperDecoder::init(&spec, 11).map_err(|e| e.to_string())?;
    let mut rng = adaptgen::seed::rng(5);
    for b in &mut dec.blocks {
        b.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let x = Array4::from_shape_simple_fn((2, 3, 4, 4), || rng.random_range(-1.0..1.0));
    let t = Array4::from_shape_simple_fn((2, 3, 2, 4), || rng.random_range(-1.0..1.0));
    let loss = |d: &HyperDecoder| {
        let y = d.forward(&x).unwrap();
        mse_loss(y.as_slice().unwrap(), t.as_slice().unwrap()).unwrap()
    };
    let (y, cache) = dec.forward_train(&x).map_err(|e| e.to_string())?;
    let g = mse_grad(y.as_slice().unwrap(), t.as_slice().unwrap());
    let grads = dec.backward(&cache, &Array4::from_shape_vec(y.raw_dim(), g).unwrap());
    let analytic: Vec<Vec<f64>> = grads.named_params().into_iter().map(|p| p.2.to_vec()).collect();
    let names: Vec<String> = dec.named_params().into_iter().map(|p| p.0).collect();
    let (h, mut worst, mut count) = (1e-5, 0.0f64, 0);
    for (pi, name) in names.iter().enumerate() {
        for k in 0..analytic[pi].len() {
            let mut p = dec.clone();
            p.params_mut()[pi][k] += h;
            let mut m = dec.clone();
            m.params_mut()[pi][k] -= h;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > 1e-4 {
                return Ok((false, format!("{name}[{k}] rel err {rel:e}")));
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok((true, format!("{count} parameters over {} tensors, max rel err {worst:.1e}", names.len())))
}

fn c4_zero_delta() -> Outcome {
    let cfg = BackboneConfig::default();
    let base = BackboneWeights::init(&cfg).map_err(|e| e.to_string())?;
    let merged = merge(&base, &LoraCheckpoint::zeros(&cfg, 4).unwrap()).map_err(|e| e.to_string())?;
    let mut rng = adaptgen::seed::rng(4);
    for i in 0..100 {
        let len = rng.random_range(1..=cfg.context_len);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size() as u32)).collect();
        let (a, _) = forward(&base, &ids);
        let (b, _) = forward(&merged, &ids);
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Ok((false, format!("input {i} differs")));
        }
    }
    Ok((true, "100 random inputs, logits bit-identical".into()))
}

fn c5_closeset() -> Outcome {
    let f = fixture();
    let ids: Vec<String> = f.ids()[..3].to_vec();
    let (rep, _) = run_protocol(&f.ctx(), "closeset", &ids, &ids, &f.spec, &f.cfg.run, &f.cfg.eval.options)
        .map_err(|e| e.to_string())?;
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in &rep.rows {
        let src = r.full_shot.unwrap();
        let gap = (r.generated - src).abs();
        ok += usize::from(gap <= 0.05);
        parts.push(format!("{} gen {:.3} src {:.3}", r.task_id, r.generated, src));
    }
    Ok((ok == rep.rows.len() && ok >= 3, format!("{ok}/{} within 5 pts: {}", rep.rows.len(), parts.join("; "))))
}

fn c6_openset() -> Outcome {
    let runs = openset();
    let mut wins = 0;
    let mut parts = Vec::new();
    for (rep, _) in runs {
        let r = &rep.rows[0];
        let avg = r.training_average.unwrap();
        wins += usize::from(r.generated > avg);
        parts.push(format!("{} {:.3}>{:.3}", r.task_id, r.generated, avg));
    }
    Ok((wins >= 4, format!("{wins}/{} rotations improve: {}", runs.len(), parts.join("; "))))
}

fn c7_arrangement() -> Outcome {
    let f = fixture();
    let four: Vec<f64> = openset().iter().map(|(r, _)| r.mean_improvement().unwrap()).collect();
    let ctx = f.ctx();
    let mut two = Vec::new();
    for (train, test) in arrangements(&f.ids(), 2).map_err(|e| e.to_string())? {
        let (rep, _) = run_protocol(&ctx, "arrangement", &train, &test, &f.spec, &f.cfg.run, &f.cfg.eval.options)
            .map_err(|e| e.to_string())?;
        two.push(rep.mean_improvement().unwrap());
    }
    let m4 = four.iter().sum::<f64>() / four.len() as f64;
    let m2 = two.iter().sum::<f64>() / two.len() as f64;
    Ok((m4 >= m2, format!("4-train/1-test {m4:+.4} vs 2-train/3-test {m2:+.4} over {} rotations", four.len())))
}

fn c8_sampler() -> Outcome {
    let d = make_task(TaskKind::Reverse, 1000, 8).map_err(|e| e.to_string())?;
    let (pool, batch) = (512usize, 128usize);
    let batches = 10_000 / batch;
    let mut counts = vec![0u64; pool];
    for i in 0..batches {
        let b = sample_prompt_batch(&d, batch, pool, adaptgen::seed::derive_indexed(8, "c8", i as u64), ConditionSource::PromptOnly)
            .map_err(|e| e.to_string())?;
        for &j in &b.indices {
            counts[j] += 1;
        }
    }
    let covered = counts.iter().all(|&c| c > 0);
    // whole-vector uniformity: variance-normalized chi-square vs its mean and sd
    let p = batch as f64 / pool as f64;
    let (e, var) = (batches as f64 * p, batches as f64 * p * (1.0 - p));
    let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / var).sum();
    let z = (chi - pool as f64) / (2.0 * (pool as f64 - 1.0)).sqrt();
    // per-prompt extreme, reported only: over 512 prompts some |z| > 3 is expected
    let max_z = counts.iter().map(|&c| ((c as f64 - e) / var.sqrt()).abs()).fold(0.0, f64::max);

    let s1 = sample_prompt_batch(&d, 64, 64, 3, ConditionSource::PromptOnly).map_err(|e| e.to_string())?;
    let mut idx = s1.indices.clone();
    idx.sort_unstable();
    let pool_prompts: Vec<&str> = d.prompts(Split::Train)[..64].to_vec();
    let mut items: Vec<&str> = s1.items.iter().map(String::as_str).collect();
    items.sort_unstable();
    let mut expect = pool_prompts.clone();
    expect.sort_unstable();
    let s1_exact = idx == (0..64).collect::<Vec<_>>() && items == expect;
    Ok((
        covered && z.abs() <= 3.0 && s1_exact,
        format!(
            "{} draws cover all {pool}: {covered}; chi-square z {z:+.2} (max per-prompt |z| {max_z:.2}); strategy-1 reproduces pool: {s1_exact}",
            batches * batch
        ),
    ))
}

fn c9_training_contracts() -> Outcome {
    let f = fixture();
    let zoo: Vec<ZooTask> = f.tasks[..3]
        .iter()
        .map(|(d, c)| ZooTask::new(d.clone(), c, &f.layout).unwrap())
        .collect();
    let cfg = adaptgen::trainer::RunConfig { steps: 50, ..f.cfg.run.clone() };
    let trace = |_: ()| -> Result<Vec<adaptgen::trainer::StepRecord>, String> {
        let mut t = GeneratorTrainer::new(&f.spec, &f.layout, &cfg).map_err(|e| e.to_string())?;
        t.run(&zoo, f.encoder.as_ref()).map_err(|e| e.to_string())?;
        Ok(t.trace)
    };
    let (a, b) = (trace(())?, trace(())?);
    let max_norm = a.iter().map(|r| r.clipped_norm).fold(0.0, f64::max);
    let clipped = a.iter().filter(|r| r.grad_norm > 1.0).count();
    let det = a.len() == 50 && a.iter().zip(&b).all(|(x, y)| (x.loss - y.loss).abs() <= 1e-6);
    // desk gradients sit far below 1.0, so also clip at their median to engage the bound
    let mut norms: Vec<f64> = a.iter().map(|r| r.grad_norm).collect();
    norms.sort_by(f64::total_cmp);
    let tight = norms[norms.len() / 2];
    let mut t = GeneratorTrainer::new(&f.spec, &f.layout, &adaptgen::trainer::RunConfig { max_grad_norm: tight, ..cfg.clone() })
        .map_err(|e| e.to_string())?;
    t.run(&zoo, f.encoder.as_ref()).map_err(|e| e.to_string())?;
    let tight_clipped = t.trace.iter().filter(|r| r.grad_norm > tight).count();
    let tight_ok = t.trace.iter().all(|r| r.clipped_norm <= tight + 1e-6) && tight_clipped > 0;

    let grid = encode(&f.tasks[0].1[0], &f.layout).map_err(|e| e.to_string())?;
    let mask = f.layout.pad_mask();
    let mut max_delta = 0.0f64;
    let mut pads_ok = true;
    let mut samples = 0usize;
    let mut s = 0u64;
    while samples < 1_000_000 {
        let noisy = augment_target(&grid, 1e-4, s);
        for ((n, o), &pad) in noisy.values.iter().zip(grid.values.iter()).zip(&mask) {
            if pad {
                pads_ok &= *n == 0.0;
            } else {
                max_delta = max_delta.max((n - o).abs());
                samples += 1;
            }
        }
        s += 1;
    }
    let pass = max_norm <= 1.0 + 1e-6 && tight_ok && max_delta <= 1e-4 && pads_ok && det;
    Ok((
        pass,
        format!(
            "max post-clip norm {max_norm:.6} ({clipped}/50 clipped at 1.0; {tight_clipped}/50 clipped at {tight:.2e}, bound held: {tight_ok}); max noise {max_delta:.2e} over {samples} values, pads zero: {pads_ok}; 50-step traces identical: {det}"
        ),
    ))
}

fn c10_efficiency() -> Outcome {
    let f = fixture();
    let (rep, gen) = &openset()[0];
    let task = &rep.test_tasks[0];
    let t = efficiency_report(&f.ctx(), gen, task, &f.cfg.zoo, &f.cfg.run, 10).map_err(|e| e.to_string())?;
    let mut report = rep.clone();
    report.timing = Some(t.clone());
    let recorded = report.timing.as_ref().is_some_and(|x| {
        x.generation_seconds > 0.0 && x.tuning_seconds > 0.0 && (x.speedup_ratio - x.tuning_seconds / x.generation_seconds).abs() < 1e-9 * x.speedup_ratio
    });
    Ok((
        t.speedup_ratio >= 10.0 && recorded,
        format!(
            "generation {:.4}s, tuning {:.2}s, ratio {:.0}x",
            t.generation_seconds, t.tuning_seconds, t.speedup_ratio
        ),
    ))
}

fn c11_weight_map() -> Outcome {
    let f = fixture();
    let originals: Vec<LoraCheckpoint> = f.tasks.iter().flat_map(|(_, c)| c.clone()).collect();
    let mut generated = Vec::new();
    for (rep, gen) in openset() {
        let id = &rep.test_tasks[0];
        let (d, _) = f.tasks.iter().find(|(d, _)| &d.task_id == id).unwrap();
        let batch = sample_prompt_batch(d, f.cfg.run.batch_len, f.cfg.run.pool_size, 11, f.cfg.run.condition_source)
            .map_err(|e| e.to_string())?;
        let mut a = generate_adapter(gen, &batch, f.encoder.as_ref(), &f.layout).map_err(|e| e.to_string())?;
        a.task_id = id.clone();
        generated.push(a);
    }
    let dir = std::env::temp_dir().join("adaptgen-acceptance-weight-map");
    let params = TsneParams { seed: 11, ..TsneParams::default() };
    let points = export_weight_map(&originals, &generated, &params, Some(&dir)).map_err(|e| e.to_string())?;
    let (intra, inter) = intra_inter(&points);
    Ok((intra < inter, format!("{} points, mean intra {intra:.2} < inter {inter:.2}", points.len())))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("codec bijectivity", c1_codec_bijectivity),
        ("decoder shape conformance", c2_decoder_shapes),
        ("gradient correctness", c3_gradients),
        ("zero-delta neutrality", c4_zero_delta),
        ("close-set reproduction", c5_closeset),
        ("open-set direction", c6_openset),
        ("arrangement trend", c7_arrangement),
        ("sampler statistics", c8_sampler),
        ("training loop contracts", c9_training_contracts),
        ("efficiency direction", c10_efficiency),
        ("weight-map sanity", c11_weight_map),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let tag = format!("c{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == tag) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{tag:>3}] {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
