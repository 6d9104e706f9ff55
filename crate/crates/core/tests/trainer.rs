use adaptgen::codec::{build_layout, encode, WeightLayout, WeightTokenGrid};
use adaptgen::config::{default_decoder_spec, ExperimentConfig};
use adaptgen::corpus::{make_task, TaskKind};
use adaptgen::encoder::{ConditionEncoder, EncoderParams, EncoderRegistry};
use adaptgen::trainer::{
    augment_target, make_pair, mse_grad, mse_loss, read_trace, train, windowed_means, GeneratorTrainer,
    PairingStrategy, RunConfig, ZooTask, TRACE_FILE,
};
use adaptgen::zoo::{adapter_schema, collect_checkpoints, BackboneConfig, BackboneWeights, LoraCheckpoint};
use proptest::prelude::*;
use rand::Rng;

fn encoder() -> Box<dyn ConditionEncoder> {
    EncoderRegistry::default().build("ngram-hash", &EncoderParams::default()).unwrap()
}

fn desk_layout() -> WeightLayout {
    build_layout(&adapter_schema(&BackboneConfig::default(), 4).unwrap(), 128, 8).unwrap()
}

fn random_grid(seed: u64) -> WeightTokenGrid {
    let cfg = BackboneConfig::default();
    let mut c = LoraCheckpoint::zeros(&cfg, 4).unwrap();
    let mut rng = adaptgen::seed::rng(seed);
    for l in &mut c.layers {
        l.a.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        l.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    // a layout with padding in every layer
    let layout = build_layout(&adapter_schema(&cfg, 4).unwrap(), 100, 3).unwrap();
    encode(&c, &layout).unwrap()
}

/// Tasks whose checkpoints are synthetic grids; enough for pairing tests.
fn synthetic_zoo(kinds: &[TaskKind], per_task: usize) -> Vec<ZooTask> {
    let cfg = BackboneConfig::default();
    let layout = desk_layout();
    kinds
        .iter()
        .enumerate()
        .map(|(ti, &k)| {
            let cks: Vec<LoraCheckpoint> = (0..per_task)
                .map(|j| {
                    let mut c = LoraCheckpoint::init(&cfg, 4, (ti * 100 + j) as u64).unwrap();
                    c.step_id = j + 1;
                    c
                })
                .collect();
            ZooTask::new(make_task(k, 200, 0).unwrap(), &cks, &layout).unwrap()
        })
        .collect()
}

fn run_config(batch_len: usize) -> RunConfig {
    RunConfig { lr: 1e-3, steps: 10, batch_len, pool_size: 64, ..RunConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noise_is_bounded_and_skips_pads(amplitude in 0.0f64..1e-2, seed in any::<u64>()) {
        let grid = random_grid(seed % 7);
        let noisy = augment_target(&grid, amplitude, seed);
        for ((n, o), pad) in noisy.values.iter().zip(grid.values.iter()).zip(grid.layout.pad_mask()) {
            if pad {
                prop_assert_eq!(n.to_bits(), 0.0f64.to_bits());
            } else {
                prop_assert!((n - o).abs() <= amplitude);
            }
        }
        prop_assert_eq!(&augment_target(&grid, amplitude, seed), &noisy);
    }

    #[test]
    fn mse_is_permutation_invariant(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64), seed in any::<u64>()) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut order: Vec<usize> = (0..p.len()).collect();
        let mut rng = adaptgen::seed::rng(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
        let tp: Vec<f64> = order.iter().map(|&i| t[i]).collect();
        let (a, b) = (mse_loss(&p, &t).unwrap(), mse_loss(&pp, &tp).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn mse_gradient_matches_differences(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let g = mse_grad(&p, &t);
        for i in 0..p.len() {
            let h = 1e-6;
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi[i] += h;
            lo[i] -= h;
            let numeric = (mse_loss(&hi, &t).unwrap() - mse_loss(&lo, &t).unwrap()) / (2.0 * h);
            prop_assert!((numeric - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
        }
    }
}

#[test]
fn noise_free_augmentation_is_identity() {
    let g = random_grid(1);
    assert_eq!(augment_target(&g, 0.0, 5), g);
}

#[test]
fn mse_shape_mismatch_is_structural() {
    assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(adaptgen::Error::Structural(_))));
}

#[test]
fn fixed_pool_strategies_give_identical_pairs() {
    let zoo = synthetic_zoo(&[TaskKind::Reverse, TaskKind::Copy, TaskKind::Uppercase], 3);
    let enc = encoder();
    let s1 = RunConfig { strategy: PairingStrategy::Strategy1, pool_size: 999, ..run_config(8) };
    let s2 = RunConfig { strategy: PairingStrategy::Strategy2, pool_size: 8, ..run_config(8) };
    for seed in 0..200 {
        let (a, b) = (make_pair(&zoo, enc.as_ref(), &s1, seed).unwrap(), make_pair(&zoo, enc.as_ref(), &s2, seed).unwrap());
        assert_eq!((&a.task_id, a.step_id), (&b.task_id, b.step_id));
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.target, b.target);
    }
}

#[test]
fn pairs_stay_within_one_task() {
    let zoo = synthetic_zoo(&[TaskKind::Reverse, TaskKind::SortDigits], 4);
    let enc = encoder();
    for seed in 0..50 {
        let p = make_pair(&zoo, enc.as_ref(), &run_config(4), seed).unwrap();
        let task = zoo.iter().find(|t| t.dataset.task_id == p.task_id).unwrap();
        assert_eq!(p.embedding.task_id, p.task_id);
        assert!(task.grids.iter().any(|(s, g)| *s == p.step_id && *g == p.target));
    }
    assert!(make_pair(&[], enc.as_ref(), &run_config(4), 0).is_err());
}

#[test]
fn task_selection_is_uniform() {
    let kinds = [TaskKind::Reverse, TaskKind::Copy, TaskKind::SortDigits, TaskKind::Uppercase, TaskKind::VowelCount];
    let zoo = synthetic_zoo(&kinds, 1);
    let enc = encoder();
    let cfg = RunConfig { pool_size: 1, ..run_config(1) };
    let draws = 10_000;
    let mut counts = std::collections::BTreeMap::new();
    for seed in 0..draws {
        *counts.entry(make_pair(&zoo, enc.as_ref(), &cfg, seed).unwrap().task_id).or_insert(0usize) += 1;
    }
    let p = 1.0 / kinds.len() as f64;
    let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    assert_eq!(counts.len(), kinds.len());
    for (task, c) in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{task}: {c} vs {mean}±{sd:.1}");
    }
}

fn small_trainer_setup(noise: f64, lr: f64) -> (Vec<ZooTask>, RunConfig, adaptgen::decoder::DecoderSpec) {
    let zoo = synthetic_zoo(&[TaskKind::Copy], 1);
    let cfg = RunConfig {
        strategy: PairingStrategy::Strategy1,
        noise_amplitude: noise,
        lr,
        steps: 20,
        batch_size: 2,
        ..run_config(1)
    };
    let spec = default_decoder_spec(1, 32, 64, desk_layout().grid);
    (zoo, cfg, spec)
}

#[test]
fn zero_lr_keeps_the_loss_constant() {
    let enc = encoder();
    let layout = desk_layout();
    let (zoo, cfg, spec) = small_trainer_setup(0.0, 0.0);
    let mut t = GeneratorTrainer::new(&spec, &layout, &cfg).unwrap();
    t.run(&zoo, enc.as_ref()).unwrap();
    let l = t.losses();
    assert!(l.iter().all(|v| *v == l[0]), "{l:?}");

    // with noise, each loss moves by at most 2·a·sqrt(loss) + a²
    let (zoo, cfg, spec) = small_trainer_setup(1e-4, 0.0);
    let mut t = GeneratorTrainer::new(&spec, &layout, &cfg).unwrap();
    t.run(&zoo, enc.as_ref()).unwrap();
    let a = 1e-4;
    let bound = 2.0 * a * l[0].sqrt() + a * a;
    assert!(t.losses().iter().all(|v| (v - l[0]).abs() <= bound * (1.0 + 1e-9)));
}

#[test]
fn clipping_and_frozen_encoder() {
    let enc = encoder();
    let before = enc.fingerprint();
    let layout = desk_layout();
    let (zoo, cfg, spec) = small_trainer_setup(1e-4, 1e-3);
    let cfg = RunConfig { max_grad_norm: 1e-3, ..cfg };
    let mut t = GeneratorTrainer::new(&spec, &layout, &cfg).unwrap();
    t.run(&zoo, enc.as_ref()).unwrap();
    assert!(t.trace.iter().all(|r| r.clipped_norm <= 1e-3 + 1e-6));
    assert!(t.trace.iter().any(|r| r.grad_norm > 1e-3), "clip threshold never engaged");
    assert_eq!(enc.fingerprint(), before);
}

#[test]
fn training_persists_generator_and_trace() {
    let enc = encoder();
    let layout = desk_layout();
    let (zoo, cfg, spec) = small_trainer_setup(1e-4, 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let t = train(&zoo, enc.as_ref(), &spec, &layout, &cfg, Some(dir.path())).unwrap();
    let trace = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(trace.len(), 20);
    assert!(trace.iter().zip(&t.trace).all(|(a, b)| (a.loss - b.loss).abs() <= 1e-12 * b.loss.max(1.0)));
    let resumed = GeneratorTrainer::resume(dir.path(), &cfg).unwrap();
    assert_eq!(resumed.decoder.digest(), t.decoder.digest());
}

/// Three desk tasks on an untrained backbone; only the generator's fit to the
/// zoo matters here, not adapter quality.
#[test]
fn desk_generator_loss_falls_fivefold() {
    let exp = ExperimentConfig::default().resolved().unwrap();
    let base = BackboneWeights::init(&exp.backbone.config).unwrap();
    let layout = exp.layout().unwrap();
    let enc = exp.encoder().unwrap();
    let zoo: Vec<ZooTask> = exp.build_corpus().unwrap()[..3]
        .iter()
        .map(|d| ZooTask::new(d.clone(), &collect_checkpoints(&base, d, &exp.zoo).unwrap(), &layout).unwrap())
        .collect();
    let cfg = RunConfig { steps: 2000, early_stop_windows: None, ..exp.run.clone() };
    let t = train(&zoo, enc.as_ref(), &exp.decoder_spec(&layout), &layout, &cfg, None).unwrap();
    let w = windowed_means(&t.losses(), 100);
    let (first, last) = (w[0], *w.last().unwrap());
    assert!(last < 0.2 * first, "windowed loss {first:.3e} -> {last:.3e}");
}
