use adaptgen::config::ExperimentConfig;
use adaptgen::corpus::{make_task, Split, TaskKind};
use adaptgen::zoo::backbone::forward;
use adaptgen::zoo::{
    collect_checkpoints, evaluate, merge, pretrain_backbone, train_lora, BackboneConfig, BackboneWeights,
    LoraCheckpoint, LoraTrainer, Phase, ZooRecipe,
};
use rand::Rng;

fn base() -> BackboneWeights {
    BackboneWeights::init(&BackboneConfig::default()).unwrap()
}

fn random_adapter(cfg: &BackboneConfig, seed: u64) -> LoraCheckpoint {
    let mut c = LoraCheckpoint::zeros(cfg, 4).unwrap();
    let mut rng = adaptgen::seed::rng(seed);
    for l in &mut c.layers {
        l.a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    c
}

fn recipe(pre: usize, fine: usize) -> ZooRecipe {
    ZooRecipe {
        batch_size: 8,
        pretrain: Phase { lr: 1e-2, steps: pre },
        finetune: Phase { lr: 1e-3, steps: fine },
        ..ZooRecipe::default()
    }
}

#[test]
fn merge_matches_elementwise_sum_of_rank_one_terms() {
    let w = base();
    let c = random_adapter(&w.config, 1);
    let merged = merge(&w, &c).unwrap();
    for (li, l) in c.layers.iter().enumerate() {
        let (w0, got) = match li % 2 {
            0 => (&w.layers[li / 2].wq, &merged.layers[li / 2].wq),
            _ => (&w.layers[li / 2].wv, &merged.layers[li / 2].wv),
        };
        for i in 0..w0.nrows() {
            for j in 0..w0.ncols() {
                let delta: f64 = (0..4).map(|r| f64::from(l.b[[i, r]]) * f64::from(l.a[[r, j]])).sum();
                let want = f64::from(w0[[i, j]]) + delta;
                assert!((f64::from(got[[i, j]]) - want).abs() < 1e-5, "{} [{i},{j}]", l.name);
            }
        }
    }
    let untouched = |b: &BackboneWeights| (b.layers[0].wk.clone(), b.layers[1].w1.clone(), b.head.clone());
    assert_eq!(untouched(&w), untouched(&merged));
}

#[test]
fn rescaled_factors_give_the_same_model() {
    let w = base();
    let c = random_adapter(&w.config, 2);
    let s = [2.0f32, 0.5, 4.0, 0.25];
    let mut scaled = c.clone();
    for l in &mut scaled.layers {
        for r in 0..4 {
            l.b.column_mut(r).mapv_inplace(|v| v * s[r]);
            l.a.row_mut(r).mapv_inplace(|v| v / s[r]);
        }
    }
    // powers of two keep every product exact, so the merged weights agree bitwise
    assert_eq!(merge(&w, &c).unwrap(), merge(&w, &scaled).unwrap());
    let d = make_task(TaskKind::Copy, 40, 0).unwrap();
    assert_eq!(
        evaluate(&w, Some(&c), &d, Split::Test).unwrap(),
        evaluate(&w, Some(&scaled), &d, Split::Test).unwrap()
    );
}

#[test]
fn training_never_touches_the_backbone() {
    let w = base();
    let before = w.digest();
    let d = make_task(TaskKind::Reverse, 100, 0).unwrap();
    let (adapter, _) = train_lora(&w, &d, 4, 1e-2, 5, 8, 3).unwrap();
    assert_eq!(w.digest(), before);
    assert!(adapter.layers.iter().any(|l| l.b.iter().any(|v| *v != 0.0)));
}

#[test]
fn zero_lr_returns_the_initialization() {
    let w = base();
    let d = make_task(TaskKind::Copy, 100, 0).unwrap();
    let init = LoraTrainer::new(&w, &d, 4, 8, 9).unwrap().adapter.clone();
    let (adapter, _) = train_lora(&w, &d, 4, 0.0, 4, 8, 9).unwrap();
    assert_eq!(adapter.layers, init.layers);
    assert!(init.layers.iter().all(|l| l.b.iter().all(|v| *v == 0.0)));
}

#[test]
fn fixed_seed_reproduces_the_loss_sequence() {
    let w = base();
    let d = make_task(TaskKind::SortDigits, 100, 0).unwrap();
    let (_, a) = train_lora(&w, &d, 4, 1e-2, 6, 8, 5).unwrap();
    let (_, b) = train_lora(&w, &d, 4, 1e-2, 6, 8, 5).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
}

#[test]
fn collection_saves_one_distinct_checkpoint_per_finetune_step() {
    let w = base();
    let d = make_task(TaskKind::Uppercase, 100, 0).unwrap();
    let zoo = collect_checkpoints(&w, &d, &recipe(3, 5)).unwrap();
    assert_eq!(zoo.len(), 5);
    for pair in zoo.windows(2) {
        assert_eq!(pair[1].step_id, pair[0].step_id + 1);
        let diff: f32 = pair[0].flatten().iter().zip(pair[1].flatten()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff > 0.0);
    }
    assert_eq!(zoo[0].step_id, 4);
    assert_eq!(collect_checkpoints(&w, &d, &recipe(0, 1)).unwrap().len(), 1);
    assert!(collect_checkpoints(&w, &d, &recipe(1, 0)).is_err());
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    let w = base();
    let mut c = random_adapter(&w.config, 7);
    c.task_id = "reverse".into();
    c.step_id = 12;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    c.save(&path).unwrap();
    let back = LoraCheckpoint::load(&path).unwrap();
    assert_eq!((back.task_id.as_str(), back.step_id, back.rank), ("reverse", 12, 4));
    let bits = |c: &LoraCheckpoint| c.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&c));
}

#[test]
fn zero_adapter_matches_base_accuracy() {
    let w = base();
    let d = make_task(TaskKind::Parity, 60, 0).unwrap();
    let zero = LoraCheckpoint::zeros(&w.config, 4).unwrap();
    assert_eq!(
        evaluate(&w, Some(&zero), &d, Split::Test).unwrap(),
        evaluate(&w, None, &d, Split::Test).unwrap()
    );
    let ids = w.config.encode_text("copy: abc").unwrap();
    assert_eq!(forward(&w, &ids).0, forward(&merge(&w, &zero).unwrap(), &ids).0);
}

/// Pretrains a backbone, then tunes a reverse adapter until its training loss
/// drops below 0.1; held-out accuracy must then exceed 0.8.
#[test]
fn converged_reverse_adapter_generalizes() {
    let exp = ExperimentConfig::default().resolved().unwrap();
    let init = BackboneWeights::init(&exp.backbone.config).unwrap();
    let (w, _) = pretrain_backbone(init, &exp.pretrain_corpus().unwrap(), &exp.backbone.pretrain).unwrap();
    let d = make_task(TaskKind::Reverse, 2000, 1).unwrap();
    let mut t = LoraTrainer::new(&w, &d, 4, 32, 1).unwrap();
    let mut recent = Vec::new();
    while t.step < 1500 {
        recent.push(t.step(1e-2).unwrap());
        if recent.len() >= 20 && recent[recent.len() - 20..].iter().sum::<f64>() / 20.0 < 0.1 {
            break;
        }
    }
    let loss = recent[recent.len().saturating_sub(20)..].iter().sum::<f64>() / 20.0;
    assert!(loss < 0.1, "did not converge: loss {loss} after {} steps", t.step);
    let acc = evaluate(&w, Some(&t.adapter), &d, Split::Test).unwrap();
    assert!(acc > 0.8, "accuracy {acc} at loss {loss}");
}
