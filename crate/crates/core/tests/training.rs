//! Training loop, chunk-parallel mode and evaluation protocols end to end.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tig_core::config::RestarterKind;
use tig_core::eval::{eval_link_prediction, eval_node_classification, eval_with_restart, fit_classifier, ClassifierConfig};
use tig_core::graph::RawEvent;
use tig_core::memory::MemoryUnit;
use tig_core::restarter::reinitialize;
use tig_core::tensor::Mat;
use tig_core::trainer::chunk_ranges;
use tig_core::{Error, EvalMode, Model, RestartInit, Split, SynthConfig, TemporalGraph, TrainConfig, Trainer};

fn toy(events: usize, seed: u64) -> TemporalGraph {
    SynthConfig { events, users: 40, items: 10, edge_dim: 4, noise: 1.0, repeat_prob: 0.3, seed, ..SynthConfig::default() }
        .generate()
        .unwrap()
        .chronological_split(0.7, 0.15)
        .unwrap()
}

fn config(restarter: RestarterKind, restart_prob: f64) -> TrainConfig {
    TrainConfig {
        memory_dim: Some(8),
        neighbors: 5,
        batch_size: 50,
        history: 10,
        learning_rate: 1e-3,
        restarter,
        restart_prob,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: &TrainConfig, g: &TemporalGraph) -> Trainer {
    Trainer::new(Model::new(cfg, g).unwrap(), g)
}

#[test]
fn same_seed_same_trajectory() {
    let g = toy(1200, 0);
    let cfg = TrainConfig { batch_size: 2, ..config(RestarterKind::Transformer, 0.01) };
    let train = g.split_range(Split::Train);
    assert_eq!(train.len().div_ceil(2), 420);
    let run = |cfg: &TrainConfig| {
        let mut t = trainer(cfg, &g);
        let m = t.train_epoch(&g, train.clone()).unwrap();
        (m, t.model.store, t.mem)
    };
    let (a, sa, ma) = run(&cfg);
    let (b, sb, mb) = run(&cfg);
    assert_eq!(a.l1_curve, b.l1_curve);
    assert_eq!(a.mean_l2, b.mean_l2);
    assert_eq!(a.restarts, b.restarts);
    assert!(a.restarts > 0);
    assert_eq!((sa, ma), (sb, mb));
    let (c, ..) = run(&TrainConfig { seed: 1, ..cfg });
    assert_ne!(a.l1_curve, c.l1_curve);
}

#[test]
fn one_worker_parallel_is_the_single_process_trainer() {
    let g = toy(800, 1);
    let cfg = config(RestarterKind::Transformer, 0.3);
    let train = g.split_range(Split::Train);
    let mut single = trainer(&cfg, &g);
    let mut parallel = trainer(&cfg, &g);
    for _ in 0..2 {
        let a = single.train_epoch(&g, train.clone()).unwrap();
        let b = parallel.train_parallel(&g, train.clone(), 1).unwrap();
        assert_eq!(a.l1_curve, b.l1_curve);
        assert_eq!(a.mean_l2, b.mean_l2);
        assert_eq!(a.restarts, b.restarts);
    }
    assert_eq!(single.model.store, parallel.model.store);
    assert_eq!(single.mem, parallel.mem);
    assert_eq!(single.model_opt, parallel.model_opt);
    assert_eq!(single.restarter_opt, parallel.restarter_opt);
}

#[test]
fn restart_probability_extremes() {
    let g = toy(600, 2);
    let train = g.split_range(Split::Train);
    let m = trainer(&config(RestarterKind::Transformer, 0.0), &g).train_epoch(&g, train.clone()).unwrap();
    assert_eq!(m.restarts, 0);
    let m = trainer(&config(RestarterKind::Static, 1.0), &g).train_epoch(&g, train.clone()).unwrap();
    assert_eq!(m.restarts, m.batches);
    let m = trainer(&config(RestarterKind::Transformer, 1.0), &g).train_parallel(&g, train.clone(), 3).unwrap();
    assert_eq!(m.restarts, m.batches);
    // Without a restarter there is nothing to restart from.
    let m = trainer(&config(RestarterKind::None, 1.0), &g).train_epoch(&g, train).unwrap();
    assert_eq!(m.restarts, 0);
    assert_eq!(m.mean_l2, None);
}

#[test]
fn restart_rate_is_binomial() {
    let (n, p) = (10_000usize, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = (0..n).map(|i| RawEvent { src: rng.random_range(0..20), dst: 20 + rng.random_range(0..10), t: i as f64, label: None }).collect();
    let g = TemporalGraph::new(30, raw, 0, Vec::new()).unwrap();
    let cfg = TrainConfig { memory_dim: Some(2), neighbors: 2, batch_size: 1, ..config(RestarterKind::Static, p) };
    let m = trainer(&cfg, &g).train_epoch(&g, 0..n).unwrap();
    assert_eq!(m.batches, n);
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let dev = (m.restarts as f64 - n as f64 * p).abs();
    assert!(dev <= 3.0 * sd, "{} restarts, expected {} ± {:.1}", m.restarts, n as f64 * p, 3.0 * sd);
}

#[test]
fn worker_memories_stay_private() {
    // Three phases with disjoint users and items, one per chunk.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = (0..1000)
        .map(|i| {
            let k = if i < 700 { i * 3 / 700 } else { rng.random_range(0..3) };
            RawEvent { src: 10 * k + rng.random_range(0..10), dst: 30 + 5 * k + rng.random_range(0..5), t: i as f64, label: None }
        })
        .collect();
    let feats = (0..4000).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    let g = TemporalGraph::new(45, raw, 4, feats).unwrap().chronological_split(0.7, 0.15).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..config(RestarterKind::Transformer, 0.0) };
    let mut t = trainer(&cfg, &g);
    let before = t.model.store.clone();
    let train = g.split_range(Split::Train);
    t.train_parallel(&g, train.clone(), 3).unwrap();
    assert_eq!(t.model.store, before);
    let chunks = chunk_ranges(train, 3);
    for (k, chunk) in chunks.iter().enumerate() {
        let mine = &t.worker_memories[k];
        let mut start = t.model.new_memory(&g);
        if k > 0 {
            reinitialize(&mut start, t.model.restarter.as_ref(), &t.model.store, &g, 0..chunk.start).unwrap();
        }
        let touched = g.active_nodes(chunk.clone());
        let mut checked = 0;
        for node in (0..g.num_nodes()).filter(|n| !touched.contains(n)) {
            for unit in [MemoryUnit::Minus, MemoryUnit::Plus] {
                assert_eq!(mine.row(unit, node), start.row(unit, node), "worker {k} node {node}");
            }
            assert_eq!(mine.last_t(node), start.last_t(node));
            checked += 1;
        }
        assert!(checked > 0, "worker {k} touched every node");
        if k > 0 {
            assert!(touched.iter().any(|&n| mine.row(MemoryUnit::Plus, n) != start.row(MemoryUnit::Plus, n)));
        }
    }
}

#[test]
fn evaluation_is_repeatable_and_read_only() {
    let g = toy(800, 4);
    let mut t = trainer(&config(RestarterKind::Transformer, 0.0), &g);
    t.train_epoch(&g, g.split_range(Split::Train)).unwrap();
    let (store, mem) = (t.model.store.clone(), t.mem.clone());
    let a = eval_link_prediction(&t.model, &t.mem, &g, Split::Val, EvalMode::Transductive, &[]).unwrap();
    let b = eval_link_prediction(&t.model, &t.mem, &g, Split::Val, EvalMode::Transductive, &[]).unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.count, g.split_range(Split::Val).len());
    assert_eq!((t.model.store, t.mem), (store, mem));
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let g = toy(800, 5);
    let cfg = TrainConfig { epochs: 6, patience: 1, learning_rate: 3e-3, ..config(RestarterKind::Static, 0.05) };
    let mut fitted = trainer(&cfg, &g);
    let mut lines = Vec::new();
    let train = g.split_range(Split::Train);
    let report = fitted.fit(&g, train.clone(), |r| lines.push(r.clone())).unwrap();
    assert_eq!(lines.len(), 2 * report.val_ap.len());
    let best = report.val_ap.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(report.best_val_ap, best);
    assert_eq!(report.val_ap[report.best_epoch - 1], best);
    if report.val_ap.len() < cfg.epochs {
        assert!(report.val_ap[report.best_epoch..].iter().all(|&v| v <= best));
        assert_eq!(report.val_ap.len() - report.best_epoch, cfg.patience);
    }
    // Validation consumes no training randomness, so plain epochs replay it.
    let mut replay = trainer(&cfg, &g);
    for _ in 0..report.best_epoch {
        replay.train_epoch(&g, train.clone()).unwrap();
    }
    assert_eq!(replay.model.store, fitted.model.store);
}

#[test]
fn non_finite_loss_aborts_the_epoch() {
    let g = toy(300, 6);
    let mut t = trainer(&config(RestarterKind::None, 0.0), &g);
    for id in t.model.store.ids().collect::<Vec<_>>() {
        if t.model.store.name(id).starts_with("decoder") {
            t.model.store.get_mut(id).data_mut().fill(f64::NAN);
        }
    }
    let poisoned = t.model.store.clone();
    let err = t.train_epoch(&g, g.split_range(Split::Train)).unwrap_err();
    assert!(matches!(err, Error::Diverged { batch: 0, .. }), "{err}");
    // No update landed. NaN != NaN, so compare bits.
    for id in poisoned.ids() {
        let bits = |m: &Mat| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.model.store.get(id)), bits(poisoned.get(id)));
    }
}

#[test]
fn untrained_model_scores_near_chance_on_a_random_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 3000;
    let raw = (0..n).map(|i| RawEvent { src: rng.random_range(0..100), dst: 100 + rng.random_range(0..100), t: i as f64, label: None }).collect();
    let feats = (0..n * 4).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    let g = TemporalGraph::new(200, raw, 4, feats).unwrap().chronological_split(0.7, 0.15).unwrap();
    for seed in 0..3 {
        let model = Model::new(&TrainConfig { seed, ..config(RestarterKind::None, 0.0) }, &g).unwrap();
        let r = eval_link_prediction(&model, &model.new_memory(&g), &g, Split::Test, EvalMode::Transductive, &[]).unwrap();
        assert!((r.value - 0.5).abs() <= 0.1, "seed {seed}: {}", r.value);
    }
}

#[test]
fn memorised_pairs_reach_near_perfect_ap() {
    // Every user only ever talks to its own item. A sampled negative is the
    // true item one time in 50 and then ties with it, which caps AP a little
    // below 1.
    let n = 3000;
    let raw = (0..n).map(|i| RawEvent { src: i % 50, dst: 50 + i % 50, t: i as f64, label: None }).collect();
    let g = TemporalGraph::new(100, raw, 0, Vec::new()).unwrap().chronological_split(0.7, 0.15).unwrap();
    let cfg = TrainConfig { epochs: 10, learning_rate: 1e-2, patience: 10, ..config(RestarterKind::None, 0.0) };
    let mut t = trainer(&cfg, &g);
    t.fit(&g, g.split_range(Split::Train), |_| {}).unwrap();
    let r = eval_link_prediction(&t.model, &t.mem, &g, Split::Test, EvalMode::Transductive, &[]).unwrap();
    assert!(r.value >= 0.97, "{}", r.value);
}

#[test]
fn restart_at_boundary_matches_continuous_memory_with_full_training() {
    let g = toy(5000, 0);
    let cfg = TrainConfig { memory_dim: Some(32), epochs: 8, patience: 8, ..config(RestarterKind::Transformer, 0.01) };
    let mut t = trainer(&cfg, &g);
    t.fit(&g, cfg.training_range(&g), |_| {}).unwrap();
    // Continuous memory: stream train from zero, then validation.
    let mut mem = t.model.new_memory(&g);
    tig_core::eval::stream_split(&t.model, &mut mem, &g, Split::Train).unwrap();
    let continuous = eval_link_prediction(&t.model, &mem, &g, Split::Val, EvalMode::Transductive, &[]).unwrap();
    let (restarted, _) = eval_with_restart(&t.model, &g, RestartInit::Restarter).unwrap();
    let gap = (restarted.value - continuous.value).abs();
    assert!(gap <= 0.015, "restart {:.4} vs continuous {:.4}", restarted.value, continuous.value);
    assert_eq!(restarted.restart.as_deref(), Some("restarter"));
    let no_restarter = Model::new(&TrainConfig { restarter: RestarterKind::None, ..cfg }, &g).unwrap();
    assert!(matches!(eval_with_restart(&no_restarter, &g, RestartInit::Restarter), Err(Error::Eval(_))));
}

#[test]
fn inductive_evaluation_scores_only_unseen_endpoints() {
    let g = toy(1500, 8);
    let unseen = g.pick_unseen_nodes(0.1, 3);
    assert!(!unseen.is_empty());
    let masked = g.mask_training_events(&unseen).unwrap();
    let train = masked.split_range(Split::Train);
    assert!(masked.events()[train.clone()].iter().all(|e| !unseen.contains(&e.src) && !unseen.contains(&e.dst)));
    assert_eq!(masked.split_range(Split::Test).len(), g.split_range(Split::Test).len());
    let mut t = trainer(&config(RestarterKind::Transformer, 0.0), &masked);
    t.train_epoch(&masked, train).unwrap();
    let r = eval_link_prediction(&t.model, &t.mem, &masked, Split::Test, EvalMode::Inductive, &unseen).unwrap();
    let expected = masked.events()[masked.split_range(Split::Test)]
        .iter()
        .filter(|e| unseen.contains(&e.src) || unseen.contains(&e.dst))
        .count();
    assert_eq!(r.count, expected);
    assert!(r.value > 0.0 && r.value <= 1.0);
    assert!(matches!(
        eval_link_prediction(&t.model, &t.mem, &masked, Split::Test, EvalMode::Inductive, &[]),
        Err(Error::Eval(_))
    ));
}

fn planted(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Mat, Vec<bool>) {
    let x = Mat::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = (0..n).map(|i| x.row(i)[0] > 0.0).collect();
    (x, y)
}

#[test]
fn classifier_finds_a_planted_coordinate_and_not_shuffled_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, y) = planted(3000, 8, &mut rng);
    let (xv, yv) = planted(1000, 8, &mut rng);
    let (xt, yt) = planted(2000, 8, &mut rng);
    let cfg = ClassifierConfig { epochs: 100, patience: 10, batch_size: 100, learning_rate: 1e-2, seed: 0 };
    let (clf, _) = fit_classifier(8, (&x, &y), (&xv, &yv), cfg).unwrap();
    let a = tig_core::auroc(&clf.probabilities(&xt), &yt).unwrap();
    assert!(a >= 0.95, "{a}");

    let mut shuffled = y.clone();
    shuffled.shuffle(&mut rng);
    let mut shuffled_v = yv.clone();
    shuffled_v.shuffle(&mut rng);
    let mut shuffled_t = yt.clone();
    shuffled_t.shuffle(&mut rng);
    let (clf, _) = fit_classifier(8, (&x, &shuffled), (&xv, &shuffled_v), cfg).unwrap();
    let a = tig_core::auroc(&clf.probabilities(&xt), &shuffled_t).unwrap();
    assert!((a - 0.5).abs() <= 0.05, "{a}");
}

#[test]
fn node_classification_runs_on_dynamic_labels() {
    let g = toy(1500, 10);
    let model = Model::new(&config(RestarterKind::None, 0.0), &g).unwrap();
    let r = eval_node_classification(&model, &g, ClassifierConfig::default()).unwrap();
    assert_eq!(r.metric, "auroc");
    assert!((0.0..=1.0).contains(&r.value));

    // Test split with only negative labels.
    let raw = g.events().iter().map(|e| RawEvent { src: e.src, dst: e.dst, t: e.t, label: Some(e.label.unwrap() && e.idx < 1000) }).collect();
    let feats = (0..g.num_events()).flat_map(|i| g.edge_feat(i).to_vec()).collect();
    let flat = TemporalGraph::new(g.num_nodes(), raw, 4, feats).unwrap().chronological_split(0.7, 0.15).unwrap();
    assert!(eval_node_classification(&model, &flat, ClassifierConfig::default()).is_err());
}
