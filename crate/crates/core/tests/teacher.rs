mod common;

use proptest::prelude::*;
use rand::Rng;

use common::rng;
use saod::assign::{candidates_from_scores, select_topk, Provenance};
use saod::model::{forward, joint_confidence, ModelParams, ModelShape};
use saod::prompt::{MockPredictor, PromptSet};
use saod::scene::{generate_corpus_with, AnnotationSet, CategorySpec, Corpus, CorpusConfig};
use saod::teacher::{
    batch_indices, branch_views, ema_update, pseudo_labels, resolve_prompts, run_training, train_step, Assignment,
    Phase, PromptMode, RunOptions, TrainConfig, TrainData, TrainScene, TrainState, ViewConfig,
};

fn corpus(seed: u64) -> Corpus {
    let mut cfg = CorpusConfig::new(
        vec![CategorySpec::new(0, "plane", 3.0), CategorySpec::new(1, "ship", 1.0)],
        5.0,
    );
    cfg.height = 16;
    cfg.width = 16;
    cfg.clutter_density = 2.0;
    generate_corpus_with(&cfg, 12, seed).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        total_iters: 24,
        burn_in_iters: 8,
        ema_momentum: 0.9,
        batch_size: 3,
        log_interval: 4,
        prompt_mode: PromptMode::GtPrompt,
        ..TrainConfig::default()
    }
}

struct Fixture {
    train: Corpus,
    eval: Corpus,
    ann: AnnotationSet,
    prompts: PromptSet,
}

impl Fixture {
    fn new() -> Self {
        let train = corpus(1);
        let mock = MockPredictor::stochastic(train.category_names(), 0.8, 2).unwrap();
        Self {
            ann: AnnotationSet::build(&train, 0.3, false, 3).unwrap(),
            prompts: saod::prompt::generate_prompts(&mock, &train, 1).unwrap(),
            eval: corpus(2),
            train,
        }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.train,
            annotations: &self.ann,
            prompts: Some(&self.prompts),
            eval: Some(&self.eval),
        }
    }
}

fn params(seed: u64) -> ModelParams {
    let shape = ModelShape::linear(6, 3);
    let mut r = rng(seed);
    ModelParams::from_vec(shape, (0..shape.num_params()).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn ema_identities() {
    let (t, s) = (params(1), params(2));
    let mut a = t.clone();
    ema_update(&mut a, &s, 0.0).unwrap();
    assert_eq!(a, s);
    let mut b = t.clone();
    ema_update(&mut b, &s, 1.0).unwrap();
    assert_eq!(b, t);
    for m in [0.0, 0.3, 0.5, 0.999, 1.0] {
        let mut f = s.clone();
        ema_update(&mut f, &s, m).unwrap();
        assert_eq!(f, s);
    }
    let shape = ModelShape::linear(1, 1);
    let n = shape.num_params();
    let mut probe = ModelParams::from_vec(shape, vec![2.0; n]).unwrap();
    ema_update(&mut probe, &ModelParams::zeros(shape), 0.5).unwrap();
    assert!(probe.as_slice().iter().all(|&v| v == 1.0));
    assert!(ema_update(&mut probe, &params(3), 0.5).is_err());
    assert!(ema_update(&mut params(4), &params(3), 1.5).is_err());
}

#[test]
fn views_are_reproducible_and_flip_is_an_involution() {
    let c = corpus(5);
    let scene = &c.scenes[3];
    let plain = branch_views(scene, &c.layout, &ViewConfig { noise_std: 0.0, flip: false }, 9);
    assert_eq!(plain.teacher, plain.student);
    let cfg = ViewConfig::default();
    let a = branch_views(scene, &c.layout, &cfg, 9);
    assert_eq!(a, branch_views(scene, &c.layout, &cfg, 9));
    assert_eq!(a.teacher, scene.features);
    let flipped = (0..64)
        .map(|s| branch_views(scene, &c.layout, &cfg, s))
        .find(|v| v.flipped)
        .expect("some seed flips");
    for y in 0..scene.height() {
        for x in 0..scene.width() {
            let (y2, x2) = flipped.to_student(y, x);
            assert_eq!((y2, x2), (y, scene.width() - 1 - x));
            assert_eq!(flipped.to_student(y2, x2), (y, x));
        }
    }
}

#[test]
fn burn_in_leaves_teacher_untouched() {
    let fx = Fixture::new();
    let cfg = config();
    let opts = RunOptions {
        stop_at: Some(cfg.burn_in_iters - 1),
        ..RunOptions::default()
    };
    let run = run_training(&fx.data(), &cfg, opts).unwrap();
    let initial = TrainState::new(run.state.student.shape(), &cfg).unwrap();
    assert_eq!(run.state.phase, Phase::BurnIn);
    assert_eq!(run.state.teacher.checksum(), initial.teacher.checksum());
    assert_ne!(run.state.student.checksum(), initial.student.checksum());

    let full = run_training(&fx.data(), &cfg, RunOptions::default()).unwrap();
    let phases: Vec<(usize, Phase)> = full.log.iter().map(|r| (r.iteration, r.phase)).collect();
    for (it, phase) in &phases {
        assert_eq!(*phase == Phase::Mutual, *it >= cfg.burn_in_iters, "{phases:?}");
    }
    assert_eq!(full.log.iter().filter(|r| r.phase == Phase::BurnIn).map(|r| r.stats.selected).sum::<usize>(), 0);
}

#[test]
fn handoff_copies_the_student() {
    let fx = Fixture::new();
    let cfg = config();
    let run = run_training(
        &fx.data(),
        &cfg,
        RunOptions {
            stop_at: Some(cfg.burn_in_iters),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(run.state.phase, Phase::Mutual);
    assert_eq!(run.state.teacher, run.state.student);
}

#[test]
fn zero_unsup_weight_matches_supervised_only() {
    let fx = Fixture::new();
    let cfg = TrainConfig {
        unsup_weight: 0.0,
        ..config()
    };
    let sup = TrainConfig {
        burn_in_iters: cfg.total_iters,
        ..cfg.clone()
    };
    let a = run_training(&fx.data(), &cfg, RunOptions::default()).unwrap();
    let b = run_training(&fx.data(), &sup, RunOptions::default()).unwrap();
    assert_eq!(a.state.student, b.state.student);
    let la: Vec<f64> = a.log.iter().map(|r| r.stats.loss).collect();
    let lb: Vec<f64> = b.log.iter().map(|r| r.stats.loss).collect();
    assert_eq!(la, lb);
}

#[test]
fn runs_are_deterministic_and_shuffle_is_seeded() {
    let fx = Fixture::new();
    let cfg = config();
    let a = run_training(&fx.data(), &cfg, RunOptions::default()).unwrap();
    let b = run_training(&fx.data(), &cfg, RunOptions::default()).unwrap();
    assert_eq!(a.metrics_jsonl(), b.metrics_jsonl());
    assert_eq!(a.state.to_checkpoint().to_bytes(), b.state.to_checkpoint().to_bytes());
    let c = run_training(
        &fx.data(),
        &TrainConfig {
            shuffle_seed: Some(77),
            ..cfg
        },
        RunOptions::default(),
    )
    .unwrap();
    assert_ne!(a.teacher().checksum(), c.teacher().checksum());
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let fx = Fixture::new();
    let cfg = TrainConfig {
        eval_interval: 6,
        ..config()
    };
    let full = run_training(&fx.data(), &cfg, RunOptions::default()).unwrap();
    for cut in [5, 8, 13] {
        let first = run_training(
            &fx.data(),
            &cfg,
            RunOptions {
                stop_at: Some(cut),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let restored = TrainState::from_checkpoint(&first.state.to_checkpoint()).unwrap();
        let rest = run_training(
            &fx.data(),
            &cfg,
            RunOptions {
                resume: Some(restored),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rest.state, full.state, "cut at {cut}");
        let joined: String = first.metrics_jsonl() + &rest.metrics_jsonl();
        assert_eq!(joined, full.metrics_jsonl());
    }
}

#[test]
fn global_topk_without_prompt_selects_exactly_the_topk() {
    let fx = Fixture::new();
    let cfg = TrainConfig {
        assignment: Assignment::GlobalTopk,
        prompt_mode: PromptMode::NoPrompt,
        burn_in_iters: 2,
        total_iters: 10,
        ..config()
    };
    let data = fx.data();
    let prompts = resolve_prompts(&data, &cfg).unwrap();
    assert!(prompts.iter().all(Vec::is_empty));
    let scenes: Vec<TrainScene<'_>> = fx
        .train
        .scenes
        .iter()
        .zip(prompts)
        .map(|(s, p)| TrainScene::new(s, fx.ann.get(s.id).unwrap(), p, 2).unwrap())
        .collect();
    let shape = ModelShape::linear(fx.train.layout.num_features(), 2);
    let mut state = TrainState::new(shape, &cfg).unwrap();
    while state.iteration < cfg.total_iters {
        let batch: Vec<&TrainScene<'_>> = batch_indices(scenes.len(), state.iteration, &cfg)
            .into_iter()
            .map(|i| &scenes[i])
            .collect();
        let mut expected = 0;
        if state.phase == Phase::Mutual {
            for ts in &batch {
                let (_, sel) = pseudo_labels(&state.teacher, ts, &ts.scene.features, &cfg).unwrap();
                let cands = candidates_from_scores(&joint_confidence(&forward(&state.teacher, &ts.scene.features).unwrap()));
                let reference = select_topk(&cands, cfg.cla.k.resolve(cands.len()));
                assert_eq!(sel, reference);
                assert_eq!(sel.count_tag(Provenance::Conf), sel.len());
                expected += sel.len();
            }
        }
        let stats = train_step(&mut state, &batch, &fx.train.layout, &cfg).unwrap();
        assert_eq!(stats.selected, expected);
    }
}

#[test]
fn predictor_mode_needs_prompts() {
    let fx = Fixture::new();
    let cfg = TrainConfig {
        prompt_mode: PromptMode::Predictor,
        ..config()
    };
    let data = TrainData {
        prompts: None,
        ..fx.data()
    };
    assert!(run_training(&data, &cfg, RunOptions::default()).is_err());
    assert!(run_training(&fx.data(), &cfg, RunOptions::default()).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let fx = Fixture::new();
    for cfg in [
        TrainConfig {
            burn_in_iters: 30,
            ..config()
        },
        TrainConfig {
            ema_momentum: 1.5,
            ..config()
        },
        TrainConfig {
            batch_size: 0,
            ..config()
        },
    ] {
        assert!(run_training(&fx.data(), &cfg, RunOptions::default()).is_err());
    }
}

#[test]
fn batches_cover_each_epoch_once() {
    let cfg = TrainConfig {
        batch_size: 5,
        ..config()
    };
    let n = 12;
    let seq: Vec<usize> = (0..12).flat_map(|it| batch_indices(n, it, &cfg)).collect();
    for epoch in seq.chunks(n) {
        let mut e = epoch.to_vec();
        e.sort_unstable();
        assert_eq!(e, (0..n).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn teacher_lag_is_bounded(seed in any::<u64>(), m in 0.01..0.999f64, steps in 1usize..400) {
        let mut r = rng(seed);
        let shape = ModelShape::linear(1, 1);
        let n = shape.num_params();
        let mut student = ModelParams::zeros(shape);
        let mut teacher = student.clone();
        let mut max_step: f64 = 0.0;
        let mut lo = vec![0.0f64; n];
        let mut hi = vec![0.0f64; n];
        for _ in 0..steps {
            for (i, v) in student.as_mut_slice().iter_mut().enumerate() {
                let d: f64 = r.random_range(-1.0..1.0);
                max_step = max_step.max(d.abs());
                *v += d;
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
            ema_update(&mut teacher, &student, m).unwrap();
            for (i, (t, s)) in teacher.as_slice().iter().zip(student.as_slice()).enumerate() {
                prop_assert!((t - s).abs() <= max_step / (1.0 - m) + 1e-9);
                // convex combination of the history
                prop_assert!(*t >= lo[i] - 1e-9 && *t <= hi[i] + 1e-9);
            }
        }
    }
}
