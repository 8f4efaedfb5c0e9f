use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::ConvKind;
use crate::error::Error;
use crate::numcore::{Tape, Tensor};
use crate::pointio::PointCloud;
use crate::spacefill::{CurveVariant, HILBERT_VARIANTS};

fn cloud(n: usize, index: usize) -> PointCloud {
    ToyTask {
        n_points: n,
        ..ToyTask::default()
    }
    .cloud(0, index)
    .unwrap()
}

fn seg_cloud(n: usize, seed: u64) -> PointCloud {
    cube_faces(1, n, 0.01, seed).unwrap().pop().unwrap()
}

#[test]
fn config_round_trips_through_the_file_format() {
    let cfg = ModelConfig {
        task: Task::Segmentation,
        stage_blocks: vec![1, 2, 1],
        stage_dims: vec![16, 32, 48],
        heads: 2,
        transition: TransitionKind::Grid,
        grid_size: 0.125,
        serialization: OrderStrategy::None,
        conv_kind: ConvKind::Traditional,
        conv_branch: false,
        scan_chunk: 16,
        ..ModelConfig::default()
    };
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert_eq!(cfg.stage_heads(2), 6);
}

#[test]
fn config_parser_handles_comments_and_rejects_junk() {
    let cfg = ModelConfig::from_kv("# toy\n\nheads = 3  # fewer heads\nstage_dims=24,24\n").unwrap();
    assert_eq!(cfg.heads, 3);
    assert_eq!(cfg.stage_dims, vec![24, 24]);
    assert!(matches!(ModelConfig::from_kv("colour = red"), Err(Error::Config(_))));
    assert!(ModelConfig::from_kv("heads").is_err());
    assert!(ModelConfig::from_kv("bidirectional = maybe").is_err());
}

#[test]
fn inconsistent_configs_fail_at_build_time() {
    let bad = [
        "heads = 5",
        "stage_dims = 48, 20",
        "stage_blocks = 1",
        "conv_kernel = 4",
        "num_classes = 1",
        "bits = 0",
        "bits = 21",
        "transition = grid\ngrid_size = 0",
    ];
    for text in bad {
        assert!(ModelConfig::from_kv(text).is_err(), "{text}");
    }
    let cfg = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(Model::new(cfg, 0).is_err());
    for p in ["toy", "tiny", "tiny-seg"] {
        ModelConfig::preset(p).unwrap().validate().unwrap();
    }
}

#[test]
fn recognition_logits_have_one_row_for_any_size() {
    let model = Model::new(ModelConfig::tiny(), 1).unwrap();
    for n in [9, 32, 77] {
        assert_eq!(model.predict(&cloud(n, 2)).unwrap().shape(), &[4]);
    }
}

#[test]
fn segmentation_logits_cover_every_input_point() {
    for transition in [TransitionKind::Fps, TransitionKind::Grid] {
        let cfg = ModelConfig {
            transition,
            grid_size: 0.3,
            stage_blocks: vec![1, 1, 1],
            stage_dims: vec![12, 12, 24],
            ..ModelConfig::preset("tiny-seg").unwrap()
        };
        let model = Model::new(cfg, 2).unwrap();
        for n in [10, 41] {
            let pc = seg_cloud(n, n as u64);
            assert_eq!(model.predict(&pc).unwrap().shape(), &[n, 3]);
        }
    }
}

#[test]
fn stage_point_sets_follow_the_schedule() {
    let model = Model::new(
        ModelConfig {
            stage_blocks: vec![1, 1, 1],
            stage_dims: vec![12, 12, 12],
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    let geo = model.geometry(&cloud(33, 0).coords).unwrap();
    let sizes: Vec<usize> = geo.coords.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![33, 17, 9]);

    let grid = Model::new(
        ModelConfig {
            transition: TransitionKind::Grid,
            grid_size: 0.2,
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    let geo = grid.geometry(&cloud(200, 0).coords).unwrap();
    assert!(geo.coords[1].len() < 200);
}

#[test]
fn every_block_gets_a_plan_entry() {
    let cfg = ModelConfig {
        stage_blocks: vec![2, 1],
        decoder_blocks: 2,
        ..ModelConfig::preset("tiny-seg").unwrap()
    };
    assert_eq!(cfg.total_blocks(), 5);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let a = model.block_orders(1).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a, model.block_orders(1).unwrap());
    let differs = (2..20).any(|s| model.block_orders(s).unwrap() != a);
    assert!(differs);

    let seq = Model::new(
        ModelConfig {
            serialization: OrderStrategy::Sequential,
            ..cfg.clone()
        },
        0,
    )
    .unwrap();
    let expect: Vec<BlockOrder> = HILBERT_VARIANTS[..5].iter().map(|&v| BlockOrder::Curve(v)).collect();
    assert_eq!(seq.block_orders(9).unwrap(), expect);

    let none = Model::new(
        ModelConfig {
            serialization: OrderStrategy::None,
            ..cfg
        },
        0,
    )
    .unwrap();
    assert!(none
        .block_orders(0)
        .unwrap()
        .iter()
        .all(|o| matches!(o, BlockOrder::Random(_))));
    let fixed = CurveVariant::hilbert(crate::spacefill::AxisPriority::Xyz);
    assert_eq!(HILBERT_VARIANTS[0], fixed);
}

#[test]
fn one_point_reaches_the_class_logits() {
    let model = Model::new(ModelConfig::tiny(), 3).unwrap();
    let pc = cloud(32, 1);
    let base = model.predict(&pc).unwrap();
    for i in [0, 13, 31] {
        let mut moved = pc.clone();
        moved.coords[i][0] += 1e-3;
        let y = model.predict(&moved).unwrap();
        assert!(y.max_abs_diff(&base) > 0.0, "point {i} has no influence");
    }
}

#[test]
fn evaluation_is_bit_exact() {
    let pc = cloud(64, 3);
    let a = Model::new(ModelConfig::tiny(), 4).unwrap();
    let b = Model::new(ModelConfig::tiny(), 4).unwrap();
    let ya = a.predict(&pc).unwrap();
    assert_eq!(ya, a.predict(&pc).unwrap());
    assert_eq!(ya, b.predict(&pc).unwrap());
    let other = Model::new(ModelConfig::tiny(), 5).unwrap();
    assert_ne!(ya, other.predict(&pc).unwrap());
}

#[test]
fn feature_columns_must_match_the_config() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let mut pc = cloud(16, 0);
    pc.features = Some(vec![vec![1.0]; 16]);
    assert!(matches!(model.predict(&pc), Err(Error::Shape { .. })));
    let with = Model::new(
        ModelConfig {
            in_features: 1,
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    assert_eq!(with.predict(&pc).unwrap().shape(), &[4]);
}

fn assert_no_dead_parameters(model: &Model, pc: &PointCloud) {
    let o = sample_gradients(model, pc, 0).unwrap();
    for (id, g) in model.store.ids().zip(&o.grads) {
        assert!(g.max_abs() > 0.0, "{} receives no gradient", model.store.name(id));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::new(ModelConfig::tiny(), 6).unwrap();
    assert_no_dead_parameters(&model, &cloud(32, 2));
    let seg = Model::new(ModelConfig::preset("tiny-seg").unwrap(), 7).unwrap();
    assert_no_dead_parameters(&seg, &seg_cloud(32, 3));
}

#[test]
fn training_loss_decreases_within_ten_steps() {
    let mut decreased = 0;
    for seed in 0..100u64 {
        let mut model = Model::new(ModelConfig::tiny(), seed).unwrap();
        let pc = cloud(32, seed as usize);
        let h = overfit(&mut model, &pc, 10, 1e-3, false).unwrap();
        if h[10].loss < h[0].loss {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "loss decreased for {decreased}/100 seeds");
}

#[test]
fn single_sample_overfit_reaches_full_accuracy() {
    let mut model = Model::new(ModelConfig::preset("tiny-seg").unwrap(), 8).unwrap();
    let mut pc = seg_cloud(64, 9);
    pc.labels = Some(pc.labels.unwrap().iter().map(|&l| usize::from(l == 2)).collect());
    let h = overfit(&mut model, &pc, 200, 1e-2, true).unwrap();
    let last = h.last().unwrap();
    assert_eq!(last.acc, 1.0, "accuracy {} after {} steps", last.acc, last.step);
}

fn small_task() -> ToyTask {
    ToyTask {
        n_points: 32,
        train_per_class: 4,
        test_per_class: 2,
        ..ToyTask::default()
    }
}

fn small_train(threads: usize) -> TrainReport {
    let (train, test) = small_task().split().unwrap();
    let mut model = Model::new(ModelConfig::tiny(), 10).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    crate::par::with_threads(threads, || train_toy(&mut model, &train, &test, &tc, &mut |_| {})).unwrap()
}

#[test]
fn training_is_reproducible_for_any_thread_count() {
    let a = small_train(1);
    let b = small_train(1);
    let c = small_train(3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history, c.history);
    assert_eq!(a.best_params, c.best_params);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|m| (0.0..=1.0).contains(&m.test_acc)));
}

#[test]
fn training_stops_at_the_target_accuracy() {
    let (train, test) = small_task().split().unwrap();
    let mut model = Model::new(ModelConfig::tiny(), 11).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 4,
        target_accuracy: Some(0.0),
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let r = train_toy(&mut model, &train, &test, &tc, &mut |m| seen.push(*m)).unwrap();
    assert_eq!(r.history.len(), 1);
    assert_eq!(seen, r.history);
    assert_eq!(r.best_epoch, 1);
}

#[test]
fn non_finite_loss_aborts_training() {
    let (train, test) = small_task().split().unwrap();
    let mut model = Model::new(ModelConfig::tiny(), 12).unwrap();
    let id = model
        .store
        .ids()
        .find(|&id| model.store.name(id) == "head.fc2.b")
        .unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train_toy(&mut model, &train, &test, &TrainConfig::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. }), "{err}");
}

#[test]
fn checkpoints_round_trip() {
    let dir = std::env::temp_dir().join(format!("hydramamba-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.json");
    let model = Model::new(ModelConfig::preset("tiny-seg").unwrap(), 13).unwrap();
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let pc = seg_cloud(20, 1);
    assert_eq!(model.predict(&pc).unwrap(), back.predict(&pc).unwrap());
    std::fs::write(&path, "{}").unwrap();
    assert!(matches!(Model::load(&path), Err(Error::Format { .. })));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
    assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
}

#[test]
fn adamw_first_step_moves_against_the_gradient() {
    let mut store = crate::numcore::ParamStore::new();
    store.add("w", Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    store.add("b", Tensor::vector(vec![0.5]));
    let mut opt = AdamW::new(&store, 0.1);
    let grads = vec![
        Tensor::new(&[1, 2], vec![2.0, -3.0]).unwrap(),
        Tensor::vector(vec![0.0]),
    ];
    opt.step(&mut store, &grads, 0.01);
    // Bias-corrected first step is lr * sign(g), plus decay on the matrix only.
    let w = store.values()[0].data();
    assert!((w[0] - (1.0 - 0.01 - 0.001)).abs() < 1e-9);
    assert!((w[1] - (-1.0 + 0.01 + 0.001)).abs() < 1e-9);
    assert_eq!(store.values()[1].data(), &[0.5]);
}

#[test]
fn ablation_rows_and_failures() {
    let base = ModelConfig::tiny();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let ok = AblationCell {
        strategy: OrderStrategy::Shuffle,
        bidirectional: true,
        conv_branch: true,
        heads: 3,
    };
    let broken = AblationCell { heads: 5, ..ok };
    let rows = ablate(&base, &[broken, ok], &[0], &small_task(), &tc, &mut |_| {});
    assert_eq!(rows.len(), 2);
    assert!(rows[0].error.is_some() && rows[0].final_test_acc.is_none());
    assert!(rows[1].error.is_none() && rows[1].final_test_acc.is_some());
    let tsv = rows_tsv(&rows);
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.lines().nth(1).unwrap().contains("failed"));
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].failed, 1);
    assert_eq!(summary_tsv(&summary).lines().count(), 3);
    assert_eq!(AblationGrid::full().cells().len(), 3 * 2 * 2 * 4);
    assert_eq!(ok.to_string(), "shuffle/bi/conv/h3");
}

#[test]
fn toy_data_is_seeded_and_balanced() {
    let task = small_task();
    let (train, test) = task.split().unwrap();
    assert_eq!((train.len(), test.len()), (16, 8));
    let classes: Vec<usize> = train.iter().map(|pc| pc.class_id.unwrap()).collect();
    assert_eq!(&classes[..4], &[0, 1, 2, 3]);
    assert_eq!(train, task.split().unwrap().0);
    let rotated = ToyTask {
        rotate: true,
        anisotropy: 0.3,
        ..task
    };
    let pc = rotated.cloud(0, 0).unwrap();
    let max_r = pc
        .coords
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    assert!((max_r - 1.0).abs() < 1e-9);
    assert!(ToyTask {
        anisotropy: 1.5,
        ..task
    }
    .split()
    .is_err());
}

fn nearest_neighbor_distances(pc: &PointCloud) -> Vec<f64> {
    pc.coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pc.coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn grouping_classes_differ_only_locally() {
    let task = ToyTask {
        kind: ToyKind::Grouping,
        n_points: 64,
        noise_sigma: 0.0,
        ..small_task()
    };
    let mut close_counts = Vec::new();
    for class in 0..4 {
        let pc = task.cloud(0, class).unwrap();
        assert_eq!(pc.class_id, Some(class));
        assert_eq!(pc.len(), 64);
        // Same global extent for every class.
        let r: Vec<f64> = pc
            .coords
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect();
        assert!(r.iter().all(|&r| r > 0.4 && r <= 1.0 + 1e-9), "class {class}");
        let nn = nearest_neighbor_distances(&pc);
        close_counts.push(nn.iter().filter(|&&d| d < 2.0 * GROUP_RADIUS).count());
    }
    // 64 uniform points on the sphere leave about 10 with a neighbour that close.
    assert!(close_counts[0] < 32, "{close_counts:?}");
    assert!(close_counts[1..].iter().all(|&c| c >= 60), "{close_counts:?}");
}

#[test]
fn cube_face_labels_follow_the_dominant_axis() {
    let pc = cube_faces(1, 256, 0.0, 3).unwrap().pop().unwrap();
    // Labels are taken before centering, so points near an edge may disagree.
    let agree = pc
        .coords
        .iter()
        .zip(pc.labels.as_ref().unwrap())
        .filter(|(p, &l)| p.iter().all(|v| v.abs() <= p[l].abs()))
        .count();
    assert!(agree >= 230, "{agree}/256");
    assert!(pc.labels.unwrap().iter().all(|&l| l < 3));
}

#[test]
fn forward_on_a_shared_tape_matches_predict() {
    let model = Model::new(ModelConfig::tiny(), 14).unwrap();
    let pc = cloud(30, 5);
    let tape = Tape::new();
    let b = model.store.bind(&tape);
    let y = model.forward(&tape, &b, &pc, model.config().shuffle_seed).unwrap();
    assert_eq!(*tape.value(y), model.predict(&pc).unwrap());
}

fn arb_config() -> impl Strategy<Value = (ModelConfig, usize)> {
    (
        1usize..=3,
        prop::sample::select(vec![1usize, 2, 3]),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![
            OrderStrategy::Shuffle,
            OrderStrategy::Sequential,
            OrderStrategy::Fixed,
            OrderStrategy::None,
        ]),
        8usize..40,
        any::<u64>(),
    )
        .prop_map(|(stages, heads, seg, grid, serialization, n, seed)| {
            let dims: Vec<usize> = (0..stages).map(|s| 6 * (s + 1)).collect();
            let cfg = ModelConfig {
                task: if seg { Task::Segmentation } else { Task::Recognition },
                num_classes: 3,
                stage_blocks: vec![1; stages],
                stage_dims: dims,
                heads,
                transition: if grid {
                    TransitionKind::Grid
                } else {
                    TransitionKind::Fps
                },
                grid_size: 0.25,
                state_dim: 2,
                conv_kernel: 3,
                ffn_ratio: 1,
                serialization,
                shuffle_seed: seed,
                ..ModelConfig::default()
            };
            (cfg, n)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn random_configs_keep_shape_contracts((cfg, n) in arb_config()) {
        let model = Model::new(cfg.clone(), 0).unwrap();
        let pc = cloud(n, n);
        let y = model.predict(&pc).unwrap();
        match cfg.task {
            Task::Recognition => prop_assert_eq!(y.shape(), &[3]),
            Task::Segmentation => prop_assert_eq!(y.shape(), &[n, 3]),
        }
        prop_assert!(y.is_finite());
    }
}

#[test]
fn derived_seeds_are_distinct() {
    let mut seen = std::collections::HashSet::new();
    for a in 0..20 {
        for b in 0..20 {
            assert!(seen.insert(derive_seed(a, &[b])));
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let _ = Tensor::randn(&[1], 1.0, &mut r);
}
