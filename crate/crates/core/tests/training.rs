mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specdec::hybrid_engine::vanilla_greedy;
use specdec::owl_drafter::{DrafterShape, DrafterVariant, DrafterWeights};
use specdec::target_model::{AttentionMask, TargetConfig, TargetModel};
use specdec::trainer::{
    build_training_batch, generate_training_corpus, gradient_check, loss_gradients, read_corpus,
    synthetic_seed_texts, train, train_variant, training_loss, write_corpus, write_loss_curve,
    FrozenTarget, SpecLabel, TrainConfig,
};

fn oracle_model() -> TargetModel {
    TargetModel::seeded(
        TargetConfig {
            vocab_size: 11,
            hidden_size: 4,
            num_layers: 2,
            num_heads: 2,
            max_positions: 64,
        },
        21,
    )
    .unwrap()
}

fn shape(model: &TargetModel, dim: usize, depth: usize) -> DrafterShape {
    DrafterShape {
        vocab_size: model.config().vocab_size,
        model_dim: model.config().hidden_size,
        dim,
        depth,
    }
}

fn with_zero_lm_head(model: &TargetModel) -> TargetModel {
    let mut file = model.to_weight_file();
    for t in &mut file.tensors {
        if t.name == "lm_head" {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    TargetModel::from_weight_file(&file).unwrap()
}

#[test]
fn mask_layout_for_three_tokens() {
    let model = oracle_model();
    let batch = build_training_batch(&model, &[1, 2, 3]).unwrap();
    assert_eq!(batch.positions(), vec![0, 1, 2, 1, 2, 3]);
    let AttentionMask::Explicit { prefix, rows } = batch.mask() else {
        panic!("expected an explicit mask");
    };
    assert_eq!(prefix, 0);
    assert_eq!(rows[0], vec![0]);
    assert_eq!(rows[2], vec![0, 1, 2]);
    assert_eq!(rows[4], vec![0, 1, 4]);
    for row in &rows[..3] {
        assert!(row.iter().all(|&k| k < 3));
    }
}

#[test]
fn spec_columns_do_not_disturb_real_tokens() {
    let model = common::small_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = common::random_tokens(&mut rng, 40, model.spec_token());
    let batch = build_training_batch(&model, &seq).unwrap();
    let mut cache = model.new_cache();
    let plain = model.forward_causal(&mut cache, &seq).unwrap();
    for k in 0..seq.len() {
        assert!(common::max_abs_diff(&batch.hidden[k], plain.hidden.row(k)) < 1e-5);
        let mut prefix = seq[..=k].to_vec();
        prefix.push(model.spec_token());
        let mut c = model.new_cache();
        let out = model.forward_causal(&mut c, &prefix).unwrap();
        assert!(common::max_abs_diff(&batch.spec_hidden[k], out.hidden.row(k + 1)) < 1e-5);
    }
}

#[test]
fn reserved_token_is_rejected() {
    let model = oracle_model();
    assert!(build_training_batch(&model, &[1, model.spec_token(), 2]).is_err());
    assert!(build_training_batch(&model, &[1]).is_err());
}

#[test]
fn uniform_logits_give_two_log_v() {
    let model = with_zero_lm_head(&oracle_model());
    let target = FrozenTarget::new(&model);
    let batch = build_training_batch(&model, &[1, 4, 2, 8, 5, 7, 3, 0]).unwrap();
    let mut w = DrafterWeights::seeded(DrafterVariant::Spec, shape(&model, 8, 3), 2);
    w.head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let v = model.config().vocab_size as f64;
    let loss = training_loss(&target, &batch, &w, Some(model.spec_embedding()), SpecLabel::Current).unwrap();
    assert!((loss - 2.0 * v.ln()).abs() < 1e-6, "{loss}");

    let mut w = DrafterWeights::seeded(DrafterVariant::NoSpec, shape(&model, 8, 3), 2);
    w.head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let loss = training_loss(&target, &batch, &w, None, SpecLabel::Current).unwrap();
    assert!((loss - v.ln()).abs() < 1e-6, "{loss}");
}

#[test]
fn loss_matches_straight_line_reference() {
    let model = oracle_model();
    let target = FrozenTarget::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (seed, depth) in [(1u64, 3usize), (2, 1), (3, 8)] {
        let seq = common::random_tokens(&mut rng, 8, model.spec_token());
        let batch = build_training_batch(&model, &seq).unwrap();
        for variant in [DrafterVariant::Spec, DrafterVariant::NoSpec] {
            let w = DrafterWeights::seeded(variant, shape(&model, 8, depth), seed);
            let spec = (variant == DrafterVariant::Spec).then_some(&batch.spec_hidden[..]);
            let expected = common::straight_line_loss(&seq, &batch.hidden, spec, model.lm_head(), &w);
            let got = training_loss(&target, &batch, &w, Some(model.spec_embedding()), SpecLabel::Current).unwrap();
            assert!((got - expected).abs() < 1e-6, "{variant:?} depth {depth}: {got} vs {expected}");
        }
    }
}

#[test]
fn gradients_agree_with_finite_differences() {
    let model = TargetModel::seeded(common::tiny_config(), 3).unwrap();
    let target = FrozenTarget::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = common::random_tokens(&mut rng, 12, model.spec_token());
    let batch = build_training_batch(&model, &seq).unwrap();
    for (variant, label) in [
        (DrafterVariant::Spec, SpecLabel::Current),
        (DrafterVariant::Spec, SpecLabel::Next),
        (DrafterVariant::NoSpec, SpecLabel::Current),
    ] {
        let w = DrafterWeights::seeded(variant, shape(&model, 6, 3), 8);
        let r = gradient_check(&target, &batch, &w, Some(model.spec_embedding()), label, 120, 1e-3, 17).unwrap();
        assert_eq!(r.checked, 120);
        assert!(r.nonzero > 60, "{variant:?}: only {} nonzero coordinates", r.nonzero);
        assert!(r.max_rel_error < 1e-3, "{variant:?}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn unused_weights_get_no_gradient() {
    let model = oracle_model();
    let target = FrozenTarget::new(&model);
    let batch = build_training_batch(&model, &[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
    let w = DrafterWeights::seeded(DrafterVariant::NoSpec, shape(&model, 8, 3), 1);
    let g = loss_gradients(&target, &batch, &w, None, SpecLabel::Current).unwrap();
    assert!(g.spec_embedding.is_none());
    let mut off = 0;
    for (name, dims) in specdec::owl_drafter::tensor_shapes(&w.shape) {
        let len: usize = dims.iter().product();
        if name.starts_with("u_spec") {
            assert!(g.drafter[off..off + len].iter().all(|&v| v == 0.0), "{name}");
        }
        off += len;
    }
    assert!(g.drafter.iter().any(|&v| v != 0.0));
}

#[test]
fn corpus_is_prompt_plus_greedy_continuation() {
    let model = common::small_model(2);
    let seeds = synthetic_seed_texts(2, 70, 32, 1);
    assert_eq!(seeds, synthetic_seed_texts(2, 70, 32, 1));
    let short = vec![vec![1u32; 10]];
    let corpus = generate_training_corpus(&model, &[seeds[0].clone(), short[0].clone()], 64, 40).unwrap();
    assert_eq!(corpus.len(), 1);
    assert_eq!(corpus[0].len(), 104);
    let greedy = vanilla_greedy(&model, &seeds[0][..64], 40, None).unwrap();
    assert_eq!(&corpus[0][64..], &greedy[..]);
    assert!(generate_training_corpus(&model, &[], 64, 40).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    write_corpus(&path, &corpus).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), corpus);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().split(' ').all(|t| t.parse::<u32>().is_ok()));

    let csv = dir.path().join("loss.csv");
    write_loss_curve(&csv, &[2.5, 2.0]).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,loss"));
    assert!(lines.next().unwrap().starts_with("1,2.5"));
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        seq_len: 24,
        batch_size: 1,
        anchors_per_seq: None,
        iterations: 10,
        depth: 3,
        drafter_dim: 8,
        grad_check_coords: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn overfitting_one_batch_lowers_the_loss_every_step() {
    let model = common::small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = common::random_tokens(&mut rng, 24, model.spec_token());
    let batches = vec![build_training_batch(&model, &seq).unwrap()];
    let target = FrozenTarget::new(&model);
    for variant in [DrafterVariant::Spec, DrafterVariant::NoSpec] {
        let run = train_variant(&model, &target, &batches, variant, &smoke_config()).unwrap();
        assert_eq!(run.losses.len(), 10);
        for w in run.losses.windows(2) {
            assert!(w[1] < w[0], "{variant:?}: {:?}", run.losses);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let model = common::small_model(4);
    let corpus: Vec<Vec<u32>> = synthetic_seed_texts(3, 30, 32, 9);
    let config = TrainConfig {
        batch_size: 2,
        anchors_per_seq: Some(5),
        iterations: 4,
        ..smoke_config()
    };
    let a = train(&model, &corpus, &config).unwrap();
    let b = train(&model, &corpus, &config).unwrap();
    assert_eq!(a.spec.weights.to_weight_file().to_bytes(), b.spec.weights.to_weight_file().to_bytes());
    assert_eq!(a.nospec.weights.to_weight_file().to_bytes(), b.nospec.weights.to_weight_file().to_bytes());
    assert_eq!(a.spec.losses, b.spec.losses);
    assert!(a.spec.weights.spec_embedding.is_some());
    assert!(a.nospec.weights.spec_embedding.is_none());
    assert_ne!(a.spec.weights.spec_embedding.as_deref(), Some(model.spec_embedding()));
}

#[test]
fn bad_configs_are_rejected() {
    let model = common::small_model(4);
    let corpus = synthetic_seed_texts(1, 30, 32, 9);
    let config = TrainConfig {
        seq_len: 3,
        depth: 8,
        ..smoke_config()
    };
    assert!(train(&model, &corpus, &config).is_err());
    assert!(train(&model, &[], &smoke_config()).is_err());
}
