mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specdec::hybrid_engine::{generate, vanilla_greedy, Branch, Drafters, EngineConfig, Mode};
use specdec::owl_drafter::{draft_tree, DrafterShape, DrafterVariant, DrafterWeights, TreePolicy};
use specdec::target_model::TargetModel;

fn drafters(model: &TargetModel, seed: u64) -> (DrafterWeights, DrafterWeights) {
    let shape = DrafterShape {
        vocab_size: model.config().vocab_size,
        model_dim: model.config().hidden_size,
        dim: 12,
        depth: 4,
    };
    (
        DrafterWeights::seeded(DrafterVariant::Spec, shape, seed),
        DrafterWeights::seeded(DrafterVariant::NoSpec, shape, seed + 1),
    )
}

fn config(mode: Mode, max_new: usize) -> EngineConfig {
    EngineConfig {
        mode,
        max_new_tokens: max_new,
        tree: TreePolicy {
            top_k: 4,
            depth: 4,
            size: 16,
        },
        threshold_c: 2.0,
        ..EngineConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_mode_reproduces_greedy(
        seed in any::<u64>(),
        plen in 1usize..30,
        max_new in 1usize..40,
        spec_on in any::<bool>(),
        repeat in any::<bool>(),
    ) {
        let model = common::small_model(seed % 4);
        let (ds, dn) = drafters(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompt = common::random_tokens(&mut rng, plen, model.spec_token());
        if repeat {
            prompt = prompt.repeat(3);
        }
        let reference = vanilla_greedy(&model, &prompt, max_new, None).unwrap();
        for mode in Mode::ALL {
            let c = EngineConfig { spec_enabled: spec_on, ..config(mode, max_new) };
            let g = generate(&model, Drafters { spec: Some(&ds), nospec: Some(&dn) }, &prompt, &c).unwrap();
            prop_assert_eq!(&g.tokens, &reference, "mode {}", mode);
            let al: usize = g.steps.iter().map(|s| s.acceptance_length).sum();
            prop_assert!(al + 1 >= g.tokens.len());
            for s in &g.steps {
                prop_assert_eq!(s.acceptance_length, s.accepted + 1);
                prop_assert!(s.accepted <= s.drafted);
            }
        }
    }

    #[test]
    fn draft_tree_ignores_where_its_inputs_came_from(seed in any::<u64>(), short in 1usize..20, long in 100usize..400) {
        let model = common::small_model(1);
        let (ds, _) = drafters(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_tokens(&mut rng, short, model.spec_token());
        let b = common::random_tokens(&mut rng, long, model.spec_token());
        let mut ca = model.new_cache();
        let pa = specdec::spec_verifier::prefill(&model, &mut ca, &a).unwrap();
        let mut cb = model.new_cache();
        specdec::spec_verifier::prefill(&model, &mut cb, &b).unwrap();
        let policy = TreePolicy { top_k: 5, depth: 4, size: 20 };
        let t1 = draft_tree(&ds, pa.t_next, &pa.h_last, Some(&pa.h_spec), &policy).unwrap();
        // the long context has run, but the drafter sees only these three vectors
        let t2 = draft_tree(&ds, pa.t_next, &pa.h_last, Some(&pa.h_spec), &policy).unwrap();
        prop_assert_eq!(t1, t2);
    }
}

#[test]
fn repeated_text_takes_the_linear_branch() {
    let model = common::small_model(2);
    let (ds, dn) = drafters(&model, 3);
    let base: Vec<u32> = (0..24).map(|i| (i * 7 % 31) as u32).collect();
    let greedy = vanilla_greedy(&model, &base, 60, None).unwrap();
    let mut prompt = base.clone();
    prompt.extend(&greedy);
    prompt.extend(&base);
    let c = EngineConfig {
        threshold_c: 3.0,
        ..config(Mode::Hybrid, 60)
    };
    let g = generate(&model, Drafters { spec: Some(&ds), nospec: Some(&dn) }, &prompt, &c).unwrap();
    assert_eq!(g.tokens, vanilla_greedy(&model, &prompt, 60, None).unwrap());
    assert!(g.steps.iter().any(|s| s.branch == Branch::Linear));
    assert!(g.steps.iter().any(|s| s.acceptance_length > c.tree.depth + 1));
}

#[test]
fn spec_toggle_halves_tree_nodes() {
    let c = EngineConfig::default();
    assert_eq!(c.effective_tree().size, 30);
    let off = EngineConfig {
        spec_enabled: false,
        ..c
    };
    assert_eq!(off.effective_tree().size, 60);
    let nospec = EngineConfig {
        mode: Mode::OwlNospec,
        ..c
    };
    assert!(!nospec.appends_spec());
    assert_eq!(nospec.effective_tree().size, 60);
}

#[test]
fn reserved_and_empty_prompts_fail() {
    let model = common::small_model(2);
    let c = config(Mode::Suffix, 8);
    assert!(generate(&model, Drafters::default(), &[], &c).is_err());
    assert!(generate(&model, Drafters::default(), &[1, model.spec_token()], &c).is_err());
    assert!(generate(&model, Drafters::default(), &[1, 2], &config(Mode::Hybrid, 8)).is_err());
}
