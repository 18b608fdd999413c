mod common;

use specdec::bench::{run_benchmark, BenchConfig, BenchDataset, BenchExample};
use specdec::hybrid_engine::{vanilla_greedy, Drafters, EngineConfig, Mode};
use specdec::owl_drafter::{DrafterShape, DrafterVariant, DrafterWeights, TreePolicy};

fn setup() -> (specdec::target_model::TargetModel, DrafterWeights, DrafterWeights) {
    let model = common::small_model(6);
    let shape = DrafterShape {
        vocab_size: model.config().vocab_size,
        model_dim: model.config().hidden_size,
        dim: 8,
        depth: 4,
    };
    let mut spec = DrafterWeights::seeded(DrafterVariant::Spec, shape, 1);
    spec.spec_embedding = Some(vec![0.1; model.config().hidden_size]);
    let nospec = DrafterWeights::seeded(DrafterVariant::NoSpec, shape, 2);
    (model, spec, nospec)
}

fn engine() -> EngineConfig {
    EngineConfig {
        tree: TreePolicy {
            top_k: 4,
            depth: 4,
            size: 16,
        },
        threshold_c: 3.0,
        ..EngineConfig::default()
    }
}

fn example(id: &str, prompt: Vec<u32>, max_new: usize) -> BenchExample {
    BenchExample {
        id: id.into(),
        prompt_tokens: prompt,
        max_new_tokens: max_new,
    }
}

#[test]
fn two_examples_two_modes() {
    let (model, spec, nospec) = setup();
    let data = BenchDataset {
        examples: vec![example("q", vec![3, 1, 4, 1, 5], 20), example("p", vec![2, 7, 1, 8], 15)],
    };
    let config = BenchConfig {
        modes: vec![Mode::Owl],
        engine: engine(),
    };
    let d = Drafters {
        spec: Some(&spec),
        nospec: Some(&nospec),
    };
    let r = run_benchmark(&data, &model, d, &config).unwrap();
    assert_eq!(r.examples.len(), 4);
    let ids: Vec<(&str, Mode)> = r.examples.iter().map(|e| (e.id.as_str(), e.mode)).collect();
    assert_eq!(ids, vec![("p", Mode::Vanilla), ("p", Mode::Owl), ("q", Mode::Vanilla), ("q", Mode::Owl)]);
    for e in &r.examples {
        let max_new = if e.id == "p" { 15 } else { 20 };
        assert_eq!(e.committed_tokens, max_new);
    }

    for s in &r.aggregate {
        let cells: Vec<_> = r.examples.iter().filter(|e| e.mode == s.mode).collect();
        let steps: usize = cells.iter().map(|e| e.total_steps).sum();
        assert_eq!(s.total_steps, steps);
        let weighted: f64 = cells
            .iter()
            .map(|e| e.mean_acceptance_length.unwrap() * e.total_steps as f64)
            .sum::<f64>()
            / steps as f64;
        assert!((s.mean_acceptance_length.unwrap() - weighted).abs() < 1e-12);
        let hist: usize = r.histogram[s.mode.name()].iter().map(|b| b.count).sum();
        assert_eq!(hist, steps);
    }
    assert_eq!(r.summary(Mode::Vanilla).unwrap().mean_acceptance_length, Some(1.0));
    assert_eq!(r.config.modes, vec![Mode::Vanilla, Mode::Owl]);
    assert_eq!(r.config.engine, config.engine);
    assert_eq!(r.fingerprint.model_sha256.len(), 64);
    assert!(r.fingerprint.drafter_spec_sha256.is_some());

    let again = run_benchmark(&data, &model, d, &config).unwrap();
    assert_eq!(
        serde_json::to_string(&r.without_timing()).unwrap(),
        serde_json::to_string(&again.without_timing()).unwrap()
    );
}

#[test]
fn repetitive_prompt_uses_the_linear_branch() {
    let (model, spec, nospec) = setup();
    let seed: Vec<u32> = (0..16).map(|i| (i * 5 % 31) as u32).collect();
    let mut prompt = seed.clone();
    prompt.extend(vanilla_greedy(&model, &seed, 48, None).unwrap());
    prompt.extend(&seed);
    let data = BenchDataset {
        examples: vec![example("rep", prompt, 48)],
    };
    let config = BenchConfig {
        modes: vec![Mode::Hybrid, Mode::Suffix],
        engine: engine(),
    };
    let d = Drafters {
        spec: Some(&spec),
        nospec: Some(&nospec),
    };
    let r = run_benchmark(&data, &model, d, &config).unwrap();
    let hybrid = r.summary(Mode::Hybrid).unwrap();
    assert!(hybrid.linear_fraction > 0.0);
    assert_eq!(r.summary(Mode::Vanilla).unwrap().linear_fraction, 0.0);
    assert_eq!(r.summary(Mode::Suffix).unwrap().linear_fraction, 1.0);
}

#[test]
fn dataset_parsing() {
    let ok = "{\"id\": \"a\", \"prompt\": \"hi\", \"max_new_tokens\": 3}\n\n\
              {\"id\": \"b\", \"prompt_tokens\": [1, 2], \"max_new_tokens\": 4}\n";
    let d = BenchDataset::parse_jsonl(ok.as_bytes()).unwrap();
    assert_eq!(d.examples[0].prompt_tokens, vec![104, 105]);
    assert_eq!(d.examples[1].max_new_tokens, 4);
    assert_eq!(BenchDataset::parse_jsonl(d.to_jsonl().as_bytes()).unwrap(), d);

    for bad in [
        "{\"id\": \"a\", \"prompt\": \"x\", \"max_new_tokens\": 1}\n{\"id\": \"a\", \"prompt\": \"y\", \"max_new_tokens\": 1}",
        "{\"id\": \"a\", \"prompt\": \"\", \"max_new_tokens\": 1}",
        "{\"id\": \"a\", \"prompt\": \"x\", \"prompt_tokens\": [1], \"max_new_tokens\": 1}",
        "{\"id\": \"a\", \"max_new_tokens\": 1}",
        "{\"id\": \"a\", \"prompt\": \"x\"}",
        "not json",
    ] {
        assert!(BenchDataset::parse_jsonl(bad.as_bytes()).is_err(), "{bad}");
    }

    let (model, _, _) = setup();
    let out_of_vocab = BenchDataset {
        examples: vec![example("z", vec![1, 40], 2)],
    };
    assert!(out_of_vocab.validate_for(&model).is_err());
}

#[test]
fn missing_drafter_is_reported() {
    let (model, _, nospec) = setup();
    let data = BenchDataset {
        examples: vec![example("a", vec![1, 2, 3], 5)],
    };
    let config = BenchConfig {
        modes: vec![Mode::Owl],
        engine: engine(),
    };
    let d = Drafters {
        spec: None,
        nospec: Some(&nospec),
    };
    let err = run_benchmark(&data, &model, d, &config).unwrap_err();
    assert!(err.to_string().contains("drafter"));
}
