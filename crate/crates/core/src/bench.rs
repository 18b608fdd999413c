//! Benchmark datasets, runs and reports.
//!
//! Text prompts are byte-tokenized: token id = byte value, so any UTF-8
//! string is a valid prompt for a 257-token vocabulary.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hybrid_engine::{generate, vanilla_greedy, Branch, Drafters, EngineConfig, Mode};
use crate::owl_drafter::DrafterWeights;
use crate::target_model::TargetModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchExample {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct RawExample {
    id: String,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    prompt_tokens: Option<Vec<u32>>,
    max_new_tokens: usize,
}

pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchDataset {
    pub examples: Vec<BenchExample>,
}

impl BenchDataset {
    pub fn parse_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut examples = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawExample = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            let prompt_tokens = match (raw.prompt, raw.prompt_tokens) {
                (Some(text), None) => byte_tokenize(&text),
                (None, Some(tokens)) => tokens,
                _ => {
                    return Err(Error::Dataset(format!(
                        "line {}: exactly one of `prompt` and `prompt_tokens` is required",
                        n + 1
                    )))
                }
            };
            if prompt_tokens.is_empty() {
                return Err(Error::Dataset(format!("example `{}` has an empty prompt", raw.id)));
            }
            if !seen.insert(raw.id.clone()) {
                return Err(Error::Dataset(format!("duplicate example id `{}`", raw.id)));
            }
            examples.push(BenchExample {
                id: raw.id,
                prompt_tokens,
                max_new_tokens: raw.max_new_tokens,
            });
        }
        Ok(Self { examples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_jsonl(&self) -> String {
        self.examples
            .iter()
            .map(|e| {
                serde_json::json!({
                    "id": e.id,
                    "prompt_tokens": e.prompt_tokens,
                    "max_new_tokens": e.max_new_tokens,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }

    /// Checks every prompt token against the model's real vocabulary.
    pub fn validate_for(&self, model: &TargetModel) -> Result<()> {
        let limit = model.spec_token();
        for e in &self.examples {
            if let Some(&t) = e.prompt_tokens.iter().find(|&&t| t >= limit) {
                return Err(Error::Dataset(format!(
                    "example `{}` uses token {t}, outside the real vocabulary 0..{limit}",
                    e.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub mode: Mode,
    /// `None` when the example finished without a verification step.
    pub mean_acceptance_length: Option<f64>,
    pub total_steps: usize,
    pub committed_tokens: usize,
    pub linear_fraction: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    /// Step-weighted mean over examples.
    pub mean_acceptance_length: Option<f64>,
    pub total_steps: usize,
    pub committed_tokens: usize,
    pub linear_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub bucket_min: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub engine: String,
    pub model_sha256: String,
    pub drafter_spec_sha256: Option<String>,
    pub drafter_nospec_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BenchConfig,
    pub fingerprint: Fingerprint,
    pub examples: Vec<ExampleResult>,
    pub aggregate: Vec<ModeSummary>,
    /// Per-mode acceptance-length histogram with unit-width buckets.
    pub histogram: BTreeMap<String, Vec<HistogramBucket>>,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.examples {
            e.tokens_per_sec = 0.0;
        }
        r
    }

    pub fn summary(&self, mode: Mode) -> Option<&ModeSummary> {
        self.aggregate.iter().find(|s| s.mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    /// `mode` and `max_new_tokens` are overridden per cell.
    pub engine: EngineConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Returns `model` with the `[SPEC]` embedding carried by the spec drafter,
/// if it has one.
pub fn install_spec_embedding(model: &TargetModel, drafters: Drafters<'_>) -> Result<TargetModel> {
    match drafters.spec.and_then(|d| d.spec_embedding.as_ref()) {
        Some(e) => model.with_spec_embedding(e),
        None => Ok(model.clone()),
    }
}

fn histogram(lengths: impl Iterator<Item = usize>) -> Vec<HistogramBucket> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in lengths {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(bucket_min, count)| HistogramBucket { bucket_min, count })
        .collect()
}

/// Runs every example in every mode of `config`; vanilla is always added.
/// Any output that differs from plain greedy decoding aborts the run.
pub fn run_benchmark(
    dataset: &BenchDataset,
    model: &TargetModel,
    drafters: Drafters<'_>,
    config: &BenchConfig,
) -> Result<RunReport> {
    dataset.validate_for(model)?;
    let model = install_spec_embedding(model, drafters)?;
    let mut modes = vec![Mode::Vanilla];
    for &m in &config.modes {
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let mut examples: Vec<&BenchExample> = dataset.examples.iter().collect();
    examples.sort_by(|a, b| a.id.cmp(&b.id));

    let mut results = Vec::new();
    let mut lengths: BTreeMap<Mode, Vec<usize>> = BTreeMap::new();
    let mut totals: BTreeMap<Mode, (f64, usize, usize, usize)> = BTreeMap::new();
    for ex in examples {
        let reference = vanilla_greedy(&model, &ex.prompt_tokens, ex.max_new_tokens, config.engine.eos)?;
        for &mode in &modes {
            let cfg = EngineConfig {
                mode,
                max_new_tokens: ex.max_new_tokens,
                ..config.engine
            };
            let start = Instant::now();
            let g = generate(&model, drafters, &ex.prompt_tokens, &cfg)?;
            let secs = start.elapsed().as_secs_f64();
            if g.tokens != reference {
                let index = g
                    .tokens
                    .iter()
                    .zip(&reference)
                    .position(|(a, b)| a != b)
                    .unwrap_or(g.tokens.len().min(reference.len()));
                return Err(Error::OracleMismatch {
                    id: ex.id.clone(),
                    mode: mode.name().to_string(),
                    index,
                });
            }
            let steps = g.steps.len();
            let al_sum: usize = g.steps.iter().map(|s| s.acceptance_length).sum();
            // vanilla steps verify an empty draft and are not counted as linear
            let linear = if mode == Mode::Vanilla {
                0
            } else {
                g.steps.iter().filter(|s| s.branch == Branch::Linear).count()
            };
            lengths
                .entry(mode)
                .or_default()
                .extend(g.steps.iter().map(|s| s.acceptance_length));
            let t = totals.entry(mode).or_default();
            t.0 += al_sum as f64;
            t.1 += steps;
            t.2 += g.tokens.len();
            t.3 += linear;
            results.push(ExampleResult {
                id: ex.id.clone(),
                mode,
                mean_acceptance_length: (steps > 0).then(|| al_sum as f64 / steps as f64),
                total_steps: steps,
                committed_tokens: g.tokens.len(),
                linear_fraction: if steps > 0 { linear as f64 / steps as f64 } else { 0.0 },
                tokens_per_sec: if secs > 0.0 { g.tokens.len() as f64 / secs } else { 0.0 },
            });
        }
    }
    let aggregate = modes
        .iter()
        .map(|&mode| {
            let (al, steps, tokens, linear) = totals.get(&mode).copied().unwrap_or_default();
            ModeSummary {
                mode,
                mean_acceptance_length: (steps > 0).then(|| al / steps as f64),
                total_steps: steps,
                committed_tokens: tokens,
                linear_fraction: if steps > 0 { linear as f64 / steps as f64 } else { 0.0 },
            }
        })
        .collect();
    let histogram = modes
        .iter()
        .map(|&m| {
            (
                m.name().to_string(),
                histogram(lengths.get(&m).into_iter().flatten().copied()),
            )
        })
        .collect();
    let digest = |d: Option<&DrafterWeights>| d.map(|w| sha256_hex(&w.to_weight_file().to_bytes()));
    Ok(RunReport {
        config: BenchConfig {
            modes,
            engine: config.engine,
        },
        fingerprint: Fingerprint {
            engine: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            model_sha256: sha256_hex(&model.to_weight_file().to_bytes()),
            drafter_spec_sha256: digest(drafters.spec),
            drafter_nospec_sha256: digest(drafters.nospec),
        },
        examples: results,
        aggregate,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_text_and_token_prompts() {
        let src = r#"{"id": "a", "prompt": "hi", "max_new_tokens": 4}
{"id": "b", "prompt_tokens": [1, 2], "max_new_tokens": 3}
"#;
        let d = BenchDataset::parse_jsonl(src.as_bytes()).unwrap();
        assert_eq!(d.examples[0].prompt_tokens, vec![104, 105]);
        assert_eq!(d.examples[1].prompt_tokens, vec![1, 2]);
        let round = BenchDataset::parse_jsonl(d.to_jsonl().as_bytes()).unwrap();
        assert_eq!(round, d);
    }

    #[test]
    fn rejects_bad_datasets() {
        for src in [
            r#"{"id": "a", "prompt": "", "max_new_tokens": 4}"#,
            "{\"id\": \"a\", \"prompt\": \"x\", \"max_new_tokens\": 4}\n{\"id\": \"a\", \"prompt\": \"y\", \"max_new_tokens\": 4}",
            r#"{"id": "a", "max_new_tokens": 4}"#,
            r#"{"id": "a", "prompt": "x", "prompt_tokens": [1], "max_new_tokens": 4}"#,
            "not json",
        ] {
            assert!(matches!(BenchDataset::parse_jsonl(src.as_bytes()), Err(Error::Dataset(_))), "{src}");
        }
    }

    #[test]
    fn histogram_buckets() {
        let h = histogram([1, 3, 1, 2, 1].into_iter());
        assert_eq!(
            h,
            vec![
                HistogramBucket { bucket_min: 1, count: 3 },
                HistogramBucket { bucket_min: 2, count: 1 },
                HistogramBucket { bucket_min: 3, count: 1 },
            ]
        );
    }
}
