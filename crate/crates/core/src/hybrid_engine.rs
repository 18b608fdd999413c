//! Generation loop: vanilla greedy, tree drafting (with or without `[SPEC]`),
//! suffix-only linear drafting, and the hybrid router between the two.
//!
//! Output accounting: the first output token is the prefill prediction. Each
//! verification step then appends its accepted drafts plus the new bonus
//! token, i.e. `acceptance_length` tokens, so before truncation
//! `Σ acceptance_length = output.len() - 1`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::owl_drafter::{draft_tree, DrafterWeights, TreePolicy};
use crate::spec_verifier::{non_tree_verify, prefill, prepare, tree_verify, VerifyResult};
use crate::suffix_drafter::{SuffixCache, SuffixParams};
use crate::target_model::TargetModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Owl,
    OwlNospec,
    Suffix,
    Hybrid,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Vanilla,
        Mode::Owl,
        Mode::OwlNospec,
        Mode::Suffix,
        Mode::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Owl => "owl",
            Mode::OwlNospec => "owl_nospec",
            Mode::Suffix => "suffix",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Linear branch is taken when the suffix score exceeds this.
    pub threshold_c: f64,
    /// Nominal tree budget; halved when `[SPEC]` tokens are appended.
    pub tree: TreePolicy,
    pub spec_enabled: bool,
    pub max_new_tokens: usize,
    pub eos: Option<u32>,
    pub suffix: SuffixParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let tree = TreePolicy::default();
        Self {
            mode: Mode::Hybrid,
            threshold_c: (tree.depth + 1) as f64,
            tree,
            spec_enabled: true,
            max_new_tokens: 128,
            eos: None,
            suffix: SuffixParams::default(),
        }
    }
}

impl EngineConfig {
    /// Whether tree steps in this mode append `[SPEC]` tokens.
    pub fn appends_spec(&self) -> bool {
        self.spec_enabled && matches!(self.mode, Mode::Owl | Mode::Hybrid)
    }

    /// Tree policy actually used per step.
    pub fn effective_tree(&self) -> TreePolicy {
        let mut t = self.tree;
        if self.appends_spec() {
            t.size = (t.size / 2).max(1);
        }
        t
    }
}

/// Drafter weights available to the engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct Drafters<'a> {
    pub spec: Option<&'a DrafterWeights>,
    pub nospec: Option<&'a DrafterWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Tree,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub branch: Branch,
    pub drafted: usize,
    pub accepted: usize,
    pub acceptance_length: usize,
    pub verifier_queries: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepMetrics>,
}

fn require<'a>(d: Option<&'a DrafterWeights>, mode: Mode, variant: &'static str) -> Result<&'a DrafterWeights> {
    d.ok_or(Error::MissingDrafter {
        mode: mode.name(),
        variant,
    })
}

pub fn generate(
    model: &TargetModel,
    drafters: Drafters<'_>,
    prompt: &[u32],
    config: &EngineConfig,
) -> Result<Generation> {
    let mode = config.mode;
    match mode {
        Mode::Owl => {
            require(drafters.spec, mode, "spec")?;
        }
        Mode::OwlNospec => {
            require(drafters.nospec, mode, "nospec")?;
        }
        Mode::Hybrid => {
            require(drafters.spec, mode, "spec")?;
            require(drafters.nospec, mode, "nospec")?;
        }
        Mode::Vanilla | Mode::Suffix => {}
    }
    let spec_token = config.appends_spec().then(|| model.spec_token());
    let policy = config.effective_tree();

    let mut cache = model.new_cache();
    let pre = prefill(model, &mut cache, prompt)?;
    let mut pending = pre.t_next;
    let mut h_last = pre.h_last;
    let mut h_spec = spec_token.map(|_| pre.h_spec);
    let mut suffix = matches!(mode, Mode::Suffix | Mode::Hybrid)
        .then(|| SuffixCache::from_prompt(prompt, config.suffix));
    let mut last_was_linear = false;

    let mut tokens = vec![pending];
    let mut steps = Vec::new();
    let hit_eos = |t: &[u32]| config.eos.is_some_and(|e| t.contains(&e));

    while tokens.len() < config.max_new_tokens && !hit_eos(&tokens) {
        let start = Instant::now();
        let linear = match (&suffix, mode) {
            (Some(s), Mode::Suffix) => Some(s.suffix_linear(cache.tokens(), pending)),
            (Some(s), Mode::Hybrid) => {
                let d = s.suffix_linear(cache.tokens(), pending);
                (d.score > config.threshold_c).then_some(d)
            }
            _ => None,
        };
        let (branch, drafted, result): (Branch, usize, VerifyResult) = if let Some(d) = linear {
            let r = non_tree_verify(model, &mut cache, pending, &d.tokens)?;
            (Branch::Linear, d.tokens.len(), r)
        } else if mode == Mode::Vanilla {
            (Branch::Linear, 0, non_tree_verify(model, &mut cache, pending, &[])?)
        } else {
            let use_spec_drafter = match mode {
                Mode::Owl => true,
                Mode::OwlNospec => false,
                _ => !last_was_linear && h_spec.is_some(),
            };
            let drafter = if use_spec_drafter {
                require(drafters.spec, mode, "spec")?
            } else {
                require(drafters.nospec, mode, "nospec")?
            };
            let tree = draft_tree(drafter, pending, &h_last, h_spec.as_deref(), &policy)?;
            let batch = prepare(&tree, cache.len(), spec_token)?;
            let r = tree_verify(model, &mut cache, &tree, &batch)?;
            (Branch::Tree, tree.len() - 1, r)
        };
        last_was_linear = branch == Branch::Linear;
        if let Some(s) = suffix.as_mut() {
            s.extend(&[pending]);
            s.extend(&result.accepted);
        }
        tokens.extend_from_slice(&result.accepted);
        tokens.push(result.t_next);
        pending = result.t_next;
        h_last = result.h_last;
        h_spec = result.h_spec;
        steps.push(StepMetrics {
            branch,
            drafted,
            accepted: result.accepted.len(),
            acceptance_length: result.acceptance_length,
            verifier_queries: result.queries,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(pos) = config.eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
        tokens.truncate(pos + 1);
    }
    tokens.truncate(config.max_new_tokens);
    Ok(Generation { tokens, steps })
}

/// Plain token-by-token greedy decoding; the reference every mode must match.
pub fn vanilla_greedy(
    model: &TargetModel,
    prompt: &[u32],
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let spec = model.spec_token();
    if prompt.contains(&spec) {
        return Err(Error::ReservedToken(spec));
    }
    let mut cache = model.new_cache();
    let mut out = model.forward_causal(&mut cache, prompt)?;
    let mut tokens = Vec::with_capacity(max_new_tokens);
    while tokens.len() < max_new_tokens {
        let t = model.greedy_token(out.logits.row(out.logits.rows() - 1));
        tokens.push(t);
        if Some(t) == eos || tokens.len() == max_new_tokens {
            break;
        }
        out = model.forward_causal(&mut cache, &[t])?;
    }
    Ok(tokens)
}

pub fn mean_acceptance_length(steps: &[StepMetrics]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("step metrics"));
    }
    Ok(steps.iter().map(|s| s.acceptance_length as f64).sum::<f64>() / steps.len() as f64)
}
