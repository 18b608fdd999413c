//! Greedy verification against the target model, with `[SPEC]` tokens.
//!
//! The committed context lives in the KV cache with contiguous positions, so
//! cache index and position id coincide for every committed token. The
//! pending token `t_next` (the verifier's last prediction) is not yet in the
//! cache; it becomes the root of the next draft tree or the first token of
//! the next linear batch.
//!
//! Tree batches carry the tree nodes followed by one `[SPEC]` per node. A
//! node attends to the committed context and its root-to-node path; the
//! `[SPEC]` of a node attends to the same keys plus itself, at the node's
//! position + 1. No query ever attends to a `[SPEC]` other than itself, and
//! every `[SPEC]` entry is evicted before the call returns.

use crate::error::{Error, Result};
use crate::owl_drafter::DraftTree;
use crate::target_model::{AttentionMask, KvCache, TargetModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub t_next: u32,
    pub h_last: Vec<f32>,
    pub h_spec: Vec<f32>,
}

/// Forwards `prompt ++ [SPEC]` into an empty cache, then evicts the `[SPEC]`.
pub fn prefill(model: &TargetModel, cache: &mut KvCache, prompt: &[u32]) -> Result<PrefillOutput> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    if !cache.is_empty() {
        return Err(Error::InvalidConfig("prefill needs an empty cache".into()));
    }
    let spec = model.spec_token();
    if prompt.contains(&spec) {
        return Err(Error::ReservedToken(spec));
    }
    let mut tokens = prompt.to_vec();
    tokens.push(spec);
    let out = model.forward_causal(cache, &tokens)?;
    let last = prompt.len() - 1;
    cache.rollback(prompt.len())?;
    Ok(PrefillOutput {
        t_next: model.greedy_token(out.logits.row(last)),
        h_last: out.hidden.row(last).to_vec(),
        h_spec: out.hidden.row(last + 1).to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierBatch {
    pub tokens: Vec<u32>,
    pub positions: Vec<u32>,
    pub mask: AttentionMask,
    /// Committed context length (and position of the root).
    pub base: usize,
    /// Query index of each tree node.
    pub node_query: Vec<usize>,
    /// Tree node owning each `[SPEC]` query, in query order.
    pub spec_node: Vec<usize>,
}

impl VerifierBatch {
    pub fn query_count(&self) -> usize {
        self.tokens.len()
    }

    /// Query index of the `[SPEC]` attached to `node`, if any.
    pub fn spec_query(&self, node: usize) -> Option<usize> {
        if self.spec_node.is_empty() {
            None
        } else {
            Some(self.node_query.len() + node)
        }
    }
}

/// Lays out `tree` (and, when `spec_token` is set, one `[SPEC]` per node)
/// after `base` committed tokens.
pub fn prepare(tree: &DraftTree, base: usize, spec_token: Option<u32>) -> Result<VerifierBatch> {
    if tree.is_empty() {
        return Err(Error::EmptyInput("draft tree"));
    }
    let n = tree.len();
    let mut tokens: Vec<u32> = tree.nodes.iter().map(|node| node.token).collect();
    let mut positions: Vec<u32> = tree
        .nodes
        .iter()
        .map(|node| (base + node.depth) as u32)
        .collect();
    let mut rows: Vec<Vec<usize>> = (0..n)
        .map(|i| tree.path(i).into_iter().map(|j| base + j).collect())
        .collect();
    let mut spec_node = Vec::new();
    if let Some(spec) = spec_token {
        for i in 0..n {
            tokens.push(spec);
            positions.push(positions[i] + 1);
            let mut row = rows[i].clone();
            row.push(base + n + i);
            rows.push(row);
            spec_node.push(i);
        }
    }
    Ok(VerifierBatch {
        tokens,
        positions,
        mask: AttentionMask::Explicit { prefix: base, rows },
        base,
        node_query: (0..n).collect(),
        spec_node,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    /// Drafted tokens accepted in order (the pending root is not included).
    pub accepted: Vec<u32>,
    /// Bonus token: the verifier's prediction after the accepted path.
    pub t_next: u32,
    pub h_last: Vec<f32>,
    pub h_spec: Option<Vec<f32>>,
    /// Tree node indices of the accepted path, root first (tree verification
    /// only; for linear verification, indices into `[pending] ++ draft`).
    pub path: Vec<usize>,
    pub acceptance_length: usize,
    pub queries: usize,
}

/// Runs `batch` and greedily walks `tree`; leaves the cache holding the
/// committed context, the root and the accepted nodes.
pub fn tree_verify(
    model: &TargetModel,
    cache: &mut KvCache,
    tree: &DraftTree,
    batch: &VerifierBatch,
) -> Result<VerifyResult> {
    let n = tree.len();
    if batch.node_query.len() != n || !(batch.spec_node.is_empty() || batch.spec_node.len() == n) {
        return Err(Error::BatchMismatch(format!(
            "{} node queries and {} [SPEC] queries for a {n}-node tree",
            batch.node_query.len(),
            batch.spec_node.len()
        )));
    }
    if batch.tokens[..n]
        .iter()
        .zip(&tree.nodes)
        .any(|(&t, node)| t != node.token)
    {
        return Err(Error::BatchMismatch("batch tokens differ from tree tokens".into()));
    }
    if cache.len() != batch.base {
        return Err(Error::BatchMismatch(format!(
            "batch prepared after {} tokens, cache holds {}",
            batch.base,
            cache.len()
        )));
    }
    let out = model.forward(cache, &batch.tokens, &batch.positions, &batch.mask)?;

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        if let Some(p) = node.parent {
            children[p].push(i);
        }
    }
    let mut cur = 0;
    let mut path = vec![0];
    let t_next = loop {
        let g = model.greedy_token(out.logits.row(cur));
        match children[cur].iter().find(|&&c| tree.nodes[c].token == g) {
            Some(&c) => {
                path.push(c);
                cur = c;
            }
            None => break g,
        }
    };
    let h_spec = batch.spec_query(cur).map(|q| out.hidden.row(q).to_vec());
    let keep: Vec<usize> = path.iter().map(|&i| batch.base + i).collect();
    cache.compact(batch.base, &keep)?;
    Ok(VerifyResult {
        accepted: path[1..].iter().map(|&i| tree.nodes[i].token).collect(),
        t_next,
        h_last: out.hidden.row(cur).to_vec(),
        h_spec,
        acceptance_length: path.len(),
        path,
        queries: batch.query_count(),
    })
}

/// Forwards `[pending] ++ draft` causally and accepts the longest prefix of
/// `draft` that matches the greedy predictions.
pub fn non_tree_verify(
    model: &TargetModel,
    cache: &mut KvCache,
    pending: u32,
    draft: &[u32],
) -> Result<VerifyResult> {
    let base = cache.len();
    let mut tokens = Vec::with_capacity(draft.len() + 1);
    tokens.push(pending);
    tokens.extend_from_slice(draft);
    let out = model.forward_causal(cache, &tokens)?;
    let mut cur = 0;
    let t_next = loop {
        let g = model.greedy_token(out.logits.row(cur));
        if cur < draft.len() && draft[cur] == g {
            cur += 1;
        } else {
            break g;
        }
    };
    cache.rollback(base + cur + 1)?;
    Ok(VerifyResult {
        accepted: draft[..cur].to_vec(),
        t_next,
        h_last: out.hidden.row(cur).to_vec(),
        h_spec: None,
        path: (0..=cur).collect(),
        acceptance_length: cur + 1,
        queries: tokens.len(),
    })
}
