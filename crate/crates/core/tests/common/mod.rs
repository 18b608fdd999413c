//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use specdec::owl_drafter::{DraftNode, DraftTree, DrafterWeights};
use specdec::suffix_drafter::SuffixParams;
use specdec::target_model::{TargetConfig, TargetModel};

pub fn tiny_config() -> TargetConfig {
    TargetConfig {
        vocab_size: 11,
        hidden_size: 8,
        num_layers: 2,
        num_heads: 2,
        max_positions: 64,
    }
}

pub fn small_model(seed: u64) -> TargetModel {
    TargetModel::seeded(
        TargetConfig {
            vocab_size: 33,
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            max_positions: 256,
        },
        seed,
    )
    .unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Random well-formed tree: each node picks an earlier parent and a token
/// not yet used among that parent's children.
pub fn random_tree(rng: &mut ChaCha8Rng, nodes: usize, vocab: u32) -> DraftTree {
    let mut tree = DraftTree::root_only(rng.gen_range(0..vocab));
    while tree.len() < nodes {
        let parent = rng.gen_range(0..tree.len());
        let token = rng.gen_range(0..vocab);
        if tree.children(parent).any(|c| tree.nodes[c].token == token) {
            continue;
        }
        let depth = tree.nodes[parent].depth + 1;
        tree.nodes.push(DraftNode {
            token,
            parent: Some(parent),
            depth,
            score: 0.0,
            snapshot: None,
        });
    }
    tree
}

/// `(token, count)` continuations of `pattern` in `seq`, ascending by token,
/// by scanning every start position.
pub fn brute_continuations(seq: &[u32], pattern: &[u32]) -> Vec<(u32, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    let m = pattern.len();
    if seq.len() > m {
        for i in 0..seq.len() - m {
            if &seq[i..i + m] == pattern {
                *counts.entry(seq[i + m]).or_insert(0usize) += 1;
            }
        }
    }
    counts.into_iter().collect()
}

fn brute_longest(seq: &[u32], query: &[u32], depth: usize) -> usize {
    (1..=query.len().min(depth))
        .filter(|&m| !brute_continuations(seq, &query[query.len() - m..]).is_empty())
        .max()
        .unwrap_or(0)
}

/// Quadratic reference for the linear suffix draft: `(tokens, score)`.
pub fn brute_suffix_draft(
    prompt: &[u32],
    generation: &[u32],
    context: &[u32],
    t_next: u32,
    params: &SuffixParams,
) -> (Vec<u32>, f64) {
    let depth = params.max_suffix_depth;
    if depth == 0 {
        return (Vec::new(), 0.0);
    }
    let mut query = context.to_vec();
    query.push(t_next);
    let m_p = brute_longest(prompt, &query, depth);
    let m_g = brute_longest(generation, &query, depth);
    let (seq, m) = if m_g >= m_p { (generation, m_g) } else { (prompt, m_p) };
    if m == 0 {
        return (Vec::new(), 0.0);
    }
    let limit = (params.max_spec_factor * m as f64).floor() as usize;
    let mut pattern = query[query.len() - m..].to_vec();
    let mut out = Vec::new();
    let mut score = 0.0;
    while out.len() < limit {
        let cont = brute_continuations(seq, &pattern);
        if cont.is_empty() {
            break;
        }
        let total: usize = cont.iter().map(|c| c.1).sum();
        let best = cont.iter().map(|c| c.1).max().unwrap();
        let &(tok, count) = cont.iter().find(|c| c.1 == best).unwrap();
        score += count as f64 / total as f64;
        out.push(tok);
        pattern.push(tok);
        if pattern.len() > depth {
            pattern.remove(0);
        }
    }
    (out, score)
}

// Straight-line drafter loss.

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ln_gelu(x: &[f64], gain: &[f32], bias: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| gelu((v - mean) / s * gain[i] as f64 + bias[i] as f64))
        .collect()
}

fn mv(m: &specdec::numerics::Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
        .collect()
}

fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean over anchors `k = 1..=L-2` of the mean drafter cross-entropy over
/// the `min(n, L-1-k)` unrolled steps, plus, when `spec_hidden` is given,
/// the target head's cross-entropy of `spec_hidden[k-1]` against `t_k`.
pub fn straight_line_loss(
    tokens: &[u32],
    hidden: &[Vec<f32>],
    spec_hidden: Option<&[Vec<f32>]>,
    lm_head: &specdec::numerics::Matrix,
    w: &DrafterWeights,
) -> f64 {
    let l = tokens.len();
    let d = w.shape.dim;
    let n = w.shape.depth;
    let a0 = 2f64.powf(-1.0 / (2.0 * n as f64));
    let alpha = 2.0 * a0 / ((1.0 - a0 * a0) * d as f64);
    let mut total = 0.0;
    let mut anchors = 0;
    for k in 1..=l - 2 {
        anchors += 1;
        let nk = n.min(l - 1 - k);
        let h_last: Vec<f64> = hidden[k - 1].iter().map(|&v| v as f64).collect();
        let hs: Option<Vec<f64>> = spec_hidden.map(|s| s[k - 1].iter().map(|&v| v as f64).collect());
        let mut z = vec![0.0; d];
        let mut out = vec![0.0; d];
        let mut ce = 0.0;
        for j in 1..=nk {
            let tok = tokens[k + j - 1] as usize;
            let mut pre = Vec::new();
            for g in 0..4 {
                let mut p: Vec<f64> = (0..d)
                    .map(|i| w.bias[g][i] as f64 + alpha * w.embed.row(tok)[i] as f64)
                    .collect();
                let extra = if j == 1 {
                    let mut e = mv(&w.w_in[g], &h_last);
                    if let Some(hs) = &hs {
                        for (a, b) in e.iter_mut().zip(mv(&w.u_spec[g], hs)) {
                            *a += b;
                        }
                    }
                    e
                } else {
                    mv(&w.r_rec[g], &out)
                };
                for i in 0..d {
                    p[i] += extra[i];
                }
                pre.push(p);
            }
            let f: Vec<f64> = pre[0].iter().map(|&v| sig(v)).collect();
            let ig: Vec<f64> = pre[1].iter().map(|&v| sig(v)).collect();
            let o: Vec<f64> = pre[2].iter().map(|&v| sig(v)).collect();
            let c = ln_gelu(&pre[3], &w.norm_c_gain, &w.norm_c_bias);
            z = (0..d).map(|i| z[i] * f[i] + c[i] * ig[i]).collect();
            let fz = ln_gelu(&z, &w.norm_z_gain, &w.norm_z_bias);
            out = (0..d).map(|i| fz[i] * o[i]).collect();
            ce += nll(&mv(&w.head, &out), tokens[k + j] as usize);
        }
        total += ce / nk as f64;
        if let Some(hs) = &hs {
            total += nll(&mv(lm_head, hs), tokens[k] as usize);
        }
    }
    total / anchors as f64
}
