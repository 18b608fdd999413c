//! The length-generalized recurrent drafter.
//!
//! The drafter never looks at the context directly. A drafting round starts
//! from three inputs only: the next token already fixed by the verifier, the
//! verifier's hidden state at the last committed token, and (for the
//! `[SPEC]`-trained variant) the hidden state the verifier produced for the
//! `[SPEC]` token following that position. Everything after that is a gated
//! recurrence:
//!
//! ```text
//! e    = E[token]
//! s^m  = A^m(input) + b^m + α·e                 m ∈ {f, i, o, c}
//!        first step: A^m = W^m·h_last + U^m·h_spec
//!        later:      A^m = R^m·hidden_prev
//! g^m  = σ(s^m)                                 m ∈ {f, i, o}
//! c    = f_c(s^c) ⊙ g^i
//! z'   = z ⊙ g^f + c                            z starts at 0 each round
//! out  = f_z(z') ⊙ g^o
//! y    = head · out
//! ```
//!
//! where `f_*` is GeLU after an affine layer norm and
//! `α = 2α₀ / ((1 - α₀²)·d)`, `α₀ = 2^(-1/(2n))` for tree depth `n`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm_stats, log_softmax, sigmoid, top_k_indices, Matrix};
use crate::weight_file::{TensorRecord, WeightFile, FORMAT_VERSION};

pub const DRAFTER_MAGIC: &[u8; 4] = b"SPDR";

/// Gate order used everywhere: forget, input, output, cell.
pub const GATE_NAMES: [&str; 4] = ["f", "i", "o", "c"];
pub const FORGET: usize = 0;
pub const INPUT: usize = 1;
pub const OUTPUT: usize = 2;
pub const CELL: usize = 3;

/// `(α₀, α)` for maximum tree depth `depth` and drafter width `dim`.
pub fn compute_alpha(depth: usize, dim: usize) -> (f64, f64) {
    assert!(depth >= 1 && dim >= 1, "depth and width must be positive");
    let alpha0 = 2f64.powf(-1.0 / (2.0 * depth as f64));
    (alpha0, 2.0 * alpha0 / ((1.0 - alpha0 * alpha0) * dim as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrafterVariant {
    /// Trained with `[SPEC]` conditioning on the first step.
    Spec,
    /// Trained without `[SPEC]`; `U^m` stays zero.
    NoSpec,
}

impl DrafterVariant {
    fn flag(self) -> u32 {
        match self {
            DrafterVariant::Spec => 1,
            DrafterVariant::NoSpec => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DrafterShape {
    pub vocab_size: usize,
    /// Width of the verifier hidden state fed in on the first step.
    pub model_dim: usize,
    pub dim: usize,
    /// Maximum tree depth the drafter is scaled for.
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrafterWeights {
    pub variant: DrafterVariant,
    pub shape: DrafterShape,
    pub embed: Matrix,
    pub w_in: [Matrix; 4],
    pub u_spec: [Matrix; 4],
    pub r_rec: [Matrix; 4],
    pub bias: [Vec<f32>; 4],
    pub norm_c_gain: Vec<f32>,
    pub norm_c_bias: Vec<f32>,
    pub norm_z_gain: Vec<f32>,
    pub norm_z_bias: Vec<f32>,
    pub head: Matrix,
    /// Trained `[SPEC]` embedding row for the verifier (spec variant only).
    pub spec_embedding: Option<Vec<f32>>,
}

/// Canonical tensor order and shapes for a drafter of `shape`.
pub fn tensor_shapes(shape: &DrafterShape) -> Vec<(String, Vec<usize>)> {
    let DrafterShape {
        vocab_size: v,
        model_dim: d0,
        dim: d,
        ..
    } = *shape;
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for g in GATE_NAMES {
        out.push((format!("w_in.{g}"), vec![d, d0]));
    }
    for g in GATE_NAMES {
        out.push((format!("u_spec.{g}"), vec![d, d0]));
    }
    for g in GATE_NAMES {
        out.push((format!("r_rec.{g}"), vec![d, d]));
    }
    for g in GATE_NAMES {
        out.push((format!("bias.{g}"), vec![d]));
    }
    for n in ["norm_c.gain", "norm_c.bias", "norm_z.gain", "norm_z.bias"] {
        out.push((n.to_string(), vec![d]));
    }
    out.push(("head".to_string(), vec![v, d]));
    out
}

impl DrafterWeights {
    pub fn zeros(variant: DrafterVariant, shape: DrafterShape) -> Self {
        let DrafterShape {
            vocab_size: v,
            model_dim: d0,
            dim: d,
            ..
        } = shape;
        let mats = |r, c| std::array::from_fn(|_| Matrix::zeros(r, c));
        Self {
            variant,
            shape,
            embed: Matrix::zeros(v, d),
            w_in: mats(d, d0),
            u_spec: mats(d, d0),
            r_rec: mats(d, d),
            bias: std::array::from_fn(|_| vec![0.0; d]),
            norm_c_gain: vec![0.0; d],
            norm_c_bias: vec![0.0; d],
            norm_z_gain: vec![0.0; d],
            norm_z_bias: vec![0.0; d],
            head: Matrix::zeros(v, d),
            spec_embedding: None,
        }
    }

    /// Seeded initialization: uniform `±sqrt(3/fan_in)` projections, zero
    /// biases, unit norm gains. `U^m` stays zero for the no-`[SPEC]` variant.
    pub fn seeded(variant: DrafterVariant, shape: DrafterShape, seed: u64) -> Self {
        let mut w = Self::zeros(variant, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut [f32], fan_in: usize| {
            let s = (3.0 / fan_in as f64).sqrt();
            for v in m {
                let u = (rng.next_u32() >> 8) as f64 / (1u32 << 24) as f64;
                *v = (s * (2.0 * u - 1.0)) as f32;
            }
        };
        let (d0, d) = (shape.model_dim, shape.dim);
        fill(w.embed.data_mut(), d);
        for g in 0..4 {
            fill(w.w_in[g].data_mut(), d0);
            if variant == DrafterVariant::Spec {
                fill(w.u_spec[g].data_mut(), d0);
            }
            fill(w.r_rec[g].data_mut(), d);
        }
        fill(w.head.data_mut(), d);
        w.norm_c_gain.fill(1.0);
        w.norm_z_gain.fill(1.0);
        w
    }

    pub fn alpha(&self) -> f64 {
        compute_alpha(self.shape.depth, self.shape.dim).1
    }

    /// Sets the depth the drafter is scaled for; `α` follows automatically.
    pub fn set_depth(&mut self, depth: usize) {
        self.shape.depth = depth.max(1);
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embed.data()];
        out.extend(self.w_in.iter().map(Matrix::data));
        out.extend(self.u_spec.iter().map(Matrix::data));
        out.extend(self.r_rec.iter().map(Matrix::data));
        out.extend(self.bias.iter().map(Vec::as_slice));
        out.extend([
            self.norm_c_gain.as_slice(),
            &self.norm_c_bias,
            &self.norm_z_gain,
            &self.norm_z_bias,
        ]);
        out.push(self.head.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embed.data_mut()];
        out.extend(self.w_in.iter_mut().map(Matrix::data_mut));
        out.extend(self.u_spec.iter_mut().map(Matrix::data_mut));
        out.extend(self.r_rec.iter_mut().map(Matrix::data_mut));
        out.extend(self.bias.iter_mut().map(Vec::as_mut_slice));
        out.extend([
            self.norm_c_gain.as_mut_slice(),
            self.norm_c_bias.as_mut_slice(),
            self.norm_z_gain.as_mut_slice(),
            self.norm_z_bias.as_mut_slice(),
        ]);
        out.push(self.head.data_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical order, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter().map(|&v| v as f64))
            .collect()
    }

    /// Overwrites parameters from a flat canonical-order vector.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            for (dst, &src) in t.iter_mut().zip(&flat[offset..offset + len]) {
                *dst = src as f32;
            }
            offset += len;
        }
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let s = &self.shape;
        let mut tensors: Vec<TensorRecord> = tensor_shapes(s)
            .into_iter()
            .zip(self.tensors())
            .map(|((name, dims), data)| {
                TensorRecord::new(name, dims.iter().map(|&x| x as u32).collect(), data.to_vec())
            })
            .collect();
        if let Some(e) = &self.spec_embedding {
            tensors.push(TensorRecord::new("spec_embedding", vec![e.len() as u32], e.clone()));
        }
        WeightFile {
            magic: *DRAFTER_MAGIC,
            version: FORMAT_VERSION,
            header: [
                s.vocab_size as u32,
                s.model_dim as u32,
                s.dim as u32,
                s.depth as u32,
                self.variant.flag(),
            ],
            tensors,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if &file.magic != DRAFTER_MAGIC {
            return Err(Error::MalformedHeader("not a drafter weight file".into()));
        }
        let [v, d0, d, n, flag] = file.header;
        let variant = match flag {
            1 => DrafterVariant::Spec,
            0 => DrafterVariant::NoSpec,
            other => {
                return Err(Error::MalformedHeader(format!("unknown variant flag {other}")))
            }
        };
        if v < 2 || d0 == 0 || d == 0 || n == 0 {
            return Err(Error::MalformedHeader("zero drafter dimension".into()));
        }
        let shape = DrafterShape {
            vocab_size: v as usize,
            model_dim: d0 as usize,
            dim: d as usize,
            depth: n as usize,
        };
        let mut w = Self::zeros(variant, shape);
        let shapes = tensor_shapes(&shape);
        for ((name, dims), dst) in shapes.iter().zip(w.tensors_mut()) {
            dst.copy_from_slice(file.expect(name, dims)?);
        }
        if file.tensor("spec_embedding").is_some() {
            w.spec_embedding = Some(file.expect("spec_embedding", &[shape.model_dim])?.to_vec());
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path, DRAFTER_MAGIC)?)
    }
}

/// Recurrent cell state `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrafterState {
    pub z: Vec<f32>,
}

impl DrafterState {
    pub fn zeros(dim: usize) -> Self {
        Self { z: vec![0.0; dim] }
    }
}

/// What a cell step is conditioned on besides its token.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// First step of a round.
    Anchor {
        h_last: &'a [f32],
        h_spec: Option<&'a [f32]>,
    },
    /// Later steps: the previous step's output.
    Recurrent { prev_hidden: &'a [f32] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub state: DrafterState,
    pub hidden: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Intermediate values of the gated update, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct GateTrace {
    pub gates: [Vec<f64>; 3],
    pub norm_c: Vec<f64>,
    pub inv_std_c: f64,
    pub act_c_in: Vec<f64>,
    pub act_c: Vec<f64>,
    pub z: Vec<f64>,
    pub norm_z: Vec<f64>,
    pub inv_std_z: f64,
    pub act_z_in: Vec<f64>,
    pub act_z: Vec<f64>,
    pub hidden: Vec<f64>,
}

pub(crate) struct NormParams<'a> {
    pub c_gain: &'a [f64],
    pub c_bias: &'a [f64],
    pub z_gain: &'a [f64],
    pub z_bias: &'a [f64],
}

/// Gate nonlinearities, cell update and output given pre-activations `pre`.
pub(crate) fn gate_core(pre: &[Vec<f64>; 4], z_prev: &[f64], norms: &NormParams<'_>) -> GateTrace {
    let gates = [
        pre[FORGET].iter().map(|&v| sigmoid(v)).collect::<Vec<_>>(),
        pre[INPUT].iter().map(|&v| sigmoid(v)).collect(),
        pre[OUTPUT].iter().map(|&v| sigmoid(v)).collect(),
    ];
    let (norm_c, inv_std_c) = layer_norm_stats(&pre[CELL]);
    let act_c_in: Vec<f64> = norm_c
        .iter()
        .zip(norms.c_gain.iter().zip(norms.c_bias))
        .map(|(n, (g, b))| n * g + b)
        .collect();
    let act_c: Vec<f64> = act_c_in.iter().map(|&v| gelu(v)).collect();
    let z: Vec<f64> = (0..z_prev.len())
        .map(|k| z_prev[k] * gates[0][k] + act_c[k] * gates[1][k])
        .collect();
    let (norm_z, inv_std_z) = layer_norm_stats(&z);
    let act_z_in: Vec<f64> = norm_z
        .iter()
        .zip(norms.z_gain.iter().zip(norms.z_bias))
        .map(|(n, (g, b))| n * g + b)
        .collect();
    let act_z: Vec<f64> = act_z_in.iter().map(|&v| gelu(v)).collect();
    let hidden = act_z.iter().zip(&gates[2]).map(|(a, g)| a * g).collect();
    GateTrace {
        gates,
        norm_c,
        inv_std_c,
        act_c_in,
        act_c,
        z,
        norm_z,
        inv_std_z,
        act_z_in,
        act_z,
        hidden,
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// One recurrent drafting step.
///
/// `h_spec` is consulted only by the `[SPEC]` variant.
pub fn cell_step(
    weights: &DrafterWeights,
    state: &DrafterState,
    token: u32,
    cond: Conditioning<'_>,
) -> Result<CellOutput> {
    let s = &weights.shape;
    if token as usize >= s.vocab_size {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: s.vocab_size,
        });
    }
    check_len("drafter state", s.dim, state.z.len())?;
    let alpha = weights.alpha();
    let e = weights.embed.row(token as usize);
    let mut pre: [Vec<f64>; 4] = std::array::from_fn(|g| {
        weights.bias[g]
            .iter()
            .zip(e)
            .map(|(&b, &ev)| b as f64 + alpha * ev as f64)
            .collect()
    });
    let mut add = |g: usize, m: &Matrix, x: &[f32]| {
        for (p, v) in pre[g].iter_mut().zip(m.matvec_f64(x)) {
            *p += v;
        }
    };
    match cond {
        Conditioning::Anchor { h_last, h_spec } => {
            check_len("last hidden state", s.model_dim, h_last.len())?;
            let spec = match (weights.variant, h_spec) {
                (DrafterVariant::Spec, Some(hs)) => {
                    check_len("[SPEC] hidden state", s.model_dim, hs.len())?;
                    Some(hs)
                }
                _ => None,
            };
            for g in 0..4 {
                add(g, &weights.w_in[g], h_last);
                if let Some(hs) = spec {
                    add(g, &weights.u_spec[g], hs);
                }
            }
        }
        Conditioning::Recurrent { prev_hidden } => {
            check_len("previous drafter output", s.dim, prev_hidden.len())?;
            for g in 0..4 {
                add(g, &weights.r_rec[g], prev_hidden);
            }
        }
    }
    let (cg, cb, zg, zb) = (
        widen(&weights.norm_c_gain),
        widen(&weights.norm_c_bias),
        widen(&weights.norm_z_gain),
        widen(&weights.norm_z_bias),
    );
    let trace = gate_core(
        &pre,
        &widen(&state.z),
        &NormParams {
            c_gain: &cg,
            c_bias: &cb,
            z_gain: &zg,
            z_bias: &zb,
        },
    );
    let hidden: Vec<f32> = trace.hidden.iter().map(|&v| v as f32).collect();
    let logits = weights
        .head
        .matvec_f64(&hidden)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(CellOutput {
        state: DrafterState {
            z: trace.z.iter().map(|&v| v as f32).collect(),
        },
        hidden,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TreePolicy {
    pub top_k: usize,
    /// Maximum number of drafted levels below the root.
    pub depth: usize,
    /// Total node budget, root included.
    pub size: usize,
}

impl Default for TreePolicy {
    fn default() -> Self {
        Self {
            top_k: 10,
            depth: 8,
            size: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Sum of drafter log-probabilities along the root-to-node path.
    pub score: f64,
    /// Drafter state after consuming this node's token; `None` for nodes at
    /// the depth limit, which are never expanded.
    pub snapshot: Option<(DrafterState, Vec<f32>)>,
}

/// Draft tree rooted at the verifier's next token. Parents always precede
/// their children.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    /// A tree holding only the root.
    pub fn root_only(token: u32) -> Self {
        Self {
            nodes: vec![DraftNode {
                token,
                parent: None,
                depth: 0,
                score: 0.0,
                snapshot: None,
            }],
        }
    }

    /// A single chain below `root`.
    pub fn chain(root: u32, tokens: &[u32]) -> Self {
        let mut t = Self::root_only(root);
        for (i, &tok) in tokens.iter().enumerate() {
            t.nodes.push(DraftNode {
                token: tok,
                parent: Some(i),
                depth: i + 1,
                score: 0.0,
                snapshot: None,
            });
        }
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_token(&self) -> u32 {
        self.nodes[0].token
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node indices from the root down to `node`, inclusive.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn path_tokens(&self, node: usize) -> Vec<u32> {
        self.path(node).into_iter().map(|i| self.nodes[i].token).collect()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == Some(node))
            .map(|(i, _)| i)
    }

    /// Checks parent ordering, depth bookkeeping and sibling uniqueness.
    pub fn is_well_formed(&self) -> bool {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() || self.nodes[0].depth != 0 {
            return false;
        }
        self.nodes.iter().enumerate().skip(1).all(|(i, n)| match n.parent {
            Some(p) if p < i => {
                n.depth == self.nodes[p].depth + 1
                    && !self.nodes[..i]
                        .iter()
                        .any(|m| m.parent == Some(p) && m.token == n.token)
            }
            _ => false,
        })
    }
}

struct Candidate {
    score: f64,
    seq: usize,
    token: u32,
    parent: usize,
    depth: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Log-probabilities over the real vocabulary (the trailing `[SPEC]` id is
/// never proposed).
fn draft_log_probs(logits: &[f32]) -> Vec<f64> {
    log_softmax(&logits[..logits.len() - 1])
}

/// Best-first expansion of a draft tree below `t_next`.
///
/// The frontier is ordered by cumulative log-probability (ties to the earlier
/// candidate); each accepted node contributes its `top_k` children. The
/// result is the `size` best-scoring nodes reachable under the top-k and
/// depth limits.
pub fn draft_tree(
    weights: &DrafterWeights,
    t_next: u32,
    h_last: &[f32],
    h_spec: Option<&[f32]>,
    policy: &TreePolicy,
) -> Result<DraftTree> {
    if policy.size == 0 || policy.top_k == 0 {
        return Err(Error::InvalidConfig("tree size and top-k must be positive".into()));
    }
    let top_k = policy.top_k.min(weights.shape.vocab_size - 1);
    let mut tree = DraftTree::root_only(t_next);
    if policy.size == 1 || policy.depth == 0 {
        return Ok(tree);
    }
    let root = cell_step(
        weights,
        &DrafterState::zeros(weights.shape.dim),
        t_next,
        Conditioning::Anchor { h_last, h_spec },
    )?;
    let mut frontier = BinaryHeap::new();
    let mut seq = 0usize;
    let mut push_children = |frontier: &mut BinaryHeap<Candidate>, logits: &[f32], parent: usize, base: f64, depth: usize| {
        let logp = draft_log_probs(logits);
        for tok in top_k_indices(&logp, top_k) {
            frontier.push(Candidate {
                score: base + logp[tok],
                seq,
                token: tok as u32,
                parent,
                depth,
            });
            seq += 1;
        }
    };
    push_children(&mut frontier, &root.logits, 0, 0.0, 1);
    tree.nodes[0].snapshot = Some((root.state, root.hidden));

    while tree.nodes.len() < policy.size {
        let Some(c) = frontier.pop() else { break };
        let idx = tree.nodes.len();
        let mut node = DraftNode {
            token: c.token,
            parent: Some(c.parent),
            depth: c.depth,
            score: c.score,
            snapshot: None,
        };
        if c.depth < policy.depth {
            let (state, hidden) = tree.nodes[c.parent]
                .snapshot
                .as_ref()
                .expect("expanded parent keeps its snapshot");
            let out = cell_step(
                weights,
                state,
                c.token,
                Conditioning::Recurrent { prev_hidden: hidden },
            )?;
            push_children(&mut frontier, &out.logits, idx, c.score, c.depth + 1);
            node.snapshot = Some((out.state, out.hidden));
        }
        tree.nodes.push(node);
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(v: usize, d0: usize, d: usize, n: usize) -> DrafterShape {
        DrafterShape {
            vocab_size: v,
            model_dim: d0,
            dim: d,
            depth: n,
        }
    }

    #[test]
    fn alpha_values() {
        let (a0, a) = compute_alpha(1, 1);
        assert!((a0 - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!((a - 2.828_427_124_746_190).abs() < 1e-5);
        let (a0, a) = compute_alpha(8, 64);
        assert!((a0 - 0.957_603_280_698_573_6).abs() < 1e-12);
        assert!((a - 0.36054).abs() < 1e-4);
        for n in 1..12 {
            for d in [1, 3, 64, 100] {
                let half = compute_alpha(n, 2 * d).1;
                assert!((half - compute_alpha(n, d).1 / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let w = DrafterWeights::zeros(DrafterVariant::Spec, shape(9, 4, 8, 3));
        let h = [0.3, -1.0, 2.0, 0.5];
        let out = cell_step(
            &w,
            &DrafterState::zeros(8),
            2,
            Conditioning::Anchor {
                h_last: &h,
                h_spec: Some(&h),
            },
        )
        .unwrap();
        assert!(out.hidden.iter().all(|&v| v == 0.0));
        assert!(out.state.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_step_is_deterministic_and_checks_dims() {
        let w = DrafterWeights::seeded(DrafterVariant::Spec, shape(9, 4, 8, 3), 1);
        let h = [0.3, -1.0, 2.0, 0.5];
        let st = DrafterState::zeros(8);
        let run = || {
            cell_step(&w, &st, 4, Conditioning::Anchor { h_last: &h, h_spec: Some(&h) }).unwrap()
        };
        assert_eq!(run(), run());
        assert!(cell_step(&w, &st, 4, Conditioning::Anchor { h_last: &h[..3], h_spec: None }).is_err());
        assert!(cell_step(&w, &st, 9, Conditioning::Recurrent { prev_hidden: &[0.0; 8] }).is_err());
    }

    #[test]
    fn drafter_file_round_trip() {
        let mut w = DrafterWeights::seeded(DrafterVariant::Spec, shape(11, 4, 6, 5), 3);
        w.spec_embedding = Some(vec![0.25, -0.5, 1.0, 2.0]);
        let bytes = w.to_weight_file().to_bytes();
        let back =
            DrafterWeights::from_weight_file(&WeightFile::from_bytes(&bytes, DRAFTER_MAGIC).unwrap())
                .unwrap();
        assert_eq!(back, w);
        let nospec = DrafterWeights::seeded(DrafterVariant::NoSpec, shape(11, 4, 6, 5), 3);
        assert!(nospec.u_spec.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tree_respects_budget_and_structure() {
        let w = DrafterWeights::seeded(DrafterVariant::Spec, shape(40, 4, 8, 8), 9);
        let h = [0.1, 0.2, -0.3, 0.4];
        let policy = TreePolicy { top_k: 10, depth: 8, size: 60 };
        let tree = draft_tree(&w, 3, &h, Some(&h), &policy).unwrap();
        assert_eq!(tree.len(), 60);
        assert!(tree.max_depth() <= 8);
        assert!(tree.is_well_formed());
        for (i, n) in tree.nodes.iter().enumerate().skip(1) {
            assert!(n.score <= tree.nodes[n.parent.unwrap()].score + 1e-12, "node {i}");
            assert_ne!(n.token, 39, "[SPEC] never drafted");
        }
    }

    #[test]
    fn size_two_holds_the_argmax_continuation() {
        let w = DrafterWeights::seeded(DrafterVariant::NoSpec, shape(20, 4, 8, 4), 2);
        let h = [1.0, 0.0, -1.0, 0.5];
        let tree = draft_tree(&w, 5, &h, None, &TreePolicy { top_k: 3, depth: 4, size: 2 }).unwrap();
        assert_eq!(tree.len(), 2);
        let first = cell_step(&w, &DrafterState::zeros(8), 5, Conditioning::Anchor { h_last: &h, h_spec: None }).unwrap();
        let best = crate::numerics::argmax(&first.logits[..19]) as u32;
        assert_eq!(tree.nodes[1].token, best);
        let root_only = draft_tree(&w, 5, &h, None, &TreePolicy { top_k: 3, depth: 4, size: 1 }).unwrap();
        assert_eq!(root_only.len(), 1);
    }
}
