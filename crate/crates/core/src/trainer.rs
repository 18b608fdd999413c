//! Drafter training against the frozen target model.
//!
//! A training window of `L` real tokens is laid out with `L` appended
//! `[SPEC]` tokens. `[SPEC]` number `k` stands for the prefix `t_0..t_k`: it
//! sits at position `k + 1` and attends to real tokens `0..=k` and itself,
//! while real tokens attend causally among real tokens only. One frozen
//! forward yields every real hidden state and every per-prefix `[SPEC]`
//! hidden state.
//!
//! Loss for anchor `k` (inputs `t_k`, `h_{k-1}`, `h_[SPEC]_{k-1}`) with
//! `n_k = min(n, L-1-k)` teacher-forced drafter steps:
//!
//! ```text
//! ℓ_k = (1/n_k) Σ_j CE(y_{k⊕j}, t_{k+j}) + CE(lm_head · h_[SPEC]_{k-1}, t_k)
//! L   = (1/N) Σ_k ℓ_k            over the N anchors used, 1 ≤ k ≤ L-2
//! ```
//!
//! The `[SPEC]` term is dropped for the no-`[SPEC]` variant. `[SPEC]` hidden
//! states are recomputed from the current `[SPEC]` embedding at every
//! evaluation (everything else in the target is frozen), so the embedding
//! receives gradient from both terms. All training math is `f64`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_engine::vanilla_greedy;
use crate::numerics::{gelu, gelu_grad, log_softmax_wide};
use crate::owl_drafter::{
    gate_core, tensor_shapes, DrafterShape, DrafterVariant, DrafterWeights, GateTrace, NormParams,
    CELL, FORGET, INPUT, OUTPUT,
};
use crate::target_model::{AttentionMask, TargetModel, RMS_NORM_EPS, ROPE_THETA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Which real token the `[SPEC]` cross-entropy term targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecLabel {
    /// `t_k`: the token following the prefix `[SPEC]_{k-1}` closes.
    Current,
    /// `t_{k+1}`: one token further.
    Next,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub chunk: usize,
    pub gen_tokens: usize,
    pub batch_size: usize,
    /// Anchors sampled per window per iteration; `None` uses every anchor.
    pub anchors_per_seq: Option<usize>,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Drafter rollout depth `n` (also the depth `α` is scaled for).
    pub depth: usize,
    pub drafter_dim: usize,
    pub optimizer: Optimizer,
    pub spec_label: SpecLabel,
    /// Coordinates checked against finite differences before training; 0
    /// skips the check.
    pub grad_check_coords: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            chunk: 64,
            gen_tokens: 256,
            batch_size: 8,
            anchors_per_seq: Some(16),
            learning_rate: 1e-3,
            iterations: 400,
            depth: 8,
            drafter_dim: 128,
            optimizer: Optimizer::Adam,
            spec_label: SpecLabel::Current,
            grad_check_coords: 24,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < self.depth + 1 || self.seq_len < 3 {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} must be at least depth + 1 = {} and at least 3",
                self.seq_len,
                self.depth + 1
            )));
        }
        if self.depth == 0 || self.drafter_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "depth, drafter_dim and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// f64 kernels

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn matvec(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `out += Wᵀ y`.
fn matvec_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yr) in w.chunks_exact(cols).zip(y) {
        if yr != 0.0 {
            axpy(out, yr, row);
        }
    }
}

/// `g += y xᵀ`.
fn outer_acc(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (row, &yr) in g.chunks_exact_mut(cols).zip(y) {
        if yr != 0.0 {
            axpy(row, yr, x);
        }
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn rms(x: &[f64], gain: &[f64]) -> (Vec<f64>, f64) {
    let r = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_NORM_EPS).sqrt();
    (x.iter().zip(gain).map(|(v, g)| v * r * g).collect(), r)
}

fn rms_back(x: &[f64], gain: &[f64], r: f64, dy: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let s: f64 = (0..x.len()).map(|i| gain[i] * dy[i] * x[i]).sum();
    (0..x.len())
        .map(|i| r * gain[i] * dy[i] - x[i] * r * r * r * s / n)
        .collect()
}

/// Rotary rotation (sign = 1) or its inverse (sign = -1).
fn rope(x: &mut [f64], position: usize, head_dim: usize, sign: f64) {
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for j in 0..half {
            let freq = ROPE_THETA.powf(-2.0 * j as f64 / head_dim as f64);
            let (sin, cos) = (position as f64 * freq).sin_cos();
            let sin = sign * sin;
            let (a, b) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = a * cos - b * sin;
            head[2 * j + 1] = a * sin + b * cos;
        }
    }
}

/// Layer-norm backward given normalized values `y` and `1/std`.
fn layer_norm_back(y: &[f64], inv_std: f64, dy: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let sum_dy: f64 = dy.iter().sum();
    let sum_dyy: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
    dy.iter()
        .zip(y)
        .map(|(&g, &yy)| inv_std * (g - sum_dy / n - yy * sum_dyy / n))
        .collect()
}

// ---------------------------------------------------------------------------
// Frozen target, f64 copy

struct FrozenLayer {
    attn_norm: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    mlp_norm: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

/// `f64` copy of the target weights used to recompute `[SPEC]` rows.
pub struct FrozenTarget {
    vocab: usize,
    d: usize,
    heads: usize,
    mlp: usize,
    layers: Vec<FrozenLayer>,
    final_norm: Vec<f64>,
    lm_head: Vec<f64>,
}

struct SpecLayerTrace {
    x_in: Vec<f64>,
    r_attn: f64,
    q: Vec<f64>,
    k_self: Vec<f64>,
    v_self: Vec<f64>,
    probs: Vec<Vec<f64>>,
    x_mid: Vec<f64>,
    r_mlp: f64,
    u: Vec<f64>,
}

struct SpecTrace {
    layers: Vec<SpecLayerTrace>,
    x_out: Vec<f64>,
    r_final: f64,
    hidden: Vec<f64>,
}

impl FrozenTarget {
    pub fn new(model: &TargetModel) -> Self {
        let c = model.config();
        Self {
            vocab: c.vocab_size,
            d: c.hidden_size,
            heads: c.num_heads,
            mlp: c.mlp_width(),
            layers: model
                .layers()
                .iter()
                .map(|l| FrozenLayer {
                    attn_norm: widen(&l.attn_norm),
                    wq: widen(l.wq.data()),
                    wk: widen(l.wk.data()),
                    wv: widen(l.wv.data()),
                    wo: widen(l.wo.data()),
                    mlp_norm: widen(&l.mlp_norm),
                    w_up: widen(l.w_up.data()),
                    w_down: widen(l.w_down.data()),
                })
                .collect(),
            final_norm: widen(model.final_norm()),
            lm_head: widen(model.lm_head().data()),
        }
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `[SPEC]` row with embedding `e` after real prefix `0..=p`.
    fn spec_forward(&self, batch: &TrainBatch, p: usize, e: &[f64]) -> SpecTrace {
        let (d, hd) = (self.d, self.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = p + 1;
        let mut x = e.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let (a, r_attn) = rms(&x, &l.attn_norm);
            let mut q = matvec(&l.wq, d, &a);
            let mut k_self = matvec(&l.wk, d, &a);
            let v_self = matvec(&l.wv, d, &a);
            rope(&mut q, pos, hd, 1.0);
            rope(&mut k_self, pos, hd, 1.0);
            let keys = &batch.keys[li];
            let values = &batch.values[li];
            let mut o = vec![0.0; d];
            let mut probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let span = h * hd..(h + 1) * hd;
                let qh = &q[span.clone()];
                let mut s: Vec<f64> = (0..=p)
                    .map(|j| dot(qh, &keys[j * d..][span.clone()]) * scale)
                    .collect();
                s.push(dot(qh, &k_self[span.clone()]) * scale);
                let max = s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in s.iter_mut() {
                    *v /= total;
                }
                let oh = &mut o[span.clone()];
                for j in 0..=p {
                    axpy(oh, s[j], &values[j * d..][span.clone()]);
                }
                axpy(oh, s[p + 1], &v_self[span]);
                probs.push(s);
            }
            let x_in = x.clone();
            axpy(&mut x, 1.0, &matvec(&l.wo, d, &o));
            let x_mid = x.clone();
            let (b, r_mlp) = rms(&x, &l.mlp_norm);
            let u = matvec(&l.w_up, d, &b);
            let gu: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            axpy(&mut x, 1.0, &matvec(&l.w_down, self.mlp, &gu));
            layers.push(SpecLayerTrace {
                x_in,
                r_attn,
                q,
                k_self,
                v_self,
                probs,
                x_mid,
                r_mlp,
                u,
            });
        }
        let (hidden, r_final) = rms(&x, &self.final_norm);
        SpecTrace {
            layers,
            x_out: x,
            r_final,
            hidden,
        }
    }

    /// Gradient with respect to the `[SPEC]` embedding given `dh` on the
    /// final hidden state.
    fn spec_backward(&self, batch: &TrainBatch, p: usize, trace: &SpecTrace, dh: &[f64]) -> Vec<f64> {
        let (d, hd) = (self.d, self.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = p + 1;
        let mut dx = rms_back(&trace.x_out, &self.final_norm, trace.r_final, dh);
        for (li, l) in self.layers.iter().enumerate().rev() {
            let t = &trace.layers[li];
            // mlp block
            let mut dgu = vec![0.0; self.mlp];
            matvec_t_acc(&l.w_down, self.mlp, &dx, &mut dgu);
            let du: Vec<f64> = dgu.iter().zip(&t.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let mut db = vec![0.0; d];
            matvec_t_acc(&l.w_up, d, &du, &mut db);
            let back = rms_back(&t.x_mid, &l.mlp_norm, t.r_mlp, &db);
            axpy(&mut dx, 1.0, &back);
            // attention block
            let mut d_o = vec![0.0; d];
            matvec_t_acc(&l.wo, d, &dx, &mut d_o);
            let keys = &batch.keys[li];
            let values = &batch.values[li];
            let mut dq = vec![0.0; d];
            let mut dk = vec![0.0; d];
            let mut dv = vec![0.0; d];
            for h in 0..self.heads {
                let span = h * hd..(h + 1) * hd;
                let doh = &d_o[span.clone()];
                let pr = &t.probs[h];
                let mut dp: Vec<f64> = (0..=p)
                    .map(|j| dot(doh, &values[j * d..][span.clone()]))
                    .collect();
                dp.push(dot(doh, &t.v_self[span.clone()]));
                let mean: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let dqh = &mut dq[span.clone()];
                for j in 0..=p {
                    let ds = pr[j] * (dp[j] - mean);
                    axpy(dqh, ds * scale, &keys[j * d..][span.clone()]);
                }
                let ds_self = pr[p + 1] * (dp[p + 1] - mean);
                axpy(dqh, ds_self * scale, &t.k_self[span.clone()]);
                axpy(&mut dk[span.clone()], ds_self * scale, &t.q[span.clone()]);
                axpy(&mut dv[span], pr[p + 1], doh);
            }
            rope(&mut dq, pos, hd, -1.0);
            rope(&mut dk, pos, hd, -1.0);
            let mut da = vec![0.0; d];
            matvec_t_acc(&l.wq, d, &dq, &mut da);
            matvec_t_acc(&l.wk, d, &dk, &mut da);
            matvec_t_acc(&l.wv, d, &dv, &mut da);
            let back = rms_back(&t.x_in, &l.attn_norm, t.r_attn, &da);
            axpy(&mut dx, 1.0, &back);
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Training batch

/// One training window with its frozen-forward results.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub tokens: Vec<u32>,
    /// Real hidden states `h_0..h_{L-1}`.
    pub hidden: Vec<Vec<f32>>,
    /// `[SPEC]` hidden states for prefixes ending at `0..L-1`, computed with
    /// the model's `[SPEC]` embedding at build time.
    pub spec_hidden: Vec<Vec<f32>>,
    /// Per-layer rotated keys and values of the real tokens, row-major `L × d_0`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position ids of the `2L` queries.
    pub fn positions(&self) -> Vec<u32> {
        let l = self.len() as u32;
        (0..l).chain(1..=l).collect()
    }

    pub fn mask(&self) -> AttentionMask {
        training_mask(self.len())
    }

    /// Anchors with at least one lookahead token.
    pub fn anchors(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.len().saturating_sub(2)
    }
}

/// Real token `k` sees `0..=k`; `[SPEC]` `k` (query `L + k`) sees `0..=k`
/// and itself.
pub fn training_mask(l: usize) -> AttentionMask {
    let rows = (0..l)
        .map(|k| (0..=k).collect())
        .chain((0..l).map(|k| (0..=k).chain(std::iter::once(l + k)).collect()))
        .collect();
    AttentionMask::Explicit { prefix: 0, rows }
}

pub fn build_training_batch(model: &TargetModel, sequence: &[u32]) -> Result<TrainBatch> {
    let l = sequence.len();
    if l < 2 {
        return Err(Error::InvalidConfig("training sequence needs at least 2 tokens".into()));
    }
    let spec = model.spec_token();
    if sequence.contains(&spec) {
        return Err(Error::ReservedToken(spec));
    }
    let mut tokens = sequence.to_vec();
    tokens.extend(std::iter::repeat(spec).take(l));
    let positions: Vec<u32> = (0..l as u32).chain(1..=l as u32).collect();
    let mut cache = model.new_cache();
    let out = model.forward(&mut cache, &tokens, &positions, &training_mask(l))?;
    let layers = model.config().num_layers;
    let gather = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Vec<Vec<f64>> {
        (0..layers)
            .map(|li| (0..l).flat_map(|i| f(li, i)).collect())
            .collect()
    };
    Ok(TrainBatch {
        tokens: sequence.to_vec(),
        hidden: (0..l).map(|i| out.hidden.row(i).to_vec()).collect(),
        spec_hidden: (l..2 * l).map(|i| out.hidden.row(i).to_vec()).collect(),
        keys: gather(&|li, i| widen(cache.key(li, i))),
        values: gather(&|li, i| widen(cache.value(li, i))),
    })
}

// ---------------------------------------------------------------------------
// Drafter parameters as a flat vector

#[derive(Debug, Clone)]
struct Layout {
    v: usize,
    d0: usize,
    d: usize,
    embed: usize,
    w_in: [usize; 4],
    u_spec: [usize; 4],
    r_rec: [usize; 4],
    bias: [usize; 4],
    c_gain: usize,
    c_bias: usize,
    z_gain: usize,
    z_bias: usize,
    head: usize,
    total: usize,
}

impl Layout {
    fn new(shape: &DrafterShape) -> Self {
        let mut offsets = Vec::new();
        let mut off = 0;
        for (_, dims) in tensor_shapes(shape) {
            offsets.push(off);
            off += dims.iter().product::<usize>();
        }
        let at = |i: usize| offsets[i];
        Self {
            v: shape.vocab_size,
            d0: shape.model_dim,
            d: shape.dim,
            embed: at(0),
            w_in: std::array::from_fn(|g| at(1 + g)),
            u_spec: std::array::from_fn(|g| at(5 + g)),
            r_rec: std::array::from_fn(|g| at(9 + g)),
            bias: std::array::from_fn(|g| at(13 + g)),
            c_gain: at(17),
            c_bias: at(18),
            z_gain: at(19),
            z_bias: at(20),
            head: at(21),
            total: off,
        }
    }
}

/// Names of the flat coordinates, for diagnostics.
fn coordinate_name(shape: &DrafterShape, mut index: usize) -> String {
    for (name, dims) in tensor_shapes(shape) {
        let len: usize = dims.iter().product();
        if index < len {
            return format!("{name}[{index}]");
        }
        index -= len;
    }
    format!("spec_embedding[{index}]")
}

struct StepRecord {
    token: u32,
    target: u32,
    z_prev: Vec<f64>,
    trace: GateTrace,
    probs: Vec<f64>,
}

/// Loss and gradient machinery for one drafter variant.
struct Objective<'a> {
    target: &'a FrozenTarget,
    variant: DrafterVariant,
    layout: Layout,
    depth: usize,
    alpha: f64,
    spec_label: SpecLabel,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Drafter gradient, canonical flat order (see [`DrafterWeights::flatten`]).
    pub drafter: Vec<f64>,
    pub spec_embedding: Option<Vec<f64>>,
}

impl<'a> Objective<'a> {
    fn new(target: &'a FrozenTarget, weights: &DrafterWeights, spec_label: SpecLabel) -> Result<Self> {
        let s = weights.shape;
        if s.vocab_size != target.vocab || s.model_dim != target.d {
            return Err(Error::InvalidConfig(format!(
                "drafter shape (V={}, d0={}) does not match target (V={}, d0={})",
                s.vocab_size, s.model_dim, target.vocab, target.d
            )));
        }
        Ok(Self {
            target,
            variant: weights.variant,
            layout: Layout::new(&s),
            depth: s.depth,
            alpha: weights.alpha(),
            spec_label,
        })
    }

    fn uses_spec(&self) -> bool {
        self.variant == DrafterVariant::Spec
    }

    fn rollout(&self, theta: &[f64], batch: &TrainBatch, k: usize, h_last: &[f64], hs: Option<&[f64]>) -> Vec<StepRecord> {
        let ly = &self.layout;
        let (d, d0, v) = (ly.d, ly.d0, ly.v);
        let n_k = self.depth.min(batch.len() - 1 - k);
        let norms = NormParams {
            c_gain: &theta[ly.c_gain..ly.c_gain + d],
            c_bias: &theta[ly.c_bias..ly.c_bias + d],
            z_gain: &theta[ly.z_gain..ly.z_gain + d],
            z_bias: &theta[ly.z_bias..ly.z_bias + d],
        };
        let head = &theta[ly.head..ly.head + v * d];
        let mut steps: Vec<StepRecord> = Vec::with_capacity(n_k);
        for j in 1..=n_k {
            let token = batch.tokens[k + j - 1];
            let e = &theta[ly.embed + token as usize * d..][..d];
            let pre: [Vec<f64>; 4] = std::array::from_fn(|g| {
                let mut p: Vec<f64> = theta[ly.bias[g]..ly.bias[g] + d]
                    .iter()
                    .zip(e)
                    .map(|(b, ev)| b + self.alpha * ev)
                    .collect();
                if j == 1 {
                    axpy(&mut p, 1.0, &matvec(&theta[ly.w_in[g]..][..d * d0], d0, h_last));
                    if let Some(hs) = hs {
                        axpy(&mut p, 1.0, &matvec(&theta[ly.u_spec[g]..][..d * d0], d0, hs));
                    }
                } else {
                    let prev = &steps[j - 2].trace.hidden;
                    axpy(&mut p, 1.0, &matvec(&theta[ly.r_rec[g]..][..d * d], d, prev));
                }
                p
            });
            let z_prev = if j == 1 {
                vec![0.0; d]
            } else {
                steps[j - 2].trace.z.clone()
            };
            let trace = gate_core(&pre, &z_prev, &norms);
            let logits = matvec(head, d, &trace.hidden);
            let probs = log_softmax_wide(&logits);
            steps.push(StepRecord {
                token,
                target: batch.tokens[k + j],
                z_prev,
                trace,
                probs,
            });
        }
        steps
    }

    /// Backpropagates `Σ_j w·CE_j` through a rollout. Returns `d/d h_spec`.
    #[allow(clippy::too_many_arguments)]
    fn rollout_backward(
        &self,
        theta: &[f64],
        grad: &mut [f64],
        steps: &[StepRecord],
        h_last: &[f64],
        hs: Option<&[f64]>,
        w: f64,
    ) -> Option<Vec<f64>> {
        let ly = &self.layout;
        let (d, d0, v) = (ly.d, ly.d0, ly.v);
        let mut dhid_next = vec![0.0; d];
        let mut dz_next = vec![0.0; d];
        let mut dhs = hs.map(|_| vec![0.0; d0]);
        for j in (0..steps.len()).rev() {
            let st = &steps[j];
            let t = &st.trace;
            // cross-entropy
            let mut dlogits: Vec<f64> = st.probs.iter().map(|lp| w * lp.exp()).collect();
            dlogits[st.target as usize] -= w;
            outer_acc(&mut grad[ly.head..ly.head + v * d], d, &dlogits, &t.hidden);
            let mut dhid = dhid_next.clone();
            matvec_t_acc(&theta[ly.head..ly.head + v * d], d, &dlogits, &mut dhid);
            // out = f_z(z) ⊙ g_o
            let go = &t.gates[OUTPUT - FORGET];
            let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
            let mut daz_in = vec![0.0; d];
            for i in 0..d {
                dpre[OUTPUT][i] = dhid[i] * t.act_z[i] * go[i] * (1.0 - go[i]);
                daz_in[i] = dhid[i] * go[i] * gelu_grad(t.act_z_in[i]);
            }
            let zg = &theta[ly.z_gain..ly.z_gain + d];
            let dnz: Vec<f64> = (0..d).map(|i| daz_in[i] * zg[i]).collect();
            for i in 0..d {
                grad[ly.z_gain + i] += daz_in[i] * t.norm_z[i];
                grad[ly.z_bias + i] += daz_in[i];
            }
            let mut dz = layer_norm_back(&t.norm_z, t.inv_std_z, &dnz);
            axpy(&mut dz, 1.0, &dz_next);
            // z = z_prev ⊙ g_f + f_c(s_c) ⊙ g_i
            let (gf, gi) = (&t.gates[FORGET], &t.gates[INPUT]);
            let cg = &theta[ly.c_gain..ly.c_gain + d];
            let mut dac_in = vec![0.0; d];
            for i in 0..d {
                dpre[FORGET][i] = dz[i] * st.z_prev[i] * gf[i] * (1.0 - gf[i]);
                dpre[INPUT][i] = dz[i] * t.act_c[i] * gi[i] * (1.0 - gi[i]);
                dac_in[i] = dz[i] * gi[i] * gelu_grad(t.act_c_in[i]);
                grad[ly.c_gain + i] += dac_in[i] * t.norm_c[i];
                grad[ly.c_bias + i] += dac_in[i];
            }
            let dnc: Vec<f64> = (0..d).map(|i| dac_in[i] * cg[i]).collect();
            dpre[CELL] = layer_norm_back(&t.norm_c, t.inv_std_c, &dnc);
            dz_next = (0..d).map(|i| dz[i] * gf[i]).collect();
            // pre = b + α·E[token] + A·input
            dhid_next = vec![0.0; d];
            let erow = ly.embed + st.token as usize * d;
            for g in 0..4 {
                axpy(&mut grad[ly.bias[g]..ly.bias[g] + d], 1.0, &dpre[g]);
                axpy(&mut grad[erow..erow + d], self.alpha, &dpre[g]);
                if j == 0 {
                    outer_acc(&mut grad[ly.w_in[g]..][..d * d0], d0, &dpre[g], h_last);
                    if let (Some(hs), Some(dhs)) = (hs, dhs.as_mut()) {
                        outer_acc(&mut grad[ly.u_spec[g]..][..d * d0], d0, &dpre[g], hs);
                        matvec_t_acc(&theta[ly.u_spec[g]..][..d * d0], d0, &dpre[g], dhs);
                    }
                } else {
                    let prev = &steps[j - 1].trace.hidden;
                    outer_acc(&mut grad[ly.r_rec[g]..][..d * d], d, &dpre[g], prev);
                    matvec_t_acc(&theta[ly.r_rec[g]..][..d * d], d, &dpre[g], &mut dhid_next);
                }
            }
        }
        dhs
    }

    fn spec_target(&self, batch: &TrainBatch, k: usize) -> u32 {
        match self.spec_label {
            SpecLabel::Current => batch.tokens[k],
            SpecLabel::Next => batch.tokens[k + 1],
        }
    }

    /// Mean anchor loss over `items` and, if requested, its gradients.
    fn evaluate(
        &self,
        items: &[(&TrainBatch, Vec<usize>)],
        theta: &[f64],
        spec_e: Option<&[f64]>,
        want_grad: bool,
    ) -> Result<Gradients> {
        let total: usize = items.iter().map(|(_, a)| a.len()).sum();
        if total == 0 {
            return Err(Error::EmptyInput("training anchors"));
        }
        let spec_e = if self.uses_spec() {
            Some(spec_e.ok_or_else(|| {
                Error::InvalidConfig("the [SPEC] variant needs a [SPEC] embedding".into())
            })?)
        } else {
            None
        };
        let inv_n = 1.0 / total as f64;
        let mut loss = 0.0;
        let mut grad = if want_grad { vec![0.0; self.layout.total] } else { Vec::new() };
        let mut grad_e = spec_e.filter(|_| want_grad).map(|e| vec![0.0; e.len()]);
        let (v, d0) = (self.layout.v, self.layout.d0);
        for (batch, anchors) in items {
            for &k in anchors {
                if k == 0 || k + 2 > batch.len() {
                    return Err(Error::InvalidConfig(format!(
                        "anchor {k} outside 1..={} for a window of {}",
                        batch.len().saturating_sub(2),
                        batch.len()
                    )));
                }
                let h_last = widen(&batch.hidden[k - 1]);
                let spec_trace = spec_e.map(|e| self.target.spec_forward(batch, k - 1, e));
                let hs = spec_trace.as_ref().map(|t| t.hidden.as_slice());
                let steps = self.rollout(theta, batch, k, &h_last, hs);
                let w = inv_n / steps.len() as f64;
                loss += w * steps.iter().map(|s| -s.probs[s.target as usize]).sum::<f64>();
                let mut spec_probs = None;
                if let Some(hs) = hs {
                    let logits = matvec(&self.target.lm_head, d0, hs);
                    let lp = log_softmax_wide(&logits);
                    let label = self.spec_target(batch, k) as usize;
                    loss += inv_n * -lp[label];
                    spec_probs = Some((lp, label));
                }
                if !want_grad {
                    continue;
                }
                let dhs = self.rollout_backward(theta, &mut grad, &steps, &h_last, hs, w);
                if let (Some(mut dhs), Some((lp, label)), Some(trace), Some(ge)) =
                    (dhs, spec_probs, spec_trace.as_ref(), grad_e.as_mut())
                {
                    let mut dlogits: Vec<f64> = lp.iter().map(|l| inv_n * l.exp()).collect();
                    dlogits[label] -= inv_n;
                    debug_assert_eq!(dlogits.len(), v);
                    matvec_t_acc(&self.target.lm_head, d0, &dlogits, &mut dhs);
                    let de = self.target.spec_backward(batch, k - 1, trace, &dhs);
                    axpy(ge, 1.0, &de);
                }
            }
        }
        Ok(Gradients {
            loss,
            drafter: grad,
            spec_embedding: grad_e,
        })
    }
}

fn all_anchors(batch: &TrainBatch) -> Vec<usize> {
    batch.anchors().collect()
}

fn spec_row(weights: &DrafterWeights, spec_embedding: Option<&[f32]>) -> Option<Vec<f64>> {
    match weights.variant {
        DrafterVariant::Spec => spec_embedding.map(widen),
        DrafterVariant::NoSpec => None,
    }
}

/// Mean loss over every valid anchor of `batch`.
pub fn training_loss(
    target: &FrozenTarget,
    batch: &TrainBatch,
    weights: &DrafterWeights,
    spec_embedding: Option<&[f32]>,
    spec_label: SpecLabel,
) -> Result<f64> {
    let obj = Objective::new(target, weights, spec_label)?;
    let e = spec_row(weights, spec_embedding);
    Ok(obj
        .evaluate(&[(batch, all_anchors(batch))], &weights.flatten(), e.as_deref(), false)?
        .loss)
}

/// Analytic gradients of [`training_loss`].
pub fn loss_gradients(
    target: &FrozenTarget,
    batch: &TrainBatch,
    weights: &DrafterWeights,
    spec_embedding: Option<&[f32]>,
    spec_label: SpecLabel,
) -> Result<Gradients> {
    let obj = Objective::new(target, weights, spec_label)?;
    let e = spec_row(weights, spec_embedding);
    obj.evaluate(&[(batch, all_anchors(batch))], &weights.flatten(), e.as_deref(), true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates where either gradient is above the noise floor.
    pub nonzero: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Gradients below this magnitude on both sides count as agreeing zeros.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences (step `h`) on
/// `coords` random coordinates, cycling through every tensor (the `[SPEC]`
/// embedding included) so each receives coverage.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    target: &FrozenTarget,
    batch: &TrainBatch,
    weights: &DrafterWeights,
    spec_embedding: Option<&[f32]>,
    spec_label: SpecLabel,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let obj = Objective::new(target, weights, spec_label)?;
    let items = [(batch, all_anchors(batch))];
    let theta = weights.flatten();
    let e = spec_row(weights, spec_embedding);
    let g = obj.evaluate(&items, &theta, e.as_deref(), true)?;

    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut off = 0;
    for (_, dims) in tensor_shapes(&weights.shape) {
        let len: usize = dims.iter().product();
        ranges.push((off, len));
        off += len;
    }
    if let Some(e) = &e {
        ranges.push((off, e.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        nonzero: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for c in 0..coords {
        let (start, len) = ranges[c % ranges.len()];
        let idx = start + rng.gen_range(0..len);
        let eval = |delta: f64| -> Result<f64> {
            let mut th = theta.clone();
            let mut ee = e.clone();
            if idx < theta.len() {
                th[idx] += delta;
            } else if let Some(ee) = ee.as_mut() {
                ee[idx - theta.len()] += delta;
            }
            Ok(obj.evaluate(&items, &th, ee.as_deref(), false)?.loss)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let analytic = if idx < theta.len() {
            g.drafter[idx]
        } else {
            g.spec_embedding.as_ref().expect("spec gradient")[idx - theta.len()]
        };
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < GRAD_CHECK_FLOOR {
            0.0
        } else {
            report.nonzero += 1;
            (analytic - numeric).abs() / scale
        };
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = format!(
                "{} (analytic {analytic:.6e}, numeric {numeric:.6e})",
                coordinate_name(&weights.shape, idx)
            );
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Corpus

/// Pseudo-natural seed texts from a Zipf-weighted bigram source over the real
/// vocabulary `0..vocab`.
pub fn synthetic_seed_texts(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranks = WeightedIndex::new((0..vocab).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1)))
        .expect("nonempty vocabulary");
    let successors: Vec<Vec<u32>> = (0..vocab)
        .map(|_| {
            let mut p: Vec<u32> = (0..vocab as u32).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    (0..count)
        .map(|_| {
            let mut t = rng.gen_range(0..vocab as u32);
            let mut text = Vec::with_capacity(len);
            for _ in 0..len {
                text.push(t);
                t = successors[t as usize][ranks.sample(&mut rng)];
            }
            text
        })
        .collect()
}

/// Splits each seed text into `chunk`-token prompts and appends
/// `gen_tokens` greedy target tokens to each.
pub fn generate_training_corpus(
    model: &TargetModel,
    seed_texts: &[Vec<u32>],
    chunk: usize,
    gen_tokens: usize,
) -> Result<Vec<Vec<u32>>> {
    if seed_texts.is_empty() {
        return Err(Error::EmptyInput("seed texts"));
    }
    if chunk == 0 {
        return Err(Error::InvalidConfig("chunk size must be positive".into()));
    }
    let mut corpus = Vec::new();
    for (i, text) in seed_texts.iter().enumerate() {
        if text.len() < chunk {
            warn!("seed text {i} has {} tokens, shorter than chunk {chunk}; skipped", text.len());
            continue;
        }
        for prompt in text.chunks_exact(chunk) {
            let mut seq = prompt.to_vec();
            seq.extend(vanilla_greedy(model, prompt, gen_tokens, None)?);
            corpus.push(seq);
        }
    }
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Vec<u32>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::Dataset(format!("corpus line {}: bad token `{t}`", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_loss_curve(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{l}", i + 1)?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Optimization

struct OptState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        let buf = |on| if on { vec![0.0; n] } else { Vec::new() };
        Self {
            kind,
            lr,
            m: buf(kind == Optimizer::Adam),
            v: buf(kind == Optimizer::Adam),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            Optimizer::Sgd => axpy(params, -self.lr, grad),
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub weights: DrafterWeights,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Carries the trained `[SPEC]` embedding.
    pub spec: VariantRun,
    pub nospec: VariantRun,
}

/// Last `seq_len` tokens of every corpus sequence.
pub fn training_windows(corpus: &[Vec<u32>], seq_len: usize) -> Vec<&[u32]> {
    corpus
        .iter()
        .map(|s| &s[s.len().saturating_sub(seq_len)..])
        .filter(|w| w.len() >= 3)
        .collect()
}

/// Trains one drafter variant on prebuilt batches.
pub fn train_variant(
    model: &TargetModel,
    target: &FrozenTarget,
    batches: &[TrainBatch],
    variant: DrafterVariant,
    config: &TrainConfig,
) -> Result<VariantRun> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyInput("training batches"));
    }
    let c = model.config();
    let shape = DrafterShape {
        vocab_size: c.vocab_size,
        model_dim: c.hidden_size,
        dim: config.drafter_dim,
        depth: config.depth,
    };
    let variant_salt = match variant {
        DrafterVariant::Spec => 0x5eed_0001,
        DrafterVariant::NoSpec => 0x5eed_0002,
    };
    let mut weights = DrafterWeights::seeded(variant, shape, config.seed ^ variant_salt);
    let mut spec_e = (variant == DrafterVariant::Spec).then(|| widen(model.spec_embedding()));
    let obj = Objective::new(target, &weights, config.spec_label)?;

    if config.grad_check_coords > 0 {
        let probe = &batches[0];
        let cut = probe.len().min(24);
        let small = build_training_batch(model, &probe.tokens[..cut])?;
        let e32: Option<Vec<f32>> = spec_e.as_ref().map(|e| e.iter().map(|&v| v as f32).collect());
        let report = gradient_check(
            target,
            &small,
            &weights,
            e32.as_deref(),
            config.spec_label,
            config.grad_check_coords,
            1e-3,
            config.seed,
        )?;
        info!(
            "{variant:?} gradient check: {} coordinates, max relative error {:.2e}",
            report.checked, report.max_rel_error
        );
        if report.max_rel_error >= 1e-3 {
            return Err(Error::GradientCheck {
                max_rel_error: report.max_rel_error,
                worst: report.worst,
            });
        }
    }

    let mut theta = weights.flatten();
    let mut opt = OptState::new(config.optimizer, config.learning_rate, theta.len());
    let mut opt_e = spec_e
        .as_ref()
        .map(|e| OptState::new(config.optimizer, config.learning_rate, e.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ variant_salt ^ 0xa5a5);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut items = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let b = &batches[order[cursor]];
            cursor += 1;
            let all = b.anchors();
            let anchors = match config.anchors_per_seq {
                Some(a) if a < all.clone().count() => {
                    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, all.clone().count(), a)
                        .into_iter()
                        .map(|i| i + all.start())
                        .collect();
                    picked.sort_unstable();
                    picked
                }
                _ => all.collect(),
            };
            items.push((b, anchors));
        }
        let g = obj.evaluate(&items, &theta, spec_e.as_deref(), true)?;
        if !g.loss.is_finite() || g.drafter.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: it + 1,
                loss: g.loss,
            });
        }
        opt.step(&mut theta, &g.drafter);
        if let (Some(e), Some(ge), Some(o)) = (spec_e.as_mut(), g.spec_embedding.as_ref(), opt_e.as_mut()) {
            o.step(e, ge);
        }
        if (it + 1) % 50 == 0 || it == 0 {
            info!("{variant:?} iteration {}: loss {:.4}", it + 1, g.loss);
        }
        losses.push(g.loss);
    }
    weights.assign_flat(&theta);
    weights.spec_embedding = spec_e.map(|e| e.iter().map(|&v| v as f32).collect());
    Ok(VariantRun { weights, losses })
}

/// Builds the training batches from `corpus` and trains both drafter variants.
pub fn train(model: &TargetModel, corpus: &[Vec<u32>], config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let windows = training_windows(corpus, config.seq_len);
    if windows.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let batches = windows
        .iter()
        .map(|w| build_training_batch(model, w))
        .collect::<Result<Vec<_>>>()?;
    let target = FrozenTarget::new(model);
    Ok(TrainOutput {
        spec: train_variant(model, &target, &batches, DrafterVariant::Spec, config)?,
        nospec: train_variant(model, &target, &batches, DrafterVariant::NoSpec, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_model::TargetConfig;

    fn tiny_model() -> TargetModel {
        TargetModel::seeded(
            TargetConfig {
                vocab_size: 11,
                hidden_size: 8,
                num_layers: 2,
                num_heads: 2,
                max_positions: 64,
            },
            3,
        )
        .unwrap()
    }

    fn tiny_drafter(variant: DrafterVariant, seed: u64) -> DrafterWeights {
        DrafterWeights::seeded(
            variant,
            DrafterShape {
                vocab_size: 11,
                model_dim: 8,
                dim: 8,
                depth: 3,
            },
            seed,
        )
    }

    #[test]
    fn mask_layout_for_three_tokens() {
        let AttentionMask::Explicit { prefix, rows } = training_mask(3) else {
            panic!()
        };
        assert_eq!(prefix, 0);
        assert_eq!(rows[0], vec![0]);
        assert_eq!(rows[2], vec![0, 1, 2]);
        assert_eq!(rows[4], vec![0, 1, 4]);
        assert!(rows[..3].iter().all(|r| r.iter().all(|&k| k < 3)));
    }

    #[test]
    fn f64_spec_path_matches_batch_forward() {
        let m = tiny_model();
        let b = build_training_batch(&m, &[1, 4, 2, 7, 7, 3]).unwrap();
        let t = FrozenTarget::new(&m);
        let e = widen(m.spec_embedding());
        for p in 0..b.len() {
            let tr = t.spec_forward(&b, p, &e);
            for (a, &c) in tr.hidden.iter().zip(&b.spec_hidden[p]) {
                assert!((a - c as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn unused_spec_projection_gets_no_gradient() {
        let m = tiny_model();
        let t = FrozenTarget::new(&m);
        let b = build_training_batch(&m, &[1, 4, 2, 7, 7, 3, 0]).unwrap();
        let w = tiny_drafter(DrafterVariant::NoSpec, 1);
        let g = loss_gradients(&t, &b, &w, None, SpecLabel::Current).unwrap();
        let ly = Layout::new(&w.shape);
        let u = &g.drafter[ly.u_spec[0]..ly.r_rec[0]];
        assert!(u.iter().all(|&v| v == 0.0));
        assert!(g.spec_embedding.is_none());
    }

    #[test]
    fn spec_backward_matches_finite_differences() {
        let m = tiny_model();
        let t = FrozenTarget::new(&m);
        let b = build_training_batch(&m, &[1, 4, 2, 7, 7, 3]).unwrap();
        let e = widen(m.spec_embedding());
        let dh: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = 3;
        let tr = t.spec_forward(&b, p, &e);
        let de = t.spec_backward(&b, p, &tr, &dh);
        for i in 0..8 {
            let f = |delta: f64| {
                let mut ee = e.clone();
                ee[i] += delta;
                dot(&t.spec_forward(&b, p, &ee).hidden, &dh)
            };
            let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
            assert!((fd - de[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", de[i]);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let m = tiny_model();
        let t = FrozenTarget::new(&m);
        let b = build_training_batch(&m, &[1, 4, 2, 7, 7, 3, 0, 9]).unwrap();
        let w = tiny_drafter(DrafterVariant::Spec, 2);
        let obj = Objective::new(&t, &w, SpecLabel::Current).unwrap();
        let theta = w.flatten();
        let e = widen(m.spec_embedding());
        let once = obj.evaluate(&[(&b, all_anchors(&b))], &theta, Some(&e), true).unwrap();
        let twice = obj
            .evaluate(&[(&b, all_anchors(&b)), (&b, all_anchors(&b))], &theta, Some(&e), true)
            .unwrap();
        // the same anchors twice leave the mean unchanged
        assert!((once.loss - twice.loss).abs() < 1e-12);
        for (a, b) in once.drafter.iter().zip(&twice.drafter) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let corpus = vec![vec![1, 2, 3], vec![255, 0]];
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }
}
