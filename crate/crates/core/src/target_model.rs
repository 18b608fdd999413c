//! The frozen verifier: a small pre-norm decoder-only transformer with rotary
//! position embeddings driven by explicit per-token position ids, arbitrary
//! attention masks, and a rollback-capable key/value cache.
//!
//! The last vocabulary id (`vocab_size - 1`) is the reserved `[SPEC]` token.
//! Its embedding row is the only parameter that training may change.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot_f32, gelu, Matrix};
use crate::weight_file::{TensorRecord, WeightFile, FORMAT_VERSION};

pub const MODEL_MAGIC: &[u8; 4] = b"SPDL";
pub const RMS_NORM_EPS: f64 = 1e-5;
pub const ROPE_THETA: f64 = 10_000.0;
/// MLP hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TargetConfig {
    /// Vocabulary size including the trailing `[SPEC]` row.
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 257,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            max_positions: 256,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if self.hidden_size == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::InvalidConfig(
                "hidden_size, num_layers and num_heads must be nonzero".into(),
            ));
        }
        if self.hidden_size % self.num_heads != 0 || (self.hidden_size / self.num_heads) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_size {} must split into {} heads of even width",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn spec_token(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn mlp_width(&self) -> usize {
        self.hidden_size * MLP_RATIO
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    config: TargetConfig,
    embed: Matrix,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    lm_head: Matrix,
}

/// Per-query visibility over cache keys.
///
/// Key indices are absolute positions in the cache *after* the new tokens are
/// appended, so query `i` of a call that starts at cache length `base` owns key
/// `base + i`.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    /// Query `i` sees every key up to and including its own.
    Causal,
    /// Query `i` sees keys `0..prefix` plus `rows[i]` (strictly ascending,
    /// all `>= prefix`, containing its own key).
    Explicit { prefix: usize, rows: Vec<Vec<usize>> },
}

impl AttentionMask {
    pub fn query_count(&self) -> Option<usize> {
        match self {
            AttentionMask::Causal => None,
            AttentionMask::Explicit { rows, .. } => Some(rows.len()),
        }
    }

    /// Absolute key indices visible to query `i`.
    pub fn visible(&self, base: usize, i: usize) -> Vec<usize> {
        match self {
            AttentionMask::Causal => (0..=base + i).collect(),
            AttentionMask::Explicit { prefix, rows } => {
                (0..*prefix).chain(rows[i].iter().copied()).collect()
            }
        }
    }

    fn validate(&self, base: usize, n: usize) -> Result<()> {
        let AttentionMask::Explicit { prefix, rows } = self else {
            return Ok(());
        };
        if rows.len() != n {
            return Err(Error::InvalidMask(format!(
                "{} mask rows for {n} queries",
                rows.len()
            )));
        }
        if *prefix > base {
            return Err(Error::InvalidMask(format!(
                "shared prefix {prefix} exceeds cache length {base}"
            )));
        }
        let limit = base + n;
        for (i, row) in rows.iter().enumerate() {
            if let Some(&bad) = row.iter().find(|&&k| k >= limit) {
                return Err(Error::InvalidMask(format!(
                    "query {i} references key {bad} >= cache length + query count ({limit})"
                )));
            }
            if row.iter().any(|&k| k < *prefix) {
                return Err(Error::InvalidMask(format!(
                    "query {i} lists a key inside the shared prefix"
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMask(format!(
                    "query {i} keys are not strictly ascending"
                )));
            }
            if row.binary_search(&(base + i)).is_err() {
                return Err(Error::InvalidMask(format!("query {i} does not see itself")));
            }
        }
        Ok(())
    }
}

/// Key/value store. Keys are stored after rotary rotation, so an entry's
/// contribution depends only on its own position id, not on its slot.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<u32>,
    tokens: Vec<u32>,
}

impl KvCache {
    pub fn new(config: &TargetConfig) -> Self {
        Self {
            width: config.hidden_size,
            keys: vec![Vec::new(); config.num_layers],
            values: vec![Vec::new(); config.num_layers],
            positions: Vec::new(),
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn contains_token(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }

    /// Rotated key row `index` of `layer`.
    pub fn key(&self, layer: usize, index: usize) -> &[f32] {
        &self.keys[layer][index * self.width..(index + 1) * self.width]
    }

    pub fn value(&self, layer: usize, index: usize) -> &[f32] {
        &self.values[layer][index * self.width..(index + 1) * self.width]
    }

    /// Drops every entry at or beyond `new_len`.
    pub fn rollback(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len() {
            return Err(Error::RollbackBeyondLength {
                requested: new_len,
                len: self.len(),
            });
        }
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            layer.truncate(new_len * self.width);
        }
        self.positions.truncate(new_len);
        self.tokens.truncate(new_len);
        Ok(())
    }

    /// Keeps entries `0..keep` followed by the entries at `extra` (strictly
    /// ascending, all `>= keep`), discarding everything else.
    pub fn compact(&mut self, keep: usize, extra: &[usize]) -> Result<()> {
        if keep > self.len() || extra.iter().any(|&i| i < keep || i >= self.len()) {
            return Err(Error::RollbackBeyondLength {
                requested: keep,
                len: self.len(),
            });
        }
        if extra.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidMask("compaction indices must ascend".into()));
        }
        let w = self.width;
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            for (slot, &src) in extra.iter().enumerate() {
                let dst = keep + slot;
                if dst != src {
                    layer.copy_within(src * w..(src + 1) * w, dst * w);
                }
            }
            layer.truncate((keep + extra.len()) * w);
        }
        for (slot, &src) in extra.iter().enumerate() {
            self.positions[keep + slot] = self.positions[src];
            self.tokens[keep + slot] = self.tokens[src];
        }
        self.positions.truncate(keep + extra.len());
        self.tokens.truncate(keep + extra.len());
        Ok(())
    }
}

/// Final-layer hidden states (after the final norm) and LM-head logits, one
/// row per input token.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v as f64 * inv * g as f64) as f32)
        .collect()
}

/// Rotates consecutive pairs within each head by `position · θ^(-2j/head_dim)`.
pub fn apply_rotary(x: &mut [f32], position: u32, head_dim: usize) {
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for j in 0..half {
            let freq = ROPE_THETA.powf(-2.0 * j as f64 / head_dim as f64);
            let (sin, cos) = (position as f64 * freq).sin_cos();
            let a = head[2 * j] as f64;
            let b = head[2 * j + 1] as f64;
            head[2 * j] = (a * cos - b * sin) as f32;
            head[2 * j + 1] = (a * sin + b * cos) as f32;
        }
    }
}

struct SeededInit {
    rng: ChaCha8Rng,
}

impl SeededInit {
    /// Uniform on `[-scale, scale)`: `scale · (2u - 1)` with `u = (next_u32 >> 8) / 2^24`.
    fn uniform(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let u = (self.rng.next_u32() >> 8) as f64 / (1u32 << 24) as f64;
                (scale * (2.0 * u - 1.0)) as f32
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    }
}

impl TargetModel {
    /// Deterministic initialization from a seed.
    ///
    /// A ChaCha8 stream seeded with `seed` fills tensors in file order
    /// (`embed`, per layer `wq wk wv wo w_up w_down`, then `lm_head`), each
    /// element uniform on `[-s, s)` with `s = 1` for the embedding and
    /// `s = sqrt(3 / fan_in)` elsewhere. Norm gains start at 1.
    pub fn seeded(config: TargetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let m = config.mlp_width();
        let mut init = SeededInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let proj = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let embed = init.uniform(config.vocab_size, d, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                wq: init.uniform(d, d, proj(d)),
                wk: init.uniform(d, d, proj(d)),
                wv: init.uniform(d, d, proj(d)),
                wo: init.uniform(d, d, proj(d)),
                mlp_norm: vec![1.0; d],
                w_up: init.uniform(m, d, proj(d)),
                w_down: init.uniform(d, m, proj(m)),
            })
            .collect();
        let lm_head = init.uniform(config.vocab_size, d, proj(d));
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
        })
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn spec_token(&self) -> u32 {
        self.config.spec_token()
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    pub fn spec_embedding(&self) -> &[f32] {
        self.embed.row(self.config.vocab_size - 1)
    }

    /// Replaces the `[SPEC]` embedding row, the model's only trainable parameter.
    pub fn set_spec_embedding(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.config.hidden_size {
            return Err(Error::DimensionMismatch {
                what: "[SPEC] embedding",
                expected: self.config.hidden_size,
                actual: row.len(),
            });
        }
        let spec = self.config.vocab_size - 1;
        self.embed.row_mut(spec).copy_from_slice(row);
        Ok(())
    }

    pub fn with_spec_embedding(&self, row: &[f32]) -> Result<Self> {
        let mut m = self.clone();
        m.set_spec_embedding(row)?;
        Ok(m)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }

    /// Greedy next token: argmax over the real vocabulary (never `[SPEC]`),
    /// ties to the lower id.
    pub fn greedy_token(&self, logits: &[f32]) -> u32 {
        argmax(&logits[..self.config.vocab_size - 1]) as u32
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let c = &self.config;
        let d = c.hidden_size as u32;
        let m = c.mlp_width() as u32;
        let mat = |name: String, w: &Matrix| {
            TensorRecord::new(name, vec![w.rows() as u32, w.cols() as u32], w.data().to_vec())
        };
        let mut tensors = vec![mat("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            tensors.push(TensorRecord::new(format!("{p}.attn_norm"), vec![d], layer.attn_norm.clone()));
            tensors.push(mat(format!("{p}.wq"), &layer.wq));
            tensors.push(mat(format!("{p}.wk"), &layer.wk));
            tensors.push(mat(format!("{p}.wv"), &layer.wv));
            tensors.push(mat(format!("{p}.wo"), &layer.wo));
            tensors.push(TensorRecord::new(format!("{p}.mlp_norm"), vec![d], layer.mlp_norm.clone()));
            debug_assert_eq!(layer.w_up.rows() as u32, m);
            tensors.push(mat(format!("{p}.w_up"), &layer.w_up));
            tensors.push(mat(format!("{p}.w_down"), &layer.w_down));
        }
        tensors.push(TensorRecord::new("final_norm", vec![d], self.final_norm.clone()));
        tensors.push(mat("lm_head".into(), &self.lm_head));
        WeightFile {
            magic: *MODEL_MAGIC,
            version: FORMAT_VERSION,
            header: [
                c.vocab_size as u32,
                c.hidden_size as u32,
                c.num_layers as u32,
                c.num_heads as u32,
                c.max_positions as u32,
            ],
            tensors,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if &file.magic != MODEL_MAGIC {
            return Err(Error::MalformedHeader("not a target-model weight file".into()));
        }
        let [v, d, l, h, p] = file.header.map(|x| x as usize);
        let config = TargetConfig {
            vocab_size: v,
            hidden_size: d,
            num_layers: l,
            num_heads: h,
            max_positions: p,
        };
        config
            .validate()
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let m = config.mlp_width();
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, file.expect(name, &[rows, cols])?.to_vec())
        };
        let vec1 = |name: &str| -> Result<Vec<f32>> { Ok(file.expect(name, &[d])?.to_vec()) };
        let layers = (0..l)
            .map(|i| {
                let p = format!("layers.{i}");
                Ok(Layer {
                    attn_norm: vec1(&format!("{p}.attn_norm"))?,
                    wq: mat(&format!("{p}.wq"), d, d)?,
                    wk: mat(&format!("{p}.wk"), d, d)?,
                    wv: mat(&format!("{p}.wv"), d, d)?,
                    wo: mat(&format!("{p}.wo"), d, d)?,
                    mlp_norm: vec1(&format!("{p}.mlp_norm"))?,
                    w_up: mat(&format!("{p}.w_up"), m, d)?,
                    w_down: mat(&format!("{p}.w_down"), d, m)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embed: mat("embed", v, d)?,
            layers,
            final_norm: vec1("final_norm")?,
            lm_head: mat("lm_head", v, d)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path, MODEL_MAGIC)?)
    }

    /// Runs `tokens` at `positions` against `cache` under `mask`, appending
    /// one cache entry per token.
    pub fn forward(
        &self,
        cache: &mut KvCache,
        tokens: &[u32],
        positions: &[u32],
        mask: &AttentionMask,
    ) -> Result<ForwardOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput("forward tokens"));
        }
        if positions.len() != n {
            return Err(Error::DimensionMismatch {
                what: "position ids",
                expected: n,
                actual: positions.len(),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        if cache.width != self.config.hidden_size || cache.keys.len() != self.layers.len() {
            return Err(Error::InvalidConfig("cache does not match model".into()));
        }
        let base = cache.len();
        mask.validate(base, n)?;

        let d = self.config.hidden_size;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embed.row(t as usize).to_vec())
            .collect();

        for (li, layer) in self.layers.iter().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                let a = rms_norm(xi, &layer.attn_norm);
                let mut k = layer.wk.matvec(&a)?;
                apply_rotary(&mut k, positions[i], hd);
                let v = layer.wv.matvec(&a)?;
                cache.keys[li].extend_from_slice(&k);
                cache.values[li].extend_from_slice(&v);
            }
            let mut attn_out = Vec::with_capacity(n);
            for (i, xi) in x.iter().enumerate() {
                let a = rms_norm(xi, &layer.attn_norm);
                let mut q = layer.wq.matvec(&a)?;
                apply_rotary(&mut q, positions[i], hd);
                let visible = mask.visible(base, i);
                let mut out = vec![0f32; d];
                let mut scores = vec![0f64; visible.len()];
                for h in 0..self.config.num_heads {
                    let span = h * hd..(h + 1) * hd;
                    let qh = &q[span.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (s, &j) in scores.iter_mut().zip(&visible) {
                        *s = dot_f32(qh, &cache.key(li, j)[span.clone()]) * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let mut acc = vec![0f64; hd];
                    for (&p, &j) in scores.iter().zip(&visible) {
                        let w = p / total;
                        for (a, &v) in acc.iter_mut().zip(&cache.value(li, j)[span.clone()]) {
                            *a += w * v as f64;
                        }
                    }
                    for (o, a) in out[span].iter_mut().zip(acc) {
                        *o = a as f32;
                    }
                }
                attn_out.push(out);
            }
            for (xi, o) in x.iter_mut().zip(&attn_out) {
                let proj = layer.wo.matvec_f64(o);
                for (v, p) in xi.iter_mut().zip(proj) {
                    *v = (*v as f64 + p) as f32;
                }
                let b = rms_norm(xi, &layer.mlp_norm);
                let up: Vec<f32> = layer
                    .w_up
                    .matvec_f64(&b)
                    .into_iter()
                    .map(|u| gelu(u) as f32)
                    .collect();
                let down = layer.w_down.matvec_f64(&up);
                for (v, p) in xi.iter_mut().zip(down) {
                    *v = (*v as f64 + p) as f32;
                }
            }
        }

        cache.positions.extend_from_slice(positions);
        cache.tokens.extend_from_slice(tokens);

        let hidden: Vec<Vec<f32>> = x.iter().map(|xi| rms_norm(xi, &self.final_norm)).collect();
        let logits = hidden
            .iter()
            .map(|h| self.lm_head.matvec(h))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            hidden: Matrix::from_rows(hidden)?,
            logits: Matrix::from_rows(logits)?,
        })
    }

    /// Causal forward of `tokens` continuing at the cache's next position.
    pub fn forward_causal(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<ForwardOutput> {
        let start = cache.positions().last().map_or(0, |&p| p + 1);
        let positions: Vec<u32> = (0..tokens.len() as u32).map(|i| start + i).collect();
        self.forward(cache, tokens, &positions, &AttentionMask::Causal)
    }
}
