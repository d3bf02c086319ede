//! Seeded toy decoder-only transformers.
//!
//! [`TargetModel`] is a pre-norm stack of `L` blocks (RMSNorm, rotary
//! multi-head attention, 4d SiLU MLP) between an embedding and an LM head.
//! [`DraftModel`] is a single such block that shares the target's embedding,
//! final norm and LM head by reference.
//!
//! Every forward pass appends its tokens to a [`KvCache`]. Tokens may be
//! placed as a tree (see [`TreeMask`]): each tree token attends to the cached
//! prefix, to any causal tokens in front of it, and to its own ancestors, and
//! is rotated with position `anchor + depth`. A linear chain therefore sees
//! exactly what sequential decoding would, and produces the same numbers.

mod cache;
mod checkpoint;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::kernels::{dot, masked_attention, matmul, KeyMask, Matrix};
use crate::profiler::{Component, Profiler};
use crate::verification::TreeMask;
use crate::vocab::RestrictedHead;

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-5;
const ROPE_BASE: f32 = 10_000.0;

/// Shape and seed of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(invalid("vocab_size must fit in u32 token ids"));
        }
        if self.num_layers < 1 {
            return Err(invalid("num_layers must be at least 1"));
        }
        if self.num_heads < 1 || self.hidden_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid("rotary embeddings need an even head dimension"));
        }
        if self.max_seq_len < 1 {
            return Err(invalid("max_seq_len must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// Token ids checked against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&t| t as usize >= vocab_size) {
            return Err(invalid(format!(
                "token {} at index {pos} is outside vocabulary of size {vocab_size}",
                ids[pos]
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

/// One pre-norm transformer block. Projections are stored one output
/// feature per row, the layout [`matmul`] expects.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    fn random(config: &ModelConfig, rng: &mut ChaCha8Rng, normal: &Normal<f32>) -> Self {
        let d = config.hidden_dim;
        let f = config.mlp_dim();
        let mut gauss = |rows, cols| gaussian_matrix(rows, cols, rng, normal);
        let wq = gauss(d, d);
        let wk = gauss(d, d);
        let wv = gauss(d, d);
        let wo = gauss(d, d);
        let w_up = gauss(f, d);
        let w_down = gauss(d, f);
        Self {
            attn_norm: vec![1.0; d],
            wq,
            wk,
            wv,
            wo,
            mlp_norm: vec![1.0; d],
            w_up,
            w_down,
        }
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    fn checksum_into(&self, acc: &mut Vec<u64>) {
        acc.push(crate::kernels::checksum_f32(&self.attn_norm));
        for m in [&self.wq, &self.wk, &self.wv, &self.wo] {
            acc.push(m.checksum());
        }
        acc.push(crate::kernels::checksum_f32(&self.mlp_norm));
        acc.push(self.w_up.checksum());
        acc.push(self.w_down.checksum());
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng, normal: &Normal<f32>) -> Matrix {
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}

fn fold_checksums(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in parts.iter().flat_map(|p| p.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Which rows of a forward pass get projected through the LM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    /// No logits; project rows later with [`TargetModel::logits_for`].
    Deferred,
}

/// Final-norm hidden states for every input row, and logits for the
/// requested rows.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
}

/// LM head used by a draft forward.
#[derive(Debug, Clone, Copy)]
pub enum Head<'a> {
    Full,
    Restricted(&'a RestrictedHead),
}

impl Head<'_> {
    /// Restricted-head row index → full-vocabulary token id.
    #[inline]
    pub fn token_id(&self, index: usize) -> u32 {
        match self {
            Head::Full => index as u32,
            Head::Restricted(h) => h.subset().restricted_to_full()[index],
        }
    }

    pub fn width(&self, vocab_size: usize) -> usize {
        match self {
            Head::Full => vocab_size,
            Head::Restricted(h) => h.matrix().rows(),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared forward machinery
// ---------------------------------------------------------------------------

struct Stack<'a> {
    config: &'a ModelConfig,
    embedding: &'a Matrix,
    layers: &'a [LayerWeights],
    final_norm: &'a [f32],
}

fn rms_norm_rows(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let scale = 1.0 / (dot(row, row) / d + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * scale * g;
        }
    }
    out
}

fn apply_rope(x: &mut Matrix, positions: &[u32], heads: usize) {
    let dh = x.cols() / heads;
    let half = dh / 2;
    let inv_freq: Vec<f32> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f32 / dh as f32))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(r);
        for (i, f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (pos as f32 * f).sin_cos();
            for h in 0..heads {
                let a = h * dh + i;
                let b = a + half;
                let (xa, xb) = (row[a], row[b]);
                row[a] = xa * cos - xb * sin;
                row[b] = xa * sin + xb * cos;
            }
        }
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl Stack<'_> {
    /// Runs the stack over `tokens`, appending them to `cache`. `mask` rows
    /// are the new tokens, its columns every key after the append.
    fn run(
        &self,
        tokens: &[u32],
        positions: &[u32],
        mask: &KeyMask,
        cache: &mut KvCache,
        prof: &mut Profiler,
    ) -> Result<Matrix> {
        let n = tokens.len();
        let start = cache.len();
        cache.check_room(n)?;
        debug_assert_eq!(mask.keys(), start + n);
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(invalid(format!("token {t} outside vocabulary")));
        }

        let mut x = prof.time(Component::Embedding, || {
            self.embedding
                .gather_rows(tokens.iter().map(|&t| t as usize))
        })?;
        for (li, layer) in self.layers.iter().enumerate() {
            prof.time(Component::TransformerLayer, || {
                self.block(li, layer, &mut x, positions, mask, cache, start)
            })?;
        }
        cache.commit(positions);
        Ok(rms_norm_rows(&x, self.final_norm))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        li: usize,
        layer: &LayerWeights,
        x: &mut Matrix,
        positions: &[u32],
        mask: &KeyMask,
        cache: &mut KvCache,
        start: usize,
    ) -> Result<()> {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let n = x.rows();
        let nk = start + n;

        let xn = rms_norm_rows(x, &layer.attn_norm);
        let mut q = matmul(&xn, &layer.wq)?;
        let mut k = matmul(&xn, &layer.wk)?;
        let v = matmul(&xn, &layer.wv)?;
        apply_rope(&mut q, positions, heads);
        apply_rope(&mut k, positions, heads);
        for r in 0..n {
            cache.write(li, start + r, k.row(r), v.row(r));
        }

        let mut attn = Matrix::zeros(n, self.config.hidden_dim);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut qh = Matrix::zeros(n, dh);
            for r in 0..n {
                qh.row_mut(r).copy_from_slice(&q.row(r)[cols.clone()]);
            }
            let mut kh = Matrix::zeros(nk, dh);
            let mut vh = Matrix::zeros(nk, dh);
            for j in 0..nk {
                kh.row_mut(j).copy_from_slice(&cache.key(li, j)[cols.clone()]);
                vh.row_mut(j).copy_from_slice(&cache.value(li, j)[cols.clone()]);
            }
            let out = masked_attention(&qh, &kh, &vh, mask)?;
            for r in 0..n {
                attn.row_mut(r)[cols.clone()].copy_from_slice(out.row(r));
            }
        }
        let o = matmul(&attn, &layer.wo)?;
        add_assign(x, &o);

        let xn = rms_norm_rows(x, &layer.mlp_norm);
        let mut up = matmul(&xn, &layer.w_up)?;
        for u in up.data_mut() {
            *u = silu(*u);
        }
        let down = matmul(&up, &layer.w_down)?;
        add_assign(x, &down);
        Ok(())
    }
}

fn add_assign(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// Attention mask and position ids for appending `n` tokens to a cache of
/// length `cached`, the last `tree.len()` of which form a draft tree.
pub(crate) fn placement(
    cache: &KvCache,
    n: usize,
    tree: Option<&TreeMask>,
) -> Result<(KeyMask, Vec<u32>)> {
    let t = tree.map_or(0, TreeMask::len);
    if t > n {
        return Err(invalid(format!("tree mask covers {t} nodes but only {n} tokens given")));
    }
    let cached = cache.len();
    let causal = n - t;
    let keys = cached + n;
    let mut mask = KeyMask::empty(n, keys);
    let next = cache.next_position();
    let mut positions = Vec::with_capacity(n);
    for b in 0..causal {
        mask.allow_range(b, 0..cached + b + 1);
        positions.push(next + b as u32);
    }
    if let Some(tree) = tree {
        let tree_start = cached + causal;
        // the token right before the tree region sits at `next + causal - 1`
        let anchor = i64::from(next) + causal as i64 - 1;
        for i in 0..t {
            let q = causal + i;
            mask.allow_range(q, 0..tree_start);
            for j in 0..=i {
                if tree.sees(i, j) {
                    mask.allow(q, tree_start + j);
                }
            }
            let pos = anchor + tree.depth(i) as i64;
            positions.push(u32::try_from(pos).map_err(|_| invalid("negative tree position"))?);
        }
    }
    Ok((mask, positions))
}

fn project(hidden: &Matrix, head: &Matrix, rows: LogitRows) -> Result<Matrix> {
    match rows {
        LogitRows::All => matmul(hidden, head),
        LogitRows::Last => {
            let last = hidden
                .rows()
                .checked_sub(1)
                .ok_or_else(|| invalid("no rows to project"))?;
            matmul(&hidden.gather_rows([last])?, head)
        }
        LogitRows::Deferred => Ok(Matrix::zeros(0, head.rows())),
    }
}

// ---------------------------------------------------------------------------
// Target
// ---------------------------------------------------------------------------

/// The full model whose output distribution speculative decoding preserves.
#[derive(Debug, Clone)]
pub struct TargetModel {
    config: ModelConfig,
    embedding: Arc<Matrix>,
    layers: Vec<LayerWeights>,
    final_norm: Arc<Vec<f32>>,
    lm_head: Arc<Matrix>,
}

impl TargetModel {
    /// Gaussian(0, 0.02) weights from `config.seed`, identity norms.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let (v, d) = (config.vocab_size, config.hidden_dim);
        let embedding = gaussian_matrix(v, d, &mut rng, &normal);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights::random(&config, &mut rng, &normal))
            .collect();
        let lm_head = gaussian_matrix(v, d, &mut rng, &normal);
        Ok(Self {
            config,
            embedding: Arc::new(embedding),
            layers,
            final_norm: Arc::new(vec![1.0; d]),
            lm_head: Arc::new(lm_head),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        embedding: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
        lm_head: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden_dim);
        let f = config.mlp_dim();
        let shape_ok = |m: &Matrix, r, c| m.rows() == r && m.cols() == c;
        let layers_ok = layers.len() == config.num_layers
            && layers.iter().all(|l| {
                l.attn_norm.len() == d
                    && l.mlp_norm.len() == d
                    && [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|m| shape_ok(m, d, d))
                    && shape_ok(&l.w_up, f, d)
                    && shape_ok(&l.w_down, d, f)
            });
        if !shape_ok(&embedding, v, d) || !shape_ok(&lm_head, v, d) || final_norm.len() != d || !layers_ok {
            return Err(invalid("weight shapes do not match the model config"));
        }
        Ok(Self {
            config,
            embedding: Arc::new(embedding),
            layers,
            final_norm: Arc::new(final_norm),
            lm_head: Arc::new(lm_head),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    /// Checksum over every weight, in checkpoint order.
    pub fn checksum(&self) -> u64 {
        let mut parts = vec![self.embedding.checksum()];
        for l in &self.layers {
            l.checksum_into(&mut parts);
        }
        parts.push(crate::kernels::checksum_f32(&self.final_norm));
        parts.push(self.lm_head.checksum());
        fold_checksums(&parts)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(
            self.config.num_layers,
            self.config.hidden_dim,
            self.config.max_seq_len,
        )
    }

    fn stack(&self) -> Stack<'_> {
        Stack {
            config: &self.config,
            embedding: &self.embedding,
            layers: &self.layers,
            final_norm: &self.final_norm,
        }
    }

    /// Forward pass with logits for every row.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        tree: Option<&TreeMask>,
    ) -> Result<ForwardOutput> {
        self.forward_rows(tokens, cache, tree, LogitRows::All)
    }

    pub fn forward_rows(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        tree: Option<&TreeMask>,
        rows: LogitRows,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(invalid("forward pass needs at least one token"));
        }
        let (mask, positions) = placement(cache, tokens.len(), tree)?;
        let hidden = self
            .stack()
            .run(tokens, &positions, &mask, cache, &mut Profiler::disabled())?;
        let logits = project(&hidden, &self.lm_head, rows)?;
        Ok(ForwardOutput { hidden, logits })
    }

    /// Logits of one final-norm hidden row, bitwise equal to the row a
    /// full forward would produce.
    pub fn logits_for(&self, hidden: &Matrix, row: usize) -> Result<Vec<f32>> {
        if row >= hidden.rows() {
            return Err(invalid(format!("hidden row {row} out of range")));
        }
        Ok(matmul(&hidden.gather_rows([row])?, &self.lm_head)?.into_data())
    }

    /// Appends `tokens` to the cache without computing logits.
    pub fn prefill(&self, tokens: &[u32], cache: &mut KvCache) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let (mask, positions) = placement(cache, tokens.len(), None)?;
        self.stack()
            .run(tokens, &positions, &mask, cache, &mut Profiler::disabled())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Draft
// ---------------------------------------------------------------------------

/// How the draft block is derived from the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftMode {
    /// Exact copy of the target's first block.
    Truncated,
    /// First block plus seeded Gaussian noise on every projection. The
    /// noise standard deviation is `noise_scale` times the init std, so a
    /// scale of 1 is as large as the weights themselves.
    Perturbed,
}

/// Single-block draft model sharing the target's embedding, final norm and
/// LM head.
#[derive(Debug, Clone)]
pub struct DraftModel {
    config: ModelConfig,
    layer: LayerWeights,
    embedding: Arc<Matrix>,
    final_norm: Arc<Vec<f32>>,
    lm_head: Arc<Matrix>,
}

impl DraftModel {
    pub fn build(target: &TargetModel, mode: DraftMode, noise_scale: f32, seed: u64) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(invalid(format!(
                "noise_scale must be a nonnegative finite number, got {noise_scale}"
            )));
        }
        let mut layer = target.layers[0].clone();
        if mode == DraftMode::Perturbed && noise_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, noise_scale * INIT_STD).expect("valid std");
            for m in layer.matrices_mut() {
                for w in m.data_mut() {
                    *w += normal.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            config: target.config,
            layer,
            embedding: Arc::clone(&target.embedding),
            final_norm: Arc::clone(&target.final_norm),
            lm_head: Arc::clone(&target.lm_head),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self) -> &LayerWeights {
        &self.layer
    }

    pub fn layer_mut(&mut self) -> &mut LayerWeights {
        &mut self.layer
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    /// True when embedding, final norm and LM head are the target's own storage.
    pub fn shares_parameters_with(&self, target: &TargetModel) -> bool {
        Arc::ptr_eq(&self.embedding, &target.embedding)
            && Arc::ptr_eq(&self.final_norm, &target.final_norm)
            && Arc::ptr_eq(&self.lm_head, &target.lm_head)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(1, self.config.hidden_dim, self.config.max_seq_len)
    }

    fn stack(&self) -> Stack<'_> {
        Stack {
            config: &self.config,
            embedding: &self.embedding,
            layers: std::slice::from_ref(&self.layer),
            final_norm: &self.final_norm,
        }
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        tree: Option<&TreeMask>,
        head: Head<'_>,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(invalid("forward pass needs at least one token"));
        }
        let (mask, positions) = placement(cache, tokens.len(), tree)?;
        self.forward_placed(
            tokens,
            &positions,
            &mask,
            cache,
            head,
            LogitRows::All,
            &mut Profiler::disabled(),
        )
    }

    /// Forward with an explicit attention mask and position ids.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_placed(
        &self,
        tokens: &[u32],
        positions: &[u32],
        mask: &KeyMask,
        cache: &mut KvCache,
        head: Head<'_>,
        rows: LogitRows,
        prof: &mut Profiler,
    ) -> Result<ForwardOutput> {
        let hidden = self.stack().run(tokens, positions, mask, cache, prof)?;
        let weights = match head {
            Head::Full => &*self.lm_head,
            Head::Restricted(h) => h.matrix(),
        };
        if weights.cols() != self.config.hidden_dim {
            return Err(invalid("restricted head width does not match the model"));
        }
        let logits = prof.time(Component::LmHead, || project(&hidden, weights, rows))?;
        Ok(ForwardOutput { hidden, logits })
    }

    pub fn prefill(&self, tokens: &[u32], cache: &mut KvCache) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let (mask, positions) = placement(cache, tokens.len(), None)?;
        self.stack()
            .run(tokens, &positions, &mask, cache, &mut Profiler::disabled())?;
        Ok(())
    }
}
