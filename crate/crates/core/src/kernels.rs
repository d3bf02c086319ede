//! Dense numeric kernels: matrix product, softmax, top-k and masked attention.
//!
//! Everything here is single-threaded and deterministic. Reductions use a
//! fixed lane layout (see [`dot`]) so two calls with the same inputs produce
//! bit-identical results, and one output row never depends on any other row
//! of the batch. The second property is what lets a batched tree-verification
//! pass reproduce token-by-token decoding exactly.

use crate::error::{invalid, Result};

const LANES: usize = 8;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(invalid(format!("matrix entry {pos} is not finite")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather_rows(&self, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for id in ids {
            if id >= self.rows {
                return Err(invalid(format!(
                    "row {id} out of range for matrix with {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(id));
            rows += 1;
        }
        Ok(Self {
            rows,
            cols: self.cols,
            data,
        })
    }

    /// FNV-1a over the raw bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        checksum_f32(&self.data)
    }
}

pub(crate) fn checksum_f32(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// A probability distribution produced by [`softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f32>,
}

impl ProbVector {
    #[inline]
    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.probs
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f32;

    fn index(&self, i: usize) -> &f32 {
        &self.probs[i]
    }
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

/// Inner product with a fixed eight-lane accumulation layout.
///
/// Element `i` always lands in lane `i % 8` (the tail goes to lanes
/// `0..len % 8`), and lanes are folded in a fixed tree. The order is the
/// same for every call, so the result is reproducible, while still letting
/// the compiler vectorize the main loop.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ta.iter().zip(tb).enumerate() {
        acc[l] += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    s0 + s1
}

/// Four dots against one left operand, each bitwise equal to [`dot`]. The
/// independent accumulator chains keep the FPU busy.
#[inline(always)]
fn dot4(a: &[f32], b: [&[f32]; 4]) -> [f32; 4] {
    let mut acc0 = [0.0f32; LANES];
    let mut acc1 = [0.0f32; LANES];
    let mut acc2 = [0.0f32; LANES];
    let mut acc3 = [0.0f32; LANES];
    let rows = a
        .chunks_exact(LANES)
        .zip(b[0].chunks_exact(LANES))
        .zip(b[1].chunks_exact(LANES))
        .zip(b[2].chunks_exact(LANES))
        .zip(b[3].chunks_exact(LANES));
    for ((((x, y0), y1), y2), y3) in rows {
        for l in 0..LANES {
            acc0[l] += x[l] * y0[l];
            acc1[l] += x[l] * y1[l];
            acc2[l] += x[l] * y2[l];
            acc3[l] += x[l] * y3[l];
        }
    }
    let tail = a.len() / LANES * LANES;
    let mut out = [0.0f32; 4];
    for (r, acc) in [acc0, acc1, acc2, acc3].iter_mut().enumerate() {
        for (l, i) in (tail..a.len()).enumerate() {
            acc[l] += a[i] * b[r][i];
        }
        let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
        let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
        out[r] = s0 + s1;
    }
    out
}

/// A 4x4 block of dots, each bitwise equal to [`dot`]. Every loaded chunk
/// feeds four products, which roughly halves load traffic per product.
#[inline(always)]
fn dot4x4(a: [&[f32]; 4], b: [&[f32]; 4]) -> [[f32; 4]; 4] {
    let n = a[0].len();
    let ca = a.map(|r| r.as_chunks::<LANES>().0);
    let cb = b.map(|r| r.as_chunks::<LANES>().0);
    let mut acc = [[[0.0f32; LANES]; 4]; 4];
    for k in 0..n / LANES {
        let x = [ca[0][k], ca[1][k], ca[2][k], ca[3][k]];
        let y = [cb[0][k], cb[1][k], cb[2][k], cb[3][k]];
        for i in 0..4 {
            for j in 0..4 {
                for l in 0..LANES {
                    acc[i][j][l] += x[i][l] * y[j][l];
                }
            }
        }
    }
    let tail = n / LANES * LANES;
    let mut out = [[0.0f32; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let acc = &mut acc[i][j];
            for (l, t) in (tail..n).enumerate() {
                acc[l] += a[i][t] * b[j][t];
            }
            let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
            let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
            out[i][j] = s0 + s1;
        }
    }
    out
}

/// `a · b_transposedᵀ`: entry `(i, j)` is `dot(a.row(i), b_transposed.row(j))`.
///
/// Weights are stored with one output feature per row, so this is the
/// natural shape for `H · W_LMᵀ`.
pub fn matmul(a: &Matrix, b_transposed: &Matrix) -> Result<Matrix> {
    if a.cols != b_transposed.cols {
        return Err(invalid(format!(
            "matmul inner dimension mismatch: {}x{} by ({}x{})^T",
            a.rows, a.cols, b_transposed.rows, b_transposed.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b_transposed.rows);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512vl") {
        // SAFETY: the required CPU features were just detected.
        unsafe { matmul_avx512(a, b_transposed, &mut out) };
        return Ok(out);
    }
    matmul_into(a, b_transposed, &mut out, dot4x4, dot4);
    Ok(out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,avx512f,avx512vl")]
fn matmul_avx512(a: &Matrix, b_transposed: &Matrix, out: &mut Matrix) {
    matmul_into(
        a,
        b_transposed,
        out,
        |x, y| dot_block_avx512(x, y),
        |x, y| dot_block_avx512([x], y)[0],
    );
}

/// [`dot4x4`] (or [`dot4`] for `R = 1`) with one 8-wide register per accumulator array. Each lane
/// sees the same multiply and add sequence (no fused multiply-add), so the
/// results are bitwise identical; AVX-512VL supplies the 32 registers that
/// keep all sixteen accumulators resident.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,avx512f,avx512vl")]
fn dot_block_avx512<const R: usize>(a: [&[f32]; R], b: [&[f32]; 4]) -> [[f32; 4]; R] {
    use std::arch::x86_64::*;
    let ca = a.map(|r| r.as_chunks::<LANES>().0);
    let cb = b.map(|r| r.as_chunks::<LANES>().0);
    let chunks = ca.iter().chain(&cb).map(|c| c.len()).min().unwrap_or(0);
    let load = |c: &[f32; LANES]| unsafe { _mm256_loadu_ps(c.as_ptr()) };
    let mut acc = [[_mm256_setzero_ps(); 4]; R];
    for k in 0..chunks {
        let x: [__m256; R] = std::array::from_fn(|i| load(&ca[i][k]));
        let y = [load(&cb[0][k]), load(&cb[1][k]), load(&cb[2][k]), load(&cb[3][k])];
        for i in 0..R {
            for j in 0..4 {
                acc[i][j] = _mm256_add_ps(acc[i][j], _mm256_mul_ps(x[i], y[j]));
            }
        }
    }
    let n = a[0].len();
    let tail = chunks * LANES;
    let mut out = [[0.0f32; 4]; R];
    for i in 0..R {
        for j in 0..4 {
            let mut lanes = [0.0f32; LANES];
            // SAFETY: `lanes` holds exactly one 8-wide vector.
            unsafe { _mm256_storeu_ps(lanes.as_mut_ptr(), acc[i][j]) };
            for (l, t) in (tail..n).enumerate() {
                lanes[l] += a[i][t] * b[j][t];
            }
            let s0 = (lanes[0] + lanes[4]) + (lanes[2] + lanes[6]);
            let s1 = (lanes[1] + lanes[5]) + (lanes[3] + lanes[7]);
            out[i][j] = s0 + s1;
        }
    }
    out
}

#[inline(always)]
fn matmul_into(
    a: &Matrix,
    b_transposed: &Matrix,
    out: &mut Matrix,
    block: impl Fn([&[f32]; 4], [&[f32]; 4]) -> [[f32; 4]; 4],
    row: impl Fn(&[f32], [&[f32]; 4]) -> [f32; 4],
) {
    let (m, n) = (a.rows, b_transposed.rows);
    // Stream the (possibly huge) right-hand side once; `a` stays cache resident.
    let blocked = n / 4 * 4;
    for j in (0..blocked).step_by(4) {
        let b = [
            b_transposed.row(j),
            b_transposed.row(j + 1),
            b_transposed.row(j + 2),
            b_transposed.row(j + 3),
        ];
        let mut i = 0;
        while i + 4 <= m {
            let rows = [a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)];
            for (r, d) in block(rows, b).iter().enumerate() {
                out.data[(i + r) * n + j..(i + r) * n + j + 4].copy_from_slice(d);
            }
            i += 4;
        }
        for i in i..m {
            let d = row(a.row(i), b);
            out.data[i * n + j..i * n + j + 4].copy_from_slice(&d);
        }
    }
    for j in blocked..n {
        let bj = b_transposed.row(j);
        for i in 0..m {
            out.data[i * n + j] = dot(a.row(i), bj);
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax / top-k
// ---------------------------------------------------------------------------

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(pos) => Err(invalid(format!("value at index {pos} is not finite"))),
        None => Ok(()),
    }
}

fn check_temperature(temperature: f32) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f32], temperature: f32) -> Result<ProbVector> {
    check_temperature(temperature)?;
    check_finite(logits)?;
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let inv_t = 1.0 / temperature;
    let max = logits
        .iter()
        .map(|&x| x * inv_t)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut probs: Vec<f32> = logits.iter().map(|&x| (x * inv_t - max).exp()).collect();
    let sum: f32 = probs.iter().sum();
    let inv = 1.0 / sum;
    for p in &mut probs {
        *p *= inv;
    }
    Ok(ProbVector { probs })
}

/// `ln Σ exp(x)`, accumulated in `f64`. Subtracting this from a logit gives
/// its log-probability at temperature 1.
pub fn logsumexp(values: &[f32]) -> Result<f64> {
    check_finite(values)?;
    if values.is_empty() {
        return Err(invalid("logsumexp of an empty vector"));
    }
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = values.iter().map(|&x| f64::from((x - max).exp())).sum();
    Ok(f64::from(max) + sum.ln())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn ranks_before(a: (usize, f32), b: (usize, f32)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// The `k` largest entries as `(index, value)`, largest first, equal values
/// in ascending index order.
pub fn topk(values: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if k == 0 || k > values.len() {
        return Err(invalid(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            values.len()
        )));
    }
    check_finite(values)?;
    if k <= 64 {
        // Bounded insertion buffer; the common drafting case has k <= 16.
        let mut best: Vec<(usize, f32)> = Vec::with_capacity(k + 1);
        for (i, &v) in values.iter().enumerate() {
            if best.len() == k && !ranks_before((i, v), best[k - 1]) {
                continue;
            }
            let pos = best
                .iter()
                .position(|&b| ranks_before((i, v), b))
                .unwrap_or(best.len());
            best.insert(pos, (i, v));
            best.truncate(k);
        }
        return Ok(best);
    }
    let mut all: Vec<(usize, f32)> = values.iter().copied().enumerate().collect();
    let order = |a: &(usize, f32), b: &(usize, f32)| {
        b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
    };
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_unstable_by(order);
    Ok(all)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Per-query bitset over key positions. Bit `k` of query `q` set means `q`
/// may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask {
    queries: usize,
    keys: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl KeyMask {
    /// A mask that allows nothing.
    pub fn empty(queries: usize, keys: usize) -> Self {
        let words_per_row = keys.div_ceil(64);
        Self {
            queries,
            keys,
            words_per_row,
            bits: vec![0; queries * words_per_row],
        }
    }

    /// Causal mask where the queries are the last `queries` of `keys` positions.
    pub fn causal(queries: usize, keys: usize) -> Result<Self> {
        if queries > keys {
            return Err(invalid(format!(
                "causal mask with {queries} queries over only {keys} keys"
            )));
        }
        let mut mask = Self::empty(queries, keys);
        let offset = keys - queries;
        for q in 0..queries {
            mask.allow_range(q, 0..offset + q + 1);
        }
        Ok(mask)
    }

    #[inline]
    pub fn queries(&self) -> usize {
        self.queries
    }

    #[inline]
    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allow(&mut self, query: usize, key: usize) {
        assert!(query < self.queries && key < self.keys);
        self.bits[query * self.words_per_row + key / 64] |= 1 << (key % 64);
    }

    pub fn allow_range(&mut self, query: usize, keys: std::ops::Range<usize>) {
        for key in keys {
            self.allow(query, key);
        }
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.bits[query * self.words_per_row + key / 64] >> (key % 64) & 1 == 1
    }

    /// Number of keys visible to `query`.
    pub fn count(&self, query: usize) -> usize {
        let row = &self.bits[query * self.words_per_row..(query + 1) * self.words_per_row];
        row.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// One query row: softmax over the given keys (ascending order), then the
/// weighted sum of their values.
fn attend_row(
    q_row: &[f32],
    k: &Matrix,
    v: &Matrix,
    scale: f32,
    keys: impl Iterator<Item = usize>,
    scores: &mut Vec<(usize, f32)>,
    out: &mut [f32],
) {
    scores.clear();
    scores.extend(keys.map(|j| (j, dot(q_row, k.row(j)) * scale)));
    let max = scores
        .iter()
        .fold(f32::NEG_INFINITY, |m, &(_, s)| m.max(s));
    let mut sum = 0.0f32;
    for (_, s) in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    out.fill(0.0);
    for &(j, w) in scores.iter() {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += w * x;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn check_attention_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols != k.cols {
        return Err(invalid(format!(
            "query width {} != key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(invalid(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    Ok(())
}

/// Scaled dot-product attention restricted by `mask`. Weights are exactly
/// zero on masked-out keys and renormalize over the allowed ones.
pub fn masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &KeyMask) -> Result<Matrix> {
    check_attention_shapes(q, k, v)?;
    if mask.queries != q.rows || mask.keys != k.rows {
        return Err(invalid(format!(
            "mask is {}x{} but attention is {}x{}",
            mask.queries, mask.keys, q.rows, k.rows
        )));
    }
    if let Some(row) = (0..q.rows).find(|&i| mask.count(i) == 0) {
        return Err(invalid(format!("query {row} is fully masked")));
    }
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut scores = Vec::new();
    for i in 0..q.rows {
        let keys = (0..k.rows).filter(|&j| mask.allows(i, j));
        attend_row(q.row(i), k, v, scale, keys, &mut scores, out.row_mut(i));
    }
    Ok(out)
}

/// Plain causal attention; the queries are the last `q.rows()` key positions.
pub fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_shapes(q, k, v)?;
    if q.rows > k.rows {
        return Err(invalid("more queries than keys in causal attention"));
    }
    let offset = k.rows - q.rows;
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut scores = Vec::new();
    for i in 0..q.rows {
        attend_row(q.row(i), k, v, scale, 0..offset + i + 1, &mut scores, out.row_mut(i));
    }
    Ok(out)
}
