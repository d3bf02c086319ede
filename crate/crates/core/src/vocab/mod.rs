//! Corpus token statistics and frequency-ranked vocabulary subsets.
//!
//! The pipeline is: stream token ids into a [`FrequencyTable`], rank ids by
//! count into a [`RankedSubset`], and gather the matching LM-head rows into a
//! [`RestrictedHead`] that the draft model projects onto instead of the full
//! vocabulary.

mod files;

use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{invalid, Error, Result};
use crate::kernels::Matrix;

pub use files::{
    parse_ids, read_ranked_file, read_token_stream, write_ranked_file, write_token_stream, TokenStream,
    TOKEN_STREAM_MAGIC, TOKEN_STREAM_VERSION,
};

/// Per-token occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
    // number of tokens consumed so far, for error offsets
    seen: u64,
}

impl FrequencyTable {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            counts: vec![0; vocab_size],
            total: 0,
            seen: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self {
            counts,
            total,
            seen: total,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Adds one chunk of the stream. Offsets in errors are relative to the
    /// start of the whole stream, not the chunk.
    pub fn extend(&mut self, chunk: impl IntoIterator<Item = u32>) -> Result<()> {
        let vocab_size = self.counts.len();
        for id in chunk {
            let slot = self.counts.get_mut(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                offset: self.seen,
                vocab_size,
            })?;
            *slot += 1;
            self.total += 1;
            self.seen += 1;
        }
        Ok(())
    }

    /// Elementwise sum; the order of merges does not matter.
    pub fn merge(&mut self, other: &FrequencyTable) -> Result<()> {
        if other.vocab_size() != self.vocab_size() {
            return Err(invalid("cannot merge frequency tables of different vocab sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.seen += other.seen;
        Ok(())
    }

    /// All ids ordered by count descending, ties by ascending id.
    pub fn rank_order(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.counts.len() as u32).collect();
        ids.sort_by(|&a, &b| {
            self.counts[b as usize]
                .cmp(&self.counts[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }
}

pub fn count_frequencies(
    stream: impl IntoIterator<Item = u32>,
    vocab_size: usize,
) -> Result<FrequencyTable> {
    let mut table = FrequencyTable::new(vocab_size);
    table.extend(stream)?;
    Ok(table)
}

/// Counts `tokens` on up to `shards` threads and merges the per-shard tables.
pub fn count_frequencies_sharded(
    tokens: &[u32],
    vocab_size: usize,
    shards: usize,
) -> Result<FrequencyTable> {
    let shards = shards.max(1);
    let chunk = tokens.len().div_ceil(shards).max(1);
    let results: Vec<Result<FrequencyTable>> = thread::scope(|s| {
        let handles: Vec<_> = tokens
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| {
                s.spawn(move || {
                    let mut t = FrequencyTable::new(vocab_size);
                    t.seen = (i * chunk) as u64;
                    t.extend(part.iter().copied()).map(|()| t)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting thread panicked"))
            .collect()
    });
    let mut table = FrequencyTable::new(vocab_size);
    for part in results {
        let part = part?;
        for (a, b) in table.counts.iter_mut().zip(&part.counts) {
            *a += b;
        }
        table.total += part.total;
    }
    table.seen = table.total;
    Ok(table)
}

/// Seeded Zipf(`exponent`) stream over `vocab_size` ids: rank `r` (1-based)
/// is emitted as token id `r - 1`.
pub fn zipf_stream(vocab_size: usize, exponent: f64, len: usize, seed: u64) -> Result<Vec<u32>> {
    let zipf = Zipf::new(vocab_size as f64, exponent)
        .map_err(|e| invalid(format!("bad zipf parameters: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| (zipf.sample(&mut rng) as u32 - 1).min(vocab_size as u32 - 1))
        .collect())
}

// ---------------------------------------------------------------------------
// Subsets
// ---------------------------------------------------------------------------

const ABSENT: u32 = u32::MAX;

/// High-frequency vocabulary subset with maps in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedSubset {
    ordered_ids: Vec<u32>,
    full_to_restricted: Vec<u32>,
}

impl RankedSubset {
    /// Takes `forced` plus the leading ids of `order` (a ranking, best
    /// first) until `size` ids are chosen. The chosen ids keep their
    /// relative order from `order`; forced ids missing from `order` go last.
    pub fn from_order(order: &[u32], vocab_size: usize, size: usize, forced: &[u32]) -> Result<Self> {
        if size == 0 || size > vocab_size {
            return Err(invalid(format!(
                "subset size must be in 1..={vocab_size}, got {size}"
            )));
        }
        let mut chosen = vec![false; vocab_size];
        let mut n_forced = 0;
        for &f in forced {
            let slot = chosen
                .get_mut(f as usize)
                .ok_or_else(|| invalid(format!("forced token {f} outside vocabulary")))?;
            if !*slot {
                *slot = true;
                n_forced += 1;
            }
        }
        if n_forced > size {
            return Err(invalid(format!(
                "{n_forced} forced tokens do not fit in a subset of size {size}"
            )));
        }
        let mut remaining = size - n_forced;
        let mut seen = vec![false; vocab_size];
        let mut ordered_ids = Vec::with_capacity(size);
        for &id in order {
            let idx = id as usize;
            if idx >= vocab_size {
                return Err(invalid(format!("ranked token {id} outside vocabulary")));
            }
            if seen[idx] {
                return Err(invalid(format!("ranked token {id} listed twice")));
            }
            seen[idx] = true;
            if chosen[idx] {
                ordered_ids.push(id);
            } else if remaining > 0 {
                chosen[idx] = true;
                remaining -= 1;
                ordered_ids.push(id);
            }
        }
        for &f in forced {
            if !seen[f as usize] {
                seen[f as usize] = true;
                ordered_ids.push(f);
            }
        }
        if ordered_ids.len() != size {
            return Err(invalid(format!(
                "ranking has only {} usable ids for a subset of size {size}",
                ordered_ids.len()
            )));
        }
        let mut full_to_restricted = vec![ABSENT; vocab_size];
        for (i, &id) in ordered_ids.iter().enumerate() {
            full_to_restricted[id as usize] = i as u32;
        }
        Ok(Self {
            ordered_ids,
            full_to_restricted,
        })
    }

    /// Every id in ascending order; the identity map.
    pub fn identity(vocab_size: usize) -> Self {
        let order: Vec<u32> = (0..vocab_size as u32).collect();
        Self::from_order(&order, vocab_size, vocab_size, &[]).expect("identity subset is valid")
    }

    pub fn len(&self) -> usize {
        self.ordered_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.full_to_restricted.len()
    }

    pub fn ordered_ids(&self) -> &[u32] {
        &self.ordered_ids
    }

    pub fn restricted_to_full(&self) -> &[u32] {
        &self.ordered_ids
    }

    pub fn restricted_index(&self, token: u32) -> Option<usize> {
        match self.full_to_restricted.get(token as usize) {
            Some(&i) if i != ABSENT => Some(i as usize),
            _ => None,
        }
    }

    pub fn contains(&self, token: u32) -> bool {
        self.restricted_index(token).is_some()
    }
}

/// Forced ids plus the most frequent remaining ids (ties by ascending id),
/// ordered by count descending.
pub fn build_subset(table: &FrequencyTable, size: usize, forced: &[u32]) -> Result<RankedSubset> {
    let order = table.rank_order();
    let subset = RankedSubset::from_order(&order, table.vocab_size(), size, forced)?;
    debug_assert!(subset.ordered_ids.windows(2).all(|w| {
        let (a, b) = (table.counts[w[0] as usize], table.counts[w[1] as usize]);
        a > b || (a == b && w[0] < w[1])
    }));
    Ok(subset)
}

/// Fraction of all occurrences that fall inside `subset`.
pub fn coverage(table: &FrequencyTable, subset: &RankedSubset) -> Result<f64> {
    if subset.vocab_size() != table.vocab_size() {
        return Err(invalid("subset and table disagree on vocabulary size"));
    }
    if table.total == 0 {
        return Err(Error::UndefinedCoverage);
    }
    let inside: u64 = subset
        .ordered_ids
        .iter()
        .map(|&t| table.counts[t as usize])
        .sum();
    Ok(inside as f64 / table.total as f64)
}

/// `|V_high| / |V|`: the fraction of LM-head work a restricted head keeps.
pub fn flops_ratio(full_size: usize, restricted_size: usize) -> Result<f64> {
    if full_size == 0 || restricted_size == 0 {
        return Err(invalid("vocabulary sizes must be positive"));
    }
    if restricted_size > full_size {
        return Err(invalid(format!(
            "restricted size {restricted_size} exceeds full size {full_size}"
        )));
    }
    Ok(restricted_size as f64 / full_size as f64)
}

// ---------------------------------------------------------------------------
// Restricted head
// ---------------------------------------------------------------------------

/// LM-head rows of the subset, in subset order.
#[derive(Debug, Clone)]
pub struct RestrictedHead {
    matrix: Matrix,
    subset: Arc<RankedSubset>,
}

impl RestrictedHead {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn subset(&self) -> &RankedSubset {
        &self.subset
    }

    pub fn subset_arc(&self) -> &Arc<RankedSubset> {
        &self.subset
    }
}

/// Row `i` of the result is row `subset.restricted_to_full()[i]` of `lm_head`.
pub fn restrict_lm_head(lm_head: &Matrix, subset: Arc<RankedSubset>) -> Result<RestrictedHead> {
    if subset.vocab_size() != lm_head.rows() {
        return Err(invalid(format!(
            "subset is over {} ids but the LM head has {} rows",
            subset.vocab_size(),
            lm_head.rows()
        )));
    }
    let matrix = lm_head.gather_rows(subset.ordered_ids.iter().map(|&t| t as usize))?;
    Ok(RestrictedHead { matrix, subset })
}
