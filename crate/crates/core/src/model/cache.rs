use crate::error::{invalid, Error, Result};

/// Per-layer key/value storage, allocated up front for `capacity` positions.
///
/// Entries are stored in cache-index order. Each entry remembers the
/// position id it was rotated with; outside of an in-flight tree pass the
/// position ids equal the cache indices.
#[derive(Debug, Clone)]
pub struct KvCache {
    capacity: usize,
    width: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<u32>,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize, capacity: usize) -> Self {
        Self {
            capacity,
            width,
            keys: vec![vec![0.0; capacity * width]; num_layers],
            values: vec![vec![0.0; capacity * width]; num_layers],
            positions: Vec::with_capacity(capacity),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    /// Position id of the next sequential token.
    pub fn next_position(&self) -> u32 {
        self.positions.last().map_or(0, |p| p + 1)
    }

    pub(crate) fn check_room(&self, extra: usize) -> Result<()> {
        if self.len() + extra > self.capacity {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: self.len() + extra,
                limit: self.capacity,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn key(&self, layer: usize, index: usize) -> &[f32] {
        &self.keys[layer][index * self.width..(index + 1) * self.width]
    }

    #[inline]
    pub fn value(&self, layer: usize, index: usize) -> &[f32] {
        &self.values[layer][index * self.width..(index + 1) * self.width]
    }

    /// Writes the entry at `index`, which may be at most `len()` (the slot
    /// that the next [`commit`](Self::commit) will claim). Callers write
    /// every layer before committing.
    pub(crate) fn write(&mut self, layer: usize, index: usize, key: &[f32], value: &[f32]) {
        let w = self.width;
        self.keys[layer][index * w..(index + 1) * w].copy_from_slice(key);
        self.values[layer][index * w..(index + 1) * w].copy_from_slice(value);
    }

    pub(crate) fn commit(&mut self, positions: &[u32]) {
        debug_assert!(self.len() + positions.len() <= self.capacity);
        self.positions.extend_from_slice(positions);
    }

    pub fn truncate(&mut self, len: usize) {
        self.positions.truncate(len);
    }

    /// Keeps `[0, keep)` and then the entries at `moved` (ascending cache
    /// indices, all `>= keep`), packed contiguously after `keep`. Used to
    /// drop the rejected branches of a verified draft tree.
    pub fn compact(&mut self, keep: usize, moved: &[usize]) -> Result<()> {
        if keep > self.len() {
            return Err(invalid(format!(
                "cannot keep {keep} entries of a {}-entry cache",
                self.len()
            )));
        }
        let mut last = None;
        for &m in moved {
            if m < keep || m >= self.len() || last.is_some_and(|l| m <= l) {
                return Err(invalid(format!("bad compaction source index {m}")));
            }
            last = Some(m);
        }
        let w = self.width;
        for (slot, &src) in (keep..).zip(moved) {
            if slot != src {
                for layer in 0..self.keys.len() {
                    self.keys[layer].copy_within(src * w..(src + 1) * w, slot * w);
                    self.values[layer].copy_within(src * w..(src + 1) * w, slot * w);
                }
                self.positions[slot] = self.positions[src];
            }
        }
        self.positions.truncate(keep + moved.len());
        Ok(())
    }
}
