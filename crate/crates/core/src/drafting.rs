//! Beam-search construction of the draft tree.
//!
//! One drafting round runs `depth` draft forwards. The first consumes the
//! verified tokens the draft cache has not yet seen and yields the root's
//! distribution; each later forward evaluates the current beam as tree
//! tokens. At every level each beam node proposes its top-`width` tokens,
//! candidates are scored by cumulative log-probability, and the global
//! top-`width` become the next beam. Every candidate ever proposed goes into
//! the history, and the final tree is the top-`K` history entries.
//!
//! A child never outscores its parent and is always proposed after it, so
//! under the (score desc, proposal order asc) ranking the parent of any
//! selected node is selected too.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::kernels::{logsumexp, topk, KeyMask};
use crate::model::{DraftModel, Head, KvCache, LogitRows};
use crate::profiler::{Component, Profiler};

/// Bitmask capacity of a verification pass.
pub const MAX_DRAFT_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftParams {
    pub beam_width: usize,
    pub search_depth: usize,
    /// Total draft tokens `K` kept in the tree.
    pub total_tokens: usize,
}

impl Default for DraftParams {
    fn default() -> Self {
        Self {
            beam_width: 10,
            search_depth: 6,
            total_tokens: 60,
        }
    }
}

impl DraftParams {
    pub fn new(beam_width: usize, search_depth: usize, total_tokens: usize) -> Result<Self> {
        let p = Self {
            beam_width,
            search_depth,
            total_tokens,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 || self.search_depth < 1 {
            return Err(invalid("beam width and search depth must be at least 1"));
        }
        if self.total_tokens < self.beam_width || self.total_tokens > MAX_DRAFT_TOKENS {
            return Err(invalid(format!(
                "total draft tokens must be in {}..={MAX_DRAFT_TOKENS}, got {}",
                self.beam_width, self.total_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    /// Full-vocabulary token id.
    pub token: u32,
    /// Index of the parent node; `None` for children of the root.
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    /// Draft log-probability of `token` given its ancestors.
    pub log_prob: f64,
    pub log_joint: f64,
}

/// Draft tree in topological order (parents before children). The root is
/// the last verified token and is not stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
}

impl DraftTree {
    /// Checks ordering, depth and size invariants.
    pub fn from_nodes(nodes: Vec<DraftNode>) -> Result<Self> {
        if nodes.len() > MAX_DRAFT_TOKENS {
            return Err(Error::Capacity {
                what: "draft tree",
                needed: nodes.len(),
                limit: MAX_DRAFT_TOKENS,
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            let want_depth = match n.parent {
                None => 1,
                Some(p) if p < i => nodes[p].depth + 1,
                Some(p) => {
                    return Err(invalid(format!("node {i} has parent {p}, which does not precede it")))
                }
            };
            if n.depth != want_depth {
                return Err(invalid(format!(
                    "node {i} has depth {} but its parent implies {want_depth}",
                    n.depth
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// Rebuilds a tree from [`linearize`] output (log-probabilities zeroed).
    pub fn from_linearized(lin: &Linearized) -> Result<Self> {
        if lin.tokens.len() != lin.parents.len() || lin.tokens.len() != lin.depths.len() {
            return Err(invalid("linearized arrays differ in length"));
        }
        let nodes = (0..lin.tokens.len())
            .map(|i| DraftNode {
                token: lin.tokens[i],
                parent: lin.parents[i],
                depth: lin.depths[i],
                log_prob: 0.0,
                log_joint: 0.0,
            })
            .collect();
        Self::from_nodes(nodes)
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    /// Children of `parent` (`None` = root), in node order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == parent)
            .collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Parallel arrays for the verification pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linearized {
    pub tokens: Vec<u32>,
    pub parents: Vec<Option<usize>>,
    pub depths: Vec<usize>,
}

pub fn linearize(tree: &DraftTree) -> Linearized {
    Linearized {
        tokens: tree.nodes.iter().map(|n| n.token).collect(),
        parents: tree.nodes.iter().map(|n| n.parent).collect(),
        depths: tree.nodes.iter().map(|n| n.depth).collect(),
    }
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct Candidate {
    token: u32,
    parent: Option<usize>,
    depth: usize,
    log_prob: f64,
    log_joint: f64,
    // index within this round's tree region of the draft cache, once forwarded
    slot: Option<usize>,
}

fn rank(history: &[Candidate], a: usize, b: usize) -> Ordering {
    history[b]
        .log_joint
        .total_cmp(&history[a].log_joint)
        .then(a.cmp(&b))
}

/// Proposes the top-`width` children of one node from its logits row.
fn expand(
    row: &[f32],
    parent: Option<usize>,
    parent_joint: f64,
    depth: usize,
    width: usize,
    head: Head<'_>,
    history: &mut Vec<Candidate>,
    prof: &mut Profiler,
) -> Result<Vec<usize>> {
    let lse = prof.time(Component::Softmax, || logsumexp(row))?;
    prof.time(Component::TreeOps, || {
        let best = topk(row, width.min(row.len()))?;
        let mut added = Vec::with_capacity(best.len());
        for (idx, logit) in best {
            let log_prob = f64::from(logit) - lse;
            added.push(history.len());
            history.push(Candidate {
                token: head.token_id(idx),
                parent,
                depth,
                log_prob,
                log_joint: parent_joint + log_prob,
                slot: None,
            });
        }
        Ok(added)
    })
}

/// Builds one draft tree. `pending` are verified tokens not yet in
/// `cache`; its last element is the root. On return the cache holds the
/// pending tokens and nothing from the tree.
pub fn build_draft_tree(
    draft: &DraftModel,
    cache: &mut KvCache,
    pending: &[u32],
    params: &DraftParams,
    head: Head<'_>,
) -> Result<DraftTree> {
    build_draft_tree_profiled(draft, cache, pending, params, head, &mut Profiler::disabled())
}

pub fn build_draft_tree_profiled(
    draft: &DraftModel,
    cache: &mut KvCache,
    pending: &[u32],
    params: &DraftParams,
    head: Head<'_>,
    prof: &mut Profiler,
) -> Result<DraftTree> {
    params.validate()?;
    if pending.is_empty() {
        return Err(invalid("drafting needs at least the root token"));
    }
    let width = params.beam_width;

    let mask = KeyMask::causal(pending.len(), cache.len() + pending.len())?;
    let next = cache.next_position();
    let positions: Vec<u32> = (0..pending.len() as u32).map(|i| next + i).collect();
    let out = draft.forward_placed(pending, &positions, &mask, cache, head, LogitRows::Last, prof)?;
    let tree_start = cache.len();
    let root_pos = cache.next_position() - 1;

    let mut history: Vec<Candidate> = Vec::new();
    let mut beam = expand(out.logits.row(0), None, 0.0, 1, width, head, &mut history, prof)?;
    beam.truncate(width);

    let result = (|| {
        for level in 2..=params.search_depth {
            let (tokens, positions, mask) = prof.time(Component::TreeOps, || {
                beam_placement(&mut history, &beam, cache.len(), tree_start, root_pos)
            });
            let out = draft.forward_placed(&tokens, &positions, &mask, cache, head, LogitRows::All, prof)?;
            let mut level_cands = Vec::new();
            for (row, &b) in beam.iter().enumerate() {
                let joint = history[b].log_joint;
                level_cands.extend(expand(
                    out.logits.row(row),
                    Some(b),
                    joint,
                    level,
                    width,
                    head,
                    &mut history,
                    prof,
                )?);
            }
            beam = prof.time(Component::TreeOps, || {
                level_cands.sort_by(|&a, &b| rank(&history, a, b));
                level_cands.truncate(width);
                level_cands
            });
        }
        Ok::<_, Error>(())
    })();
    cache.truncate(tree_start);
    result?;

    prof.time(Component::TreeOps, || select_tree(&history, params.total_tokens))
}

/// Tokens, positions and mask for forwarding the current beam, assigning
/// each beam node a slot in the tree region.
fn beam_placement(
    history: &mut [Candidate],
    beam: &[usize],
    cached: usize,
    tree_start: usize,
    root_pos: u32,
) -> (Vec<u32>, Vec<u32>, KeyMask) {
    let n = beam.len();
    let first_slot = cached - tree_start;
    let mut mask = KeyMask::empty(n, cached + n);
    let mut tokens = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for (i, &b) in beam.iter().enumerate() {
        history[b].slot = Some(first_slot + i);
        tokens.push(history[b].token);
        positions.push(root_pos + history[b].depth as u32);
        mask.allow_range(i, 0..tree_start);
        let mut cur = Some(b);
        while let Some(c) = cur {
            let slot = history[c].slot.expect("ancestors are forwarded before descendants");
            mask.allow(i, tree_start + slot);
            cur = history[c].parent;
        }
    }
    (tokens, positions, mask)
}

fn select_tree(history: &[Candidate], k: usize) -> Result<DraftTree> {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| rank(history, a, b));
    order.truncate(k);
    order.sort_unstable();
    let mut node_of = vec![usize::MAX; history.len()];
    let mut nodes = Vec::with_capacity(order.len());
    for (i, &h) in order.iter().enumerate() {
        node_of[h] = i;
        let c = &history[h];
        let parent = match c.parent {
            None => None,
            Some(p) if node_of[p] != usize::MAX => Some(node_of[p]),
            Some(_) => {
                return Err(Error::Consistency(
                    "selected draft node lost its parent".into(),
                ))
            }
        };
        nodes.push(DraftNode {
            token: c.token,
            parent,
            depth: c.depth,
            log_prob: c.log_prob,
            log_joint: c.log_joint,
        });
    }
    DraftTree::from_nodes(nodes)
}
