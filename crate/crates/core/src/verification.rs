//! Target-side verification of a draft tree.
//!
//! The tree is scored in one target forward using a [`TreeMask`]: the root
//! token goes first, followed by the tree nodes, so logits row 0 is the
//! target's distribution after the root and row `i + 1` the distribution
//! after node `i`.

use rand::Rng;
use serde::Serialize;

use crate::drafting::{DraftTree, MAX_DRAFT_TOKENS};
use crate::error::{invalid, Error, Result};
use crate::kernels::{argmax, Matrix};
use crate::vocab::RankedSubset;

// ---------------------------------------------------------------------------
// Tree mask
// ---------------------------------------------------------------------------

/// Ancestor bitmasks for up to 64 draft tokens: bit `j` of word `i` is set
/// iff node `j` is node `i` or one of its ancestors. Visibility of the
/// cached prefix is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask {
    words: Vec<u64>,
}

impl TreeMask {
    /// `parents[i]` must precede `i`; `None` marks a child of the root.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        if parents.len() > MAX_DRAFT_TOKENS {
            return Err(Error::Capacity {
                what: "tree mask",
                needed: parents.len(),
                limit: MAX_DRAFT_TOKENS,
            });
        }
        let mut words = Vec::with_capacity(parents.len());
        for (i, p) in parents.iter().enumerate() {
            let inherited = match *p {
                None => 0,
                Some(p) if p < i => words[p],
                Some(p) => return Err(invalid(format!("node {i} has non-preceding parent {p}"))),
            };
            words.push(inherited | 1u64 << i);
        }
        Ok(Self { words })
    }

    /// A linear chain of `n` tokens: the causal triangle.
    pub fn chain(n: usize) -> Result<Self> {
        let parents: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
        Self::from_parents(&parents)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Whether node `i` attends to node `j`.
    #[inline]
    pub fn sees(&self, i: usize, j: usize) -> bool {
        j < 64 && self.words[i] >> j & 1 == 1
    }

    /// Number of tree tokens on the path from the root to `i`, inclusive.
    #[inline]
    pub fn depth(&self, i: usize) -> usize {
        self.words[i].count_ones() as usize
    }
}

pub fn build_tree_mask(tree: &DraftTree) -> Result<TreeMask> {
    let parents: Vec<Option<usize>> = tree.nodes().iter().map(|n| n.parent).collect();
    TreeMask::from_parents(&parents)
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    /// Accepted node indices, root-most first.
    pub accepted_path: Vec<usize>,
    /// Accepted draft tokens followed by the target's own bonus token.
    pub emitted_tokens: Vec<u32>,
}

impl VerifyOutcome {
    pub fn accepted_length(&self) -> usize {
        self.emitted_tokens.len()
    }
}

/// Accepts the longest tree path that agrees with the target's argmax
/// (lowest id on ties) and appends the target's argmax after it.
///
/// `scores` has one row per tree position (root first); logits or
/// probabilities both work since only the argmax is used.
pub fn verify_greedy(scores: &Matrix, tree: &DraftTree) -> Result<VerifyOutcome> {
    check_rows(scores.rows(), tree)?;
    verify_greedy_rows(tree, &mut |r| Ok(scores.row(r).to_vec()))
}

/// [`verify_greedy`] reading target rows on demand; only the root and
/// accepted nodes are ever requested.
pub(crate) fn verify_greedy_rows(
    tree: &DraftTree,
    rows: &mut dyn FnMut(usize) -> Result<Vec<f32>>,
) -> Result<VerifyOutcome> {
    let mut path = Vec::new();
    let mut emitted = Vec::new();
    let mut node = None;
    loop {
        let row = node.map_or(0, |i: usize| i + 1);
        let best = argmax(&rows(row)?) as u32;
        let next = tree
            .children(node)
            .into_iter()
            .find(|&c| tree.nodes()[c].token == best);
        emitted.push(best);
        match next {
            Some(c) => {
                path.push(c);
                node = Some(c);
            }
            None => break,
        }
    }
    Ok(VerifyOutcome {
        accepted_path: path,
        emitted_tokens: emitted,
    })
}

fn check_rows(rows: usize, tree: &DraftTree) -> Result<()> {
    if rows != tree.len() + 1 {
        return Err(invalid(format!(
            "need {} target rows for a {}-node tree, got {rows}",
            tree.len() + 1,
            tree.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stochastic verification
// ---------------------------------------------------------------------------

/// Draft distribution over a head's vocabulary, looked up by full token id.
/// With a subset, ids outside it have probability exactly zero.
#[derive(Debug, Clone)]
pub struct DraftDistribution<'a> {
    probs: Vec<f64>,
    subset: Option<&'a RankedSubset>,
}

impl<'a> DraftDistribution<'a> {
    pub fn full(probs: Vec<f64>) -> Self {
        Self { probs, subset: None }
    }

    pub fn restricted(probs: Vec<f64>, subset: &'a RankedSubset) -> Result<Self> {
        if probs.len() != subset.len() {
            return Err(invalid("restricted distribution and subset differ in size"));
        }
        Ok(Self {
            probs,
            subset: Some(subset),
        })
    }

    pub fn prob(&self, token: u32) -> f64 {
        match self.subset {
            None => self.probs.get(token as usize).copied().unwrap_or(0.0),
            Some(s) => s.restricted_index(token).map_or(0.0, |i| self.probs[i]),
        }
    }

    fn support(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(i, &q)| {
            let token = match self.subset {
                None => i as u32,
                Some(s) => s.restricted_to_full()[i],
            };
            (token, q)
        })
    }
}

/// How the children of each tree node were proposed.
#[derive(Debug, Clone, Copy)]
pub enum Proposal<'d, 'a> {
    /// Children were chosen deterministically (beam search). Each one is
    /// treated as a point-mass proposal and tried in descending draft
    /// probability.
    Deterministic,
    /// Children of each position were sampled without replacement from the
    /// given distribution (one per target row, root first) and are tried in
    /// tree order.
    Sampled(&'d [DraftDistribution<'a>]),
}

fn normalize(p: &mut [f64]) -> bool {
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for x in p.iter_mut() {
            *x /= sum;
        }
        true
    } else {
        false
    }
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Recursive rejection verification.
///
/// At each accepted position, child `t` is accepted with probability
/// `min(1, p(t) / q(t))`, where `q` is the proposal that produced it
/// renormalized over the untried mass. On rejection `p` becomes
/// `norm(max(0, p - q))` and the next child is tried; when no child is
/// left the bonus token is drawn from the current `p`. The emitted tokens
/// are distributed exactly as sequential sampling from the target.
///
/// `target_probs` rows are the target's tempered distributions, root first.
pub fn verify_stochastic(
    target_probs: &Matrix,
    tree: &DraftTree,
    proposal: Proposal<'_, '_>,
    rng: &mut impl Rng,
) -> Result<VerifyOutcome> {
    check_rows(target_probs.rows(), tree)?;
    verify_stochastic_rows(tree, proposal, rng, &mut |r| Ok(target_probs.row(r).to_vec()))
}

/// [`verify_stochastic`] reading target rows on demand.
pub(crate) fn verify_stochastic_rows(
    tree: &DraftTree,
    proposal: Proposal<'_, '_>,
    rng: &mut impl Rng,
    rows: &mut dyn FnMut(usize) -> Result<Vec<f32>>,
) -> Result<VerifyOutcome> {
    if let Proposal::Sampled(q) = proposal {
        if q.len() != tree.len() + 1 {
            return Err(invalid("need one draft distribution per target row"));
        }
    }
    let mut path = Vec::new();
    let mut emitted = Vec::new();
    let mut node: Option<usize> = None;
    loop {
        let row = node.map_or(0, |i| i + 1);
        let mut p: Vec<f64> = rows(row)?.iter().map(|&x| f64::from(x).max(0.0)).collect();
        let vocab = p.len();
        if !normalize(&mut p) {
            return Err(invalid(format!("target row {row} has no probability mass")));
        }
        let mut children = tree.children(node);
        if matches!(proposal, Proposal::Deterministic) {
            let nodes = tree.nodes();
            children.sort_by(|&a, &b| nodes[b].log_prob.total_cmp(&nodes[a].log_prob).then(a.cmp(&b)));
        }

        let mut accepted = None;
        let mut tried: Vec<u32> = Vec::new();
        let mut tried_mass = 0.0f64;
        for c in children {
            let t = tree.nodes()[c].token;
            if t as usize >= vocab {
                return Err(invalid(format!("draft token {t} outside target vocabulary")));
            }
            let u: f64 = rng.random();
            match proposal {
                Proposal::Deterministic => {
                    if u < p[t as usize] {
                        accepted = Some(c);
                        break;
                    }
                    let before = p[t as usize];
                    p[t as usize] = 0.0;
                    if !normalize(&mut p) {
                        return Err(Error::Consistency(format!(
                            "residual vanished after rejecting token {t} with p = {before}"
                        )));
                    }
                }
                Proposal::Sampled(dists) => {
                    let q = &dists[row];
                    let qt = q.prob(t);
                    let untried = 1.0 - tried_mass;
                    if qt <= 0.0 || untried <= 0.0 {
                        return Err(Error::Consistency(format!(
                            "drafted token {t} has zero draft probability"
                        )));
                    }
                    let qi_t = qt / untried;
                    if u < (p[t as usize] / qi_t).min(1.0) {
                        accepted = Some(c);
                        break;
                    }
                    let previous = p.clone();
                    for (tok, qx) in q.support() {
                        if qx > 0.0 && !tried.contains(&tok) {
                            let slot = &mut p[tok as usize];
                            *slot = (*slot - qx / untried).max(0.0);
                        }
                    }
                    if !normalize(&mut p) {
                        // p and q_i agree to rounding; keep p without t
                        p = previous;
                        p[t as usize] = 0.0;
                        normalize(&mut p);
                    }
                    tried.push(t);
                    tried_mass += qt;
                }
            }
        }

        match accepted {
            Some(c) => {
                path.push(c);
                emitted.push(tree.nodes()[c].token);
                node = Some(c);
            }
            None => {
                emitted.push(sample_index(&p, rng) as u32);
                break;
            }
        }
    }
    Ok(VerifyOutcome {
        accepted_path: path,
        emitted_tokens: emitted,
    })
}

// ---------------------------------------------------------------------------
// Acceptance statistics
// ---------------------------------------------------------------------------

/// Tokens emitted per draft/verify iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AcceptanceStats {
    pub iterations: u64,
    pub emitted: u64,
    pub mean_accepted_length: f64,
    /// `histogram[n]` counts iterations that emitted `n` tokens.
    pub histogram: Vec<u64>,
}

impl AcceptanceStats {
    pub fn record(&mut self, accepted_length: usize) {
        if self.histogram.len() <= accepted_length {
            self.histogram.resize(accepted_length + 1, 0);
        }
        self.histogram[accepted_length] += 1;
        self.iterations += 1;
        self.emitted += accepted_length as u64;
        self.refresh();
    }

    pub fn merge(&mut self, other: &AcceptanceStats) {
        if self.histogram.len() < other.histogram.len() {
            self.histogram.resize(other.histogram.len(), 0);
        }
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.iterations += other.iterations;
        self.emitted += other.emitted;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.mean_accepted_length = if self.iterations == 0 {
            0.0
        } else {
            self.emitted as f64 / self.iterations as f64
        };
    }
}

pub fn accepted_length_stats(outcomes: &[VerifyOutcome]) -> Result<AcceptanceStats> {
    if outcomes.is_empty() {
        return Err(invalid("no verification outcomes"));
    }
    let mut stats = AcceptanceStats::default();
    for o in outcomes {
        stats.record(o.accepted_length());
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafting::DraftNode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(parents: &[Option<usize>], tokens: &[u32]) -> DraftTree {
        let mut nodes: Vec<DraftNode> = Vec::new();
        for (i, (&p, &t)) in parents.iter().zip(tokens).enumerate() {
            let depth = p.map_or(1, |p| nodes[p].depth + 1);
            nodes.push(DraftNode {
                token: t,
                parent: p,
                depth,
                log_prob: -(i as f64),
                log_joint: 0.0,
            });
        }
        DraftTree::from_nodes(nodes).unwrap()
    }

    #[test]
    fn chain_mask_is_causal_triangle() {
        let m = TreeMask::chain(4).unwrap();
        assert_eq!(m.words(), &[0b0001, 0b0011, 0b0111, 0b1111]);
        let siblings = TreeMask::from_parents(&[None, None]).unwrap();
        assert_eq!(siblings.words(), &[0b01, 0b10]);
        assert!(!siblings.sees(0, 1) && !siblings.sees(1, 0));
    }

    #[test]
    fn mask_capacity() {
        let parents = vec![None; 65];
        assert!(matches!(
            TreeMask::from_parents(&parents),
            Err(Error::Capacity { .. })
        ));
        assert!(TreeMask::from_parents(&parents[..64]).is_ok());
    }

    fn one_hot_rows(vocab: usize, hot: &[usize]) -> Matrix {
        let rows: Vec<Vec<f32>> = hot
            .iter()
            .map(|&h| {
                let mut r = vec![0.0; vocab];
                r[h] = 1.0;
                r
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn greedy_full_acceptance_and_bonus() {
        // chain 1 -> 2 -> 3, target agrees everywhere, then says 4
        let t = tree(&[None, Some(0), Some(1)], &[1, 2, 3]);
        let scores = one_hot_rows(5, &[1, 2, 3, 4]);
        let o = verify_greedy(&scores, &t).unwrap();
        assert_eq!(o.accepted_path, vec![0, 1, 2]);
        assert_eq!(o.emitted_tokens, vec![1, 2, 3, 4]);
        assert_eq!(o.accepted_length(), 4);
    }

    #[test]
    fn greedy_immediate_rejection() {
        let t = tree(&[None, None], &[1, 2]);
        let scores = one_hot_rows(5, &[0, 0, 0]);
        let o = verify_greedy(&scores, &t).unwrap();
        assert!(o.accepted_path.is_empty());
        assert_eq!(o.emitted_tokens, vec![0]);
    }

    #[test]
    fn greedy_follows_matching_branch_and_breaks_ties_low() {
        // root children 1 and 2; 2 has child 3
        let t = tree(&[None, None, Some(1)], &[1, 2, 3]);
        let mut scores = one_hot_rows(5, &[2, 0, 3, 0]);
        // tie at the last row between 0 and 4 -> 0
        scores.row_mut(2)[3] = 1.0;
        scores.row_mut(3)[4] = 1.0;
        scores.row_mut(3)[0] = 1.0;
        let o = verify_greedy(&scores, &t).unwrap();
        assert_eq!(o.accepted_path, vec![1, 2]);
        assert_eq!(o.emitted_tokens, vec![2, 3, 0]);
    }

    #[test]
    fn greedy_checks_row_count() {
        let t = tree(&[None], &[1]);
        assert!(verify_greedy(&one_hot_rows(3, &[0]), &t).is_err());
    }

    #[test]
    fn stochastic_q_equals_p_accepts_everything() {
        let p = vec![0.5f32, 0.3, 0.2];
        let t = tree(&[None, Some(0)], &[0, 2]);
        let probs = Matrix::from_rows(&[p.clone(), p.clone(), p.clone()]).unwrap();
        let q: Vec<DraftDistribution> = (0..3)
            .map(|_| DraftDistribution::full(p.iter().map(|&x| f64::from(x)).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let o = verify_stochastic(&probs, &t, Proposal::Sampled(&q), &mut rng).unwrap();
            assert_eq!(o.accepted_path, vec![0, 1]);
        }
    }

    #[test]
    fn stochastic_zero_target_mass_always_rejected() {
        let t = tree(&[None], &[0]);
        let probs = Matrix::from_rows(&[vec![0.0, 0.25, 0.75], vec![1.0, 0.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0u32; 3];
        let n = 20_000;
        for _ in 0..n {
            let o = verify_stochastic(&probs, &t, Proposal::Deterministic, &mut rng).unwrap();
            assert!(o.accepted_path.is_empty());
            counts[o.emitted_tokens[0] as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!((f64::from(counts[2]) / f64::from(n) - 0.75).abs() < 0.015);
    }

    #[test]
    fn stochastic_zero_draft_probability_is_inconsistent() {
        let t = tree(&[None], &[1]);
        let probs = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let subset = RankedSubset::from_order(&[0, 1], 2, 1, &[]).unwrap();
        let q0 = DraftDistribution::restricted(vec![1.0], &subset).unwrap();
        let q = vec![q0.clone(), q0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            verify_stochastic(&probs, &t, Proposal::Sampled(&q), &mut rng),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn acceptance_stats() {
        let o = |n: usize| VerifyOutcome {
            accepted_path: vec![],
            emitted_tokens: vec![0; n],
        };
        let s = accepted_length_stats(&[o(4), o(4), o(4)]).unwrap();
        assert_eq!(s.mean_accepted_length, 4.0);
        assert_eq!(s.histogram, vec![0, 0, 0, 0, 3]);
        assert!(accepted_length_stats(&[]).is_err());
        let mut a = accepted_length_stats(&[o(1)]).unwrap();
        a.merge(&accepted_length_stats(&[o(3)]).unwrap());
        assert_eq!(a.emitted, 4);
        assert_eq!(a.mean_accepted_length, 2.0);
    }
}
