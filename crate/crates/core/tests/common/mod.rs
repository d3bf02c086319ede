//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use frspec_core::drafting::{DraftParams, DraftTree};
use frspec_core::kernels::{argmax, KeyMask, Matrix};
use frspec_core::model::{DraftModel, Head, ModelConfig, TargetModel};
use rand::Rng;

pub fn toy_target(vocab: usize, d: usize, layers: usize, seed: u64) -> TargetModel {
    TargetModel::build(ModelConfig {
        vocab_size: vocab,
        hidden_dim: d,
        num_layers: layers,
        num_heads: 4,
        max_seq_len: 1024,
        seed,
    })
    .unwrap()
}

/// Log-softmax in f64 of the draft's last-position logits after a plain
/// causal forward over `context` from an empty cache.
pub fn draft_log_probs(draft: &DraftModel, context: &[u32]) -> Vec<f64> {
    let out = draft
        .forward(context, &mut draft.new_cache(), None, Head::Full)
        .unwrap();
    let row = out.logits.row(out.logits.rows() - 1);
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(f64::from(x)));
    let lse = m + row.iter().map(|&x| (f64::from(x) - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| f64::from(x) - lse).collect()
}

/// One node of the oracle's search history.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    pub log_joint: f64,
}

/// Scores every path up to `depth` by sequential recomputation, then
/// applies the beam rule: per-node top-width children, global top-width
/// beam per level, top-K of every proposed candidate. Ties go to the
/// lower token id within a node and to the earlier proposal globally.
pub fn exhaustive_beam_tree(draft: &DraftModel, context: &[u32], p: &DraftParams) -> Vec<OracleNode> {
    let vocab = draft.config().vocab_size;
    let mut scores = std::collections::HashMap::new();
    let mut frontier = vec![Vec::<u32>::new()];
    for _ in 0..p.search_depth {
        let mut next = Vec::new();
        for path in &frontier {
            let mut ctx = context.to_vec();
            ctx.extend_from_slice(path);
            scores.insert(path.clone(), draft_log_probs(draft, &ctx));
            for t in 0..vocab as u32 {
                let mut child = path.clone();
                child.push(t);
                next.push(child);
            }
        }
        frontier = next;
    }

    let top_children = |lp: &[f64], width: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        idx.truncate(width);
        idx
    };
    let path_of = |history: &[OracleNode], mut i: usize| -> Vec<u32> {
        let mut out = vec![history[i].token];
        while let Some(p) = history[i].parent {
            out.push(history[p].token);
            i = p;
        }
        out.reverse();
        out
    };

    let mut history: Vec<OracleNode> = Vec::new();
    let root = &scores[&Vec::new()];
    let mut beam = Vec::new();
    for t in top_children(root, p.beam_width) {
        beam.push(history.len());
        history.push(OracleNode {
            token: t as u32,
            parent: None,
            depth: 1,
            log_joint: root[t],
        });
    }
    for level in 2..=p.search_depth {
        let mut cands = Vec::new();
        for &b in &beam {
            let lp = &scores[&path_of(&history, b)];
            for t in top_children(lp, p.beam_width) {
                cands.push(history.len());
                history.push(OracleNode {
                    token: t as u32,
                    parent: Some(b),
                    depth: level,
                    log_joint: history[b].log_joint + lp[t],
                });
            }
        }
        cands.sort_by(|&a, &b| history[b].log_joint.total_cmp(&history[a].log_joint).then(a.cmp(&b)));
        cands.truncate(p.beam_width);
        beam = cands;
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].log_joint.total_cmp(&history[a].log_joint).then(a.cmp(&b)));
    order.truncate(p.total_tokens);
    order.sort_unstable();
    let pos = |h: usize| order.iter().position(|&x| x == h);
    order
        .iter()
        .map(|&h| OracleNode {
            parent: history[h].parent.map(|p| pos(p).expect("ancestor selected")),
            ..history[h].clone()
        })
        .collect()
}

/// Vanilla greedy continuation of `context` by plain recomputation.
pub fn vanilla_greedy(target: &TargetModel, context: &[u32], n: usize) -> Vec<u32> {
    let mut ctx = context.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let o = target.forward(&ctx, &mut target.new_cache(), None).unwrap();
        let t = argmax(o.logits.row(o.logits.rows() - 1)) as u32;
        out.push(t);
        ctx.push(t);
    }
    out
}

/// Longest tree path spelling a prefix of `greedy`, plus the next greedy
/// token: what greedy verification must emit.
pub fn longest_matching_path(tree: &DraftTree, greedy: &[u32]) -> (Vec<usize>, Vec<u32>) {
    let mut path = Vec::new();
    let mut node = None;
    for &g in greedy {
        match tree.children(node).into_iter().find(|&c| tree.nodes()[c].token == g) {
            Some(c) => {
                path.push(c);
                node = Some(c);
            }
            None => break,
        }
    }
    let emitted = greedy[..path.len() + 1].to_vec();
    (path, emitted)
}

/// Random forest over `n` nodes: each node's parent is the root or an
/// earlier node.
pub fn random_parents(rng: &mut impl Rng, n: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| {
            let r = rng.random_range(0..=i);
            (r < i).then_some(r)
        })
        .collect()
}

/// Reflexive ancestor relation by transitive closure of the parent edges.
pub fn dense_ancestors(parents: &[Option<usize>]) -> Vec<Vec<bool>> {
    let n = parents.len();
    let mut a = vec![vec![false; n]; n];
    for i in 0..n {
        a[i][i] = true;
        if let Some(p) = parents[i] {
            a[i][p] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if a[i][k] {
                for j in 0..n {
                    if a[k][j] {
                        a[i][j] = true;
                    }
                }
            }
        }
    }
    a
}

/// Attention with an explicit boolean mask, accumulated in f64.
pub fn dense_masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, allowed: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let s: Vec<f64> = (0..k.rows())
                .map(|j| {
                    if allowed[i][j] {
                        q.row(i).iter().zip(k.row(j)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v.cols())
                .map(|c| (0..k.rows()).map(|j| w[j] * f64::from(v.row(j)[c])).sum::<f64>() / z)
                .collect()
        })
        .collect()
}

/// Prefix keys visible to every query plus the dense tree relation over
/// the tail, as a boolean matrix and the equivalent kernel mask.
pub fn tree_attention_masks(prefix: usize, tree: &[Vec<bool>]) -> (Vec<Vec<bool>>, KeyMask) {
    let n = tree.len();
    let mut dense = vec![vec![false; prefix + n]; n];
    let mut mask = KeyMask::empty(n, prefix + n);
    for i in 0..n {
        for j in 0..prefix + n {
            let ok = j < prefix || tree[i][j - prefix];
            dense[i][j] = ok;
            if ok {
                mask.allow(i, j);
            }
        }
    }
    (dense, mask)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn histogram(samples: impl IntoIterator<Item = u32>, vocab: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab];
    let mut n = 0.0;
    for s in samples {
        h[s as usize] += 1.0;
        n += 1.0;
    }
    h.iter_mut().for_each(|x| *x /= n);
    h
}
