mod common;

use common::{
    dense_ancestors, dense_masked_attention, histogram, longest_matching_path, random_matrix,
    random_parents, toy_target, total_variation, tree_attention_masks, vanilla_greedy,
};
use frspec_core::drafting::{build_draft_tree, DraftNode, DraftParams, DraftTree};
use frspec_core::kernels::{masked_attention, Matrix};
use frspec_core::model::{DraftMode, DraftModel, Head};
use frspec_core::verification::{
    build_tree_mask, sample_index, verify_greedy, verify_stochastic, DraftDistribution, Proposal,
    TreeMask,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tree_masks_match_dense_closure() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rand::Rng::random_range(&mut rng, 1..=64);
        let parents = random_parents(&mut rng, n);
        let mask = TreeMask::from_parents(&parents).unwrap();
        let dense = dense_ancestors(&parents);
        for i in 0..n {
            let want = (0..n).filter(|&j| dense[i][j]).fold(0u64, |w, j| w | 1 << j);
            assert_eq!(mask.words()[i], want);
            assert_eq!(mask.depth(i), dense[i].iter().filter(|&&b| b).count());
        }
    }
}

#[test]
fn masked_attention_matches_dense_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rand::Rng::random_range(&mut rng, 1..=64);
        let prefix = rand::Rng::random_range(&mut rng, 0..8);
        let parents = random_parents(&mut rng, n);
        let (dense, mask) = tree_attention_masks(prefix, &dense_ancestors(&parents));
        let q = random_matrix(&mut rng, n, 16);
        let k = random_matrix(&mut rng, prefix + n, 16);
        let v = random_matrix(&mut rng, prefix + n, 16);
        let got = masked_attention(&q, &k, &v, &mask).unwrap();
        let want = dense_masked_attention(&q, &k, &v, &dense);
        for i in 0..n {
            for c in 0..16 {
                assert!((f64::from(got.row(i)[c]) - want[i][c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn greedy_verification_matches_vanilla_prefix() {
    let target = toy_target(64, 32, 2, 9);
    for (seed, noise) in [(0u64, 0.0f32), (1, 0.5), (2, 2.0), (3, 5.0)] {
        let draft = DraftModel::build(&target, DraftMode::Perturbed, noise, seed).unwrap();
        let context: Vec<u32> = (0..6).map(|i| (i * 11 + seed as u32) % 64).collect();
        let params = DraftParams::new(3, 4, 16).unwrap();
        let tree = build_draft_tree(&draft, &mut draft.new_cache(), &context, &params, Head::Full).unwrap();

        let mut cache = target.new_cache();
        target.prefill(&context[..context.len() - 1], &mut cache).unwrap();
        let mut tokens = vec![*context.last().unwrap()];
        tokens.extend(tree.tokens());
        let mask = build_tree_mask(&tree).unwrap();
        let out = target.forward(&tokens, &mut cache, Some(&mask)).unwrap();
        let got = verify_greedy(&out.logits, &tree).unwrap();

        let greedy = vanilla_greedy(&target, &context, params.search_depth + 1);
        let (path, emitted) = longest_matching_path(&tree, &greedy);
        assert_eq!(got.accepted_path, path, "noise {noise}");
        assert_eq!(got.emitted_tokens, emitted, "noise {noise}");
    }
}

fn node(token: u32, parent: Option<usize>, depth: usize, log_prob: f64) -> DraftNode {
    DraftNode {
        token,
        parent,
        depth,
        log_prob,
        log_joint: log_prob,
    }
}

/// Draws `n` distinct tokens from `q` without replacement.
fn sample_children(q: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut rest = q.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let z: f64 = rest.iter().sum();
        let norm: Vec<f64> = rest.iter().map(|x| x / z).collect();
        let t = sample_index(&norm, rng);
        out.push(t as u32);
        rest[t] = 0.0;
    }
    out
}

#[test]
fn single_draft_acceptance_rate_is_sum_of_min() {
    let p = [0.5f32, 0.3, 0.1, 0.1];
    let q = vec![0.3, 0.2, 0.3, 0.2];
    let expected: f64 = p.iter().zip(&q).map(|(&a, &b)| f64::from(a).min(b)).sum();
    assert!((expected - 0.7).abs() < 1e-6);
    let rows = Matrix::from_rows(&[p.to_vec(), p.to_vec()]).unwrap();
    let dists = [DraftDistribution::full(q.clone()), DraftDistribution::full(q.clone())];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut accepted = 0;
    for _ in 0..n {
        let t = sample_children(&q, 1, &mut rng)[0];
        let tree = DraftTree::from_nodes(vec![node(t, None, 1, q[t as usize].ln())]).unwrap();
        let out = verify_stochastic(&rows, &tree, Proposal::Sampled(&dists), &mut rng).unwrap();
        accepted += out.accepted_path.len();
    }
    let rate = accepted as f64 / n as f64;
    assert!((rate - expected).abs() < 0.01, "rate {rate}");
}

fn first_token_tv(proposal_sampled: bool, children: usize) -> f64 {
    let p = [0.05f32, 0.4, 0.1, 0.2, 0.05, 0.15, 0.05, 0.0];
    let q = vec![0.3, 0.05, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05];
    let rows = Matrix::from_rows(&vec![p.to_vec(); children + 1]).unwrap();
    let dists = vec![DraftDistribution::full(q.clone()); children + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(4 + children as u64);
    let samples: Vec<u32> = (0..100_000)
        .map(|_| {
            let toks = if proposal_sampled {
                sample_children(&q, children, &mut rng)
            } else {
                vec![0, 2, 4][..children].to_vec()
            };
            let nodes = toks.iter().map(|&t| node(t, None, 1, q[t as usize].ln())).collect();
            let tree = DraftTree::from_nodes(nodes).unwrap();
            let proposal = if proposal_sampled {
                Proposal::Sampled(&dists)
            } else {
                Proposal::Deterministic
            };
            verify_stochastic(&rows, &tree, proposal, &mut rng).unwrap().emitted_tokens[0]
        })
        .collect();
    let want: Vec<f64> = p.iter().map(|&x| f64::from(x)).collect();
    total_variation(&histogram(samples, 8), &want)
}

#[test]
fn stochastic_verification_preserves_target_distribution() {
    for children in [1, 3] {
        let tv = first_token_tv(true, children);
        assert!(tv < 0.02, "sampled children {children}: tv {tv}");
        let tv = first_token_tv(false, children);
        assert!(tv < 0.02, "fixed children {children}: tv {tv}");
    }
}

#[test]
fn restricted_draft_gives_zero_mass_outside_subset() {
    let subset = frspec_core::vocab::RankedSubset::from_order(&[3, 1, 0, 2], 4, 2, &[]).unwrap();
    let d = DraftDistribution::restricted(vec![0.25, 0.75], &subset).unwrap();
    assert_eq!(d.prob(3), 0.25);
    assert_eq!(d.prob(1), 0.75);
    assert_eq!(d.prob(0), 0.0);
    assert_eq!(d.prob(2), 0.0);
}
