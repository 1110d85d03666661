use pgbart::diagnostics::{ess_bulk, hdi, hdi_count, split_rhat};
use pgbart::ingest::bin_coal;
use pgbart::likelihood::ThetaPrior;
use pgbart::proposals::{DepthPrior, LeafScale, SplitKind, SplitVarWeights, Welford};
use pgbart::sampler::{grow_tree_once, GrowContext, ParticleTree};
use pgbart::tree::{ColumnSet, NodeKind, Tree};
use pgbart::{Family, Likelihood, LikelihoodSpec, Link, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [SplitKind; 4] = [SplitKind::Continuous, SplitKind::OneHot, SplitKind::Subset, SplitKind::Continuous];

fn random_tree(seed: u64, n: usize, out_dim: usize) -> (Tree, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = KINDS.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..p)
                .map(|j| match KINDS[j] {
                    SplitKind::Continuous => rng.random_range(-1.0..1.0),
                    _ => rng.random_range(0..5) as f64,
                })
                .collect()
        })
        .collect();
    let x = Matrix::from_rows(&rows);
    let sum_mu: Vec<f64> = (0..n * out_dim).map(|_| rng.random::<f64>()).collect();
    let dims: Vec<usize> = (0..out_dim).collect();
    let prior = DepthPrior::new(0.95, 0.3).unwrap();
    let weights = SplitVarWeights::uniform(p).unwrap();
    let scale = LeafScale::new(vec![0.5; out_dim]);
    let ctx = GrowContext {
        x: &x,
        sum_mu: &sum_mu,
        out_dim,
        dims: &dims,
        m: 3,
        depth_prior: &prior,
        split_weights: &weights,
        split_kinds: &KINDS,
        leaf_scale: &scale,
    };
    let mut pt = ParticleTree::new_root(vec![0.0; out_dim], &dims, n, out_dim);
    while !pt.expandable.is_empty() {
        grow_tree_once(&mut pt, &ctx, &mut rng);
    }
    (pt.tree, x)
}

fn probe(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (0..KINDS.len())
        .map(|j| match KINDS[j] {
            SplitKind::Continuous => rng.random_range(-1.5..1.5),
            _ => rng.random_range(0..6) as f64,
        })
        .collect()
}

fn brute_hdi(v: &[f64], prob: f64) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let need = hdi_count(s.len(), prob);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..s.len() {
        for j in i..s.len() {
            if j + 1 - i >= need && s[j] - s[i] < best.0 {
                best = (s[j] - s[i], s[i], s[j]);
            }
        }
    }
    (best.1, best.2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn excluded_empty_is_predict(seed in any::<u64>(), n in 2usize..80, d in 1usize..3) {
        let (tree, _) = random_tree(seed, n, d);
        let x = probe(seed);
        let a = tree.predict(&x).unwrap();
        let b = tree.predict_excluded(&x, &ColumnSet::empty()).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn excluding_everything_is_constant(seed in any::<u64>(), n in 2usize..80) {
        let (tree, _) = random_tree(seed, n, 1);
        let all = ColumnSet::all(KINDS.len());
        let a = tree.predict_excluded(&probe(seed), &all).unwrap();
        let b = tree.predict_excluded(&probe(seed.wrapping_add(1)), &all).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grown_trees_audit_and_count(seed in any::<u64>(), n in 2usize..80) {
        let (tree, _) = random_tree(seed, n, 1);
        prop_assert!(tree.audit().is_ok());
        let internal = (0..tree.len()).filter(|&i| matches!(tree.node(i).kind, NodeKind::Internal { .. })).count();
        prop_assert_eq!(tree.count_split_vars(KINDS.len()).iter().sum::<usize>(), internal);
    }

    #[test]
    fn training_rows_reach_leaves_with_their_counts(seed in any::<u64>(), n in 2usize..80) {
        let (tree, x) = random_tree(seed, n, 1);
        prop_assert_eq!(tree.node(tree.root()).n_obs, n);
        for row in x.rows() {
            prop_assert!(tree.predict(row).is_ok());
        }
    }

    #[test]
    fn serialization_round_trips(seed in any::<u64>(), n in 2usize..60, d in 1usize..3) {
        let (tree, _) = random_tree(seed, n, d);
        let back = Tree::deserialize(&tree.serialize()).unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn depth_prior_decreasing_and_bounded(alpha in 0.01f64..0.99, beta in 0.01f64..5.0) {
        let prior = DepthPrior::new(alpha, beta).unwrap();
        let mut prev = f64::INFINITY;
        for d in 0..20 {
            let p = prior.p_nonterminal(d);
            prop_assert!(p <= alpha && p < prev);
            prev = p;
        }
    }

    #[test]
    fn split_weight_updates_never_decrease(counts in proptest::collection::vec(0usize..50, 1..8)) {
        let mut w = SplitVarWeights::uniform(counts.len()).unwrap();
        let before = w.weights().to_vec();
        w.update(&counts);
        for (a, b) in before.iter().zip(w.weights()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn welford_matches_two_pass(values in proptest::collection::vec(-1e3f64..1e3, 1000)) {
        let mut w = Welford::default();
        for v in &values {
            w.push(*v);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!(((w.variance().unwrap() - var) / var).abs() <= 1e-10);
        prop_assert!((w.mean - mean).abs() <= 1e-10 * mean.abs().max(1.0));
    }

    #[test]
    fn hdi_matches_brute_force(values in proptest::collection::vec(-50.0f64..50.0, 2..300), prob in 0.05f64..0.99, rounded in any::<bool>()) {
        let v: Vec<f64> = if rounded { values.iter().map(|x| x.round()).collect() } else { values };
        let (lo, hi) = hdi(&v, prob).unwrap();
        prop_assert!(lo <= hi);
        let inside = v.iter().filter(|x| **x >= lo && **x <= hi).count();
        prop_assert!(inside >= hdi_count(v.len(), prob));
        prop_assert_eq!((lo, hi), brute_hdi(&v, prob));
    }

    #[test]
    fn rhat_invariant_under_monotone_maps(seed in any::<u64>(), chains in 2usize..5, draws in 4usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..chains).map(|c| (0..draws).map(|_| rng.random_range(-3.0..3.0) + c as f64 * 0.3).collect()).collect();
        let r = split_rhat(&a).unwrap();
        let exp: Vec<Vec<f64>> = a.iter().map(|c| c.iter().map(|v| v.exp()).collect()).collect();
        let cube: Vec<Vec<f64>> = a.iter().map(|c| c.iter().map(|v| v.powi(3)).collect()).collect();
        prop_assert!((split_rhat(&exp).unwrap() - r).abs() <= 1e-12);
        prop_assert!((split_rhat(&cube).unwrap() - r).abs() <= 1e-12);
    }

    #[test]
    fn ess_bounded_on_iid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..4).map(|_| (0..500).map(|_| rng.random::<f64>()).collect()).collect();
        prop_assert!(ess_bulk(&a).unwrap() <= 2000.0 * 1.25);
    }

    #[test]
    fn discrete_pointwise_nonpositive(seed in any::<u64>(), fam in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (family, link, theta, priors) = match fam {
            0 => (Family::Poisson, Link::Exp, vec![], vec![]),
            1 => (Family::NegativeBinomial, Link::Exp, vec![rng.random_range(0.1..20.0)], vec![ThetaPrior::Exponential { rate: 0.1 }]),
            _ => (Family::Bernoulli, Link::Logistic, vec![], vec![]),
        };
        let spec = LikelihoodSpec::new(family, link, 1, priors).unwrap();
        let y: Vec<f64> = (0..30).map(|_| if fam == 2 { rng.random_range(0..2) as f64 } else { rng.random_range(0..40) as f64 }).collect();
        let latent: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lik = Likelihood::new(spec, y).unwrap();
        let (_, pointwise) = lik.loglik(&latent, &theta).unwrap();
        prop_assert!(pointwise.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn normal_loglik_peaks_at_response(seed in any::<u64>(), sigma in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
        let spec = LikelihoodSpec::new(Family::Normal, Link::Identity, 1, vec![ThetaPrior::HalfNormal { scale: 1.0 }]).unwrap();
        let lik = Likelihood::new(spec, y.clone()).unwrap();
        let best = lik.loglik(&y, &[sigma]).unwrap().0;
        let shifted: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        prop_assert!(lik.loglik(&shifted, &[sigma]).unwrap().0 <= best);
    }

    #[test]
    fn binning_conserves_count(ts in proptest::collection::vec(1800.0f64..1900.0, 2..400)) {
        prop_assume!(ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ts.iter().cloned().fold(f64::INFINITY, f64::min) >= 4.0);
        let d = bin_coal(&ts).unwrap();
        prop_assert_eq!(d.y.iter().sum::<f64>() as usize, ts.len());
        let years = (ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ts.iter().cloned().fold(f64::INFINITY, f64::min)) as usize;
        prop_assert_eq!(d.n(), years / 4);
    }
}
