use std::path::Path;

use pgbart::diagnostics::convergence_summary;
use pgbart::ingest::{friedman_f, gen_friedman, DataSource, Dataset, Generator, ModelSpec};
use pgbart::interpret::{ice, pdp, variable_importance, InterpretOptions};
use pgbart::likelihood::{ThetaPrior, ThetaSampler};
use pgbart::proposals::SplitVarWeights;
use pgbart::tree::{NodeKind, SplitRule, Tree};
use pgbart::{run_chains, Family, Likelihood, LikelihoodSpec, Link, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn friedman_spec(p: usize, m: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        data: DataSource {
            generator: Some(Generator::Friedman {
                n: 120,
                p,
                noise: 1.0,
                seed: 21,
            }),
            ..DataSource::default()
        },
        m,
        tune: 200,
        draws: 200,
        chains: 2,
        seed,
        ..ModelSpec::default()
    }
}

fn fit(spec: &ModelSpec, data: &Dataset) -> Trace {
    let model = spec.build_model(data).unwrap();
    run_chains(&model, spec.chains, spec.seed, &spec.run_settings()).unwrap()
}

/// sigma posterior under a Normal likelihood with known mean 0 and a
/// half-normal prior, tabulated by trapezoid quadrature.
fn numeric_cdf(ss: f64, n: usize, scale: f64) -> impl Fn(f64) -> f64 {
    let log_post = move |s: f64| -(n as f64) * s.ln() - ss / (2.0 * s * s) - s * s / (2.0 * scale * scale);
    let (lo, hi, k) = (1e-3, 20.0, 200_000);
    let h = (hi - lo) / k as f64;
    let grid: Vec<f64> = (0..=k).map(|i| lo + i as f64 * h).collect();
    let peak = grid.iter().map(|&s| log_post(s)).fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = grid.iter().map(|&s| (log_post(s) - peak).exp()).collect();
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let total = *cdf.last().unwrap();
    move |s: f64| {
        if s <= lo {
            return 0.0;
        }
        let i = (((s - lo) / h) as usize).min(k - 1);
        let t = (s - grid[i]) / h;
        (cdf[i] + t * (cdf[i + 1] - cdf[i])) / total
    }
}

#[test]
fn metropolis_sigma_matches_numeric_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 25;
    let y: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect();
    let ss: f64 = y.iter().map(|v| v * v).sum();
    let scale = 3.0;
    let spec = LikelihoodSpec::new(Family::Normal, Link::Identity, 1, vec![ThetaPrior::HalfNormal { scale }]).unwrap();
    let lik = Likelihood::new(spec, y).unwrap();
    let latent = vec![0.0; n];
    let mut mh = ThetaSampler::new(1, 0.5);
    let mut theta = vec![1.0];
    for _ in 0..5000 {
        theta = mh.step(&lik, &latent, &theta, &mut rng).unwrap().0;
    }
    mh.end_tuning();
    let mut draws = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        theta = mh.step(&lik, &latent, &theta, &mut rng).unwrap().0;
        draws.push(theta[0]);
    }
    draws.sort_by(f64::total_cmp);
    let cdf = numeric_cdf(ss, n, scale);
    let m = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = cdf(s);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS distance {ks}");
}

#[test]
fn split_variable_draws_pass_chi_square() {
    let weights = vec![1.0, 2.0, 3.0, 0.5, 3.5];
    let w = SplitVarWeights::from_prior(weights.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 100_000;
    let mut counts = vec![0.0; weights.len()];
    for _ in 0..draws {
        counts[w.sample(&mut rng)] += 1.0;
    }
    let total: f64 = weights.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(c, wt)| {
            let e = draws as f64 * wt / total;
            (c - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((weights.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi2 {stat}, p {p}");
}

#[test]
fn inclusion_per_draw_counts_every_split() {
    let spec = friedman_spec(5, 10, 3);
    let data = spec.data.load(Path::new(".")).unwrap();
    let trace = fit(&spec, &data);
    for chain in &trace.chains {
        assert_eq!(chain.forests.len(), chain.variable_inclusion.len());
        for snap in &chain.forests {
            assert_eq!(snap.count_split_vars(data.p()), chain.variable_inclusion[snap.draw]);
        }
    }
}

#[test]
fn ice_at_observed_value_is_posterior_mean() {
    let spec = friedman_spec(5, 10, 4);
    let data = spec.data.load(Path::new(".")).unwrap();
    let trace = fit(&spec, &data);
    let mean = trace.latent_mean();
    let opts = InterpretOptions {
        draws: usize::MAX,
        ..InterpretOptions::default()
    };
    for i in [0, 17, 63] {
        let xi = data.x.get(i, 2);
        let row_only = data.x.select_rows(&[i]);
        let r = ice(&trace, &row_only, 2, &[xi, xi + 0.5], 1, None, &opts).unwrap();
        assert!((r.curves[0][0][0] - mean[i]).abs() <= 1e-9, "{} vs {}", r.curves[0][0][0], mean[i]);
    }
}

fn brute_excluded(tree: &Tree, node: usize, x: &[f64], keep: usize) -> f64 {
    match &tree.node(node).kind {
        NodeKind::Leaf { value } => value[0],
        NodeKind::Internal {
            split_var,
            rule,
            left,
            right,
        } => {
            if *split_var == keep {
                let go_left = match rule {
                    SplitRule::Continuous(t) => x[keep] <= *t,
                    SplitRule::OneHot(c) => x[keep] == *c,
                    SplitRule::Subset(s) => s.contains(&x[keep]),
                };
                brute_excluded(tree, if go_left { *left } else { *right }, x, keep)
            } else {
                let (nl, nr) = (tree.node(*left).n_obs as f64, tree.node(*right).n_obs as f64);
                (nl * brute_excluded(tree, *left, x, keep) + nr * brute_excluded(tree, *right, x, keep)) / (nl + nr)
            }
        }
    }
}

#[test]
fn pdp_matches_brute_force_recursion() {
    let spec = friedman_spec(5, 10, 5);
    let data = spec.data.load(Path::new(".")).unwrap();
    let trace = fit(&spec, &data);
    let opts = InterpretOptions {
        draws: usize::MAX,
        ..InterpretOptions::default()
    };
    let grid = [0.1, 0.45, 0.9];
    let res = pdp(&trace, &data.x, 0, &grid, None, &opts).unwrap();
    let snaps: Vec<_> = trace.snapshots().collect();
    for (g, point) in grid.iter().zip(&res.points) {
        let mut x = data.x.row(0).to_vec();
        x[0] = *g;
        let per_snap: Vec<f64> = snaps
            .iter()
            .map(|s| {
                s.forests[0]
                    .trees
                    .iter()
                    .map(|t| brute_excluded(t, t.root(), &x, 0))
                    .sum()
            })
            .collect();
        let mean = per_snap.iter().sum::<f64>() / per_snap.len() as f64;
        assert!((point.mean - mean).abs() <= 1e-9 * mean.abs().max(1.0), "{} vs {mean}", point.mean);
    }
}

#[test]
fn importance_ordering_ignores_response_scale() {
    let spec = friedman_spec(6, 20, 6);
    let data = spec.data.load(Path::new(".")).unwrap();
    let mut scaled = data.clone();
    for v in &mut scaled.y {
        *v *= 10.0;
    }
    let opts = InterpretOptions::default();
    let a = variable_importance(&fit(&spec, &data), &data.x, &opts).unwrap();
    let b = variable_importance(&fit(&spec, &scaled), &scaled.x, &opts).unwrap();
    assert_eq!(a.ordering, b.ordering);
}

#[test]
fn friedman_generator_is_reproducible_and_centered() {
    let a = gen_friedman(50, 7, 1.0, 77).unwrap();
    let b = gen_friedman(50, 7, 1.0, 77).unwrap();
    assert_eq!(a, b);

    // E[sin(pi U V)] by midpoint quadrature
    let k = 2000;
    let h = 1.0 / k as f64;
    let mut e_sin = 0.0;
    for i in 0..k {
        for j in 0..k {
            e_sin += (std::f64::consts::PI * (i as f64 + 0.5) * h * (j as f64 + 0.5) * h).sin();
        }
    }
    e_sin *= h * h;
    let analytic = 10.0 * e_sin + 20.0 / 12.0 + 5.0 + 2.5;
    let big = gen_friedman(100_000, 5, 1.0, 5).unwrap();
    let f = big.truth.unwrap();
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - analytic).abs() <= 3.0 * sd / n.sqrt(), "{mean} vs {analytic}");
    let row = big.x.row(0);
    assert_eq!(f[0], friedman_f(row));
}

#[test]
fn coal_chains_agree() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let spec = ModelSpec::from_file(&dir.join("coal.json")).unwrap();
    let data = spec.data.load(&dir).unwrap();
    let trace = fit(&spec, &data);
    let s = convergence_summary(&trace, false).unwrap();
    let below = s.points.iter().filter(|p| p.rhat.unwrap() < 1.05).count() as f64 / s.points.len() as f64;
    assert!(below >= 0.95, "{below}");
}

#[test]
fn systematic_offsets_cover_weights_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.random_range(1..12);
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        let u = rng.random::<f64>() / k as f64;
        let idx = pgbart::sampler::systematic_resample_with_offset(&w, u);
        assert_eq!(idx.len(), k);
        assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        for (j, wj) in w.iter().enumerate() {
            let c = idx.iter().filter(|&&i| i == j).count() as f64;
            assert!((c - wj * k as f64).abs() < 1.0 + 1e-9);
        }
    }
}
