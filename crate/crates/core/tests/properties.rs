use abdesign::bandwidth::{rule_of_thumb, shrinkage_covariance, BandwidthState};
use abdesign::data::{CovariateSet, Partition};
use abdesign::ga::{optimize, GaConfig};
use abdesign::kernel::{compute_gram, criterion, criterion_delta, SwapCache};
use abdesign::linalg::min_eigenvalue;
use abdesign::metrics::{
    fit_logistic, fit_ols, linear_basis, mahalanobis_balance, mse_difference_in_mean, LinearModelSpec,
};
use abdesign::online::{init_online, OnlineConfig};
use abdesign::reduce::{fit_pca, transform, update_pca, PcaTarget};
use abdesign::simlab::{run_comparison, run_replicate, Scenario, ScenarioConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(n: std::ops::Range<usize>, p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, p), n)
}

fn data_and_labels(groups: usize) -> impl Strategy<Value = (CovariateSet, Vec<usize>)> {
    (1usize..4, 2 * groups..24)
        .prop_flat_map(move |(p, n)| (rows(n..n + 1, p), Just(n)))
        .prop_flat_map(move |(r, n)| {
            let data = CovariateSet::from_rows(&r).unwrap();
            (Just(data), labels(n, groups))
        })
}

/// Labels with every group non-empty.
fn labels(n: usize, groups: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..groups, n - groups)
        .prop_shuffle()
        .prop_map(move |mut v| {
            v.extend(0..groups);
            v
        })
}

fn gram_of(data: &CovariateSet) -> abdesign::KernelGram {
    compute_gram(data, &BandwidthState::isotropic(data.dim(), 0.7).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_with_dominant_constant_diagonal(r in rows(2..15, 3)) {
        let data = CovariateSet::from_rows(&r).unwrap();
        let gram = gram_of(&data);
        let d = gram.entry(0, 0);
        for i in 0..data.len() {
            prop_assert_eq!(gram.entry(i, i), d);
            for j in 0..data.len() {
                prop_assert_eq!(gram.entry(i, j), gram.entry(j, i));
                prop_assert!(gram.entry(i, j) <= d);
            }
        }
    }

    #[test]
    fn criterion_ignores_group_names((data, labels) in data_and_labels(3), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let gram = gram_of(&data);
        let p = Partition::new(labels, 3).unwrap();
        prop_assert_eq!(criterion(&gram, &p).unwrap(), criterion(&gram, &p.relabel(&perm).unwrap()).unwrap());
    }

    #[test]
    fn replicated_groups_have_zero_criterion(r in rows(1..8, 2), groups in 2usize..4) {
        let all: Vec<Vec<f64>> = (0..groups).flat_map(|_| r.clone()).collect();
        let data = CovariateSet::from_rows(&all).unwrap();
        let labels: Vec<usize> = (0..groups).flat_map(|g| vec![g; r.len()]).collect();
        let v = criterion(&gram_of(&data), &Partition::new(labels, groups).unwrap()).unwrap();
        prop_assert_eq!(v, 0.0);
    }

    #[test]
    fn swap_delta_equals_recompute((data, labels) in data_and_labels(2), picks in prop::collection::vec((0usize..1000, 0usize..1000), 1..20)) {
        let gram = gram_of(&data);
        let mut p = Partition::new(labels, 2).unwrap();
        for (a, b) in picks {
            let zeros = p.members(0);
            let ones = p.members(1);
            let (i, j) = (zeros[a % zeros.len()], ones[b % ones.len()]);
            let cache = SwapCache::new(&gram, &p).unwrap();
            let fast = criterion_delta(&gram, &p, &cache, (i, j)).unwrap();
            let mut l = p.labels().to_vec();
            l.swap(i, j);
            p = Partition::new(l, 2).unwrap();
            prop_assert_eq!(fast, criterion(&gram, &p).unwrap());
        }
    }

    #[test]
    fn shrinkage_is_spd_and_lambda_is_a_weight(n in 2usize..40, p in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect()).collect();
        let data = CovariateSet::from_rows(&r).unwrap();
        let s = shrinkage_covariance(&data, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.lambda));
        prop_assert!(min_eigenvalue(&s.covariance) > 0.0);
        let h = rule_of_thumb(&s.covariance, n).unwrap();
        prop_assert!(min_eigenvalue(&h) > 0.0);
    }

    #[test]
    fn sequential_bandwidth_matches_one_shot(r in rows(12..60, 3), cuts in prop::collection::vec(0.0f64..1.0, 1..4)) {
        let data = CovariateSet::from_rows(&r).unwrap();
        let n = data.len();
        let mut points: Vec<usize> = cuts.iter().map(|c| 2 + (c * (n - 2) as f64) as usize).collect();
        points.push(2);
        points.push(n);
        points.sort_unstable();
        points.dedup();
        let idx: Vec<usize> = (0..n).collect();
        let mut state = BandwidthState::from_data(&data.select(&idx[..points[0]]), None).unwrap();
        for w in points.windows(2) {
            state = state.update_inverse(&data.select(&idx[w[0]..w[1]])).unwrap();
        }
        let full = BandwidthState::from_data(&data, None).unwrap();
        let err = (state.inverse() - full.inverse()).amax() / full.inverse().amax();
        prop_assert!(err <= 1e-8, "relative error {}", err);
    }

    #[test]
    fn pca_updates_stay_orthonormal_and_sorted(r in rows(30..60, 4), batches in 1usize..4) {
        let data = CovariateSet::from_rows(&r).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunk = data.len() / (batches + 1);
        let mut state = fit_pca(&data.select(&idx[..chunk]), PcaTarget::Components(2)).unwrap();
        for b in 1..=batches {
            let end = if b == batches { data.len() } else { (b + 1) * chunk };
            state = update_pca(&state, &data.select(&idx[b * chunk..end])).unwrap();
            let c = state.components();
            let gram = &c * c.transpose();
            prop_assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-8);
            let v = state.explained_variance();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn pca_transform_is_affine(r in rows(5..20, 3), x in prop::collection::vec(-5.0f64..5.0, 3), y in prop::collection::vec(-5.0f64..5.0, 3), a in 0.0f64..1.0) {
        let state = fit_pca(&CovariateSet::from_rows(&r).unwrap(), PcaTarget::Components(2)).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + (1.0 - a) * v).collect();
        let t = transform(&state, &CovariateSet::from_rows(&[x, y, mix]).unwrap()).unwrap();
        for k in 0..2 {
            let expect = a * t.row(0)[k] + (1.0 - a) * t.row(1)[k];
            prop_assert!((t.row(2)[k] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn mahalanobis_is_affine_invariant((data, _) in data_and_labels(2), seed in any::<u64>(), shift in -3.0f64..3.0, scale in 0.5f64..4.0) {
        prop_assume!(data.len() >= data.dim() + 4);
        let p = Partition::random_balanced(data.len(), 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let dim = data.dim();
        let moved: Vec<Vec<f64>> = data
            .rows()
            .map(|z| (0..dim).map(|k| scale * (z[k] + 0.5 * z[(k + 1) % dim]) + shift).collect())
            .collect();
        let moved = CovariateSet::from_rows(&moved).unwrap();
        let (a, b) = (mahalanobis_balance(&data, &p).unwrap(), mahalanobis_balance(&moved, &p).unwrap());
        prop_assume!(!a.shrunk && !b.shrunk);
        prop_assert!((a.mean - b.mean).abs() <= 1e-7 * a.mean.max(1.0));
    }

    #[test]
    fn difference_in_mean_mse_has_noise_floor(r in rows(4..20, 2), coef in prop::collection::vec(-3.0f64..3.0, 3), sigma in 0.0f64..2.0, seed in any::<u64>()) {
        prop_assume!(r.len() % 2 == 0);
        let data = CovariateSet::from_rows(&r).unwrap();
        let spec = LinearModelSpec { basis: linear_basis(2), coefficients: coef, treatment_effects: vec![1.0], sigma };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Partition::random_balanced(data.len(), 2, &mut rng).unwrap();
        let floor = sigma * sigma / data.len() as f64;
        prop_assert!(mse_difference_in_mean(&spec, &data, &p).unwrap() >= floor - 1e-15);
    }

    #[test]
    fn ols_residuals_are_orthogonal(n in 8usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { rand::Rng::random_range(&mut rng, -2.0..2.0) });
        let y: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
        let fit = fit_ols(&x, &y).unwrap();
        let beta = nalgebra::DVector::from_vec(fit.coefficients);
        let resid = nalgebra::DVector::from_vec(y) - &x * beta;
        prop_assert!((x.transpose() * resid).amax() < 1e-8);
    }

    #[test]
    fn converged_logistic_has_flat_gradient(n in 30usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rand::Rng::random_range(&mut rng, -1.0..1.0) });
        let y: Vec<f64> = (0..n).map(|_| if rand::Rng::random_bool(&mut rng, 0.5) { 1.0 } else { 0.0 }).collect();
        if let Ok(fit) = fit_logistic(&x, &y) {
            prop_assert!(fit.gradient_norm <= 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ga_invariants((data, _) in data_and_labels(2), groups in 2usize..4, seed in any::<u64>()) {
        prop_assume!(data.len() >= 2 * groups);
        let gram = gram_of(&data);
        let config = GaConfig { population: 12, elites: 4, max_iters: 15, ..GaConfig::default() }.with_seed(seed);
        let a = optimize(&gram, groups, &config).unwrap();
        let b = optimize(&gram, groups, &config).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(a.value, criterion(&gram, &a.partition).unwrap());
        prop_assert!(a.partition.is_balanced());
        let reversed: Vec<usize> = (0..groups).rev().collect();
        prop_assert_eq!(a.value, criterion(&gram, &a.partition.relabel(&reversed).unwrap()).unwrap());
    }

    #[test]
    fn online_never_rewrites_the_past(r in rows(30..50, 2), groups in 2usize..4, sizes in prop::collection::vec(1usize..9, 1..4), seed in any::<u64>()) {
        let data = CovariateSet::from_rows(&r).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let first = 2 * groups + 2;
        let config = OnlineConfig { ga: GaConfig { population: 10, elites: 2, max_iters: 8, ..GaConfig::default() }.with_seed(seed), ..OnlineConfig::default() };
        let run = || {
            let mut state = init_online(&data.select(&idx[..first]), groups, config.clone()).unwrap();
            let mut history = vec![state.labels().to_vec()];
            let mut start = first;
            for &s in &sizes {
                let end = (start + s).min(data.len());
                state = state.assign_batch(&data.select(&idx[start..end])).unwrap().0;
                history.push(state.labels().to_vec());
                start = end;
            }
            history
        };
        let history = run();
        for w in history.windows(2) {
            prop_assert_eq!(&w[1][..w[0].len()], &w[0][..]);
            let p = Partition::new(w[1].clone(), groups).unwrap();
            let sizes = p.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(history, run());
    }
}

#[test]
fn simulation_replicates_are_individually_reproducible() {
    let mut c = ScenarioConfig::new(Scenario::Logistic, 3, 30);
    c.replicates = 3;
    c.seed = 11;
    c.ga = GaConfig {
        population: 10,
        elites: 2,
        max_iters: 5,
        ..GaConfig::default()
    };
    let report = run_comparison(&c).unwrap();
    for (r, rep) in report.replicates.iter().enumerate() {
        assert_eq!(&run_replicate(&c, r).unwrap(), rep);
        let d = &rep.values["discrepancy"]["th"];
        assert!(*d <= rep.values["randomized"]["th"]);
    }
}
