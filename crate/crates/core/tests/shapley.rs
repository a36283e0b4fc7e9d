mod common;

use common::{linf, permutation_oracle, random_game};
use fedcoin::shapley::games::{glove, FnGame, SynergyGame};
use fedcoin::shapley::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn subset_formula_matches_permutation_average() {
    for seed in 0..10 {
        let k = 2 + (seed as usize % 6);
        let g = random_game(seed, k);
        let exact = exact_shapley(&g).unwrap();
        assert!(linf(&exact, &permutation_oracle(&g)) < 1e-12, "seed {seed}");
    }
    assert!(linf(&exact_shapley(&glove()).unwrap(), &[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]) < 1e-12);
}

#[test]
fn monte_carlo_converges_to_exact() {
    let g = Memoized::new(random_game(42, 6));
    let exact = permutation_oracle(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut est = ShapleyEstimate::new(6);
    for _ in 0..5000 {
        est = est.update(&posap_iteration(&g, &mut rng).unwrap()).unwrap();
    }
    let max = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(linf(&est.values, &exact) < 0.03 * (1.0 + max));
}

#[test]
fn synergy_pair_splits_bonus() {
    let s = exact_shapley(&SynergyGame::toy(5)).unwrap();
    assert!(linf(&s, &[1.5, 1.5, 1.0, 1.0, 1.0]) < 1e-12);
}

#[test]
fn merging_single_estimate_is_identity() {
    let e = ShapleyEstimate {
        values: vec![0.1, -0.3, 0.7],
        iterations: 9,
    };
    assert_eq!(merge_estimates([&e]).unwrap(), e.values);
    assert!(merge_estimates(std::iter::empty()).is_err());
}

proptest! {
    #[test]
    fn every_iteration_is_efficient(seed in 0u64..1000, k in 1usize..9, draw in any::<u64>()) {
        let g = random_game(seed, k);
        let grand = g.value(&Coalition::from_members(k, 0..k)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let s = posap_iteration(&g, &mut rng).unwrap();
        prop_assert!((s.iter().sum::<f64>() - grand).abs() <= 1e-9);
    }

    #[test]
    fn sampled_orders_are_permutations(k in 1usize..40, draw in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let mut p = sample_permutation(&mut rng, k).unwrap().order().to_vec();
        p.sort_unstable();
        prop_assert_eq!(p, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn running_mean_equals_batch_mean(samples in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40)) {
        let mut est = ShapleyEstimate::new(3);
        for s in &samples {
            est = update_running_mean(&est, s).unwrap();
        }
        prop_assert_eq!(est.iterations, samples.len() as u64);
        for i in 0..3 {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / samples.len() as f64;
            prop_assert!((est.values[i] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn merge_is_iteration_weighted(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
        na in 1u64..1000,
        nb in 1u64..1000,
    ) {
        let ea = ShapleyEstimate { values: a.clone(), iterations: na };
        let eb = ShapleyEstimate { values: b.clone(), iterations: nb };
        let m = merge_estimates([&ea, &eb]).unwrap();
        for i in 0..4 {
            let want = (a[i] * na as f64 + b[i] * nb as f64) / (na + nb) as f64;
            prop_assert!((m[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_values_satisfy_axioms(weights in prop::collection::vec(0.0f64..3.0, 2..8), null in 0usize..8) {
        let k = weights.len();
        let null = null % k;
        let w = weights.clone();
        // Client `null` adds nothing; clients 0 and 1 are given equal weight
        // unless one of them is the null player.
        let g = FnGame::new(k, "axioms", move |s: &Coalition| {
            let mut v = 0.0;
            for i in s.members().filter(|&i| i != null) {
                v += if i == 1 && null != 0 { w[0] } else { w[i] };
            }
            v * v
        });
        let phi = exact_shapley(&g).unwrap();
        let grand = g.value(&Coalition::from_members(k, 0..k)).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - grand).abs() < 1e-9);
        prop_assert!(phi[null].abs() < 1e-9);
        if null > 1 {
            prop_assert!((phi[0] - phi[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 5),
        b in prop::collection::vec(-5.0f64..5.0, 5),
        c in prop::collection::vec(-5.0f64..5.0, 5),
        p in prop_oneof![Just(1.0), Just(2.0), Just(3.5), Just(f64::INFINITY)],
    ) {
        let d = |x: &[f64], y: &[f64]| lp_distance(x, y, p).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }
}
