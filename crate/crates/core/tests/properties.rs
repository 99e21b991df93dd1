use gradinterp::datasets::{
    agreement_probability, gen_boolean_drift, gen_rotated_moons, moons_skeleton, rotate_about,
    sample_boolean_step, BooleanSpec, Labels, MoonsSpec,
};
use gradinterp::diffcore::{Graph, ParamStore};
use gradinterp::losses::{gi_objective, LossSpec, ObjectiveKind};
use gradinterp::temporal_nn::{trelu_pointwise, TemporalModel, Time2Vec};
use proptest::prelude::*;
use rand::SeedableRng;

mod common;
use common::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, max_global_rejects: 4096, ..ProptestConfig::default() })]

    #[test]
    fn time_tangent_matches_central_differences(
        seed in 0u64..10_000,
        per_feature in any::<bool>(),
        x in prop::collection::vec(-2.0f64..2.0, 6),
        t in prop::collection::vec(-0.5f64..1.5, 3),
    ) {
        let spec = if per_feature { small_per_feature() } else { small_mlp() };
        let model = spec.build(seed).unwrap();
        let b = batch(&x, &t, &[0, 1, 0]);
        let exact = tangent(&model, &b);
        let coarse = central(&model, &b, 1e-5);
        let fine = central(&model, &b, 2.5e-6);
        // A kink between t - h and t + h makes the two estimates disagree.
        let smooth = coarse
            .data()
            .iter()
            .zip(fine.data())
            .all(|(&a, &c)| rel(a, c, 1e-6) < 1e-5);
        prop_assume!(smooth);
        for (&a, &c) in exact.data().iter().zip(coarse.data()) {
            prop_assert!(rel(a, c, 1e-6) < 1e-4, "tangent {a} vs central difference {c}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn gi_parameter_gradient_matches_finite_differences(
        seed in 0u64..10_000,
        x in prop::collection::vec(-2.0f64..2.0, 8),
        t in prop::collection::vec(0.0f64..1.0, 4),
        delta in -0.5f64..0.5,
        lambda in 0.1f64..2.0,
    ) {
        let mut model = small_mlp().build(seed).unwrap();
        let b = batch(&x, &t, &[0, 1, 1, 0]);
        let spec = LossSpec { lambda, ..LossSpec::new(ObjectiveKind::Gi) };

        let mut g = Graph::new();
        let j = gi_objective(&mut g, &model, &b, &spec, delta).unwrap();
        let grads = g.backward(j).unwrap();
        model.params_mut().zero_grad();
        model.params_mut().accumulate(&g, &grads);
        let analytic = model.params().clone();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params().ids().collect();
        let mut checked = 0;
        for _ in 0..12 {
            let id = ids[rand::Rng::random_range(&mut rng, 0..ids.len())];
            let k = rand::Rng::random_range(&mut rng, 0..model.params().value(id).len());
            let base = model.params().value(id).data()[k];
            let mut fd = |h: f64| {
                model.params_mut().value_mut(id).data_mut()[k] = base + h;
                let up = gi_value(&model, &b, &spec, delta);
                model.params_mut().value_mut(id).data_mut()[k] = base - h;
                let down = gi_value(&model, &b, &spec, delta);
                model.params_mut().value_mut(id).data_mut()[k] = base;
                (up - down) / (2.0 * h)
            };
            let (coarse, fine) = (fd(1e-6), fd(2.5e-7));
            if rel(coarse, fine, 1e-6) > 1e-4 {
                continue; // a ReLU kink sits inside the stencil
            }
            let a = analytic.grad(id).data()[k];
            prop_assert!(rel(a, coarse, 1e-6) < 1e-3, "{}[{k}]: {a} vs {coarse}", model.params().name(id));
            checked += 1;
        }
        prop_assert!(checked > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn generators_are_deterministic_per_seed(seed in any::<u64>()) {
        let m = MoonsSpec { domains: 3, per_domain: 20, seed, ..MoonsSpec::default() };
        prop_assert_eq!(gen_rotated_moons(&m).unwrap(), gen_rotated_moons(&m).unwrap());
        let b = BooleanSpec { per_step: 30, test_samples: 30, seed, ..BooleanSpec::default() };
        prop_assert_eq!(gen_boolean_drift(&b).unwrap(), gen_boolean_drift(&b).unwrap());
        let other = MoonsSpec { seed: seed.wrapping_add(1), ..m.clone() };
        prop_assert_ne!(gen_rotated_moons(&m).unwrap(), gen_rotated_moons(&other).unwrap());
    }

    #[test]
    fn time2vec_sinusoids_are_periodic(
        seed in any::<u64>(),
        omega in prop::collection::vec(prop_oneof![-3.0f64..-0.1, 0.1f64..3.0], 5),
        t in -5.0f64..5.0,
    ) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tv = Time2Vec::new(&mut store, "tv", 5, 2, &mut rng).unwrap();
        store.value_mut(tv.omega()).data_mut().copy_from_slice(&omega);
        let here = tv.eval(&store, t);
        for (a, &w) in omega.iter().enumerate().skip(2) {
            let period = 2.0 * std::f64::consts::PI / w;
            let there = tv.eval(&store, t + period);
            prop_assert!((here[a] - there[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn moons_skeleton_rotates_back_onto_domain_zero(
        seed in any::<u64>(),
        step in -40.0f64..40.0,
        cx in -1.0f64..1.0,
        cy in -1.0f64..1.0,
    ) {
        let spec = MoonsSpec { domains: 5, per_domain: 24, step_degrees: step, center: [cx, cy], seed, ..MoonsSpec::default() };
        let ds = moons_skeleton(&spec).unwrap();
        let base = &ds.snapshots()[0];
        for (i, s) in ds.snapshots().iter().enumerate().skip(1) {
            prop_assert_eq!(&s.y, &base.y);
            for r in 0..s.len() {
                let back = rotate_about([s.x.get(r, 0), s.x.get(r, 1)], [cx, cy], -step * i as f64);
                prop_assert!((back[0] - base.x.get(r, 0)).abs() < 1e-9);
                prop_assert!((back[1] - base.x.get(r, 1)).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn trelu_reduces_to_relu_with_zero_subnets(x in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let z = vec![0.0; x.len()];
        let out = trelu_pointwise(&x, &z, &z, &z).unwrap();
        for (o, v) in out.iter().zip(&x) {
            prop_assert_eq!(*o, v.max(0.0));
        }
    }

    #[test]
    fn trelu_passes_inputs_above_the_threshold(
        g in -2.0f64..2.0,
        above in 0.0f64..3.0,
        h in -1.0f64..1.0,
        v in -1.0f64..1.0,
    ) {
        let x = g + above;
        prop_assert_eq!(trelu_pointwise(&[x], &[h], &[g], &[v]).unwrap()[0], x);
    }

    #[test]
    fn trelu_jump_at_the_threshold_is_g_minus_v(
        g in -2.0f64..2.0,
        h in -1.0f64..1.0,
        v in -1.0f64..1.0,
    ) {
        // Above: x, so g at the threshold. Below: h·(x - g) + v, tending to v.
        let eps = 1e-9;
        let below = trelu_pointwise(&[g - eps], &[h], &[g], &[v]).unwrap()[0];
        let at = trelu_pointwise(&[g], &[h], &[g], &[v]).unwrap()[0];
        prop_assert!(((at - below).abs() - (g - v).abs()).abs() < 1e-8);
        let continuous = trelu_pointwise(&[g - eps], &[h], &[g], &[g]).unwrap()[0];
        prop_assert!((continuous - g).abs() < 1e-8);
    }

    #[test]
    fn time2vec_linear_part_has_zero_second_difference(
        seed in any::<u64>(),
        t in -5.0f64..5.0,
        h in 0.01f64..1.0,
    ) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tv = Time2Vec::new(&mut store, "tv", 6, 3, &mut rng).unwrap();
        let (lo, mid, hi) = (tv.eval(&store, t - h), tv.eval(&store, t), tv.eval(&store, t + h));
        for a in 0..3 {
            prop_assert!((hi[a] - 2.0 * mid[a] + lo[a]).abs() < 1e-9);
        }
    }
}

#[test]
fn boolean_rates_match_the_schedule_within_three_sigma() {
    let n = 100_000;
    let d = 5;
    for step in 0..4 {
        let t = step as f64;
        let s = sample_boolean_step(t, n, d, 1000 + step).unwrap();
        let Labels::Class(y) = &s.y else {
            unreachable!()
        };
        let ones = y.iter().filter(|&&c| c == 1).count() as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((ones - 0.5).abs() < 3.0 * sigma, "P(y=1) at t={t}: {ones}");
        for j in 1..=d {
            let p = agreement_probability(j, t).unwrap();
            let agree = (0..n)
                .filter(|&r| s.x.get(r, j - 1) as usize == y[r])
                .count() as f64
                / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (agree - p).abs() < 3.0 * sigma,
                "feature {j} at t={t}: {agree} vs {p} (3σ = {})",
                3.0 * sigma
            );
        }
    }
}
