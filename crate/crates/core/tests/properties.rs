use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpm_core::circuit::{bind, build_hea, rewrite_cnot_to_cz, GateKind, GateSpec, ParamCircuit, ParamSlot, PartitionSpec, Topology};
use rpm_core::cutter::{enumerate_terms, evaluate_partitioned};
use rpm_core::data::{augment, downsample_8x8, gen_synthetic, AugmentConfig, Sample};
use rpm_core::qsim::{ancilla_expectation, expectation, hadamard_test_circuit, Observable, Part, C64};
use rpm_core::shots::sample_inner;
use rpm_core::train::{train, FreezeSet, TrainConfig};
use rpm_core::verify::{random_cut_circuit, random_small_model};

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn angles(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..TAU)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_preserves_norm(seed in any::<u64>(), n in 2usize..=7, depth in 1usize..=3, ring in any::<bool>()) {
        let top = if ring { Topology::Ring } else { Topology::Line };
        let c = build_hea(n, depth, top).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = angles(&mut r, n);
        let theta = angles(&mut r, c.n_theta());
        let psi = bind(&c, &x, &theta, &[]).unwrap().run().unwrap();
        prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cnot_rewrite_preserves_state(seed in any::<u64>(), n in 2usize..=5, n_gates in 1usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut gates = Vec::new();
        let mut t = 0;
        for _ in 0..n_gates {
            let q = r.random_range(0..n);
            gates.push(GateSpec::rotation(GateKind::Ry, q, ParamSlot::Theta(t)));
            t += 1;
            let mut p = r.random_range(0..n);
            if p == q {
                p = (q + 1) % n;
            }
            gates.push(GateSpec::fixed(GateKind::CNOT, &[q, p]));
        }
        let c = ParamCircuit::new(n, gates).unwrap();
        let rewritten = rewrite_cnot_to_cz(&c);
        prop_assert!(rewritten.gates().iter().all(|g| g.kind != GateKind::CNOT));
        let theta = angles(&mut r, c.n_theta());
        let a = bind(&c, &[], &theta, &[]).unwrap().run().unwrap();
        let b = bind(&rewritten, &[], &theta, &[]).unwrap().run().unwrap();
        for (u, v) in a.amplitudes().iter().zip(b.amplitudes()) {
            prop_assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn hadamard_test_matches_inner_product(seed in any::<u64>()) {
        let c = build_hea(4, 2, Topology::Line).unwrap();
        let part = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let block = enumerate_terms(&c, &part).unwrap().blocks()[0].with_partition_gates().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..block.n_data()).map(|_| r.random()).collect();
        let theta = angles(&mut r, block.n_theta());
        let za: Vec<f64> = (0..block.n_zeta()).map(|_| r.random()).collect();
        let zb: Vec<f64> = (0..block.n_zeta()).map(|_| r.random()).collect();
        let u = bind(&block, &x, &theta, &za).unwrap();
        let v = bind(&block, &x, &theta, &zb).unwrap();
        let want = u.run().unwrap().inner(&v.run().unwrap()).unwrap();
        let re = ancilla_expectation(&hadamard_test_circuit(&u, &v, Part::Re).unwrap()).unwrap();
        let im = ancilla_expectation(&hadamard_test_circuit(&u, &v, Part::Im).unwrap()).unwrap();
        prop_assert!((C64::new(re, im) - want).norm() < 1e-12);
    }

    #[test]
    fn partitioned_evaluation_is_exact(seed in any::<u64>(), n in 4usize..=6, cuts in 0usize..=3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (c, part) = random_cut_circuit(&mut r, n, cuts).unwrap();
        let x: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let theta = angles(&mut r, c.n_theta());
        let obs = Observable::z_string(n, &[0, n - 1]).unwrap();
        let whole = expectation(&bind(&c, &x, &theta, &[]).unwrap().run().unwrap(), &obs).unwrap();
        let split = evaluate_partitioned(&enumerate_terms(&c, &part).unwrap(), &x, &theta, &obs).unwrap();
        prop_assert!((whole - split).abs() < 1e-9);
    }

    #[test]
    fn model_is_linear_in_lambda(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (mut model, x) = random_small_model(seed, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let l1: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let l2: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut at = |l: &[f64]| {
            model.set_lambda_real(l).unwrap();
            model.eval(&x).unwrap()
        };
        let f1 = at(&l1);
        let f2 = at(&l2);
        let mix: Vec<f64> = l1.iter().zip(&l2).map(|(p, q)| a * p + b * q).collect();
        let fm = at(&mix);
        prop_assert!((fm - (f1 * a + f2 * b)).norm() < 1e-12);
    }

    #[test]
    fn downsampling_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..784).map(|_| r.random()).collect();
        let q: Vec<f64> = (0..784).map(|_| r.random()).collect();
        let mix: Vec<f64> = p.iter().zip(&q).map(|(u, v)| a * u + b * v).collect();
        let (dp, dq, dm) = (downsample_8x8(&p).unwrap(), downsample_8x8(&q).unwrap(), downsample_8x8(&mix).unwrap());
        for j in 0..64 {
            prop_assert!((dm[j] - (a * dp[j] + b * dq[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_keeps_label_and_range(seed in any::<u64>(), label in 0u8..2) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Sample { features: (0..64).map(|_| r.random()).collect(), label: label as f64 };
        let out = augment(&s, &mut r, &AugmentConfig::default());
        prop_assert_eq!(out.label, s.label);
        prop_assert_eq!(out.features.len(), 64);
        prop_assert!(out.features.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shot_estimates_are_unbiased(seed in any::<u64>(), re in -1.0f64..1.0, im in -1.0f64..1.0, m in 1u64..400) {
        let v = C64::new(re, im) / C64::new(re, im).norm().max(1.0);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 4000;
        let (mut sum, mut sq) = (C64::new(0.0, 0.0), 0.0);
        for _ in 0..n {
            let e = sample_inner(v, m, &mut r).unwrap().value;
            sum += e;
            sq += (e - v).norm_sqr();
        }
        let mean = sum / n as f64;
        // per-component variance is (1 - v²)/m ≤ 1/m
        let sd = (2.0 / (m as f64 * n as f64)).sqrt();
        prop_assert!((mean - v).norm() < 5.0 * sd + 1e-12);
        prop_assert!(sq / n as f64 <= 2.0 / m as f64 * 1.2 + 1e-12);
    }
}

fn toy_problem(seed: u64, l: usize) -> (rpm_core::rpm::RpmModel, rpm_core::data::Dataset, rpm_core::data::Dataset) {
    let ds = gen_synthetic(4, 1, Topology::Ring, 48, 100 + seed).unwrap();
    let tr: Vec<usize> = (0..32).collect();
    let va: Vec<usize> = (32..48).collect();
    let part = PartitionSpec::contiguous(4, 2).unwrap();
    let mut model = rpm_core::rpm::hea_model(4, 1, Topology::Ring, &part, &[0], l).unwrap();
    model.init_random(&mut ChaCha8Rng::seed_from_u64(seed));
    (model, ds.select(&tr), ds.select(&va))
}

#[test]
fn small_learning_rate_does_not_increase_loss() {
    let mut ok = 0;
    for seed in 0..10 {
        let (mut model, tr, va) = toy_problem(seed, 2);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let rep = train(&mut model, &tr, &va, &cfg).unwrap();
        if rep.records[0].train_mse <= rep.initial_train_mse {
            ok += 1;
        }
    }
    assert!(ok >= 9, "{ok}/10 seeds descended");
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        seed: 3,
        augment: None,
        ..TrainConfig::default()
    };
    let run = || {
        let (mut model, tr, va) = toy_problem(1, 3);
        let rep = train(&mut model, &tr, &va, &cfg).unwrap();
        (rep.to_csv(), model.to_json().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_groups_are_bit_identical() {
    for freeze in ["theta", "zeta,lambda", "theta,lambda"] {
        let freeze: FreezeSet = freeze.parse().unwrap();
        let (mut model, tr, va) = toy_problem(2, 2);
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            freeze,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        train(&mut model, &tr, &va, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(freeze.theta, bits(model.theta()) == bits(before.theta()));
        assert_eq!(freeze.zeta, model.zeta() == before.zeta());
        assert_eq!(freeze.lambda, model.lambda() == before.lambda());
    }
}
