//! Property tests over the public API.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vicurl_core::curriculum::{confidence, select, RetentionSchedule};
use vicurl_core::grpo::{clip_term, compute_advantages, kl_term, surrogate_loss, SurrogateConfig, TrajectoryGroup};
use vicurl_core::harness::pass_at_k;
use vicurl_core::policy::{softmax, PolicyParams};
use vicurl_core::rewards::{compute_rewards, RewardMode};
use vicurl_core::tasks::{generate_dataset, TaskConfig};
use vicurl_core::SelectionRule;

fn params_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, u64)> {
    (2usize..5, 1usize..4).prop_flat_map(|(v, t)| {
        let contexts = 1 + (t - 1) * v;
        (
            Just(v),
            Just(t),
            prop::collection::vec(-3.0f64..3.0, contexts * v * 2),
            any::<u64>(),
        )
    })
}

fn dataset(v: usize, t: usize) -> vicurl_core::Dataset {
    generate_dataset(
        &TaskConfig {
            vocab_size: v,
            answer_alphabet: v,
            answer_len: 1,
            context_len: 1,
            max_len: t,
            counts: vec![2],
        },
        0,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn advantages_are_centred_and_scaled(r in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = compute_advantages(&r, 1e-6).unwrap();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        let m2 = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        prop_assert!(m2 <= 1.0 + 1e-9);
        let shifted: Vec<f64> = r.iter().map(|x| x + 3.0).collect();
        let b = compute_advantages(&shifted, 1e-6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_never_exceeds_unclipped(rho in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.05f64..0.5) {
        prop_assert!(clip_term(rho, adv, eps) <= rho * adv + 1e-15);
        if (1.0 - eps..=1.0 + eps).contains(&rho) {
            prop_assert!((clip_term(rho, adv, eps) - rho * adv).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(a in prop::collection::vec(-4.0f64..4.0, 2..8), shift in -2.0f64..2.0) {
        let p = softmax(&a, 1.0);
        let q_logits: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * i as f64).collect();
        let q = softmax(&q_logits, 1.0);
        prop_assert!(kl_term(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kl_term(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn pass_at_k_bounds(n in 1usize..30, c_frac in 0.0f64..1.0, k_frac in 0.0f64..1.0) {
        let c = (c_frac * n as f64).floor() as usize;
        let k = 1 + (k_frac * (n - 1) as f64).floor() as usize;
        let v = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-12);
        if c > 0 && c < n {
            prop_assert!(v >= pass_at_k(n, c, 1).unwrap() - 1e-12);
        }
    }

    #[test]
    fn schedule_is_monotone_and_reaches_one(start in 0.01f64..1.0, total in 1usize..200, frac in 0.0f64..1.0) {
        let s = RetentionSchedule::from_fraction(start, total, frac).unwrap();
        let mut prev = 0.0;
        for t in 0..total + 5 {
            let b = s.retention(t);
            prop_assert!(b >= prev && b <= 1.0 && b >= start);
            prev = b;
        }
        prop_assert_eq!(s.retention(total), 1.0);
    }

    #[test]
    fn selection_is_permutation_equivariant_for_distinct_values(
        c in prop::collection::hash_set(0u32..1_000_000, 1..40),
        beta in 0.01f64..1.0,
        rot in 0usize..40,
    ) {
        let c: Vec<f64> = c.into_iter().map(|x| x as f64 / 1e6).collect();
        let s = select(&c, beta, SelectionRule::TopK).unwrap();
        let k = rot % c.len();
        let mut rotated = c.clone();
        rotated.rotate_left(k);
        let r = select(&rotated, beta, SelectionRule::TopK).unwrap();
        let mut expected = s.masks.clone();
        expected.rotate_left(k);
        prop_assert_eq!(r.masks, expected);
        prop_assert_eq!(r.tau, s.tau);
        for (m, x) in s.masks.iter().zip(&c) {
            prop_assert_eq!(*m, *x >= s.tau);
        }
    }

    #[test]
    fn policy_bytes_round_trip((v, t, logits, _) in params_strategy()) {
        let d = dataset(v, t);
        let p = PolicyParams::from_logits(d.policy_shape(), logits).unwrap();
        prop_assert_eq!(PolicyParams::from_bytes(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn confidence_is_a_unit_interval_value((v, t, logits, seed) in params_strategy()) {
        let d = dataset(v, t);
        let p = PolicyParams::from_logits(d.policy_shape(), logits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs: Vec<_> = (0..6).map(|_| p.sample_trajectory(1, 1.0, &mut rng).unwrap()).collect();
        let c = confidence(&trajs, v).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        for mode in [RewardMode::Oracle, RewardMode::MajorityVote, RewardMode::Entropy] {
            let r = compute_rewards(mode, &d.prompts[1], &trajs, v).unwrap();
            prop_assert!(r.values.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn surrogate_at_behaviour_policy_is_minus_scaled_kl((v, t, logits, seed) in params_strategy(), beta_kl in 0.0f64..1.0) {
        let d = dataset(v, t);
        let shape = d.policy_shape();
        let p = PolicyParams::from_logits(shape, logits.clone()).unwrap();
        let reference = PolicyParams::from_logits(shape, logits.iter().map(|x| -x).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs: Vec<_> = (0..4).map(|_| p.sample_trajectory(0, 1.0, &mut rng).unwrap()).collect();
        let cfg = SurrogateConfig { kl_coefficient: beta_kl, ..Default::default() };
        let rewards = compute_rewards(RewardMode::Oracle, &d.prompts[0], &trajs, v).unwrap();
        let group = TrajectoryGroup::new(d.prompts[0].clone(), trajs, rewards, cfg.advantage_epsilon, v).unwrap();
        let no_kl = SurrogateConfig { kl_coefficient: 0.0, ..cfg };
        // At ρ = 1 the clipped term averages the (centred) advantages.
        prop_assert!(surrogate_loss(&p, &reference, &group, &no_kl).unwrap().abs() < 1e-9);
        prop_assert!(surrogate_loss(&p, &reference, &group, &cfg).unwrap() <= 1e-9);
    }
}
