//! Randomized invariants of the losses and networks.

use genb::losses::{bce_from_logits, distill_kl, pseudo_label, pseudo_label_suppressed, target_loss, DebiasLoss, KlMode};
use genb::models::{sample_noise, ModelConfig, VqaNet};
use genb::nn::sigmoid;
use genb::rng::{stream_rng, Stream};
use proptest::prelude::*;

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, n)
}

fn unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #[test]
    fn pseudo_label_stays_in_unit_interval(y_gt in unit(8), y_b in logits(8)) {
        for v in pseudo_label(&y_gt, &y_b).unwrap().values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        for v in pseudo_label_suppressed(&y_gt, &y_b).unwrap().values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn zero_bias_logit_returns_ground_truth(y_gt in unit(8)) {
        let zeros = vec![0.0; y_gt.len()];
        let label = pseudo_label(&y_gt, &zeros).unwrap();
        prop_assert_eq!(label.values(), &y_gt[..]);
    }

    #[test]
    fn confident_bias_lowers_the_label(g in 0.01f64..=1.0, a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |x: f64| pseudo_label(&[g], &[x]).unwrap().values()[0];
        prop_assert!(at(hi) <= at(lo));
    }

    #[test]
    fn zero_ground_truth_gives_zero_label(y_b in logits(6)) {
        let zeros = vec![0.0; 6];
        prop_assert!(pseudo_label(&zeros, &y_b).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distillation_is_nonnegative(t in logits(6), s in logits(6)) {
        for mode in [KlMode::Softmax, KlMode::Bernoulli] {
            prop_assert!(distill_kl(&t, &s, mode).unwrap().value >= -1e-12);
        }
    }

    #[test]
    fn bce_is_nonnegative_with_bounded_gradient(y in logits(6), t in unit(6)) {
        let loss = bce_from_logits(&y, &t).unwrap();
        prop_assert!(loss.value >= 0.0);
        for g in &loss.grad {
            prop_assert!(g.abs() <= 1.0 / 6.0 + 1e-12);
        }
    }

    #[test]
    fn plain_target_loss_ignores_bias_logits(y in logits(6), t in unit(6), a in logits(6), b in logits(6)) {
        let la = target_loss(&y, &t, &a, DebiasLoss::Plain).unwrap();
        let lb = target_loss(&y, &t, &b, DebiasLoss::Plain).unwrap();
        prop_assert_eq!(la, lb);
    }

    #[test]
    fn bias_logit_enters_pseudo_label_through_the_logistic(g in 0.0f64..=1.0, b in -20.0f64..20.0) {
        let expected = (2.0 * g * sigmoid(-2.0 * g * b)).min(1.0);
        prop_assert!((pseudo_label(&[g], &[b]).unwrap().values()[0] - expected).abs() <= 1e-12);
    }
}

fn net_config() -> ModelConfig {
    ModelConfig {
        visual_dim: 5,
        question_dim: 4,
        num_objects: 6,
        num_answers: 4,
        question_len: 3,
        vocab_size: 8,
        hidden_dim: 7,
        noise_dim: 3,
        gen_hidden: 4,
        disc_hidden: 4,
        init_seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_a_distribution_and_object_order_is_irrelevant(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0usize..8, 3),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let cfg = net_config();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let net = VqaNet::new(&cfg, &mut rng);
        let visual = sample_noise(&mut rng, cfg.num_objects, cfg.visual_dim) * 2.0;
        let out = net.forward(visual.view(), &tokens).unwrap();
        let alpha = out.attention.weights();
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let permuted = visual.select(ndarray::Axis(0), &perm);
        let out_p = net.forward(permuted.view(), &tokens).unwrap();
        for (a, b) in out.logits.iter().zip(out_p.logits.iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((out_p.attention.weights()[j] - alpha[p]).abs() <= 1e-12);
        }
    }
}
