//! Central finite-difference checks of every analytic gradient at float64.
use genb::losses::{
    bce_from_logits, distill_kl, gan_discriminator_loss, gan_generator_loss, target_loss, DebiasLoss,
    GeneratorLoss, KlMode,
};
use genb::models::{sample_noise, Discriminator, Generator, ModelConfig, VqaNet};
use genb::nn::{Linear, ParamSet};
use genb::rng::{stream_rng, Stream};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;
const STEP: f64 = 1e-6;
const INSTANCES: u64 = 20;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= RTOL * analytic.abs().max(numeric.abs()) + ATOL
}

fn assert_grad(what: &str, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(close(*a, *n), "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        visual_dim: 4,
        question_dim: 5,
        num_objects: 3,
        num_answers: 4,
        question_len: 3,
        vocab_size: 7,
        hidden_dim: 6,
        noise_dim: 5,
        gen_hidden: 6,
        disc_hidden: 5,
        init_seed: seed,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Eval, 77)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    sample_noise(rng, 1, n).into_raw_vec_and_offset().0.iter().map(|x| x * scale).collect()
}

fn random_tokens(rng: &mut impl Rng, cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.question_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
}

fn with_flat<P: ParamSet + Clone>(p: &P, flat: &[f64]) -> P {
    let mut q = p.clone();
    q.load_flat(flat);
    q
}

pub fn linear_layer_parameters_and_input() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let layer = Linear::new(&mut r, 5, 3);
        let x = Array1::from(gaussian_vec(&mut r, 5, 1.0));
        let c = Array1::from(gaussian_vec(&mut r, 3, 1.0));
        let mut grad = layer.zeros_like();
        let dx = layer.backward(x.view(), c.view(), &mut grad);
        let num = numeric_grad(&layer.flatten(), |f| with_flat(&layer, f).forward(x.view()).dot(&c));
        assert_grad("linear params", &grad.flatten(), &num);
        let num_x = numeric_grad(x.as_slice().unwrap(), |v| layer.forward(Array1::from(v.to_vec()).view()).dot(&c));
        assert_grad("linear input", dx.as_slice().unwrap(), &num_x);
    }
}

pub fn vqa_network_parameters_and_visual_input() {
    for seed in 0..INSTANCES {
        let cfg = small_config(seed);
        let mut r = rng(seed);
        let net = VqaNet::new(&cfg, &mut r);
        let visual = sample_noise(&mut r, cfg.num_objects, cfg.visual_dim);
        let tokens = random_tokens(&mut r, &cfg);
        let probe = Array1::from(gaussian_vec(&mut r, cfg.num_answers, 1.0));

        let (_, cache) = net.forward_cached(visual.view(), &tokens).unwrap();
        let mut grad = net.zeros_like();
        let d_visual = net.backward(&cache, &probe, &mut grad);

        let num = numeric_grad(&net.flatten(), |f| {
            with_flat(&net, f).forward(visual.view(), &tokens).unwrap().logits.dot(&probe)
        });
        assert_grad(&format!("vqa params seed {seed}"), &grad.flatten(), &num);

        let num_v = numeric_grad(visual.as_slice().unwrap(), |v| {
            let v = Array2::from_shape_vec(visual.raw_dim(), v.to_vec()).unwrap();
            net.forward(v.view(), &tokens).unwrap().logits.dot(&probe)
        });
        assert_grad(&format!("vqa visual seed {seed}"), d_visual.as_slice().unwrap(), &num_v);
    }
}

pub fn generator_parameters() {
    for seed in 0..INSTANCES {
        let cfg = small_config(seed);
        let mut r = rng(seed);
        let generator = Generator::new(&cfg, &mut r);
        let z = sample_noise(&mut r, cfg.num_objects, cfg.noise_dim);
        let probe = sample_noise(&mut r, cfg.num_objects, cfg.visual_dim);
        let (_, cache) = generator.forward_cached(z.view()).unwrap();
        let mut grad = generator.zeros_like();
        generator.backward(&cache, &probe, &mut grad);
        let num = numeric_grad(&generator.flatten(), |f| {
            (with_flat(&generator, f).forward(z.view()).unwrap() * &probe).sum()
        });
        assert_grad(&format!("generator seed {seed}"), &grad.flatten(), &num);
    }
}

pub fn bias_model_through_generator() {
    for seed in 0..INSTANCES {
        let cfg = small_config(seed);
        let mut r = rng(seed);
        let bias = VqaNet::new(&cfg, &mut r);
        let generator = Generator::new(&cfg, &mut r);
        let z = sample_noise(&mut r, cfg.num_objects, cfg.noise_dim);
        let tokens = random_tokens(&mut r, &cfg);
        let probe = Array1::from(gaussian_vec(&mut r, cfg.num_answers, 1.0));

        let (fake, g_cache) = generator.forward_cached(z.view()).unwrap();
        let (_, b_cache) = bias.forward_cached(fake.view(), &tokens).unwrap();
        let mut b_grad = bias.zeros_like();
        let mut g_grad = generator.zeros_like();
        let d_fake = bias.backward(&b_cache, &probe, &mut b_grad);
        generator.backward(&g_cache, &d_fake, &mut g_grad);

        let num = numeric_grad(&generator.flatten(), |f| {
            let fake = with_flat(&generator, f).forward(z.view()).unwrap();
            bias.forward(fake.view(), &tokens).unwrap().logits.dot(&probe)
        });
        assert_grad(&format!("generator via bias seed {seed}"), &g_grad.flatten(), &num);
    }
}

pub fn discriminator_parameters_and_input() {
    for seed in 0..INSTANCES {
        let cfg = small_config(seed);
        let mut r = rng(seed);
        let disc = Discriminator::new(&cfg, &mut r);
        let y = Array1::from(gaussian_vec(&mut r, cfg.num_answers, 2.0));
        let (_, cache) = disc.forward_cached(&y).unwrap();
        let mut grad = disc.zeros_like();
        let dy = disc.backward(&cache, 1.0, &mut grad);
        let num = numeric_grad(&disc.flatten(), |f| with_flat(&disc, f).forward(&y).unwrap());
        assert_grad(&format!("discriminator params seed {seed}"), &grad.flatten(), &num);
        let num_y = numeric_grad(y.as_slice().unwrap(), |v| disc.forward(&Array1::from(v.to_vec())).unwrap());
        assert_grad(&format!("discriminator input seed {seed}"), dy.as_slice().unwrap(), &num_y);
    }
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

pub fn bce_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let logits = gaussian_vec(&mut r, 6, 3.0);
        let targets = unit_vec(&mut r, 6);
        let analytic = bce_from_logits(&logits, &targets).unwrap().grad;
        let num = numeric_grad(&logits, |l| bce_from_logits(l, &targets).unwrap().value);
        assert_grad("bce", &analytic, &num);
    }
}

pub fn distillation_gradients() {
    for mode in [KlMode::Softmax, KlMode::Bernoulli] {
        for seed in 0..INSTANCES {
            let mut r = rng(seed);
            let teacher = gaussian_vec(&mut r, 6, 2.0);
            let student = gaussian_vec(&mut r, 6, 2.0);
            let analytic = distill_kl(&teacher, &student, mode).unwrap().grad;
            let num = numeric_grad(&student, |s| distill_kl(&teacher, s, mode).unwrap().value);
            assert_grad(&format!("kl {mode:?}"), &analytic, &num);
        }
    }
}

pub fn gan_loss_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let real = r.random_range(0.01..0.99);
        let fake = r.random_range(0.01..0.99);
        let d = gan_discriminator_loss(real, fake).unwrap();
        let num = numeric_grad(&[real, fake], |s| gan_discriminator_loss(s[0], s[1]).unwrap().value);
        assert_grad("gan discriminator", &[d.d_real, d.d_fake], &num);
        for form in [GeneratorLoss::Minimax, GeneratorLoss::NonSaturating] {
            let g = gan_generator_loss(fake, form).unwrap();
            let num = numeric_grad(&[fake], |s| gan_generator_loss(s[0], form).unwrap().value);
            assert_grad(&format!("gan generator {form:?}"), &[g.d_fake], &num);
        }
    }
}

pub fn target_loss_gradients() {
    for variant in [DebiasLoss::Genb, DebiasLoss::Suppressed, DebiasLoss::Plain] {
        for seed in 0..INSTANCES {
            let mut r = rng(seed);
            let y = gaussian_vec(&mut r, 6, 2.0);
            let y_gt = unit_vec(&mut r, 6);
            let y_b = gaussian_vec(&mut r, 6, 2.0);
            let analytic = target_loss(&y, &y_gt, &y_b, variant).unwrap().grad;
            let num = numeric_grad(&y, |v| target_loss(v, &y_gt, &y_b, variant).unwrap().value);
            assert_grad(&format!("target {}", variant.as_str()), &analytic, &num);
        }
    }
}

/// The full discriminator objective as the trainer assembles it: scores of
/// real and fake logits back-propagated into discriminator parameters.
pub fn discriminator_objective_end_to_end() {
    for seed in 0..INSTANCES {
        let cfg = small_config(seed);
        let mut r = rng(seed);
        let disc = Discriminator::new(&cfg, &mut r);
        let real = Array1::from(gaussian_vec(&mut r, cfg.num_answers, 2.0));
        let fake = Array1::from(gaussian_vec(&mut r, cfg.num_answers, 2.0));
        let objective = |d: &Discriminator| {
            gan_discriminator_loss(d.forward(&real).unwrap(), d.forward(&fake).unwrap())
                .unwrap()
                .value
        };
        let (s_real, c_real) = disc.forward_cached(&real).unwrap();
        let (s_fake, c_fake) = disc.forward_cached(&fake).unwrap();
        let loss = gan_discriminator_loss(s_real, s_fake).unwrap();
        let mut grad = disc.zeros_like();
        disc.backward(&c_real, loss.d_real, &mut grad);
        disc.backward(&c_fake, loss.d_fake, &mut grad);
        let num = numeric_grad(&disc.flatten(), |f| objective(&with_flat(&disc, f)));
        assert_grad(&format!("gan objective seed {seed}"), &grad.flatten(), &num);
    }
}

/// Every check, by name. Each panics with the offending entry on failure.
pub const SUITE: &[(&str, fn())] = &[
    ("linear_layer_parameters_and_input", linear_layer_parameters_and_input),
    ("vqa_network_parameters_and_visual_input", vqa_network_parameters_and_visual_input),
    ("generator_parameters", generator_parameters),
    ("bias_model_through_generator", bias_model_through_generator),
    ("discriminator_parameters_and_input", discriminator_parameters_and_input),
    ("bce_gradient", bce_gradient),
    ("distillation_gradients", distillation_gradients),
    ("gan_loss_gradients", gan_loss_gradients),
    ("target_loss_gradients", target_loss_gradients),
    ("discriminator_objective_end_to_end", discriminator_objective_end_to_end),
];
