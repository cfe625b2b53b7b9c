//! Alternating optimization of the discriminator, the bias model with its
//! generator, and the target model.
//!
//! Every batch runs three updates in a fixed order: the discriminator, then
//! the bias model and generator, then the target model. All randomness comes
//! from counter-keyed streams, so a run is a pure function of its config, its
//! data and its seed, and a checkpoint only needs the step counter to resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Ix1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter, Metadata};
use crate::biasworld::{prior_table, DatasetSpec, SplitBundle, VqaInstance};
use crate::error::{Error, Result};
use crate::eval::{
    attention_noise_study, bias_prior_divergence, evaluate_model, AttentionStudy, BiasDiagnostics,
    EpochMetrics, FinalMetrics, GenerativeBias, LossSummary, NoiseBiasPredictor, RunReport, SplitStatistics,
    REPORT_FORMAT,
};
use crate::losses::{
    bce_from_logits, distill_kl, gan_discriminator_loss, gan_generator_loss, target_loss, DebiasLoss,
    GeneratorLoss, KlMode, LossWeights,
};
use crate::models::{check_checkpoint_format, sample_noise, ModelBundle, ModelConfig, CHECKPOINT_FORMAT};
use crate::nn::ParamSet;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, Stream};

/// How the bias model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasVariant {
    /// Generator noise in place of image features, GAN + distillation + BCE.
    #[default]
    Genb,
    /// Real image features and plain BCE.
    Vanilla,
}

impl BiasVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasVariant::Genb => "genb",
            BiasVariant::Vanilla => "vanilla",
        }
    }
}

/// Flat training configuration; every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_target: f64,
    /// Shared by the bias model and the generator.
    pub lr_bias: f64,
    pub lr_disc: f64,
    pub optimizer: OptimizerKind,
    pub lambda_distill: f64,
    pub lambda_gt: f64,
    pub use_gan: bool,
    pub use_distill: bool,
    pub use_gt: bool,
    pub kl_mode: KlMode,
    pub generator_loss: GeneratorLoss,
    pub debias_loss: DebiasLoss,
    pub bias_model: BiasVariant,
    pub d_steps_per_batch: usize,
    pub seed: u64,
    /// Runs are single-threaded, so every run is already bit-reproducible;
    /// the flag is recorded for provenance.
    pub deterministic_mode: bool,
    /// Evaluate both splits every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub question_dim: usize,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub disc_hidden: usize,
    pub prior_noise_draws: usize,
    pub attention_study_draws: usize,
    pub attention_study_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let weights = LossWeights::default();
        Self {
            epochs: 6,
            batch_size: 64,
            lr_target: 1e-3,
            lr_bias: 1e-3,
            lr_disc: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda_distill: weights.lambda_distill,
            lambda_gt: weights.lambda_gt,
            use_gan: weights.use_gan,
            use_distill: weights.use_distill,
            use_gt: weights.use_gt,
            kl_mode: KlMode::default(),
            generator_loss: GeneratorLoss::default(),
            debias_loss: DebiasLoss::default(),
            bias_model: BiasVariant::default(),
            d_steps_per_batch: 1,
            seed: 0,
            deterministic_mode: true,
            eval_every: 0,
            checkpoint_every: 0,
            question_dim: model.question_dim,
            hidden_dim: model.hidden_dim,
            noise_dim: model.noise_dim,
            gen_hidden: model.gen_hidden,
            disc_hidden: model.disc_hidden,
            prior_noise_draws: 1000,
            attention_study_draws: 8,
            attention_study_instances: 16,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_target", self.lr_target), ("lr_bias", self.lr_bias), ("lr_disc", self.lr_disc)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_steps_per_batch", self.d_steps_per_batch),
            ("question_dim", self.question_dim),
            ("hidden_dim", self.hidden_dim),
            ("noise_dim", self.noise_dim),
            ("gen_hidden", self.gen_hidden),
            ("disc_hidden", self.disc_hidden),
            ("prior_noise_draws", self.prior_noise_draws),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.attention_study_draws < 2 {
            return Err(Error::Config("attention_study_draws must be at least 2".into()));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_distill: self.lambda_distill,
            lambda_gt: self.lambda_gt,
            use_gan: self.use_gan,
            use_distill: self.use_distill,
            use_gt: self.use_gt,
        }
    }

    pub fn model_config(&self, spec: &DatasetSpec) -> ModelConfig {
        ModelConfig {
            question_dim: self.question_dim,
            hidden_dim: self.hidden_dim,
            noise_dim: self.noise_dim,
            gen_hidden: self.gen_hidden,
            disc_hidden: self.disc_hidden,
            init_seed: self.seed,
            ..ModelConfig::for_dataset(spec)
        }
    }
}

/// One training example in the precision the networks use.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: Array2<f64>,
    pub tokens: Vec<usize>,
    pub y_gt: Vec<f64>,
    pub qtype: usize,
}

impl From<&VqaInstance> for Sample {
    fn from(inst: &VqaInstance) -> Self {
        Self {
            visual: inst.features_f64(),
            tokens: inst.question.clone(),
            y_gt: inst.answer_f64(),
            qtype: inst.qtype,
        }
    }
}

pub fn prepare_samples(bundle: &SplitBundle) -> Vec<Sample> {
    bundle.instances.iter().map(Sample::from).collect()
}

/// Mean component losses of one batch. Terms that were not computed are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub l_gt: f64,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_distill: f64,
    pub l_target: f64,
}

impl StepLosses {
    fn is_finite(&self) -> bool {
        [self.l_gt, self.l_gan_d, self.l_gan_g, self.l_distill, self.l_target]
            .iter()
            .all(|v| v.is_finite())
    }

    fn detail(&self) -> String {
        format!(
            "l_gt={} l_gan_d={} l_gan_g={} l_distill={} l_target={}",
            self.l_gt, self.l_gan_d, self.l_gan_g, self.l_distill, self.l_target
        )
    }
}

/// Parameters, optimizer moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub models: ModelBundle,
    pub opt_target: Optimizer,
    pub opt_bias: Optimizer,
    pub opt_generator: Optimizer,
    pub opt_disc: Optimizer,
    pub step: u64,
}

const OPTIMIZER_NAMES: [&str; 4] = ["target", "bias", "generator", "discriminator"];

impl TrainState {
    pub fn new(config: TrainConfig, spec: &DatasetSpec) -> Result<Self> {
        config.validate()?;
        let models = ModelBundle::new(config.model_config(spec))?;
        let kind = config.optimizer;
        Ok(Self {
            opt_target: Optimizer::for_params(kind, config.lr_target, &models.target),
            opt_bias: Optimizer::for_params(kind, config.lr_bias, &models.bias),
            opt_generator: Optimizer::for_params(kind, config.lr_bias, &models.generator),
            opt_disc: Optimizer::for_params(kind, config.lr_disc, &models.discriminator),
            models,
            config,
            step: 0,
        })
    }

    fn optimizers(&self) -> [&Optimizer; 4] {
        [&self.opt_target, &self.opt_bias, &self.opt_generator, &self.opt_disc]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(path)?;
        self.models.write_params(&mut w)?;
        let mut meta = Metadata::new();
        meta.set("format", CHECKPOINT_FORMAT);
        meta.insert_struct("model", &self.models.config);
        meta.insert_struct("train", &self.config);
        meta.set("state.step", self.step);
        for (name, opt) in OPTIMIZER_NAMES.iter().zip(self.optimizers()) {
            meta.set(&format!("optim.{name}.steps"), opt.steps);
            w.add_array(&format!("optim.{name}.m"), &Array1::from(opt.first_moment.clone()))?;
            w.add_array(&format!("optim.{name}.v"), &Array1::from(opt.second_moment.clone()))?;
        }
        w.add_metadata(&meta)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::open(path)?;
        let meta = archive.metadata()?;
        check_checkpoint_format(&meta)?;
        let config: TrainConfig = meta.extract_struct("train")?;
        config.validate()?;
        let models = ModelBundle::read_params(meta.extract_struct("model")?, &archive)?;
        let load_opt = |name: &str, lr: f64, params: &dyn Fn() -> usize| -> Result<Optimizer> {
            let mut opt = Optimizer::new(config.optimizer, lr, params());
            opt.steps = meta.parse(&format!("optim.{name}.steps"))?;
            for (suffix, slot) in [("m", &mut opt.first_moment), ("v", &mut opt.second_moment)] {
                let field = format!("optim.{name}.{suffix}");
                let values = archive.array::<f64, Ix1>(&field)?.to_vec();
                if values.len() != slot.len() {
                    return Err(Error::shape(field, &[slot.len()], &[values.len()]));
                }
                *slot = values;
            }
            Ok(opt)
        };
        Ok(Self {
            opt_target: load_opt("target", config.lr_target, &|| models.target.num_params())?,
            opt_bias: load_opt("bias", config.lr_bias, &|| models.bias.num_params())?,
            opt_generator: load_opt("generator", config.lr_bias, &|| models.generator.num_params())?,
            opt_disc: load_opt("discriminator", config.lr_disc, &|| models.discriminator.num_params())?,
            step: meta.parse("state.step")?,
            models,
            config,
        })
    }
}

fn non_finite(step: u64, detail: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        step,
        detail: detail.into(),
    }
}

/// Maps per-sample numeric failures to the non-finite abort record.
fn guard<T>(step: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => non_finite(step, msg),
        other => other,
    })
}

/// Target logits for a batch, computed without touching any parameter.
pub fn target_logits(state: &TrainState, batch: &[&Sample]) -> Result<Vec<Array1<f64>>> {
    batch
        .iter()
        .map(|s| {
            guard(
                state.step,
                state.models.target.forward(s.visual.view(), &s.tokens).map(|o| o.logits),
            )
        })
        .collect()
}

/// Discriminator and bias-model updates for one batch. Target parameters are
/// only read. Returns the batch means of the bias-side losses.
pub fn train_step_bias(state: &mut TrainState, batch: &[&Sample]) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    match state.config.bias_model {
        BiasVariant::Genb => {
            let real = target_logits(state, batch)?;
            genb_bias_step(state, batch, &real)
        }
        BiasVariant::Vanilla => vanilla_bias_step(state, batch),
    }
}

fn genb_bias_step(state: &mut TrainState, batch: &[&Sample], real: &[Array1<f64>]) -> Result<StepLosses> {
    let cfg = state.config.clone();
    let step = state.step;
    let inv_b = 1.0 / batch.len() as f64;
    let objects = state.models.config.num_objects;
    let d_z = state.models.config.noise_dim;
    let mut record = StepLosses {
        step,
        ..StepLosses::default()
    };

    if cfg.use_gan {
        let mut disc = state.models.discriminator.clone();
        let mut opt = state.opt_disc.clone();
        let mut total = 0.0;
        for d in 0..cfg.d_steps_per_batch {
            let counter = step * cfg.d_steps_per_batch as u64 + d as u64;
            let mut rng = stream_rng(cfg.seed, Stream::DiscNoise, counter);
            let mut grad = disc.zeros_like();
            let mut sum = 0.0;
            for (s, y) in batch.iter().zip(real) {
                let z = sample_noise(&mut rng, objects, d_z);
                let fake = guard(step, state.models.generator.forward(z.view()))?;
                let y_b = guard(step, state.models.bias.forward(fake.view(), &s.tokens))?.logits;
                let (score_real, cache_real) = guard(step, disc.forward_cached(y))?;
                let (score_fake, cache_fake) = guard(step, disc.forward_cached(&y_b))?;
                let loss = gan_discriminator_loss(score_real, score_fake)?;
                disc.backward(&cache_real, loss.d_real * inv_b, &mut grad);
                disc.backward(&cache_fake, loss.d_fake * inv_b, &mut grad);
                sum += loss.value;
            }
            total += sum * inv_b;
            if !total.is_finite() {
                return Err(non_finite(step, format!("discriminator loss {total}")));
            }
            opt.step(&mut disc, &grad)?;
        }
        record.l_gan_d = total / cfg.d_steps_per_batch as f64;
        state.models.discriminator = disc;
        state.opt_disc = opt;
    }

    let (c_gan, c_distill, c_gt) = cfg.weights().coefficients();
    let models = &state.models;
    let mut bias_grad = models.bias.zeros_like();
    let mut gen_grad = models.generator.zeros_like();
    let mut disc_scratch = models.discriminator.zeros_like();
    let mut rng = stream_rng(cfg.seed, Stream::GenNoise, step);
    for (s, y) in batch.iter().zip(real) {
        let z = sample_noise(&mut rng, objects, d_z);
        let (fake, gen_cache) = guard(step, models.generator.forward_cached(z.view()))?;
        let (out, bias_cache) = guard(step, models.bias.forward_cached(fake.view(), &s.tokens))?;
        let y_b = out.logits;
        let y_b_slice = y_b.as_slice().expect("contiguous");
        let mut d_logits = Array1::<f64>::zeros(y_b.len());

        let gt = guard(step, bce_from_logits(y_b_slice, &s.y_gt))?;
        record.l_gt += gt.value * inv_b;
        if c_gt != 0.0 {
            d_logits.scaled_add(c_gt, &Array1::from(gt.grad));
        }
        let kl = guard(step, distill_kl(y.as_slice().expect("contiguous"), y_b_slice, cfg.kl_mode))?;
        record.l_distill += kl.value * inv_b;
        if c_distill != 0.0 {
            d_logits.scaled_add(c_distill, &Array1::from(kl.grad));
        }
        if cfg.use_gan {
            let (score, disc_cache) = guard(step, models.discriminator.forward_cached(&y_b))?;
            let g = gan_generator_loss(score, cfg.generator_loss)?;
            record.l_gan_g += g.value * inv_b;
            let d_in = models.discriminator.backward(&disc_cache, g.d_fake, &mut disc_scratch);
            d_logits.scaled_add(c_gan, &d_in);
        }

        d_logits *= inv_b;
        let d_visual = models.bias.backward(&bias_cache, &d_logits, &mut bias_grad);
        models.generator.backward(&gen_cache, &d_visual, &mut gen_grad);
    }
    if !record.is_finite() {
        return Err(non_finite(step, record.detail()));
    }
    state.opt_bias.step(&mut state.models.bias, &bias_grad)?;
    state.opt_generator.step(&mut state.models.generator, &gen_grad)?;
    Ok(record)
}

fn vanilla_bias_step(state: &mut TrainState, batch: &[&Sample]) -> Result<StepLosses> {
    let step = state.step;
    let inv_b = 1.0 / batch.len() as f64;
    let bias = &state.models.bias;
    let mut grad = bias.zeros_like();
    let mut l_gt = 0.0;
    for s in batch {
        let (out, cache) = guard(step, bias.forward_cached(s.visual.view(), &s.tokens))?;
        let loss = guard(step, bce_from_logits(out.logits.as_slice().expect("contiguous"), &s.y_gt))?;
        l_gt += loss.value * inv_b;
        bias.backward(&cache, &(Array1::from(loss.grad) * inv_b), &mut grad);
    }
    if !l_gt.is_finite() {
        return Err(non_finite(step, format!("l_gt={l_gt}")));
    }
    state.opt_bias.step(&mut state.models.bias, &grad)?;
    Ok(StepLosses {
        step,
        l_gt,
        ..StepLosses::default()
    })
}

/// Target update with bias logits from the current bias model on real
/// features. Only target parameters change. Returns the mean target loss.
pub fn train_step_target(state: &mut TrainState, batch: &[&Sample]) -> Result<f64> {
    let bias_logits: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| {
            guard(state.step, state.models.bias.forward(s.visual.view(), &s.tokens))
                .map(|o| o.logits.to_vec())
        })
        .collect::<Result<_>>()?;
    train_step_target_with_bias_logits(state, batch, &bias_logits)
}

/// As [`train_step_target`] with caller-supplied bias logits per sample.
pub fn train_step_target_with_bias_logits(
    state: &mut TrainState,
    batch: &[&Sample],
    bias_logits: &[Vec<f64>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if bias_logits.len() != batch.len() {
        return Err(Error::shape("bias logits", &[batch.len()], &[bias_logits.len()]));
    }
    let step = state.step;
    let inv_b = 1.0 / batch.len() as f64;
    let target = &state.models.target;
    let mut grad = target.zeros_like();
    let mut total = 0.0;
    for (s, y_b) in batch.iter().zip(bias_logits) {
        let (out, cache) = guard(step, target.forward_cached(s.visual.view(), &s.tokens))?;
        let loss = guard(
            step,
            target_loss(out.logits.as_slice().expect("contiguous"), &s.y_gt, y_b, state.config.debias_loss),
        )?;
        total += loss.value * inv_b;
        target.backward(&cache, &(Array1::from(loss.grad) * inv_b), &mut grad);
    }
    if !total.is_finite() {
        return Err(non_finite(step, format!("l_target={total}")));
    }
    state.opt_target.step(&mut state.models.target, &grad)?;
    Ok(total)
}

/// Bias-side then target-side update; advances the step counter on success.
/// On error the state is left exactly as it was.
pub fn train_batch(state: &mut TrainState, batch: &[&Sample]) -> Result<StepLosses> {
    let mut next = state.clone();
    let mut record = train_step_bias(&mut next, batch)?;
    record.l_target = train_step_target(&mut next, batch)?;
    next.step += 1;
    *state = next;
    Ok(record)
}

pub fn steps_per_epoch(num_samples: usize, batch_size: usize) -> u64 {
    num_samples.div_ceil(batch_size) as u64
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, num_samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut stream_rng(seed, Stream::DataOrder, epoch));
    order
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: RunReport,
    pub checkpoints: Vec<PathBuf>,
    pub attention: Vec<(usize, AttentionStudy)>,
}

pub fn train(
    config: TrainConfig,
    train_split: &SplitBundle,
    test_split: &SplitBundle,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let state = TrainState::new(config, &train_split.spec)?;
    train_from(state, train_split, test_split, out_dir)
}

/// Continues `state` until `state.config.epochs` epochs have run.
pub fn train_from(
    mut state: TrainState,
    train_split: &SplitBundle,
    test_split: &SplitBundle,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    if train_split.spec.num_answers != test_split.spec.num_answers
        || train_split.spec.num_qtypes != test_split.spec.num_qtypes
    {
        return Err(Error::Config("train and test splits have different answer spaces".into()));
    }
    let expected = ModelConfig {
        init_seed: state.models.config.init_seed,
        ..state.config.model_config(&train_split.spec)
    };
    if expected != state.models.config {
        return Err(Error::Config("model dims do not match the dataset".into()));
    }
    let cfg = state.config.clone();
    let samples = prepare_samples(train_split);
    let per_epoch = steps_per_epoch(samples.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs as u64;

    let mut losses_csv = match out_dir {
        Some(dir) => Some(open_loss_log(&dir.join("losses.csv"), state.step > 0)?),
        None => None,
    };
    let mut checkpoints = Vec::new();
    let mut history = Vec::new();
    let mut summary = LossSummary::default();

    while state.step < total_steps {
        let epoch = state.step / per_epoch;
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let first = (state.step % per_epoch) as usize;
        if first == 0 {
            summary = LossSummary::default();
        }
        for chunk in order.chunks(cfg.batch_size).skip(first) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let record = match train_batch(&mut state, &batch) {
                Ok(r) => r,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = out_dir {
                        state.save(&dir.join("checkpoint_last_good.tar"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            accumulate(&mut summary, &record);
            if let Some(w) = losses_csv.as_mut() {
                write_loss_row(w, &record, out_dir.expect("log implies dir"))?;
            }
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                    let path = dir.join(format!("checkpoint_step{}.tar", state.step));
                    state.save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        let done = epoch as usize + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.epochs {
            history.push(EpochMetrics {
                epoch: done,
                step: state.step,
                train: evaluate_model(&state.models.target, train_split)?,
                test: evaluate_model(&state.models.target, test_split)?,
            });
        }
    }
    if let (Some(w), Some(dir)) = (losses_csv.as_mut(), out_dir) {
        w.flush().map_err(|e| Error::io(dir.join("losses.csv"), e))?;
    }

    let (final_metrics, attention) = if cfg.epochs > 0 {
        let (fin, attention) = final_evaluation(&state, train_split, test_split)?;
        history.push(EpochMetrics {
            epoch: cfg.epochs,
            step: state.step,
            train: fin.train.clone(),
            test: fin.test.clone(),
        });
        (Some(fin), attention)
    } else {
        (None, Vec::new())
    };
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint_final.tar");
        state.save(&path)?;
        checkpoints.push(path);
    }
    finalize_summary(&mut summary);
    let report = RunReport {
        format: REPORT_FORMAT.to_string(),
        qtype_note: "per-qtype accuracy columns are indexed by question type; they stand in for answer-category columns such as yes/no, number and other".into(),
        seed: cfg.seed,
        dataset: train_split.spec.clone(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        split_statistics: SplitStatistics::compute(train_split, test_split)?,
        history,
        loss_summary: (summary.steps > 0).then_some(summary),
        final_metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        state,
        report,
        checkpoints,
        attention,
    })
}

/// Final accuracy and bias-model diagnostics of a trained state.
pub fn final_evaluation(
    state: &TrainState,
    train_split: &SplitBundle,
    test_split: &SplitBundle,
) -> Result<(FinalMetrics, Vec<(usize, AttentionStudy)>)> {
    let cfg = &state.config;
    let m = &state.models;
    let train = evaluate_model(&m.target, train_split)?;
    let test = evaluate_model(&m.target, test_split)?;
    let generative = GenerativeBias {
        bias: &m.bias,
        generator: &m.generator,
        num_objects: m.config.num_objects,
    };
    let noise_eval = |seed_offset: u64| NoiseBiasPredictor {
        bias: &m.bias,
        generator: &m.generator,
        seed: cfg.seed.wrapping_add(seed_offset),
    };
    let prior = prior_table(train_split)?;
    let divergence = bias_prior_divergence(&generative, train_split, &prior, cfg.prior_noise_draws, cfg.seed)?;
    let noise_train = evaluate_model(&noise_eval(1), train_split)?;
    let noise_test = evaluate_model(&noise_eval(2), test_split)?;
    let real_test = evaluate_model(&m.bias, test_split)?;

    let mut rng = stream_rng(cfg.seed, Stream::Eval, 1 << 50);
    let mut attention = Vec::new();
    for id in 0..cfg.attention_study_instances.min(test_split.len()) {
        let study = attention_noise_study(&m.bias, &m.generator, &test_split.instances[id], cfg.attention_study_draws, &mut rng)?;
        attention.push((id, study));
    }
    let mean = |f: fn(&AttentionStudy) -> f64| {
        if attention.is_empty() {
            0.0
        } else {
            attention.iter().map(|(_, s)| f(s)).sum::<f64>() / attention.len() as f64
        }
    };
    let bias = BiasDiagnostics {
        prior_divergence: divergence,
        noise_train_accuracy: noise_train.overall,
        noise_test_accuracy: noise_test.overall,
        real_test_accuracy: real_test.overall,
        mean_attention_dispersion: mean(|s| s.dispersion),
        mean_answer_change_rate: mean(|s| s.answer_change_rate),
    };
    Ok((
        FinalMetrics {
            ood_gap: train.overall - test.overall,
            train,
            test,
            bias,
        },
        attention,
    ))
}

fn accumulate(summary: &mut LossSummary, r: &StepLosses) {
    summary.l_gt += r.l_gt;
    summary.l_gan_d += r.l_gan_d;
    summary.l_gan_g += r.l_gan_g;
    summary.l_distill += r.l_distill;
    summary.l_target += r.l_target;
    summary.steps += 1;
}

fn finalize_summary(summary: &mut LossSummary) {
    if summary.steps > 0 {
        let n = summary.steps as f64;
        summary.l_gt /= n;
        summary.l_gan_d /= n;
        summary.l_gan_g /= n;
        summary.l_distill /= n;
        summary.l_target /= n;
    }
}

fn open_loss_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "step,l_gt,l_gan_d,l_gan_g,l_distill,l_target").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn write_loss_row(w: &mut BufWriter<File>, r: &StepLosses, dir: &Path) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{}",
        r.step, r.l_gt, r.l_gan_d, r.l_gan_g, r.l_distill, r.l_target
    )
    .map_err(|e| Error::io(dir.join("losses.csv"), e))
}
