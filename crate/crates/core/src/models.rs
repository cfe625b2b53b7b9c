//! The four networks: the target VQA classifier, the identically shaped bias
//! classifier, the per-object noise generator and the answer discriminator.
//!
//! The VQA classifier is a compact bottom-up/top-down attention model:
//!
//! * question encoder: token embeddings + single-layer tanh recurrent cell,
//!   the final hidden state is the question code `q`;
//! * attention: `score_j = w · relu(W_v v_j + W_q q + b)`, `α = softmax(score)`;
//! * fusion: `relu(P_v Σ α_j v_j) ⊙ relu(P_q q)`;
//! * classifier: two-layer perceptron producing raw answer logits.
//!
//! Every network exposes a cached forward and an explicit backward pass that
//! accumulates gradients into a value of its own type.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter, Metadata};
use crate::biasworld::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::{
    add_outer, join, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, softmax,
    uniform_fan_in, visit1, visit1_mut, visit2, visit2_mut, Linear, ParamSet,
};
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_FORMAT: &str = "genb-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub question_dim: usize,
    pub num_objects: usize,
    pub num_answers: usize,
    pub question_len: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub disc_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            visual_dim: spec.visual_dim,
            question_dim: 32,
            num_objects: spec.objects_per_image,
            num_answers: spec.num_answers,
            question_len: spec.question_len,
            vocab_size: spec.vocab_size(),
            hidden_dim: 64,
            noise_dim: 128,
            gen_hidden: 64,
            disc_hidden: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Dataset-dependent dims taken from `spec`, the rest from defaults.
    pub fn for_dataset(spec: &DatasetSpec) -> Self {
        Self {
            visual_dim: spec.visual_dim,
            num_objects: spec.objects_per_image,
            num_answers: spec.num_answers,
            question_len: spec.question_len,
            vocab_size: spec.vocab_size(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("visual_dim", self.visual_dim),
            ("question_dim", self.question_dim),
            ("num_objects", self.num_objects),
            ("num_answers", self.num_answers),
            ("question_len", self.question_len),
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("noise_dim", self.noise_dim),
            ("gen_hidden", self.gen_hidden),
            ("disc_hidden", self.disc_hidden),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Attention weights over object rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub Vec<f64>);

impl AttentionMap {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn l1_distance(&self, other: &AttentionMap) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaOutput {
    /// Raw answer logits, no sigmoid applied.
    pub logits: Array1<f64>,
    pub attention: AttentionMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub w_v: Array2<f64>,
    pub w_q: Array2<f64>,
    pub bias: Array1<f64>,
    pub score: Array1<f64>,
}

/// Architecture shared by the target model and the bias model.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaNet {
    pub embedding: Array2<f64>,
    pub rnn: RecurrentCell,
    pub attention: Attention,
    pub v_proj: Linear,
    pub q_proj: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

pub type TargetModel = VqaNet;
pub type BiasModel = VqaNet;

/// Intermediate values of one forward pass, consumed by [`VqaNet::backward`].
#[derive(Debug, Clone)]
pub struct VqaCache {
    tokens: Vec<usize>,
    /// `h_0 ..= h_L`
    states: Vec<Array1<f64>>,
    visual: Array2<f64>,
    /// Post-relu attention hidden rows `[n, H]`.
    attn_hidden: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
    v_code: Array1<f64>,
    q_code: Array1<f64>,
    fused: Array1<f64>,
    hidden: Array1<f64>,
}

impl VqaNet {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d_v, d_q, h, a) = (
            config.visual_dim,
            config.question_dim,
            config.hidden_dim,
            config.num_answers,
        );
        Self {
            embedding: Array2::from_shape_simple_fn((config.vocab_size, d_q), || rng.random_range(-1.0..1.0)),
            rnn: RecurrentCell {
                w_in: uniform_fan_in(rng, d_q, d_q, d_q),
                w_rec: Array2::eye(d_q),
                bias: Array1::zeros(d_q),
            },
            attention: Attention {
                w_v: uniform_fan_in(rng, h, d_v, d_v),
                w_q: uniform_fan_in(rng, h, d_q, d_q),
                bias: Array1::zeros(h),
                score: uniform_fan_in(rng, 1, h, h).into_shape_with_order(h).expect("vector"),
            },
            v_proj: Linear { bias: Array1::ones(h), ..Linear::new(rng, d_v, h) },
            q_proj: Linear::new(rng, d_q, h),
            hidden: Linear::new(rng, h, h),
            out: Linear::new(rng, h, a),
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.attention.w_v.ncols()
    }

    pub fn num_answers(&self) -> usize {
        self.out.outputs()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn check_inputs(&self, visual: &ArrayView2<f64>, tokens: &[usize]) -> Result<()> {
        if visual.nrows() == 0 || visual.ncols() != self.visual_dim() {
            return Err(Error::shape(
                "visual",
                &[visual.nrows().max(1), self.visual_dim()],
                visual.shape(),
            ));
        }
        if visual.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("visual features are not finite".into()));
        }
        if tokens.is_empty() {
            return Err(Error::shape("question", &[1], &[0]));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Domain(format!(
                "token {bad} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, visual: ArrayView2<f64>, tokens: &[usize]) -> Result<VqaOutput> {
        self.forward_cached(visual, tokens).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, visual: ArrayView2<f64>, tokens: &[usize]) -> Result<(VqaOutput, VqaCache)> {
        self.check_inputs(&visual, tokens)?;
        let d_q = self.rnn.bias.len();

        let mut states = Vec::with_capacity(tokens.len() + 1);
        states.push(Array1::zeros(d_q));
        for &tok in tokens {
            let prev = states.last().expect("initial state");
            let pre = self.rnn.w_in.dot(&self.embedding.row(tok))
                + self.rnn.w_rec.dot(prev)
                + &self.rnn.bias;
            states.push(pre.mapv(f64::tanh));
        }
        let q = states.last().expect("final state").clone();

        let q_term = self.attention.w_q.dot(&q) + &self.attention.bias;
        let mut attn_hidden = visual.dot(&self.attention.w_v.t());
        for mut row in attn_hidden.rows_mut() {
            row += &q_term;
            row.mapv_inplace(|x| if x < 0.0 { 0.0 } else { x });
        }
        let scores = attn_hidden.dot(&self.attention.score);
        let alpha = Array1::from(softmax(scores.as_slice().expect("contiguous")));
        let pooled = visual.t().dot(&alpha);

        let v_code = relu(&self.v_proj.forward(pooled.view()));
        let q_code = relu(&self.q_proj.forward(q.view()));
        let fused = &v_code * &q_code;
        let hidden = relu(&self.hidden.forward(fused.view()));
        let logits = self.out.forward(hidden.view());

        let output = VqaOutput {
            logits,
            attention: AttentionMap(alpha.to_vec()),
        };
        let cache = VqaCache {
            tokens: tokens.to_vec(),
            states,
            visual: visual.to_owned(),
            attn_hidden,
            alpha,
            pooled,
            v_code,
            q_code,
            fused,
            hidden,
        };
        Ok((output, cache))
    }

    /// Backpropagates `d_logits`, accumulating into `grad`; returns the
    /// gradient with respect to the visual input.
    pub fn backward(&self, cache: &VqaCache, d_logits: &Array1<f64>, grad: &mut VqaNet) -> Array2<f64> {
        let mut d_hidden = self.out.backward(cache.hidden.view(), d_logits.view(), &mut grad.out);
        relu_backward(&mut d_hidden, &cache.hidden);
        let d_fused = self.hidden.backward(cache.fused.view(), d_hidden.view(), &mut grad.hidden);

        let mut d_vcode = &d_fused * &cache.q_code;
        let mut d_qcode = &d_fused * &cache.v_code;
        relu_backward(&mut d_vcode, &cache.v_code);
        relu_backward(&mut d_qcode, &cache.q_code);
        let d_pooled = self.v_proj.backward(cache.pooled.view(), d_vcode.view(), &mut grad.v_proj);
        let q = cache.states.last().expect("final state");
        let mut d_q = self.q_proj.backward(q.view(), d_qcode.view(), &mut grad.q_proj);

        // pooled = Σ_j α_j v_j
        let mut d_visual = Array2::zeros(cache.visual.raw_dim());
        for (mut row, &a) in d_visual.rows_mut().into_iter().zip(cache.alpha.iter()) {
            row.scaled_add(a, &d_pooled);
        }
        let d_alpha = cache.visual.dot(&d_pooled);
        let mean = cache.alpha.dot(&d_alpha);
        let d_scores = &cache.alpha * &(d_alpha - mean);

        // scores_j = w · relu(W_v v_j + W_q q + b)
        let mut d_attn_pre_sum = Array1::zeros(self.attention.bias.len());
        for (j, &ds) in d_scores.iter().enumerate() {
            let act = cache.attn_hidden.row(j);
            grad.attention.score.scaled_add(ds, &act);
            let mut d_pre = &self.attention.score * ds;
            d_pre.zip_mut_with(&act, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            add_outer(&mut grad.attention.w_v, d_pre.view(), cache.visual.row(j));
            let dv_j = self.attention.w_v.t().dot(&d_pre);
            d_visual.row_mut(j).zip_mut_with(&dv_j, |a, &b| *a += b);
            d_attn_pre_sum += &d_pre;
        }
        add_outer(&mut grad.attention.w_q, d_attn_pre_sum.view(), q.view());
        grad.attention.bias += &d_attn_pre_sum;
        d_q += &self.attention.w_q.t().dot(&d_attn_pre_sum);

        // h_t = tanh(W_in e(tok_t) + W_rec h_{t-1} + b)
        let mut d_state = d_q;
        for t in (0..cache.tokens.len()).rev() {
            let h = &cache.states[t + 1];
            let d_pre = &d_state * &h.mapv(|x| 1.0 - x * x);
            let tok = cache.tokens[t];
            add_outer(&mut grad.rnn.w_in, d_pre.view(), self.embedding.row(tok));
            add_outer(&mut grad.rnn.w_rec, d_pre.view(), cache.states[t].view());
            grad.rnn.bias += &d_pre;
            let d_embed = self.rnn.w_in.t().dot(&d_pre);
            grad.embedding.row_mut(tok).zip_mut_with(&d_embed, |a, &b| *a += b);
            d_state = self.rnn.w_rec.t().dot(&d_pre);
        }
        d_visual
    }
}

impl ParamSet for VqaNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(prefix, "embedding", &self.embedding, f);
        let rnn = join(prefix, "rnn");
        visit2(&rnn, "w_in", &self.rnn.w_in, f);
        visit2(&rnn, "w_rec", &self.rnn.w_rec, f);
        visit1(&rnn, "bias", &self.rnn.bias, f);
        let attn = join(prefix, "attn");
        visit2(&attn, "w_v", &self.attention.w_v, f);
        visit2(&attn, "w_q", &self.attention.w_q, f);
        visit1(&attn, "bias", &self.attention.bias, f);
        visit1(&attn, "score", &self.attention.score, f);
        self.v_proj.visit_params(&join(prefix, "fuse.v_proj"), f);
        self.q_proj.visit_params(&join(prefix, "fuse.q_proj"), f);
        self.hidden.visit_params(&join(prefix, "classifier.hidden"), f);
        self.out.visit_params(&join(prefix, "classifier.out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(prefix, "embedding", &mut self.embedding, f);
        let rnn = join(prefix, "rnn");
        visit2_mut(&rnn, "w_in", &mut self.rnn.w_in, f);
        visit2_mut(&rnn, "w_rec", &mut self.rnn.w_rec, f);
        visit1_mut(&rnn, "bias", &mut self.rnn.bias, f);
        let attn = join(prefix, "attn");
        visit2_mut(&attn, "w_v", &mut self.attention.w_v, f);
        visit2_mut(&attn, "w_q", &mut self.attention.w_q, f);
        visit1_mut(&attn, "bias", &mut self.attention.bias, f);
        visit1_mut(&attn, "score", &mut self.attention.score, f);
        self.v_proj.visit_params_mut(&join(prefix, "fuse.v_proj"), f);
        self.q_proj.visit_params_mut(&join(prefix, "fuse.q_proj"), f);
        self.hidden.visit_params_mut(&join(prefix, "classifier.hidden"), f);
        self.out.visit_params_mut(&join(prefix, "classifier.out"), f);
    }
}

/// Row-wise two-layer perceptron mapping noise `[n, d_z]` to features `[n, d_v]`.
/// Each output row is scaled to unit length, the scale of real object rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct GeneratorCache {
    noise: Array2<f64>,
    hidden: Array2<f64>,
    raw: Array2<f64>,
    norms: Array1<f64>,
}

const ROW_NORM_EPS: f64 = 1e-12;

impl Generator {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(rng, config.noise_dim, config.gen_hidden),
            out: Linear::new(rng, config.gen_hidden, config.visual_dim),
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn forward(&self, noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(noise).map(|(v, _)| v)
    }

    pub fn forward_cached(&self, noise: ArrayView2<f64>) -> Result<(Array2<f64>, GeneratorCache)> {
        if noise.ncols() != self.noise_dim() || noise.nrows() == 0 {
            return Err(Error::shape("noise", &[noise.nrows().max(1), self.noise_dim()], noise.shape()));
        }
        let mut hidden = noise.dot(&self.hidden.weight.t());
        for mut row in hidden.rows_mut() {
            row += &self.hidden.bias;
            row.mapv_inplace(|x| if x < 0.0 { 0.0 } else { x });
        }
        let mut raw = hidden.dot(&self.out.weight.t());
        for mut row in raw.rows_mut() {
            row += &self.out.bias;
        }
        let norms = raw.map_axis(Axis(1), |r| (r.dot(&r) + ROW_NORM_EPS).sqrt());
        let out = &raw / &norms.view().insert_axis(Axis(1));
        Ok((
            out,
            GeneratorCache {
                noise: noise.to_owned(),
                hidden,
                raw,
                norms,
            },
        ))
    }

    pub fn backward(&self, cache: &GeneratorCache, d_out: &Array2<f64>, grad: &mut Generator) {
        for j in 0..d_out.nrows() {
            let raw = cache.raw.row(j);
            let r = cache.norms[j];
            let du = d_out.row(j);
            let d_raw = (&du - &(&raw * (raw.dot(&du) / (r * r)))) / r;
            let act = cache.hidden.row(j).to_owned();
            let mut d_hidden = self.out.backward(act.view(), d_raw.view(), &mut grad.out);
            relu_backward(&mut d_hidden, &act);
            self.hidden.accumulate(cache.noise.row(j), d_hidden.view(), &mut grad.hidden);
        }
    }
}

impl ParamSet for Generator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

/// Three-layer leaky-relu perceptron on answer logits with a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    input: Array1<f64>,
    pre1: Array1<f64>,
    act1: Array1<f64>,
    pre2: Array1<f64>,
    act2: Array1<f64>,
    score: f64,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(rng, config.num_answers, config.disc_hidden),
            l2: Linear::new(rng, config.disc_hidden, config.disc_hidden),
            l3: Linear::new(rng, config.disc_hidden, 1),
        }
    }

    /// Probability that `logits` came from the target model.
    pub fn forward(&self, logits: &Array1<f64>) -> Result<f64> {
        self.forward_cached(logits).map(|(s, _)| s)
    }

    pub fn forward_cached(&self, logits: &Array1<f64>) -> Result<(f64, DiscriminatorCache)> {
        if logits.len() != self.l1.inputs() {
            return Err(Error::shape("answer logits", &[self.l1.inputs()], &[logits.len()]));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("discriminator input is not finite".into()));
        }
        let pre1 = self.l1.forward(logits.view());
        let act1 = leaky_relu(&pre1);
        let pre2 = self.l2.forward(act1.view());
        let act2 = leaky_relu(&pre2);
        let raw = self.l3.forward(act2.view())[0];
        // strict (0, 1) even where the f64 sigmoid rounds to an endpoint
        let score = sigmoid(raw).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        Ok((
            score,
            DiscriminatorCache {
                input: logits.clone(),
                pre1,
                act1,
                pre2,
                act2,
                score,
            },
        ))
    }

    /// Accumulates parameter gradients of `d_score · score` and returns the
    /// gradient with respect to the input logits.
    pub fn backward(&self, cache: &DiscriminatorCache, d_score: f64, grad: &mut Discriminator) -> Array1<f64> {
        let d_raw = Array1::from_elem(1, d_score * cache.score * (1.0 - cache.score));
        let mut d_act2 = self.l3.backward(cache.act2.view(), d_raw.view(), &mut grad.l3);
        leaky_relu_backward(&mut d_act2, &cache.pre2);
        let mut d_act1 = self.l2.backward(cache.act1.view(), d_act2.view(), &mut grad.l2);
        leaky_relu_backward(&mut d_act1, &cache.pre1);
        self.l1.backward(cache.input.view(), d_act1.view(), &mut grad.l1)
    }
}

impl ParamSet for Discriminator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.l1.visit_params(&join(prefix, "l1"), f);
        self.l2.visit_params(&join(prefix, "l2"), f);
        self.l3.visit_params(&join(prefix, "l3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.l1.visit_params_mut(&join(prefix, "l1"), f);
        self.l2.visit_params_mut(&join(prefix, "l2"), f);
        self.l3.visit_params_mut(&join(prefix, "l3"), f);
    }
}

/// i.i.d. standard normal noise `[n, d_z]`.
pub fn sample_noise(rng: &mut impl Rng, n: usize, d_z: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d_z), || StandardNormal.sample(rng))
}

pub fn target_forward(target: &TargetModel, visual: ArrayView2<f64>, tokens: &[usize]) -> Result<VqaOutput> {
    target.forward(visual, tokens)
}

/// `F_b(G(z), q)`.
pub fn bias_forward_noise(
    bias: &BiasModel,
    generator: &Generator,
    noise: ArrayView2<f64>,
    tokens: &[usize],
) -> Result<VqaOutput> {
    let fake = generator.forward(noise)?;
    bias.forward(fake.view(), tokens)
}

/// `F_b(v, q)` on real image features.
pub fn bias_forward_real(bias: &BiasModel, visual: ArrayView2<f64>, tokens: &[usize]) -> Result<VqaOutput> {
    bias.forward(visual, tokens)
}

pub fn discriminator_forward(disc: &Discriminator, logits: &Array1<f64>) -> Result<f64> {
    disc.forward(logits)
}

/// Parameters of all four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub target: TargetModel,
    pub bias: BiasModel,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.init_seed;
        Ok(Self {
            target: VqaNet::new(&config, &mut stream_rng(seed, Stream::Init, 0)),
            bias: VqaNet::new(&config, &mut stream_rng(seed, Stream::Init, 1)),
            generator: Generator::new(&config, &mut stream_rng(seed, Stream::Init, 2)),
            discriminator: Discriminator::new(&config, &mut stream_rng(seed, Stream::Init, 3)),
            config,
        })
    }

    pub fn write_params(&self, w: &mut ArchiveWriter) -> Result<()> {
        write_param_set(w, "target", &self.target)?;
        write_param_set(w, "bias", &self.bias)?;
        write_param_set(w, "generator", &self.generator)?;
        write_param_set(w, "discriminator", &self.discriminator)
    }

    pub fn read_params(config: ModelConfig, archive: &Archive) -> Result<Self> {
        let mut bundle = Self::new(config)?;
        read_param_set(archive, "target", &mut bundle.target)?;
        read_param_set(archive, "bias", &mut bundle.bias)?;
        read_param_set(archive, "generator", &mut bundle.generator)?;
        read_param_set(archive, "discriminator", &mut bundle.discriminator)?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(path)?;
        self.write_params(&mut w)?;
        let mut meta = Metadata::new();
        meta.set("format", CHECKPOINT_FORMAT);
        meta.insert_struct("model", &self.config);
        w.add_metadata(&meta)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::open(path)?;
        let meta = archive.metadata()?;
        check_checkpoint_format(&meta)?;
        Self::read_params(meta.extract_struct("model")?, &archive)
    }
}

pub(crate) fn check_checkpoint_format(meta: &Metadata) -> Result<()> {
    let found = meta.get("format")?;
    if found != CHECKPOINT_FORMAT {
        return Err(Error::format(
            "format",
            format!("expected {CHECKPOINT_FORMAT:?}, found {found:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn write_param_set(w: &mut ArchiveWriter, prefix: &str, params: &impl ParamSet) -> Result<()> {
    let mut result = Ok(());
    params.visit_params(prefix, &mut |name, shape, data| {
        if result.is_err() {
            return;
        }
        result = match shape.len() {
            1 => w.add_array(name, &ndarray::ArrayView1::from(data)),
            _ => {
                let view = ndarray::ArrayView2::from_shape((shape[0], shape[1]), data).expect("matrix shape");
                w.add_array(name, &view)
            }
        };
    });
    result
}

pub(crate) fn read_param_set(archive: &Archive, prefix: &str, params: &mut impl ParamSet) -> Result<()> {
    let mut result = Ok(());
    params.visit_params_mut(prefix, &mut |name, shape, data| {
        if result.is_err() {
            return;
        }
        let loaded: Result<Vec<f64>> = match shape.len() {
            1 => archive.array::<f64, Ix1>(name).and_then(|a| {
                if a.shape() == shape {
                    Ok(a.to_vec())
                } else {
                    Err(Error::shape(name, shape, a.shape()))
                }
            }),
            _ => archive.array::<f64, Ix2>(name).and_then(|a| {
                if a.shape() == shape {
                    Ok(a.iter().copied().collect())
                } else {
                    Err(Error::shape(name, shape, a.shape()))
                }
            }),
        };
        match loaded {
            Ok(values) => data.copy_from_slice(&values),
            Err(e) => result = Err(e),
        }
    });
    result
}
