//! Training objectives for the bias model, the discriminator and the target
//! model, each returned with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, log_softmax, sigmoid, softmax};

/// Clamp applied to discriminator scores before taking logarithms.
pub const LOG_EPS: f64 = 1e-7;

/// A scalar loss and its gradient with respect to a vector input.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

fn check_unit_interval(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        Some(bad) => Err(Error::Domain(format!("{name} entry {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() && !a.is_empty() {
        Ok(())
    } else {
        Err(Error::shape("answer vector", &[a.len()], &[b.len()]))
    }
}

/// Mean over answers of `-[t log σ(ℓ) + (1-t) log(1-σ(ℓ))]`, with gradient
/// `(σ(ℓ) - t) / |A|`.
pub fn bce_from_logits(logits: &[f64], targets: &[f64]) -> Result<VectorLoss> {
    check_len(logits, targets)?;
    check_unit_interval("target", targets)?;
    check_finite("logits", logits)?;
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        // log(1 - σ(l)) = log σ(-l)
        value -= t * log_sigmoid(l) + (1.0 - t) * log_sigmoid(-l);
        grad.push((sigmoid(l) - t) / n);
    }
    Ok(VectorLoss { value: value / n, grad })
}

/// Scalar loss with derivatives with respect to two discriminator scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

fn clamp_score(s: f64) -> Result<(f64, f64)> {
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("discriminator score {s} outside [0, 1]")));
    }
    let clamped = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    // derivative of the clamp itself
    let slope = if clamped == s { 1.0 } else { 0.0 };
    Ok((clamped, slope))
}

/// `-[log D(y) + log(1 - D(y_b))]`; minimizing it maximizes the GAN objective
/// in the discriminator.
pub fn gan_discriminator_loss(d_real: f64, d_fake: f64) -> Result<ScoreLoss> {
    let (r, r_slope) = clamp_score(d_real)?;
    let (f, f_slope) = clamp_score(d_fake)?;
    Ok(ScoreLoss {
        value: -(r.ln() + (1.0 - f).ln()),
        d_real: -r_slope / r,
        d_fake: f_slope / (1.0 - f),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `log(1 - D(y_b))`
    #[default]
    Minimax,
    /// `-log D(y_b)`
    NonSaturating,
}

/// Generator side of the GAN objective; `d_real` of the result is always 0.
pub fn gan_generator_loss(d_fake: f64, form: GeneratorLoss) -> Result<ScoreLoss> {
    let (f, slope) = clamp_score(d_fake)?;
    let (value, d_fake) = match form {
        GeneratorLoss::Minimax => ((1.0 - f).ln(), -slope / (1.0 - f)),
        GeneratorLoss::NonSaturating => (-f.ln(), -slope / f),
    };
    Ok(ScoreLoss {
        value,
        d_real: 0.0,
        d_fake,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL between softmax distributions over answers.
    #[default]
    Softmax,
    /// Sum of per-answer Bernoulli KLs under σ.
    Bernoulli,
}

/// `KL(P ‖ Q)` with `P` from the (detached) target logits and `Q` from the bias
/// logits; the gradient is with respect to the bias logits only.
pub fn distill_kl(target_logits: &[f64], bias_logits: &[f64], mode: KlMode) -> Result<VectorLoss> {
    check_len(target_logits, bias_logits)?;
    check_finite("target logits", target_logits)?;
    check_finite("bias logits", bias_logits)?;
    match mode {
        KlMode::Softmax => {
            let log_p = log_softmax(target_logits);
            let log_q = log_softmax(bias_logits);
            let value = log_p
                .iter()
                .zip(&log_q)
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum::<f64>();
            let p = softmax(target_logits);
            let q = softmax(bias_logits);
            let grad = q.iter().zip(&p).map(|(q, p)| q - p).collect();
            Ok(VectorLoss { value: value.max(0.0), grad })
        }
        KlMode::Bernoulli => {
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(target_logits.len());
            for (&a, &b) in target_logits.iter().zip(bias_logits) {
                let p = sigmoid(a);
                value += p * (log_sigmoid(a) - log_sigmoid(b))
                    + (1.0 - p) * (log_sigmoid(-a) - log_sigmoid(-b));
                grad.push(sigmoid(b) - p);
            }
            Ok(VectorLoss { value: value.max(0.0), grad })
        }
    }
}

/// Weights and ablation switches of the combined bias-model objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the distillation term.
    pub lambda_distill: f64,
    /// Weight of the ground-truth term.
    pub lambda_gt: f64,
    pub use_gan: bool,
    pub use_distill: bool,
    pub use_gt: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_distill: 1.0,
            lambda_gt: 1.0,
            use_gan: true,
            use_distill: true,
            use_gt: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_distill", self.lambda_distill), ("lambda_gt", self.lambda_gt)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }

    /// Effective multipliers `(gan, distill, gt)` after the switches.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        (
            if self.use_gan { 1.0 } else { 0.0 },
            if self.use_distill { self.lambda_distill } else { 0.0 },
            if self.use_gt { self.lambda_gt } else { 0.0 },
        )
    }
}

/// Per-batch components of the bias-model objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenbComponents {
    pub gan: f64,
    pub distill: f64,
    pub gt: f64,
}

pub fn genb_total(components: &GenbComponents, weights: &LossWeights) -> f64 {
    let (gan, distill, gt) = weights.coefficients();
    let mut total = 0.0;
    // disabled terms contribute nothing, even when non-finite
    if gan != 0.0 {
        total += gan * components.gan;
    }
    if distill != 0.0 {
        total += distill * components.distill;
    }
    if gt != 0.0 {
        total += gt * components.gt;
    }
    total
}

/// Debiasing training target, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel(pub Vec<f64>);

impl PseudoLabel {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn pseudo_label_with(y_gt: &[f64], y_b: &[f64], squash: impl Fn(f64) -> f64) -> Result<PseudoLabel> {
    check_len(y_gt, y_b)?;
    check_unit_interval("ground truth", y_gt)?;
    check_finite("bias logits", y_b)?;
    Ok(PseudoLabel(
        y_gt.iter()
            .zip(y_b)
            .map(|(&g, &b)| (2.0 * g * sigmoid(-2.0 * g * squash(b))).min(1.0))
            .collect(),
    ))
}

/// `min(1, 2·y_gt·σ(-2·y_gt·y_b))` elementwise, with raw bias logits.
pub fn pseudo_label(y_gt: &[f64], y_b: &[f64]) -> Result<PseudoLabel> {
    pseudo_label_with(y_gt, y_b, |b| b)
}

/// The same formula applied to `σ(y_b)` instead of the raw logits.
pub fn pseudo_label_suppressed(y_gt: &[f64], y_b: &[f64]) -> Result<PseudoLabel> {
    pseudo_label_with(y_gt, y_b, sigmoid)
}

/// Target-model loss variants; the names are the stable config strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasLoss {
    #[default]
    Genb,
    Suppressed,
    Plain,
}

impl DebiasLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            DebiasLoss::Genb => "genb",
            DebiasLoss::Suppressed => "suppressed",
            DebiasLoss::Plain => "plain",
        }
    }
}

impl std::str::FromStr for DebiasLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genb" => Ok(DebiasLoss::Genb),
            "suppressed" => Ok(DebiasLoss::Suppressed),
            "plain" => Ok(DebiasLoss::Plain),
            other => Err(Error::Config(format!("unknown debias loss {other:?}"))),
        }
    }
}

/// BCE of the target logits against the variant's training label. `y_b` is
/// treated as a constant.
pub fn target_loss(y: &[f64], y_gt: &[f64], y_b: &[f64], variant: DebiasLoss) -> Result<VectorLoss> {
    let label = match variant {
        DebiasLoss::Genb => pseudo_label(y_gt, y_b)?.0,
        DebiasLoss::Suppressed => pseudo_label_suppressed(y_gt, y_b)?.0,
        DebiasLoss::Plain => y_gt.to_vec(),
    };
    bce_from_logits(y, &label)
}
