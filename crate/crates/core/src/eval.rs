//! Accuracy metrics, bias-model diagnostics and the run report.
//!
//! Question types stand in for answer categories: the per-qtype accuracy
//! columns of a report play the role of the usual "Yes/No / Num / Other"
//! breakdown of VQA results.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::biasworld::{DatasetSpec, PriorTable, SignatureOracle, SplitBundle, VqaInstance};
use crate::error::{Error, Result};
use crate::models::{bias_forward_noise, bias_forward_real, sample_noise, AttentionMap, BiasModel, Generator, VqaNet};
use crate::nn::{argmax, softmax};
use crate::rng::{stream_rng, Stream};

pub const REPORT_FORMAT: &str = "genb-report-v1";

/// Score of predicting answer `pred` against soft ground truth `y_gt`.
pub fn vqa_accuracy(pred: usize, y_gt: &[f64]) -> Result<f64> {
    if y_gt.is_empty() {
        return Err(Error::Domain("empty answer vector".into()));
    }
    if let Some(bad) = y_gt.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("ground-truth entry {bad} outside [0, 1]")));
    }
    y_gt.get(pred)
        .copied()
        .ok_or_else(|| Error::Domain(format!("prediction {pred} outside {} answers", y_gt.len())))
}

/// Anything that maps an instance (and its position in the split) to an answer.
pub trait Predictor {
    fn predict(&self, index: usize, inst: &VqaInstance) -> Result<usize>;
}

impl Predictor for VqaNet {
    fn predict(&self, _index: usize, inst: &VqaInstance) -> Result<usize> {
        let out = self.forward(inst.features_f64().view(), &inst.question)?;
        Ok(argmax(out.logits.as_slice().expect("contiguous")))
    }
}

impl Predictor for SignatureOracle {
    fn predict(&self, _index: usize, inst: &VqaInstance) -> Result<usize> {
        SignatureOracle::predict(self, inst)
            .ok_or_else(|| Error::Domain("instance has no signature metadata".into()))
    }
}

/// Question-only baseline: the majority answer of a prior table.
impl Predictor for PriorTable {
    fn predict(&self, _index: usize, inst: &VqaInstance) -> Result<usize> {
        self.majority_answer(inst.qtype)
            .ok_or_else(|| Error::Domain(format!("prior row {} undefined", inst.qtype)))
    }
}

/// The bias model fed generated features, one fresh noise draw per instance.
pub struct NoiseBiasPredictor<'a> {
    pub bias: &'a BiasModel,
    pub generator: &'a Generator,
    pub seed: u64,
}

impl Predictor for NoiseBiasPredictor<'_> {
    fn predict(&self, index: usize, inst: &VqaInstance) -> Result<usize> {
        let mut rng = stream_rng(self.seed, Stream::Eval, index as u64);
        let z = sample_noise(&mut rng, inst.features.nrows(), self.generator.noise_dim());
        let out = bias_forward_noise(self.bias, self.generator, z.view(), &inst.question)?;
        Ok(argmax(out.logits.as_slice().expect("contiguous")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub overall: f64,
    /// `None` for question types absent from the split.
    pub per_qtype: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

pub fn evaluate_model(model: &impl Predictor, bundle: &SplitBundle) -> Result<SplitMetrics> {
    let t = bundle.spec.num_qtypes;
    let mut sums = vec![0.0; t];
    let mut counts = vec![0usize; t];
    for (i, inst) in bundle.instances.iter().enumerate() {
        if inst.answer.len() != bundle.spec.num_answers {
            return Err(Error::shape("answers", &[bundle.spec.num_answers], &[inst.answer.len()]));
        }
        let pred = model.predict(i, inst)?;
        sums[inst.qtype] += vqa_accuracy(pred, &inst.answer_f64())?;
        counts[inst.qtype] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    Ok(SplitMetrics {
        overall: sums.iter().sum::<f64>() / total as f64,
        per_qtype: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        counts,
    })
}

/// A question-conditioned answer distribution driven by input noise.
pub trait NoisyAnswerModel {
    /// `(rows, noise_dim)` of one noise draw.
    fn noise_shape(&self) -> (usize, usize);

    fn answer_distribution(&self, tokens: &[usize], noise: ArrayView2<f64>) -> Result<Vec<f64>>;
}

/// `F_b(G(z), q)` viewed as a noisy answer distribution.
pub struct GenerativeBias<'a> {
    pub bias: &'a BiasModel,
    pub generator: &'a Generator,
    pub num_objects: usize,
}

impl NoisyAnswerModel for GenerativeBias<'_> {
    fn noise_shape(&self) -> (usize, usize) {
        (self.num_objects, self.generator.noise_dim())
    }

    fn answer_distribution(&self, tokens: &[usize], noise: ArrayView2<f64>) -> Result<Vec<f64>> {
        let out = bias_forward_noise(self.bias, self.generator, noise, tokens)?;
        Ok(softmax(out.logits.as_slice().expect("contiguous")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDivergence {
    /// Total-variation distance per question type; `None` where undefined.
    pub tv: Vec<Option<f64>>,
    /// `KL(prior ‖ model)` per question type.
    pub kl: Vec<Option<f64>>,
    pub mean_tv: f64,
    pub draws_per_qtype: usize,
}

/// Compares the mean noise-driven answer distribution of each question type
/// against the matching prior row. Draw `k` of type `t` pairs the `k`-th
/// noise sample with the question of the `(k mod count_t)`-th instance of `t`.
pub fn bias_prior_divergence(
    model: &impl NoisyAnswerModel,
    bundle: &SplitBundle,
    prior: &PriorTable,
    draws: usize,
    seed: u64,
) -> Result<PriorDivergence> {
    let (rows, cols) = model.noise_shape();
    let t_count = prior.num_qtypes();
    let noise: Vec<Vec<Array2<f64>>> = (0..t_count)
        .map(|t| {
            let mut rng = stream_rng(seed, Stream::Eval, (1 << 40) + t as u64);
            (0..draws).map(|_| sample_noise(&mut rng, rows, cols)).collect()
        })
        .collect();
    prior_divergence_with_noise(model, bundle, prior, &noise)
}

/// As [`bias_prior_divergence`] with explicit per-qtype noise draws.
pub fn prior_divergence_with_noise(
    model: &impl NoisyAnswerModel,
    bundle: &SplitBundle,
    prior: &PriorTable,
    noise: &[Vec<Array2<f64>>],
) -> Result<PriorDivergence> {
    let t_count = prior.num_qtypes();
    let mut by_type: Vec<Vec<&VqaInstance>> = vec![Vec::new(); t_count];
    for inst in &bundle.instances {
        by_type[inst.qtype].push(inst);
    }
    let mut tv = Vec::with_capacity(t_count);
    let mut kl = Vec::with_capacity(t_count);
    let mut draws_per_qtype = 0;
    for t in 0..t_count {
        let (Some(row), false) = (prior.row(t), by_type[t].is_empty()) else {
            tv.push(None);
            kl.push(None);
            continue;
        };
        let draws = &noise[t];
        if draws.is_empty() {
            return Err(Error::Domain("prior divergence needs at least one noise draw".into()));
        }
        draws_per_qtype = draws.len();
        let mut mean = vec![0.0; row.len()];
        for (k, z) in draws.iter().enumerate() {
            let inst = by_type[t][k % by_type[t].len()];
            let p = model.answer_distribution(&inst.question, z.view())?;
            mean.iter_mut().zip(&p).for_each(|(m, p)| *m += p);
        }
        mean.iter_mut().for_each(|m| *m /= draws.len() as f64);
        tv.push(Some(total_variation(&mean, row)));
        kl.push(Some(
            row.iter()
                .zip(&mean)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - q.max(f64::MIN_POSITIVE).ln()))
                .sum(),
        ));
    }
    let defined: Vec<f64> = tv.iter().flatten().copied().collect();
    let mean_tv = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(PriorDivergence {
        tv,
        kl,
        mean_tv,
        draws_per_qtype,
    })
}

/// Half the L1 distance between two categorical distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawSource {
    Noise(usize),
    RealImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDraw {
    pub source: DrawSource,
    pub attention: AttentionMap,
    pub top_answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStudy {
    /// Noise passes in order, then the real-image pass.
    pub draws: Vec<AttentionDraw>,
    /// Mean pairwise L1 distance between the noise-pass attention maps.
    pub dispersion: f64,
    /// Fraction of noise-pass pairs whose top answers differ.
    pub answer_change_rate: f64,
}

/// Runs the bias model once per noise draw and once on the real image.
pub fn attention_noise_study(
    bias: &BiasModel,
    generator: &Generator,
    inst: &VqaInstance,
    k_draws: usize,
    rng: &mut impl Rng,
) -> Result<AttentionStudy> {
    if k_draws < 2 {
        return Err(Error::Domain(format!("attention study needs at least 2 draws, got {k_draws}")));
    }
    let noise: Vec<Array2<f64>> = (0..k_draws)
        .map(|_| sample_noise(rng, inst.features.nrows(), generator.noise_dim()))
        .collect();
    attention_study_with_noise(bias, generator, inst, &noise)
}

pub fn attention_study_with_noise(
    bias: &BiasModel,
    generator: &Generator,
    inst: &VqaInstance,
    noise: &[Array2<f64>],
) -> Result<AttentionStudy> {
    let mut draws = Vec::with_capacity(noise.len() + 1);
    for (k, z) in noise.iter().enumerate() {
        let out = bias_forward_noise(bias, generator, z.view(), &inst.question)?;
        draws.push(AttentionDraw {
            source: DrawSource::Noise(k),
            top_answer: argmax(out.logits.as_slice().expect("contiguous")),
            attention: out.attention,
        });
    }
    let real = bias_forward_real(bias, inst.features_f64().view(), &inst.question)?;
    draws.push(AttentionDraw {
        source: DrawSource::RealImage,
        top_answer: argmax(real.logits.as_slice().expect("contiguous")),
        attention: real.attention,
    });

    let noisy = &draws[..noise.len()];
    let (mut dist, mut changes, mut pairs) = (0.0, 0usize, 0usize);
    for i in 0..noisy.len() {
        for j in i + 1..noisy.len() {
            dist += noisy[i].attention.l1_distance(&noisy[j].attention);
            changes += usize::from(noisy[i].top_answer != noisy[j].top_answer);
            pairs += 1;
        }
    }
    let (dispersion, answer_change_rate) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        (dist / pairs as f64, changes as f64 / pairs as f64)
    };
    Ok(AttentionStudy {
        draws,
        dispersion,
        answer_change_rate,
    })
}

/// Attention rows for `attention.csv`: `(instance_id, study)`.
pub fn write_attention_csv(path: &Path, studies: &[(usize, AttentionStudy)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let n = studies
        .first()
        .and_then(|(_, s)| s.draws.first())
        .map_or(0, |d| d.attention.0.len());
    let mut header = vec!["instance_id".to_string(), "draw_id".to_string()];
    header.extend((0..n).map(|j| format!("alpha_{j}")));
    header.push("top_answer".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (id, study) in studies {
        for draw in &study.draws {
            let draw_id = match draw.source {
                DrawSource::Noise(k) => k as i64,
                DrawSource::RealImage => -1,
            };
            let mut rec = vec![id.to_string(), draw_id.to_string()];
            rec.extend(draw.attention.0.iter().map(|a| format!("{a:.6}")));
            rec.push(draw.top_answer.to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Dataset statistics recorded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStatistics {
    pub train_prior: PriorTable,
    pub test_prior: PriorTable,
    /// Accuracy of answering the train-majority answer per question type.
    pub prior_baseline_train: f64,
    pub prior_baseline_test: f64,
}

impl SplitStatistics {
    pub fn compute(train: &SplitBundle, test: &SplitBundle) -> Result<Self> {
        let train_prior = crate::biasworld::prior_table(train)?;
        let test_prior = crate::biasworld::prior_table(test)?;
        Ok(Self {
            prior_baseline_train: train_prior.constant_predictor_accuracy(&train_prior),
            prior_baseline_test: train_prior.constant_predictor_accuracy(&test_prior),
            train_prior,
            test_prior,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostics {
    pub prior_divergence: PriorDivergence,
    /// Accuracy of the bias model fed generated features.
    pub noise_train_accuracy: f64,
    pub noise_test_accuracy: f64,
    /// Accuracy of the bias model fed real image features.
    pub real_test_accuracy: f64,
    pub mean_attention_dispersion: f64,
    pub mean_answer_change_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    pub ood_gap: f64,
    pub bias: BiasDiagnostics,
}

/// Mean per-step losses over the last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_gt: f64,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_distill: f64,
    pub l_target: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    /// How question types map onto the answer-category columns.
    pub qtype_note: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub config: serde_json::Value,
    pub split_statistics: SplitStatistics,
    pub history: Vec<EpochMetrics>,
    pub final_metrics: Option<FinalMetrics>,
    pub loss_summary: Option<LossSummary>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut file, self).map_err(|e| Error::io(path, e.into()))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: RunReport = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if report.format != REPORT_FORMAT {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                reason: format!("expected format {REPORT_FORMAT:?}, found {:?}", report.format),
            });
        }
        Ok(report)
    }

    /// Per-qtype accuracy table as CSV: `split,qtype,count,accuracy`.
    pub fn write_qtype_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["split", "qtype", "count", "accuracy"])
            .map_err(|e| csv_err(path, e))?;
        if let Some(fin) = &self.final_metrics {
            for (name, m) in [("train", &fin.train), ("test", &fin.test)] {
                for (t, (acc, count)) in m.per_qtype.iter().zip(&m.counts).enumerate() {
                    let acc = acc.map_or(String::new(), |a| format!("{a:.6}"));
                    w.write_record([name, &t.to_string(), &count.to_string(), &acc])
                        .map_err(|e| csv_err(path, e))?;
                }
                w.write_record([name, "all", &m.counts.iter().sum::<usize>().to_string(), &format!("{:.6}", m.overall)])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
