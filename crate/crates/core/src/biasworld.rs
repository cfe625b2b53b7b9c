//! BiasWorld: a synthetic VQA-like benchmark with an answer prior that is
//! inverted between the train and test splits.
//!
//! Each question type `t` owns the admissible answer pair `{2t, 2t+1}`. On the
//! train split answer `2t` is drawn with probability `train_skew`, on the test
//! split with probability `test_skew`. The image always determines the answer:
//! exactly one object row carries the answer's embedding plus Gaussian noise,
//! the remaining rows are distractors drawn from a disjoint table.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis, Ix1, Ix2, Ix3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter, Metadata};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DATASET_FORMAT: &str = "biasworld-v1";

/// Mass placed on the paired answer when `soft_label` is enabled.
pub const SOFT_LABEL_PAIR_MASS: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_answers: usize,
    pub num_qtypes: usize,
    pub objects_per_image: usize,
    pub visual_dim: usize,
    pub question_len: usize,
    pub train_skew: f64,
    pub test_skew: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub signal_noise_sigma: f64,
    pub seed: u64,
    /// Mix 0.3 of the label mass onto the paired answer.
    pub soft_label: bool,
    /// Number of nuisance token ids following the question-type token.
    pub nuisance_vocab: usize,
    pub distractor_table_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_answers: 10,
            num_qtypes: 5,
            objects_per_image: 4,
            visual_dim: 16,
            question_len: 6,
            train_skew: 0.9,
            test_skew: 0.1,
            train_size: 20_000,
            test_size: 4_000,
            signal_noise_sigma: 0.1,
            seed: 0,
            soft_label: false,
            nuisance_vocab: 20,
            distractor_table_size: 32,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_answers", self.num_answers),
            ("num_qtypes", self.num_qtypes),
            ("objects_per_image", self.objects_per_image),
            ("visual_dim", self.visual_dim),
            ("question_len", self.question_len),
            ("train_size", self.train_size),
            ("test_size", self.test_size),
            ("nuisance_vocab", self.nuisance_vocab),
            ("distractor_table_size", self.distractor_table_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_answers != 2 * self.num_qtypes {
            return Err(Error::Config(format!(
                "num_answers ({}) must equal 2 * num_qtypes ({})",
                self.num_answers, self.num_qtypes
            )));
        }
        for (name, p) in [("train_skew", self.train_skew), ("test_skew", self.test_skew)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("{name} must lie strictly in (0, 1), got {p}")));
            }
        }
        if !(self.signal_noise_sigma >= 0.0 && self.signal_noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "signal_noise_sigma must be finite and nonnegative, got {}",
                self.signal_noise_sigma
            )));
        }
        Ok(())
    }

    /// Token ids `0..num_qtypes` name question types, the rest are nuisance.
    pub fn vocab_size(&self) -> usize {
        self.num_qtypes + self.nuisance_vocab
    }

    pub fn skew(&self, split: SplitTag) -> f64 {
        match split {
            SplitTag::Train => self.train_skew,
            SplitTag::Test => self.test_skew,
        }
    }

    /// Unit-norm answer signatures `[num_answers, visual_dim]`, orthonormal
    /// whenever `visual_dim >= num_answers`.
    pub fn answer_embeddings(&self) -> Array2<f64> {
        let mut rng = stream_rng(self.seed, Stream::AnswerTable, 0);
        let mut table = gaussian_table(&mut rng, self.num_answers, self.visual_dim);
        let orthogonalize = self.visual_dim >= self.num_answers;
        for i in 0..self.num_answers {
            if orthogonalize {
                for j in 0..i {
                    let proj = table.row(i).dot(&table.row(j));
                    let prev = table.row(j).to_owned();
                    table.row_mut(i).scaled_add(-proj, &prev);
                }
            }
            normalize(table.row_mut(i));
        }
        table
    }

    /// Unit-norm distractor rows, drawn from a stream disjoint from the answer table.
    pub fn distractor_table(&self) -> Array2<f64> {
        let mut rng = stream_rng(self.seed, Stream::DistractorTable, 0);
        let mut table = gaussian_table(&mut rng, self.distractor_table_size, self.visual_dim);
        for row in table.rows_mut() {
            normalize(row);
        }
        table
    }
}

fn gaussian_table(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn normalize(mut row: ndarray::ArrayViewMut1<f64>) {
    let norm = row.dot(&row).sqrt();
    if norm > 0.0 {
        row /= norm;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }

    fn stream(self) -> Stream {
        match self {
            SplitTag::Train => Stream::TrainSplit,
            SplitTag::Test => Stream::TestSplit,
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::format("split", format!("unknown split tag {other:?}"))),
        }
    }
}

/// One example.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaInstance {
    /// Object features `[n, d_v]`.
    pub features: Array2<f32>,
    /// Token ids; `question[0]` is the question type.
    pub question: Vec<usize>,
    pub qtype: usize,
    /// Ground-truth answer probabilities.
    pub answer: Array1<f32>,
    /// Row carrying the answer signature, when known.
    pub signature_index: Option<usize>,
}

impl VqaInstance {
    /// Index of the largest ground-truth mass.
    pub fn gt_answer(&self) -> usize {
        argmax_f32(self.answer.as_slice().expect("contiguous"))
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn answer_f64(&self) -> Vec<f64> {
        self.answer.iter().map(|&a| f64::from(a)).collect()
    }
}

fn argmax_f32(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub instances: Vec<VqaInstance>,
    pub split: SplitTag,
    pub spec: DatasetSpec,
}

impl SplitBundle {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Deterministic in `(spec.seed, split)`.
pub fn generate_split(spec: &DatasetSpec, split: SplitTag) -> Result<SplitBundle> {
    spec.validate()?;
    let answers = spec.answer_embeddings();
    let distractors = spec.distractor_table();
    let mut rng = stream_rng(spec.seed, split.stream(), 0);
    let size = match split {
        SplitTag::Train => spec.train_size,
        SplitTag::Test => spec.test_size,
    };
    let skew = spec.skew(split);
    let (n, d_v) = (spec.objects_per_image, spec.visual_dim);

    let mut instances = Vec::with_capacity(size);
    for _ in 0..size {
        let qtype = rng.random_range(0..spec.num_qtypes);
        let gt = if rng.random::<f64>() < skew { 2 * qtype } else { 2 * qtype + 1 };

        let mut question = Vec::with_capacity(spec.question_len);
        question.push(qtype);
        for _ in 1..spec.question_len {
            question.push(spec.num_qtypes + rng.random_range(0..spec.nuisance_vocab));
        }

        let signature = rng.random_range(0..n);
        let mut features = Array2::<f32>::zeros((n, d_v));
        for (j, mut row) in features.rows_mut().into_iter().enumerate() {
            let base = if j == signature {
                answers.row(gt)
            } else {
                distractors.row(rng.random_range(0..spec.distractor_table_size))
            };
            for (dst, &b) in row.iter_mut().zip(base.iter()) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *dst = (b + spec.signal_noise_sigma * noise) as f32;
            }
        }

        let mut answer = Array1::<f32>::zeros(spec.num_answers);
        if spec.soft_label {
            answer[gt] = 1.0 - SOFT_LABEL_PAIR_MASS;
            answer[gt ^ 1] = SOFT_LABEL_PAIR_MASS;
        } else {
            answer[gt] = 1.0;
        }

        instances.push(VqaInstance {
            features,
            question,
            qtype,
            answer,
            signature_index: Some(signature),
        });
    }
    Ok(SplitBundle {
        instances,
        split,
        spec: spec.clone(),
    })
}

pub fn save_dataset(bundle: &SplitBundle, path: &Path) -> Result<()> {
    let spec = &bundle.spec;
    let count = bundle.len();
    let (n, d_v, l, a) = (
        spec.objects_per_image,
        spec.visual_dim,
        spec.question_len,
        spec.num_answers,
    );
    let mut features = Array3::<f32>::zeros((count, n, d_v));
    let mut questions = Array2::<i32>::zeros((count, l));
    let mut qtypes = Array1::<i32>::zeros(count);
    let mut answers = Array2::<f32>::zeros((count, a));
    let mut signature = Array1::<i32>::zeros(count);
    for (i, inst) in bundle.instances.iter().enumerate() {
        check_instance(inst, spec, i)?;
        features.index_axis_mut(Axis(0), i).assign(&inst.features);
        for (j, &tok) in inst.question.iter().enumerate() {
            questions[[i, j]] = tok as i32;
        }
        qtypes[i] = inst.qtype as i32;
        answers.row_mut(i).assign(&inst.answer);
        signature[i] = inst.signature_index.map_or(-1, |s| s as i32);
    }

    let mut meta = Metadata::new();
    meta.set("format", DATASET_FORMAT);
    meta.set("split", bundle.split.as_str());
    meta.insert_struct("spec", spec);

    let mut w = ArchiveWriter::create(path)?;
    w.add_array("features", &features)?;
    w.add_array("questions", &questions)?;
    w.add_array("qtypes", &qtypes)?;
    w.add_array("answers", &answers)?;
    w.add_array("signature_index", &signature)?;
    w.add_metadata(&meta)?;
    w.finish()
}

fn check_instance(inst: &VqaInstance, spec: &DatasetSpec, i: usize) -> Result<()> {
    let expect = [spec.objects_per_image, spec.visual_dim];
    if inst.features.shape() != expect {
        return Err(Error::shape(format!("features[{i}]"), &expect, inst.features.shape()));
    }
    if inst.question.len() != spec.question_len {
        return Err(Error::shape(format!("questions[{i}]"), &[spec.question_len], &[inst.question.len()]));
    }
    if inst.answer.len() != spec.num_answers {
        return Err(Error::shape(format!("answers[{i}]"), &[spec.num_answers], &[inst.answer.len()]));
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SplitBundle> {
    let archive = Archive::open(path)?;
    let meta = archive.metadata()?;
    let format = meta.get("format")?;
    if format != DATASET_FORMAT {
        return Err(Error::format(
            "format",
            format!("expected {DATASET_FORMAT:?}, found {format:?}"),
        ));
    }
    let split: SplitTag = meta.get("split")?.parse()?;
    let spec: DatasetSpec = meta.extract_struct("spec")?;
    spec.validate()?;

    let features = archive.array::<f32, Ix3>("features")?;
    let questions = archive.array::<i32, Ix2>("questions")?;
    let qtypes = archive.array::<i32, Ix1>("qtypes")?;
    let answers = archive.array::<f32, Ix2>("answers")?;
    let signature = archive.array::<i32, Ix1>("signature_index")?;

    let count = features.shape()[0];
    let expect = |field: &str, found: &[usize], expected: &[usize]| {
        if found == expected {
            Ok(())
        } else {
            Err(Error::shape(field, expected, found))
        }
    };
    expect("features", features.shape(), &[count, spec.objects_per_image, spec.visual_dim])?;
    expect("questions", questions.shape(), &[count, spec.question_len])?;
    expect("qtypes", qtypes.shape(), &[count])?;
    expect("answers", answers.shape(), &[count, spec.num_answers])?;
    expect("signature_index", signature.shape(), &[count])?;

    let vocab = spec.vocab_size() as i32;
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let question = questions
            .row(i)
            .iter()
            .map(|&tok| {
                if (0..vocab).contains(&tok) {
                    Ok(tok as usize)
                } else {
                    Err(Error::format("questions", format!("token {tok} out of range at row {i}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let qtype = qtypes[i];
        if !(0..spec.num_qtypes as i32).contains(&qtype) {
            return Err(Error::format("qtypes", format!("qtype {qtype} out of range at row {i}")));
        }
        let answer = answers.row(i).to_owned();
        if answer.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::format("answers", format!("entry outside [0, 1] at row {i}")));
        }
        let sig = signature[i];
        let signature_index = match sig {
            -1 => None,
            s if (0..spec.objects_per_image as i32).contains(&s) => Some(s as usize),
            s => {
                return Err(Error::format(
                    "signature_index",
                    format!("index {s} out of range at row {i}"),
                ))
            }
        };
        instances.push(VqaInstance {
            features: features.index_axis(Axis(0), i).to_owned(),
            question,
            qtype: qtype as usize,
            answer,
            signature_index,
        });
    }
    Ok(SplitBundle {
        instances,
        split,
        spec,
    })
}

/// Empirical per-question-type answer marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    /// `[num_qtypes][num_answers]`; rows with no instances are NaN.
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PriorTable {
    pub fn num_qtypes(&self) -> usize {
        self.rows.len()
    }

    pub fn is_defined(&self, qtype: usize) -> bool {
        self.counts[qtype] > 0
    }

    pub fn row(&self, qtype: usize) -> Option<&[f64]> {
        self.is_defined(qtype).then(|| self.rows[qtype].as_slice())
    }

    /// Answer with the largest prior mass for `qtype` (lowest index on ties).
    pub fn majority_answer(&self, qtype: usize) -> Option<usize> {
        self.row(qtype).map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
    }

    /// Exact accuracy, on the split summarized by `eval`, of predicting this
    /// table's majority answer for every question type.
    pub fn constant_predictor_accuracy(&self, eval: &PriorTable) -> f64 {
        let total: usize = eval.counts.iter().sum();
        let mut hit = 0.0;
        for (t, &count) in eval.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            if let Some(a) = self.majority_answer(t) {
                hit += count as f64 * eval.rows[t][a];
            }
        }
        hit / total as f64
    }
}

pub fn prior_table(bundle: &SplitBundle) -> Result<PriorTable> {
    if bundle.is_empty() {
        return Err(Error::Domain("prior table of an empty bundle".into()));
    }
    let (t_count, a_count) = (bundle.spec.num_qtypes, bundle.spec.num_answers);
    let mut sums = vec![vec![0.0f64; a_count]; t_count];
    let mut counts = vec![0usize; t_count];
    for inst in &bundle.instances {
        counts[inst.qtype] += 1;
        for (s, &a) in sums[inst.qtype].iter_mut().zip(inst.answer.iter()) {
            *s += f64::from(a);
        }
    }
    let rows = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| {
            if c == 0 {
                return vec![f64::NAN; a_count];
            }
            let mass: f64 = row.iter().sum();
            row.into_iter().map(|s| s / mass).collect()
        })
        .collect();
    Ok(PriorTable { rows, counts })
}

/// Reference classifier that reads the signature row through generator
/// metadata and returns the nearest answer embedding.
#[derive(Debug, Clone)]
pub struct SignatureOracle {
    embeddings: Array2<f64>,
}

impl SignatureOracle {
    pub fn new(spec: &DatasetSpec) -> Self {
        Self {
            embeddings: spec.answer_embeddings(),
        }
    }

    /// `None` when the instance carries no signature metadata.
    pub fn predict(&self, inst: &VqaInstance) -> Option<usize> {
        let row = inst.features.row(inst.signature_index?).mapv(f64::from);
        let mut best = (0, f64::INFINITY);
        for (k, emb) in self.embeddings.rows().into_iter().enumerate() {
            let diff = &row - &emb;
            let dist = diff.dot(&diff);
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Some(best.0)
    }

    pub fn accuracy(&self, bundle: &SplitBundle) -> f64 {
        let hits = bundle
            .instances
            .iter()
            .filter(|inst| self.predict(inst) == Some(inst.gt_answer()))
            .count();
        hits as f64 / bundle.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_size: 500,
            test_size: 200,
            seed: 7,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_split(&spec, SplitTag::Train).unwrap();
        let b = generate_split(&spec, SplitTag::Train).unwrap();
        assert_eq!(a, b);
        let test = generate_split(&spec, SplitTag::Test).unwrap();
        assert_ne!(a.instances[0], test.instances[0]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            DatasetSpec { train_skew: 1.2, ..small_spec() },
            DatasetSpec { test_skew: 0.0, ..small_spec() },
            DatasetSpec { train_size: 0, ..small_spec() },
            DatasetSpec { num_answers: 9, ..small_spec() },
            DatasetSpec { signal_noise_sigma: -0.1, ..small_spec() },
        ];
        for spec in bad {
            assert!(matches!(generate_split(&spec, SplitTag::Train), Err(Error::Config(_))));
        }
    }

    #[test]
    fn instances_respect_layout() {
        let spec = small_spec();
        let bundle = generate_split(&spec, SplitTag::Train).unwrap();
        let answers = spec.answer_embeddings();
        for inst in &bundle.instances {
            assert_eq!(inst.question[0], inst.qtype);
            assert!(inst.question[1..].iter().all(|&t| t >= spec.num_qtypes && t < spec.vocab_size()));
            let gt = inst.gt_answer();
            assert!(gt / 2 == inst.qtype);
            assert_eq!(inst.answer.sum(), 1.0);
            // the signature row sits within a few sigma of its embedding
            let sig = inst.features.row(inst.signature_index.unwrap()).mapv(f64::from);
            let diff = &sig - &answers.row(gt);
            assert!(diff.dot(&diff).sqrt() < 0.1 * 8.0);
        }
    }

    #[test]
    fn answer_embeddings_are_orthonormal() {
        let e = DatasetSpec::default().answer_embeddings();
        let gram = e.dot(&e.t());
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_labels_split_mass_with_the_pair() {
        let spec = DatasetSpec { soft_label: true, ..small_spec() };
        let bundle = generate_split(&spec, SplitTag::Train).unwrap();
        for inst in &bundle.instances {
            let gt = inst.gt_answer();
            assert_eq!(inst.answer[gt], 0.7);
            assert_eq!(inst.answer[gt ^ 1], 0.3);
        }
        let prior = prior_table(&bundle).unwrap();
        for t in 0..spec.num_qtypes {
            let s: f64 = prior.rows[t].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_of_single_instance_flags_missing_rows() {
        let spec = small_spec();
        let mut bundle = generate_split(&spec, SplitTag::Train).unwrap();
        let first = bundle
            .instances
            .iter()
            .find(|i| i.qtype == 0 && i.gt_answer() == 0)
            .cloned()
            .unwrap();
        bundle.instances = vec![first];
        let prior = prior_table(&bundle).unwrap();
        let mut want = vec![0.0; 10];
        want[0] = 1.0;
        assert_eq!(prior.row(0).unwrap(), want.as_slice());
        for t in 1..5 {
            assert!(!prior.is_defined(t));
            assert!(prior.row(t).is_none());
            assert!(prior.rows[t].iter().all(|p| p.is_nan()));
        }
    }

    #[test]
    fn prior_of_empty_bundle_is_domain_error() {
        let mut bundle = generate_split(&small_spec(), SplitTag::Test).unwrap();
        bundle.instances.clear();
        assert!(matches!(prior_table(&bundle), Err(Error::Domain(_))));
    }
}
