//! Multinomial logistic regression over landmark features.
//!
//! Objective: mean cross-entropy + `(l2_lambda / 2) · ‖W‖²` (biases are not
//! regularized), minimized by full-batch gradient descent from zero weights.

use serde::{Deserialize, Serialize};

use crate::vision::{FeatureVector, FEATURE_LEN, FEATURE_SPEC_VERSION};
use crate::{ClassScores, ExpressionLabel, Micros};

const K: usize = ExpressionLabel::COUNT;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AffectError {
    #[error("feature length {got} does not match model input length {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("features contain a non-finite value")]
    NonFiniteFeatures,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: u32 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("model feature spec version {found} is not supported (expected {expected})")]
    FeatureSpecMismatch { expected: u32, found: u32 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: u32,
    /// Recorded with the model. Zero initialization and full-batch descent
    /// leave nothing to randomize, so it does not influence the result.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            l2_lambda: 1e-4,
            epochs: 500,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), AffectError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AffectError::InvalidHyperparams("learning_rate must be > 0".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(AffectError::InvalidHyperparams("l2_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epochs: u32,
    pub final_loss: f64,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub seed: u64,
}

/// Weights (`8 × n_features`, row-major by label code) and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct ClassifierModel {
    n_features: usize,
    weights: Vec<f64>,
    biases: [f64; K],
    feature_spec_version: u32,
    training: Option<TrainingMetadata>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    feature_spec_version: u32,
    weights: Vec<Vec<f64>>,
    biases: [f64; K],
    #[serde(default)]
    training: Option<TrainingMetadata>,
}

impl TryFrom<ModelFile> for ClassifierModel {
    type Error = AffectError;

    fn try_from(f: ModelFile) -> Result<Self, AffectError> {
        if f.weights.len() != K {
            return Err(AffectError::InvalidModel(format!(
                "{} weight rows, expected {K}",
                f.weights.len()
            )));
        }
        let n = f.weights[0].len();
        if n == 0 || f.weights.iter().any(|r| r.len() != n) {
            return Err(AffectError::InvalidModel("ragged or empty weight rows".into()));
        }
        let weights: Vec<f64> = f.weights.into_iter().flatten().collect();
        if weights.iter().chain(&f.biases).any(|v| !v.is_finite()) {
            return Err(AffectError::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self {
            n_features: n,
            weights,
            biases: f.biases,
            feature_spec_version: f.feature_spec_version,
            training: f.training,
        })
    }
}

impl From<ClassifierModel> for ModelFile {
    fn from(m: ClassifierModel) -> Self {
        ModelFile {
            feature_spec_version: m.feature_spec_version,
            weights: m.weights.chunks(m.n_features).map(<[f64]>::to_vec).collect(),
            biases: m.biases,
            training: m.training,
        }
    }
}

impl ClassifierModel {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            n_features,
            weights: vec![0.0; K * n_features],
            biases: [0.0; K],
            feature_spec_version: FEATURE_SPEC_VERSION,
            training: None,
        }
    }

    /// Builds a model from explicit parameters (`weights` row-major, `8 × n_features`).
    pub fn from_parameters(weights: Vec<f64>, biases: [f64; K]) -> Result<Self, AffectError> {
        if weights.is_empty() || weights.len() % K != 0 {
            return Err(AffectError::InvalidModel(format!(
                "{} weights is not 8 × n",
                weights.len()
            )));
        }
        Ok(Self {
            n_features: weights.len() / K,
            weights,
            biases,
            feature_spec_version: FEATURE_SPEC_VERSION,
            training: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64; K] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64; K] {
        &mut self.biases
    }

    pub fn feature_spec_version(&self) -> u32 {
        self.feature_spec_version
    }

    pub fn training(&self) -> Option<&TrainingMetadata> {
        self.training.as_ref()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Parses a model file, refusing models built for another feature layout.
    pub fn from_json(json: &str) -> Result<Self, AffectError> {
        let model: ClassifierModel =
            serde_json::from_str(json).map_err(|e| AffectError::InvalidModel(e.to_string()))?;
        if model.feature_spec_version != FEATURE_SPEC_VERSION {
            return Err(AffectError::FeatureSpecMismatch {
                expected: FEATURE_SPEC_VERSION,
                found: model.feature_spec_version,
            });
        }
        if model.n_features != FEATURE_LEN {
            return Err(AffectError::DimensionMismatch {
                expected: FEATURE_LEN,
                got: model.n_features,
            });
        }
        Ok(model)
    }

    fn logits(&self, features: &[f64]) -> [f64; K] {
        let mut z = self.biases;
        for (k, row) in self.weights.chunks_exact(self.n_features).enumerate() {
            z[k] += row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
        }
        z
    }

    fn check_input(&self, features: &[f64]) -> Result<(), AffectError> {
        if features.len() != self.n_features {
            return Err(AffectError::DimensionMismatch {
                expected: self.n_features,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(AffectError::NonFiniteFeatures);
        }
        Ok(())
    }

    /// Class probabilities for one raw feature slice.
    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; K], AffectError> {
        self.check_input(features)?;
        Ok(softmax(&self.logits(features)))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64; K]) -> [f64; K] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn log_sum_exp(logits: &[f64; K]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn predict(
    model: &ClassifierModel,
    features: &FeatureVector,
    timestamp: Micros,
) -> Result<ClassScores, AffectError> {
    Ok(ClassScores {
        timestamp,
        scores: model.probabilities(&features.values)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: ExpressionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledDataset {
    pub provenance: String,
    pub examples: Vec<LabeledExample>,
}

impl LabeledDataset {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            provenance: provenance.into(),
            examples: Vec::new(),
        }
    }

    pub fn push(&mut self, features: FeatureVector, label: ExpressionLabel) {
        self.examples.push(LabeledExample {
            features: features.values,
            label,
        });
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; K] {
        let mut c = [0; K];
        for e in &self.examples {
            c[e.label.index()] += 1;
        }
        c
    }

    fn check(&self, n_features: usize) -> Result<(), AffectError> {
        if self.examples.is_empty() {
            return Err(AffectError::EmptyDataset);
        }
        for e in &self.examples {
            if e.features.len() != n_features {
                return Err(AffectError::DimensionMismatch {
                    expected: n_features,
                    got: e.features.len(),
                });
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(AffectError::NonFiniteFeatures);
            }
        }
        Ok(())
    }
}

/// Gradient of the training objective, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub biases: [f64; K],
}

/// Objective value and its gradient in one pass.
pub fn loss_and_gradient(
    model: &ClassifierModel,
    data: &LabeledDataset,
    l2_lambda: f64,
) -> Result<(f64, Gradient), AffectError> {
    data.check(model.n_features)?;
    let n = model.n_features;
    let mut grad = Gradient {
        weights: vec![0.0; K * n],
        biases: [0.0; K],
    };
    let mut loss = 0.0;
    for ex in &data.examples {
        let z = model.logits(&ex.features);
        let y = ex.label.index();
        loss += log_sum_exp(&z) - z[y];
        let mut residual = softmax(&z);
        residual[y] -= 1.0;
        for (k, r) in residual.iter().enumerate() {
            grad.biases[k] += r;
            let row = &mut grad.weights[k * n..(k + 1) * n];
            for (g, x) in row.iter_mut().zip(&ex.features) {
                *g += r * x;
            }
        }
    }
    let m = data.examples.len() as f64;
    loss /= m;
    for g in grad.weights.iter_mut().chain(grad.biases.iter_mut()) {
        *g /= m;
    }
    let mut penalty = 0.0;
    for (g, w) in grad.weights.iter_mut().zip(&model.weights) {
        *g += l2_lambda * w;
        penalty += w * w;
    }
    Ok((loss + 0.5 * l2_lambda * penalty, grad))
}

pub fn objective(model: &ClassifierModel, data: &LabeledDataset, l2_lambda: f64) -> Result<f64, AffectError> {
    loss_and_gradient(model, data, l2_lambda).map(|(l, _)| l)
}

pub fn gradient(model: &ClassifierModel, data: &LabeledDataset, l2_lambda: f64) -> Result<Gradient, AffectError> {
    loss_and_gradient(model, data, l2_lambda).map(|(_, g)| g)
}

/// Per-feature affine map to zero mean and unit variance; constant features
/// are only centered.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(data: &LabeledDataset, n: usize) -> Self {
        let m = data.examples.len() as f64;
        let mut mean = vec![0.0; n];
        for ex in &data.examples {
            for (a, x) in mean.iter_mut().zip(&ex.features) {
                *a += x / m;
            }
        }
        let mut var = vec![0.0; n];
        for ex in &data.examples {
            for ((v, x), mu) in var.iter_mut().zip(&ex.features).zip(&mean) {
                *v += (x - mu) * (x - mu) / m;
            }
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, data: &LabeledDataset) -> LabeledDataset {
        let mut out = LabeledDataset::new(data.provenance.clone());
        for ex in &data.examples {
            out.examples.push(LabeledExample {
                features: ex
                    .features
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((x, mu), s)| (x - mu) / s)
                    .collect(),
                label: ex.label,
            });
        }
        out
    }

    /// Rewrites a standardized-space model so it consumes raw features.
    fn fold_into(&self, model: &mut ClassifierModel) {
        let n = model.n_features;
        for k in 0..K {
            let row = &mut model.weights[k * n..(k + 1) * n];
            let mut shift = 0.0;
            for ((w, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *w /= s;
                shift += *w * mu;
            }
            model.biases[k] -= shift;
        }
    }
}

/// Trains and also returns the objective after every epoch.
///
/// Descent runs on standardized features and the result is folded back into
/// raw-feature weights, so the returned model scores raw feature vectors. The
/// history and the recorded final loss are the objective in the standardized
/// coordinates where the penalty is applied.
pub fn train_with_history(
    data: &LabeledDataset,
    params: &Hyperparams,
) -> Result<(ClassifierModel, Vec<f64>), AffectError> {
    params.validate()?;
    let n_features = data.examples.first().ok_or(AffectError::EmptyDataset)?.features.len();
    data.check(n_features)?;
    let standardizer = Standardizer::fit(data, n_features);
    let data = &standardizer.apply(data);
    let mut model = ClassifierModel::zeros(n_features);
    let mut history = Vec::with_capacity(params.epochs as usize);
    for epoch in 0..params.epochs {
        let (loss, grad) = loss_and_gradient(&model, data, params.l2_lambda)?;
        if !loss.is_finite() {
            return Err(AffectError::Divergence { epoch });
        }
        if epoch > 0 {
            history.push(loss);
        }
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= params.learning_rate * g;
        }
        for (b, g) in model.biases.iter_mut().zip(&grad.biases) {
            *b -= params.learning_rate * g;
        }
    }
    let final_loss = objective(&model, data, params.l2_lambda)?;
    if !final_loss.is_finite() {
        return Err(AffectError::Divergence { epoch: params.epochs });
    }
    history.push(final_loss);
    standardizer.fold_into(&mut model);
    model.training = Some(TrainingMetadata {
        epochs: params.epochs,
        final_loss,
        learning_rate: params.learning_rate,
        l2_lambda: params.l2_lambda,
        seed: params.seed,
    });
    Ok((model, history))
}

pub fn train(data: &LabeledDataset, params: &Hyperparams) -> Result<ClassifierModel, AffectError> {
    train_with_history(data, params).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion_matrix[true][predicted]`
    pub confusion_matrix: [[u64; K]; K],
    /// `None` for classes absent from the dataset.
    pub per_class_recall: [Option<f64>; K],
    pub total: u64,
}

/// Scores predicted labels against true labels.
pub fn evaluate_predictions(
    pairs: impl IntoIterator<Item = (ExpressionLabel, ExpressionLabel)>,
) -> Result<Evaluation, AffectError> {
    let mut cm = [[0u64; K]; K];
    let mut total = 0;
    for (truth, predicted) in pairs {
        cm[truth.index()][predicted.index()] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(AffectError::EmptyDataset);
    }
    let trace: u64 = (0..K).map(|i| cm[i][i]).sum();
    let per_class_recall = std::array::from_fn(|i| {
        let row: u64 = cm[i].iter().sum();
        (row > 0).then(|| cm[i][i] as f64 / row as f64)
    });
    Ok(Evaluation {
        accuracy: trace as f64 / total as f64,
        confusion_matrix: cm,
        per_class_recall,
        total,
    })
}

pub fn evaluate(model: &ClassifierModel, data: &LabeledDataset) -> Result<Evaluation, AffectError> {
    data.check(model.n_features)?;
    let pairs = data
        .examples
        .iter()
        .map(|e| {
            let p = softmax(&model.logits(&e.features));
            (
                e.label,
                ClassScores {
                    timestamp: 0,
                    scores: p,
                }
                .argmax(),
            )
        })
        .collect::<Vec<_>>();
    evaluate_predictions(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            values,
            calibrated: false,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ClassifierModel::zeros(FEATURE_LEN);
        let s = predict(&m, &fv(vec![0.7; FEATURE_LEN]), 9).unwrap();
        assert_eq!(s.timestamp, 9);
        assert!(s.scores.iter().all(|p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn logit_shift_invariance() {
        let weights: Vec<f64> = (0..K * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let biases = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0, 0.5, 0.25];
        let a = ClassifierModel::from_parameters(weights.clone(), biases).unwrap();
        let b = ClassifierModel::from_parameters(weights, biases.map(|b| b + 17.0)).unwrap();
        let x = [0.3, -1.2, 2.0, 0.01];
        let (pa, pb) = (a.probabilities(&x).unwrap(), b.probabilities(&x).unwrap());
        for (p, q) in pa.iter().zip(&pb) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let m = ClassifierModel::zeros(3);
        assert_eq!(
            m.probabilities(&[1.0, 2.0]),
            Err(AffectError::DimensionMismatch { expected: 3, got: 2 })
        );
        assert_eq!(
            m.probabilities(&[1.0, f64::NAN, 0.0]),
            Err(AffectError::NonFiniteFeatures)
        );
    }

    #[test]
    fn gradient_at_uniform_predictions_is_frequency_offset() {
        let mut data = LabeledDataset::new("test");
        let labels = [
            ExpressionLabel::Happiness,
            ExpressionLabel::Happiness,
            ExpressionLabel::Fear,
            ExpressionLabel::Neutral,
        ];
        for (i, l) in labels.iter().enumerate() {
            data.push(fv(vec![i as f64, 1.0]), *l);
        }
        let g = gradient(&ClassifierModel::zeros(2), &data, 0.0).unwrap();
        let counts = data.class_counts();
        for (b, c) in g.biases.iter().zip(counts) {
            let expected = 0.125 - c as f64 / 4.0;
            assert!((b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_dataset_has_the_same_gradient() {
        let mut data = LabeledDataset::new("test");
        for i in 0..10 {
            data.push(
                fv(vec![(i as f64).sin(), (i as f64).cos(), 0.5]),
                ExpressionLabel::ALL[i % 8],
            );
        }
        let mut doubled = data.clone();
        doubled.examples.extend(data.examples.clone());
        let weights: Vec<f64> = (0..K * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = ClassifierModel::from_parameters(weights, [0.0; K]).unwrap();
        let (a, b) = (gradient(&m, &data, 0.0).unwrap(), gradient(&m, &doubled, 0.0).unwrap());
        for (x, y) in a.weights.iter().zip(&b.weights).chain(a.biases.iter().zip(&b.biases)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_example_is_memorized() {
        let mut data = LabeledDataset::new("one");
        data.push(fv(vec![0.4, 1.1, 0.9]), ExpressionLabel::Surprise);
        let model = train(&data, &Hyperparams::default()).unwrap();
        let loss = model.training().unwrap().final_loss;
        assert!(loss < 0.01, "final loss {loss}");
    }

    #[test]
    fn huge_regularization_gives_uniform_predictions() {
        let mut data = LabeledDataset::new("reg");
        for i in 0..16 {
            data.push(fv(vec![(i % 8) as f64 * 0.1, 1.0]), ExpressionLabel::ALL[i % 8]);
        }
        let params = Hyperparams {
            learning_rate: 1e-7,
            l2_lambda: 1e6,
            epochs: 200,
            seed: 0,
        };
        let model = train(&data, &params).unwrap();
        assert!(model.weights().iter().all(|w| w.abs() < 1e-6));
        let p = model.probabilities(&[0.7, 1.0]).unwrap();
        assert!(p.iter().all(|q| (q - 0.125).abs() < 1e-3));
    }

    #[test]
    fn training_errors() {
        let empty = LabeledDataset::new("empty");
        assert_eq!(train(&empty, &Hyperparams::default()), Err(AffectError::EmptyDataset));
        let mut data = LabeledDataset::new("x");
        data.push(fv(vec![1.0]), ExpressionLabel::Anger);
        let bad = Hyperparams {
            learning_rate: 0.0,
            ..Hyperparams::default()
        };
        assert!(matches!(train(&data, &bad), Err(AffectError::InvalidHyperparams(_))));
        let mut wild = LabeledDataset::new("wild");
        wild.push(fv(vec![1.0, -1.0]), ExpressionLabel::Anger);
        wild.push(fv(vec![-1.0, 1.0]), ExpressionLabel::Fear);
        let diverging = Hyperparams {
            learning_rate: 1e10,
            ..Hyperparams::default()
        };
        assert!(matches!(train(&wild, &diverging), Err(AffectError::Divergence { .. })));
    }

    #[test]
    fn always_happy_model_on_happy_data() {
        let pairs = std::iter::repeat_n((ExpressionLabel::Happiness, ExpressionLabel::Happiness), 10);
        let e = evaluate_predictions(pairs).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let nonzero: Vec<_> = e.confusion_matrix.iter().flatten().filter(|c| **c > 0).collect();
        assert_eq!(nonzero, vec![&10]);
        assert_eq!(e.per_class_recall[1], Some(1.0));
        assert_eq!(e.per_class_recall[0], None);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let pairs: Vec<_> = (0..40)
            .map(|i| (ExpressionLabel::ALL[i % 8], ExpressionLabel::ALL[i % 8]))
            .collect();
        let e = evaluate_predictions(pairs).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for i in 0..K {
            for j in 0..K {
                assert_eq!(e.confusion_matrix[i][j], if i == j { 5 } else { 0 });
            }
        }
        assert!(evaluate_predictions(Vec::new()).is_err());
    }

    #[test]
    fn model_json_round_trip_and_version_gate() {
        let mut m = ClassifierModel::zeros(FEATURE_LEN);
        m.weights_mut()[5] = 0.25;
        let json = m.to_json();
        assert_eq!(ClassifierModel::from_json(&json).unwrap(), m);
        let tampered = json.replacen("\"feature_spec_version\": 1", "\"feature_spec_version\": 2", 1);
        assert_eq!(
            ClassifierModel::from_json(&tampered),
            Err(AffectError::FeatureSpecMismatch { expected: 1, found: 2 })
        );
    }
}
