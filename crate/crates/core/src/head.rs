//! Trainable classification head: a fully connected layer, softmax, and
//! cross-entropy, fitted by plain mini-batch SGD on frozen features.

use serde::{Deserialize, Serialize};

use crate::extractor::FeatureMatrix;
use crate::label::Label;
use crate::rng::SplitMix64;

pub const CLASSES: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeadError {
    #[error("feature dim {got} does not match head dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature dim must be positive")]
    ZeroDim,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}; lower the learning rate")]
    Diverged { epoch: usize, batch: usize },
    #[error("no training samples")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    dim: usize,
    /// `CLASSES × dim`, row-major, rows in [`Label::ORDER`].
    weights: Vec<f64>,
    bias: [f64; CLASSES],
    init_seed: u64,
}

/// Gradient with the same layout as the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: [f64; CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub probs: [f64; CLASSES],
    pub label: Label,
    /// Positive-class probability.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    /// 15 epochs, batch 8, learning rate 5e-5.
    pub fn published(seed: u64) -> Self {
        Self { epochs: 15, batch_size: 8, learning_rate: 5e-5, seed, shuffle: true }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.epochs == 0 {
            return Err(HeadError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HeadError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HeadError::InvalidConfig("learning_rate must be finite and > 0".into()));
        }
        Ok(())
    }
}

impl SoftmaxHead {
    /// Glorot-uniform weights in `±sqrt(6 / (dim + 2))`, zero bias.
    pub fn init(dim: usize, seed: u64) -> Result<Self, HeadError> {
        if dim == 0 {
            return Err(HeadError::ZeroDim);
        }
        let limit = (6.0 / (dim + CLASSES) as f64).sqrt();
        let mut rng = SplitMix64::new(seed);
        let weights = (0..CLASSES * dim).map(|_| rng.uniform(-limit, limit)).collect();
        Ok(Self { dim, weights, bias: [0.0; CLASSES], init_seed: seed })
    }

    pub fn from_parts(dim: usize, weights: Vec<f64>, bias: [f64; CLASSES], init_seed: u64) -> Result<Self, HeadError> {
        if dim == 0 {
            return Err(HeadError::ZeroDim);
        }
        if weights.len() != CLASSES * dim {
            return Err(HeadError::DimMismatch { expected: CLASSES * dim, got: weights.len() });
        }
        Ok(Self { dim, weights, bias, init_seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> [f64; CLASSES] {
        self.bias
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Flat parameter vector: weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&params[..n]);
        self.bias.copy_from_slice(&params[n..n + CLASSES]);
    }

    fn logits(&self, x: &[f32]) -> [f64; CLASSES] {
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            *zc += w.iter().zip(x).map(|(w, &x)| w * x as f64).sum::<f64>();
        }
        z
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<(), HeadError> {
        if features.dim() != self.dim {
            return Err(HeadError::DimMismatch { expected: self.dim, got: features.dim() });
        }
        Ok(())
    }

    pub fn predict_row(&self, sample_id: &str, x: &[f32]) -> Prediction {
        let probs = softmax(self.logits(x));
        let label = if probs[0] >= probs[1] { Label::Positive } else { Label::Negative };
        Prediction { sample_id: sample_id.to_string(), probs, label, score: probs[0] }
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<Vec<Prediction>, HeadError> {
        self.check_dim(features)?;
        Ok((0..features.rows())
            .map(|i| self.predict_row(&features.sample_ids()[i], features.row(i)))
            .collect())
    }

    /// Mean cross-entropy over the given rows, with its analytic gradient.
    pub fn loss_and_grad(&self, features: &FeatureMatrix, labels: &[Label]) -> Result<(f64, Gradient), HeadError> {
        self.check_dim(features)?;
        if features.rows() != labels.len() {
            return Err(HeadError::LengthMismatch { features: features.rows(), labels: labels.len() });
        }
        let rows: Vec<&[f32]> = (0..features.rows()).map(|i| features.row(i)).collect();
        Ok(self.batch_loss_and_grad(&rows, labels))
    }

    fn batch_loss_and_grad(&self, rows: &[&[f32]], labels: &[Label]) -> (f64, Gradient) {
        let mut grad = Gradient { weights: vec![0.0; self.weights.len()], bias: [0.0; CLASSES] };
        if rows.is_empty() {
            return (0.0, grad);
        }
        let mut loss = 0.0f64;
        for (x, &y) in rows.iter().zip(labels) {
            let z = self.logits(x);
            let lse = log_sum_exp(z);
            loss += lse - z[y.index()];
            let probs = softmax(z);
            for c in 0..CLASSES {
                let delta = probs[c] - if c == y.index() { 1.0 } else { 0.0 };
                if delta == 0.0 {
                    continue;
                }
                grad.bias[c] += delta;
                let g = &mut grad.weights[c * self.dim..(c + 1) * self.dim];
                for (gi, &xi) in g.iter_mut().zip(x.iter()) {
                    *gi += delta * xi as f64;
                }
            }
        }
        let n = rows.len() as f64;
        grad.weights.iter_mut().for_each(|g| *g /= n);
        grad.bias.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    fn step(&mut self, grad: &Gradient, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

fn log_sum_exp(z: [f64; CLASSES]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(z: [f64; CLASSES]) -> [f64; CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedHead {
    pub head: SoftmaxHead,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainedHead {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fit a freshly initialised head with mini-batch SGD. The epoch order is
/// reshuffled from one seeded stream when `cfg.shuffle` is set.
pub fn train(features: &FeatureMatrix, labels: &[Label], init_seed: u64, cfg: &TrainConfig) -> Result<TrainedHead, HeadError> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(HeadError::LengthMismatch { features: features.rows(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(HeadError::Empty);
    }
    for class in Label::ORDER {
        if !labels.contains(&class) {
            log::warn!("training set has no {class} samples");
        }
    }
    let mut head = SoftmaxHead::init(features.dim(), init_seed)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| features.row(i)).collect();
            let ys: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = head.batch_loss_and_grad(&rows, &ys);
            if !loss.is_finite() {
                return Err(HeadError::Diverged { epoch, batch: b });
            }
            epoch_loss += loss * chunk.len() as f64;
            head.step(&grad, cfg.learning_rate);
            if !head.is_finite() {
                return Err(HeadError::Diverged { epoch, batch: b });
            }
        }
        loss_trace.push(epoch_loss / labels.len() as f64);
    }
    Ok(TrainedHead { head, loss_trace })
}

/// Serialized head: dim, class order, row-major weights, bias, init seed,
/// the training config and the final loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub dim: usize,
    pub class_order: Vec<Label>,
    pub weights: Vec<f64>,
    pub bias: [f64; CLASSES],
    pub init_seed: u64,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
}

impl HeadFile {
    pub fn new(trained: &TrainedHead, cfg: &TrainConfig, backbone: Option<String>) -> Self {
        let h = &trained.head;
        Self {
            dim: h.dim,
            class_order: Label::ORDER.to_vec(),
            weights: h.weights.clone(),
            bias: h.bias,
            init_seed: h.init_seed,
            train_config: Some(*cfg),
            final_loss: Some(trained.final_loss()),
            backbone,
        }
    }

    pub fn into_head(self) -> Result<SoftmaxHead, HeadError> {
        if self.class_order != Label::ORDER {
            return Err(HeadError::InvalidConfig(format!("unsupported class order {:?}", self.class_order)));
        }
        let head = SoftmaxHead::from_parts(self.dim, self.weights, self.bias, self.init_seed)?;
        if !head.is_finite() {
            return Err(HeadError::InvalidConfig("non-finite parameters".into()));
        }
        Ok(head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f32>>) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        FeatureMatrix::from_rows(ids, rows).unwrap()
    }

    #[test]
    fn glorot_bound_and_zero_bias() {
        let h = SoftmaxHead::init(4, 123).unwrap();
        assert!(h.weights().iter().all(|w| w.abs() <= 1.0));
        assert_eq!(h.bias(), [0.0, 0.0]);
        assert_eq!(h, SoftmaxHead::init(4, 123).unwrap());
        assert_ne!(h, SoftmaxHead::init(4, 124).unwrap());
        assert_eq!(SoftmaxHead::init(0, 1), Err(HeadError::ZeroDim));
    }

    #[test]
    fn zero_head_is_uniform_and_ties_go_positive() {
        let h = SoftmaxHead::from_parts(3, vec![0.0; 6], [0.0; 2], 0).unwrap();
        let p = h.forward(&matrix(vec![vec![5.0, -1.0, 2.0]])).unwrap();
        assert_eq!(p[0].probs, [0.5, 0.5]);
        assert_eq!(p[0].label, Label::Positive);
    }

    #[test]
    fn bias_ln3_gives_three_to_one() {
        let h = SoftmaxHead::from_parts(2, vec![0.0; 4], [3f64.ln(), 0.0], 0).unwrap();
        let p = h.forward(&matrix(vec![vec![1.0, 1.0]])).unwrap();
        assert!((p[0].probs[0] - 0.75).abs() < 1e-12);
        assert!((p[0].probs[1] - 0.25).abs() < 1e-12);
        assert_eq!(p[0].score, p[0].probs[0]);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let h = SoftmaxHead::from_parts(1, vec![0.0, 0.0], [1000.0, 0.0], 0).unwrap();
        let p = h.forward(&matrix(vec![vec![0.0]])).unwrap();
        assert_eq!(p[0].probs[0], 1.0);
        assert!(p[0].probs[1] >= 0.0 && p[0].probs[1] < 1e-300);
        let (loss, _) = h.loss_and_grad(&matrix(vec![vec![0.0]]), &[Label::Negative]).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_head_loss_is_ln2() {
        let h = SoftmaxHead::from_parts(2, vec![0.0; 4], [0.0; 2], 0).unwrap();
        let f = matrix(vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]);
        let (loss, _) = h.loss_and_grad(&f, &[Label::Positive, Label::Negative, Label::Negative]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_head_has_zero_loss_and_gradient() {
        let h = SoftmaxHead::from_parts(1, vec![0.0, 0.0], [800.0, 0.0], 0).unwrap();
        let (loss, g) = h.loss_and_grad(&matrix(vec![vec![1.0], vec![2.0]]), &[Label::Positive, Label::Positive]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let h = SoftmaxHead::init(3, 0).unwrap();
        let f = matrix(vec![vec![1.0, 2.0]]);
        assert_eq!(h.forward(&f), Err(HeadError::DimMismatch { expected: 3, got: 2 }));
        let f = matrix(vec![vec![1.0, 2.0, 3.0]]);
        assert!(matches!(h.loss_and_grad(&f, &[]), Err(HeadError::LengthMismatch { .. })));
    }

    #[test]
    fn rejects_bad_configs() {
        let f = matrix(vec![vec![1.0]]);
        let mut cfg = TrainConfig::published(0);
        cfg.epochs = 0;
        assert!(matches!(train(&f, &[Label::Positive], 0, &cfg), Err(HeadError::InvalidConfig(_))));
        cfg = TrainConfig { batch_size: 0, ..TrainConfig::published(0) };
        assert!(train(&f, &[Label::Positive], 0, &cfg).is_err());
        cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::published(0) };
        assert!(train(&f, &[Label::Positive], 0, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // The initial head separates these rows the wrong way round, so the
        // first step is huge.
        let f = matrix(vec![vec![1e30], vec![-1e30]]);
        let cfg = TrainConfig { epochs: 5, batch_size: 1, learning_rate: 1e300, seed: 0, shuffle: false };
        let r = train(&f, &[Label::Negative, Label::Positive], 0, &cfg);
        assert!(matches!(r, Err(HeadError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn head_file_round_trip() {
        let f = matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cfg = TrainConfig { epochs: 3, batch_size: 1, learning_rate: 0.1, seed: 9, shuffle: true };
        let t = train(&f, &[Label::Positive, Label::Negative], 4, &cfg).unwrap();
        let file = HeadFile::new(&t, &cfg, Some("toypool".into()));
        let json = serde_json::to_string(&file).unwrap();
        let back: HeadFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_head().unwrap(), t.head);
    }
}
