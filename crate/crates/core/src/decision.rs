//! Classifier heads, the joint loss and naive-Bayes fusion of head votes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{margin_loss_value, MarginParams, CE_CLAMP};
use crate::tensor::{self, argmax, Result, Tensor, TensorError};

/// Number of classifier heads whose votes are fused.
pub const HEADS: usize = 4;

/// Dense layers of a softmax head, applied in order with `tanh` between them.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayers {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Forward pass of a softmax head on a feature vector.
pub fn softmax_head(features: &Tensor, head: &HeadLayers) -> Result<Tensor> {
    let mut x = features.clone();
    let last = head.layers.len().saturating_sub(1);
    for (i, (w, b)) in head.layers.iter().enumerate() {
        if w.rank() != 2 || w.shape()[1] != x.len() || b.shape() != [w.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_head",
                lhs: w.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let col = x.reshape(&[x.len(), 1])?;
        let y = tensor::matmul(w, &col)?;
        let data: Vec<f64> = y.data().iter().zip(b.data()).map(|(a, c)| a + c).collect();
        x = Tensor::new(vec![data.len()], data)?;
        if i < last {
            x = x.map(f64::tanh);
        }
    }
    Ok(tensor::softmax(&x))
}

pub fn cross_entropy(probs: &Tensor, label: usize) -> f64 {
    -probs.data()[label].max(CE_CLAMP).ln()
}

pub fn margin_loss(capsules: &Tensor, label: usize, mp: &MarginParams) -> Result<f64> {
    margin_loss_value(capsules, label, mp)
}

/// Class with the longest capsule; ties go to the lowest index.
pub fn digit_class(capsules: &Tensor) -> usize {
    let d = *capsules.shape().last().expect("non-empty shape");
    let norms: Vec<f64> = capsules
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .collect();
    argmax(&norms)
}

/// Outputs of the four heads for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub temporal: Tensor,
    pub spatiotemporal: Tensor,
    pub relationship: Tensor,
    pub digit: Tensor,
}

impl HeadOutputs {
    /// Hard votes `x1..x4`.
    pub fn votes(&self) -> [usize; HEADS] {
        [
            self.temporal.argmax(),
            self.spatiotemporal.argmax(),
            self.relationship.argmax(),
            digit_class(&self.digit),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub temporal: f64,
    pub spatiotemporal: f64,
    pub relationship: f64,
    pub digit: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.temporal + self.spatiotemporal + self.relationship + self.digit
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            temporal: self.temporal * s,
            spatiotemporal: self.spatiotemporal * s,
            relationship: self.relationship * s,
            digit: self.digit * s,
        }
    }

    pub fn add(&mut self, o: &LossParts) {
        self.temporal += o.temporal;
        self.spatiotemporal += o.spatiotemporal;
        self.relationship += o.relationship;
        self.digit += o.digit;
    }
}

/// Cross-entropy of the three softmax heads plus the digit margin loss.
pub fn joint_loss(heads: &HeadOutputs, label: usize, mp: &MarginParams) -> Result<(f64, LossParts)> {
    let n = heads.temporal.len();
    if label >= n {
        return Err(TensorError::InvalidArgument {
            op: "joint_loss",
            msg: format!("label {label} out of range for {n} classes"),
        });
    }
    let parts = LossParts {
        temporal: cross_entropy(&heads.temporal, label),
        spatiotemporal: cross_entropy(&heads.spatiotemporal, label),
        relationship: cross_entropy(&heads.relationship, label),
        digit: margin_loss(&heads.digit, label, mp)?,
    };
    Ok((parts.total(), parts))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("cannot fit on an empty vote set")]
    Empty,
    #[error("smoothing must be positive, got {0}")]
    BadAlpha(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
}

/// Categorical naive Bayes over the four head votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesModel {
    pub classes: usize,
    pub alpha: f64,
    /// `P(c)`
    pub prior: Vec<f64>,
    /// `conditionals[k][c][l] = P(x_k = l | c)`
    pub conditionals: Vec<Vec<Vec<f64>>>,
}

/// One training example for the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub heads: [usize; HEADS],
    pub label: usize,
}

pub fn bayes_fit(votes: &[Vote], classes: usize, alpha: f64) -> Result<BayesModel, BayesError> {
    if votes.is_empty() {
        return Err(BayesError::Empty);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(BayesError::BadAlpha(alpha));
    }
    let mut class_counts = vec![0usize; classes];
    let mut counts = vec![vec![vec![0usize; classes]; classes]; HEADS];
    for v in votes {
        let bad = std::iter::once(v.label).chain(v.heads).find(|&l| l >= classes);
        if let Some(label) = bad {
            return Err(BayesError::LabelRange { label, classes });
        }
        class_counts[v.label] += 1;
        for (k, &x) in v.heads.iter().enumerate() {
            counts[k][v.label][x] += 1;
        }
    }
    let total = votes.len() as f64;
    let prior = class_counts
        .iter()
        .map(|&c| (c as f64 + alpha) / (total + alpha * classes as f64))
        .collect();
    let conditionals = counts
        .iter()
        .map(|per_class| {
            per_class
                .iter()
                .zip(&class_counts)
                .map(|(row, &nc)| {
                    row.iter()
                        .map(|&x| (x as f64 + alpha) / (nc as f64 + alpha * classes as f64))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(BayesModel {
        classes,
        alpha,
        prior,
        conditionals,
    })
}

impl BayesModel {
    /// Uniform prior and conditionals.
    pub fn uniform(classes: usize) -> Self {
        let u = 1.0 / classes as f64;
        Self {
            classes,
            alpha: 1.0,
            prior: vec![u; classes],
            conditionals: vec![vec![vec![u; classes]; classes]; HEADS],
        }
    }
}

/// Posterior over classes for one vote pattern, and its argmax.
pub fn bayes_predict(m: &BayesModel, x: &[usize; HEADS]) -> Result<(usize, Vec<f64>), BayesError> {
    if let Some(&label) = x.iter().find(|&&l| l >= m.classes) {
        return Err(BayesError::LabelRange {
            label,
            classes: m.classes,
        });
    }
    // Log space keeps long products away from underflow.
    let logs: Vec<f64> = (0..m.classes)
        .map(|c| m.prior[c].ln() + x.iter().enumerate().map(|(k, &l)| m.conditionals[k][c][l].ln()).sum::<f64>())
        .collect();
    let posterior = tensor::softmax_slice(&logs);
    Ok((argmax(&posterior), posterior))
}
