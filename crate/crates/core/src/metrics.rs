//! Test-set evaluation: per-head and fused accuracy, confusion matrix, and
//! one-vs-rest ROC curves with trapezoidal AUC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::decision::{joint_loss, LossParts, HEADS};
use crate::model::{Inference, Model};
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score threshold
/// taken in decreasing order. Tied scores move both rates in one step.
/// `None` when either class is absent.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<RocCurve> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
    }
    Some(RocCurve { fpr, tpr })
}

pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracies {
    pub temporal: f64,
    pub spatiotemporal: f64,
    pub relationship: f64,
    pub digit: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub class_names: Vec<String>,
    pub accuracy: Accuracies,
    /// `confusion[true][predicted]` of the fused decision.
    pub confusion: Vec<Vec<usize>>,
    /// One-vs-rest AUC per class; `None` when the test set lacks positives
    /// or negatives for that class.
    pub class_auc: Vec<Option<f64>>,
    /// AUC of the pooled one-vs-rest score set.
    pub micro_auc: Option<f64>,
    /// Mean evaluation-mode loss terms.
    pub loss: LossParts,
    #[serde(skip)]
    pub roc: Vec<Option<RocCurve>>,
}

/// Builds the report from per-window labels, inferences and loss terms.
pub fn report(
    class_names: &[String],
    labels: &[usize],
    inferences: &[Inference],
    losses: &[LossParts],
) -> Result<MetricsReport> {
    let n = class_names.len();
    if labels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "evaluate",
            msg: "empty test set".into(),
        });
    }
    let total = labels.len() as f64;
    let mut hits = [0usize; HEADS + 1];
    let mut confusion = vec![vec![0usize; n]; n];
    for (&y, inf) in labels.iter().zip(inferences) {
        for (k, &v) in inf.votes.iter().enumerate() {
            hits[k] += usize::from(v == y);
        }
        hits[HEADS] += usize::from(inf.fused == y);
        confusion[y][inf.fused] += 1;
    }
    let acc = |k: usize| hits[k] as f64 / total;
    let mut roc = Vec::with_capacity(n);
    let (mut pooled_scores, mut pooled_pos) = (Vec::new(), Vec::new());
    for c in 0..n {
        let scores: Vec<f64> = inferences.iter().map(|i| i.posterior[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        pooled_scores.extend_from_slice(&scores);
        pooled_pos.extend_from_slice(&pos);
        roc.push(roc_curve(&scores, &pos));
    }
    let mut loss = LossParts::default();
    for l in losses {
        loss.add(l);
    }
    Ok(MetricsReport {
        samples: labels.len(),
        class_names: class_names.to_vec(),
        accuracy: Accuracies {
            temporal: acc(0),
            spatiotemporal: acc(1),
            relationship: acc(2),
            digit: acc(3),
            fused: acc(HEADS),
        },
        confusion,
        class_auc: roc.iter().map(|r| r.as_ref().map(auc)).collect(),
        micro_auc: roc_curve(&pooled_scores, &pooled_pos).as_ref().map(auc),
        loss: loss.scaled(1.0 / total),
        roc,
    })
}

/// Evaluation-mode metrics of `model` on `test`.
pub fn evaluate(model: &Model, test: &[SampleWindow]) -> Result<MetricsReport> {
    let rows: Vec<(Inference, LossParts)> = test
        .par_iter()
        .map(|w| {
            let inf = model.infer(&w.features)?;
            let (_, parts) = joint_loss(&inf.heads, w.label, &model.config.arch.margin)?;
            Ok((inf, parts))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = test.iter().map(|w| w.label).collect();
    let (infs, losses): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    report(&model.class_names, &labels, &infs, &losses)
}

impl MetricsReport {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in self.fpr.iter().zip(&self.tpr) {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::HeadOutputs;
    use crate::tensor::Tensor;

    #[test]
    fn perfect_ranking() {
        let c = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc(&c), 1.0);
        let c = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
        assert_eq!(auc(&c), 0.0);
        assert!(roc_curve(&[0.5], &[true]).is_none());
    }

    #[test]
    fn ties_count_half() {
        let c = roc_curve(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(auc(&c), 0.5);
        assert_eq!(c.fpr, vec![0.0, 1.0]);
    }

    fn inf(fused: usize, votes: [usize; 4], posterior: Vec<f64>) -> Inference {
        let u = Tensor::full(&[2], 0.5);
        Inference {
            heads: HeadOutputs {
                temporal: u.clone(),
                spatiotemporal: u.clone(),
                relationship: u,
                digit: Tensor::zeros(&[2, 2]),
            },
            votes,
            fused,
            posterior,
        }
    }

    #[test]
    fn all_correct_is_diagonal() {
        let names = vec!["a".to_string(), "b".to_string()];
        let infs = vec![inf(0, [0; 4], vec![0.9, 0.1]), inf(1, [1; 4], vec![0.2, 0.8])];
        let r = report(&names, &[0, 1], &infs, &[LossParts::default(); 2]).unwrap();
        assert_eq!(r.accuracy.fused, 1.0);
        assert_eq!(r.accuracy.digit, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(r.micro_auc, Some(1.0));
        assert!(report(&names, &[], &[], &[]).is_err());
    }
}
