//! Mini-batch training of the joint loss with Adam, followed by fitting the
//! fusion layer on training-set votes.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::decision::{bayes_fit, LossParts, Vote};
use crate::model::{Model, SampleGrad};
use crate::params::{AdamConfig, OptimizerState};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Laplace smoothing of the fusion tables.
    pub bayes_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            bayes_alpha: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(TensorError::InvalidArgument {
                op: "train",
                msg: "batch size must be positive".into(),
            });
        }
        if !(self.bayes_alpha > 0.0 && self.bayes_alpha.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "train",
                msg: format!("bayes_alpha must be positive, got {}", self.bayes_alpha),
            });
        }
        Ok(())
    }
}

/// Mean training-mode loss terms of one epoch and the head-4 accuracy seen
/// while training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub acc: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,l_tp,l_st,l_pc,l_dc,total,acc";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            l.temporal,
            l.spatiotemporal,
            l.relationship,
            l.digit,
            l.total(),
            self.acc
        )
    }
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in curve {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Dropout stream of one sample in one epoch.
fn dropout_rng(seed: u64, epoch: usize, sample: usize, n: usize) -> Rng {
    Rng::with_stream(seed, 1000 + (epoch * n + sample) as u64)
}

/// Sums per-sample gradients in slice order and divides by their count.
pub fn mean_gradients(samples: &[SampleGrad]) -> BTreeMap<String, Tensor> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for s in samples {
        for (name, g) in &s.grads {
            match acc.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let scale = 1.0 / samples.len().max(1) as f64;
    acc.into_iter().map(|(k, t)| (k, t.map(|x| x * scale))).collect()
}

/// Trains `model` in place. Each epoch visits `data` in an order drawn from
/// `shuffle`; dropout masks come from streams of `dropout_seed` keyed by epoch
/// and sample. After the last epoch the fusion layer is fit on
/// evaluation-mode votes over `data`. `on_epoch` sees every record as it is
/// produced.
pub fn train(
    model: &mut Model,
    data: &[SampleWindow],
    cfg: &TrainConfig,
    shuffle: &mut Rng,
    dropout_seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() || cfg.batch_size > data.len() {
        return Err(TensorError::InvalidArgument {
            op: "train",
            msg: format!("batch size {} exceeds training set of {}", cfg.batch_size, data.len()),
        });
    }
    let n = data.len();
    let mut opt = OptimizerState::new(cfg.adam, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut loss = LossParts::default();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let current = &*model;
            let samples: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let masks = current.dropout_masks(&mut dropout_rng(dropout_seed, epoch, i, n));
                    current.sample_gradients(&data[i].features, data[i].label, masks.as_deref())
                })
                .collect::<Result<_>>()?;
            for (s, &i) in samples.iter().zip(batch) {
                loss.add(&s.parts);
                correct += usize::from(s.votes[3] == data[i].label);
            }
            let grads = mean_gradients(&samples);
            opt.adam_step(&mut model.params, &grads)?;
        }
        let record = EpochRecord {
            epoch,
            loss: loss.scaled(1.0 / n as f64),
            acc: correct as f64 / n as f64,
        };
        if !record.loss.total().is_finite() {
            return Err(TensorError::NonFinite { op: "train" });
        }
        debug!("epoch {epoch}: loss {:.6}", record.loss.total());
        on_epoch(&record);
        curve.push(record);
    }
    fit_fusion(model, data, cfg.bayes_alpha)?;
    Ok(curve)
}

/// Fits the fusion layer on evaluation-mode head votes.
pub fn fit_fusion(model: &mut Model, data: &[SampleWindow], alpha: f64) -> Result<()> {
    let current = &*model;
    let votes: Vec<Vote> = data
        .par_iter()
        .map(|w| {
            Ok(Vote {
                heads: current.heads(&w.features)?.votes(),
                label: w.label,
            })
        })
        .collect::<Result<_>>()?;
    model.bayes = bayes_fit(&votes, model.config.classes, alpha).map_err(|e| TensorError::InvalidArgument {
        op: "bayes_fit",
        msg: e.to_string(),
    })?;
    Ok(())
}
