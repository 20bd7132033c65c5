//! Convergence comparison between the memory cell and the baseline GRU.
//!
//! Both contestants are the recurrent cell followed by a linear softmax head
//! on the final output, trained with Adam on cross-entropy. Every weight the
//! two share is initialized identically for a given seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::graph::{Graph, NodeId};
use crate::memory::{self, CellHandles, CellKind, RecurrentParams};
use crate::params::{AdamConfig, OptimizerState, ParamSet};
use crate::rng::Rng;
use crate::spatiotemporal::{self, WindowLayout};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::mean_gradients;
use crate::model::SampleGrad;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Training loss that counts as converged.
    pub threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::default(),
            threshold: 0.1,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceCurve {
    pub kind: CellKind,
    /// Epoch 0 is the untrained network.
    pub records: Vec<RaceRecord>,
}

impl RaceCurve {
    /// First epoch whose training loss is at most `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.train_loss <= threshold).map(|r| r.epoch)
    }
}

fn init(kind: CellKind, layout: WindowLayout, classes: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    let cell = RecurrentParams::init(kind, hidden, layout.rows, &mut Rng::with_stream(seed, 1));
    for (name, t) in cell.named() {
        params.insert(format!("cell.{name}"), t.clone());
    }
    let bound = 1.0 / (hidden as f64).sqrt();
    params.insert("head.w", Rng::with_stream(seed, 6).uniform_tensor(&[classes, hidden], bound));
    params.insert("head.b", Tensor::zeros(&[classes]));
    params
}

struct Contestant<'a> {
    kind: CellKind,
    layout: WindowLayout,
    params: &'a ParamSet,
}

impl Contestant<'_> {
    /// Probabilities and cross-entropy nodes for one window.
    fn build(&self, g: &mut Graph, w: &SampleWindow) -> Result<(NodeId, NodeId)> {
        let p = self.params;
        let mut leaf = |n: &str| p.leaf(g, &format!("cell.{n}"));
        let mut cell = CellHandles {
            w_z: leaf("w_z")?,
            w_r: leaf("w_r")?,
            w_h: leaf("w_h")?,
            b_z: leaf("b_z")?,
            b_r: leaf("b_r")?,
            b_h: leaf("b_h")?,
            ctemp: None,
            hidden: 0,
            input: self.layout.rows,
        };
        if self.kind == CellKind::Memory {
            cell.ctemp = Some((leaf("w_ctemp")?, leaf("b_ctemp")?));
        }
        cell.hidden = p.require("cell.b_z")?.len();
        let steps: Vec<NodeId> = spatiotemporal::time_steps(&w.features, self.layout)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let o0 = g.constant(Tensor::zeros(&[cell.hidden]));
        let states = memory::unroll_graph(g, &cell, &steps, o0, None)?;
        let last = states.last().expect("non-empty window").output;
        let hw = p.leaf(g, "head.w")?;
        let hb = p.leaf(g, "head.b")?;
        let logits = g.affine(hw, last, hb)?;
        let probs = g.softmax(logits)?;
        let ce = g.cross_entropy(probs, w.label)?;
        Ok((probs, ce))
    }

    fn grad(&self, w: &SampleWindow) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let (probs, ce) = self.build(&mut g, w)?;
        let pred = g.value(probs).argmax();
        Ok(SampleGrad {
            grads: g.backward(ce)?.params(&g),
            parts: crate::decision::LossParts {
                temporal: g.value(ce).item(),
                ..Default::default()
            },
            votes: [pred; 4],
        })
    }

    fn score(&self, data: &[SampleWindow]) -> Result<(f64, f64)> {
        let rows: Vec<(f64, bool)> = data
            .par_iter()
            .map(|w| {
                let mut g = Graph::new();
                let (probs, ce) = self.build(&mut g, w)?;
                Ok((g.value(ce).item(), g.value(probs).argmax() == w.label))
            })
            .collect::<Result<_>>()?;
        let n = data.len() as f64;
        let loss = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let acc = rows.iter().filter(|r| r.1).count() as f64 / n;
        Ok((loss, acc))
    }
}

/// Trains one contestant and returns its per-epoch evaluation on `data`.
pub fn race_curve(
    kind: CellKind,
    data: &[SampleWindow],
    layout: WindowLayout,
    classes: usize,
    cfg: &RaceConfig,
    seed: u64,
) -> Result<RaceCurve> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(TensorError::InvalidArgument {
            op: "convergence_race",
            msg: format!("batch size {} does not fit {} windows", cfg.batch_size, data.len()),
        });
    }
    let mut params = init(kind, layout, classes, cfg.hidden, seed);
    let mut opt = OptimizerState::new(cfg.adam, &params);
    let mut shuffle = Rng::with_stream(seed, 2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let score = |params: &ParamSet| Contestant { kind, layout, params }.score(data);
    let (loss, acc) = score(&params)?;
    records.push(RaceRecord {
        epoch: 0,
        train_loss: loss,
        train_acc: acc,
    });
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let c = Contestant {
                kind,
                layout,
                params: &params,
            };
            let grads: Vec<SampleGrad> = batch.par_iter().map(|&i| c.grad(&data[i])).collect::<Result<_>>()?;
            opt.adam_step(&mut params, &mean_gradients(&grads))?;
        }
        let (loss, acc) = score(&params)?;
        records.push(RaceRecord {
            epoch,
            train_loss: loss,
            train_acc: acc,
        });
    }
    Ok(RaceCurve { kind, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub seed: u64,
    pub memory: RaceCurve,
    pub gru: RaceCurve,
}

impl RaceResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,cell_kind,train_loss,train_acc\n");
        for curve in [&self.memory, &self.gru] {
            for r in &curve.records {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.epoch,
                    curve.kind.as_str(),
                    r.train_loss,
                    r.train_acc
                ));
            }
        }
        out
    }
}

/// Races both cells once per seed.
pub fn convergence_race(
    data: &[SampleWindow],
    layout: WindowLayout,
    classes: usize,
    cfg: &RaceConfig,
    seeds: &[u64],
) -> Result<Vec<RaceResult>> {
    seeds
        .iter()
        .map(|&seed| {
            Ok(RaceResult {
                seed,
                memory: race_curve(CellKind::Memory, data, layout, classes, cfg, seed)?,
                gru: race_curve(CellKind::Gru, data, layout, classes, cfg, seed)?,
            })
        })
        .collect()
}

/// Epochs-to-threshold per seed and their medians. A cell that never reaches
/// the threshold counts as `epochs + 1` in the median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub threshold: f64,
    pub memory_epochs: Vec<Option<usize>>,
    pub gru_epochs: Vec<Option<usize>>,
    pub memory_median: usize,
    pub gru_median: usize,
    /// Seeds on which the memory cell needed strictly more epochs.
    pub memory_slower: usize,
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    if v.is_empty() {
        0
    } else {
        v[(v.len() - 1) / 2]
    }
}

pub fn summarize(results: &[RaceResult], cfg: &RaceConfig) -> RaceSummary {
    let cap = cfg.epochs + 1;
    let mem: Vec<Option<usize>> = results.iter().map(|r| r.memory.epochs_to(cfg.threshold)).collect();
    let gru: Vec<Option<usize>> = results.iter().map(|r| r.gru.epochs_to(cfg.threshold)).collect();
    let capped = |v: &[Option<usize>]| v.iter().map(|e| e.unwrap_or(cap)).collect::<Vec<_>>();
    let (mc, gc) = (capped(&mem), capped(&gru));
    RaceSummary {
        threshold: cfg.threshold,
        memory_slower: mc.iter().zip(&gc).filter(|(m, g)| m > g).count(),
        memory_median: median(mc),
        gru_median: median(gc),
        memory_epochs: mem,
        gru_epochs: gru,
    }
}

impl RaceSummary {
    pub fn line(&self) -> String {
        let show = |v: &[Option<usize>]| {
            v.iter()
                .map(|e| e.map_or_else(|| "never".to_string(), |e| e.to_string()))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "epochs to loss {}: memory [{}] median {}; gru [{}] median {}; memory slower on {} of {} seeds",
            self.threshold,
            show(&self.memory_epochs),
            self.memory_median,
            show(&self.gru_epochs),
            self.gru_median,
            self.memory_slower,
            self.memory_epochs.len()
        )
    }
}
