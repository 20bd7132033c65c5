//! Assembly of the full network: configuration, parameter initialization,
//! the forward graph with its joint loss, and inference helpers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capsules::{self, CapsWeights, RelationshipConfig, RoutingGrad, RoutingState};
use crate::decision::{self, BayesModel, HeadOutputs, LossParts, HEADS};
use crate::graph::{Graph, MarginParams, NodeId};
use crate::memory::{self, CellHandles, CellKind, RecurrentParams};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::spatiotemporal::{self, ConvParams, PrimaryCapsParams, PrimaryNodes, WindowLayout};
use crate::tensor::{Result, Tensor, TensorError};

/// Hyperparameters that do not depend on the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub cell: CellKind,
    pub hidden: usize,
    pub conv_filters: usize,
    pub conv_kernel: [usize; 2],
    pub primary_kernel: [usize; 2],
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub digit_dim: usize,
    pub routing_iterations: usize,
    pub routing_grad: RoutingGrad,
    pub head2_width: usize,
    pub dropout: f64,
    pub relationship: RelationshipConfig,
    pub margin: MarginParams,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            cell: CellKind::Memory,
            hidden: 128,
            conv_filters: 8,
            conv_kernel: [5, 5],
            primary_kernel: [5, 3],
            primary_channels: 2,
            primary_dim: 8,
            digit_dim: 16,
            routing_iterations: 3,
            routing_grad: RoutingGrad::StopGradient,
            head2_width: 128,
            dropout: 0.5,
            relationship: RelationshipConfig::default(),
            margin: MarginParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layout: WindowLayout,
    pub classes: usize,
    pub arch: Architecture,
}

fn invalid(msg: String) -> TensorError {
    TensorError::InvalidArgument { op: "model_config", msg }
}

impl ModelConfig {
    pub fn new(layout: WindowLayout, classes: usize, arch: Architecture) -> Self {
        Self { layout, classes, arch }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.layout.is_empty() {
            return Err(invalid("window layout must be non-empty".into()));
        }
        let positive = [
            ("hidden", a.hidden),
            ("conv_filters", a.conv_filters),
            ("primary_channels", a.primary_channels),
            ("primary_dim", a.primary_dim),
            ("digit_dim", a.digit_dim),
            ("routing_iterations", a.routing_iterations),
            ("head2_width", a.head2_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if !self.layout.fits(a.conv_kernel) {
            return Err(invalid(format!(
                "conv kernel {:?} does not fit a {}x{} window",
                a.conv_kernel, self.layout.rows, self.layout.cols
            )));
        }
        let (_, h, w) = self.conv_dims();
        if !WindowLayout::new(h, w).fits(a.primary_kernel) {
            return Err(invalid(format!(
                "primary kernel {:?} does not fit the {h}x{w} feature map",
                a.primary_kernel
            )));
        }
        if self.capsule_count() < 2 {
            return Err(invalid("the primary layer must produce at least 2 capsules".into()));
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", a.dropout)));
        }
        let r = &a.relationship;
        if !(r.lift_eps > 0.0 && r.ridge_lambda > 0.0 && r.max_pairs >= 1) {
            return Err(invalid(format!("invalid relationship settings {r:?}")));
        }
        a.margin.validate()
    }

    /// `(F, K', T')` of the convolution map.
    pub fn conv_dims(&self) -> (usize, usize, usize) {
        let a = &self.arch;
        (
            a.conv_filters,
            self.layout.rows + 1 - a.conv_kernel[0],
            self.layout.cols + 1 - a.conv_kernel[1],
        )
    }

    pub fn fused_len(&self) -> usize {
        let (f, h, w) = self.conv_dims();
        f * h * w
    }

    pub fn capsule_count(&self) -> usize {
        let (_, h, w) = self.conv_dims();
        spatiotemporal::primary_capsule_count(self.arch.primary_channels, h, w, self.arch.primary_kernel)
    }

    pub fn relationship_len(&self) -> usize {
        let d = self.arch.primary_dim;
        self.arch.relationship.pairs(self.capsule_count()) * d * d
    }

    pub fn needs_projection(&self) -> bool {
        self.arch.hidden != self.arch.conv_filters
    }

    /// Name and shape of every trainable tensor.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let a = &self.arch;
        let (k, n, hd) = (self.layout.rows, self.classes, a.hidden);
        let (f, _, _) = self.conv_dims();
        let width = a.head2_width;
        let mut s: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut cell = vec!["w_z", "w_r", "w_h", "b_z", "b_r", "b_h"];
        if a.cell == CellKind::Memory {
            cell.extend(["w_ctemp", "b_ctemp"]);
        }
        for name in cell {
            let shape = if name.starts_with('w') { vec![hd, hd + k] } else { vec![hd] };
            s.insert(format!("cell.{name}"), shape);
        }
        s.insert("conv.kernels".into(), vec![f, 1, a.conv_kernel[0], a.conv_kernel[1]]);
        s.insert("conv.bias".into(), vec![f]);
        if self.needs_projection() {
            s.insert("fuse.proj".into(), vec![f, hd]);
        }
        let pc = a.primary_dim * a.primary_channels;
        s.insert("primary.kernels".into(), vec![pc, f, a.primary_kernel[0], a.primary_kernel[1]]);
        s.insert("primary.bias".into(), vec![pc]);
        s.insert("caps.w".into(), vec![self.capsule_count(), n, a.digit_dim, a.primary_dim]);
        s.insert("head1.w".into(), vec![n, hd]);
        s.insert("head1.b".into(), vec![n]);
        s.insert("head2.w0".into(), vec![width, self.fused_len()]);
        s.insert("head2.b0".into(), vec![width]);
        s.insert("head2.w1".into(), vec![width, width]);
        s.insert("head2.b1".into(), vec![width]);
        s.insert("head2.w2".into(), vec![n, width]);
        s.insert("head2.b2".into(), vec![n]);
        s.insert("head3.w".into(), vec![n, self.relationship_len()]);
        s.insert("head3.b".into(), vec![n]);
        s
    }
}

/// Dense layer with weights in `±1/√fan_in` and zero bias.
fn dense(params: &mut ParamSet, prefix: &str, w: &str, b: &str, out: usize, inp: usize, rng: &mut Rng) {
    params.insert(format!("{prefix}.{w}"), rng.uniform_tensor(&[out, inp], 1.0 / (inp as f64).sqrt()));
    params.insert(format!("{prefix}.{b}"), Tensor::zeros(&[out]));
}

/// Fresh parameters. Each component draws from its own stream of `seed`, so
/// switching the cell kind leaves every other initial weight unchanged, and
/// the two cell kinds share their gate weights.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let a = &config.arch;
    let k = config.layout.rows;
    let (f, _, _) = config.conv_dims();
    let mut params = ParamSet::new();
    let cell = RecurrentParams::init(a.cell, a.hidden, k, &mut Rng::with_stream(seed, 1));
    for (name, t) in cell.named() {
        params.insert(format!("cell.{name}"), t.clone());
    }
    let conv = ConvParams::init(f, a.conv_kernel, &mut Rng::with_stream(seed, 2));
    params.insert("conv.kernels", conv.kernels);
    params.insert("conv.bias", conv.bias);
    if config.needs_projection() {
        let bound = 1.0 / (a.hidden as f64).sqrt();
        params.insert("fuse.proj", Rng::with_stream(seed, 3).uniform_tensor(&[f, a.hidden], bound));
    }
    let primary = PrimaryCapsParams::init(
        a.primary_dim,
        a.primary_channels,
        f,
        a.primary_kernel,
        &mut Rng::with_stream(seed, 4),
    );
    params.insert("primary.kernels", primary.kernels);
    params.insert("primary.bias", primary.bias);
    let caps = CapsWeights::init(
        config.capsule_count(),
        config.classes,
        a.digit_dim,
        a.primary_dim,
        &mut Rng::with_stream(seed, 5),
    );
    params.insert("caps.w", caps.0);
    let n = config.classes;
    dense(&mut params, "head1", "w", "b", n, a.hidden, &mut Rng::with_stream(seed, 6));
    let mut r = Rng::with_stream(seed, 7);
    dense(&mut params, "head2", "w0", "b0", a.head2_width, config.fused_len(), &mut r);
    dense(&mut params, "head2", "w1", "b1", a.head2_width, a.head2_width, &mut r);
    dense(&mut params, "head2", "w2", "b2", n, a.head2_width, &mut r);
    dense(&mut params, "head3", "w", "b", n, config.relationship_len(), &mut Rng::with_stream(seed, 8));
    params
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// Final memory output `O_T`.
    pub temporal: NodeId,
    pub conv_map: NodeId,
    pub fused: NodeId,
    pub primary: PrimaryNodes,
    pub digit: NodeId,
    pub relationship: NodeId,
    /// Softmax heads 1 to 3.
    pub probs: [NodeId; 3],
    pub routing: RoutingState,
}

/// The four loss terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub parts: [NodeId; HEADS],
    pub total: NodeId,
}

/// Feature layers that can be exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Flattened fused spatio-temporal map.
    LowLevel,
    /// Squashed primary capsules.
    HighLevel,
    /// Flattened relationship matrices.
    Relationship,
    /// Digit capsules.
    Digit,
}

impl FeatureLayer {
    pub const ALL: [FeatureLayer; 4] = [Self::LowLevel, Self::HighLevel, Self::Relationship, Self::Digit];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LowLevel => "low_level",
            Self::HighLevel => "high_level",
            Self::Relationship => "relationship",
            Self::Digit => "digit",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == tag)
    }

    pub fn width(self, config: &ModelConfig) -> usize {
        match self {
            Self::LowLevel => config.fused_len(),
            Self::HighLevel => config.capsule_count() * config.arch.primary_dim,
            Self::Relationship => config.relationship_len(),
            Self::Digit => config.classes * config.arch.digit_dim,
        }
    }
}

/// Evaluation-mode result for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub heads: HeadOutputs,
    pub votes: [usize; HEADS],
    pub fused: usize,
    pub posterior: Vec<f64>,
}

/// Gradients and diagnostics of one training sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub grads: BTreeMap<String, Tensor>,
    pub parts: LossParts,
    pub votes: [usize; HEADS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub bayes: BayesModel,
    pub class_names: Vec<String>,
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class{c}")).collect()
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: init_params(&config, seed),
            bayes: BayesModel::uniform(config.classes),
            class_names: default_names(config.classes),
            config,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.config.classes {
            return Err(invalid(format!(
                "{} class names for {} classes",
                names.len(),
                self.config.classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Inverted-dropout masks for the inter-step outputs of one window.
    pub fn dropout_masks(&self, rng: &mut Rng) -> Option<Vec<Tensor>> {
        let a = &self.config.arch;
        (a.dropout > 0.0).then(|| {
            (0..self.config.layout.cols.saturating_sub(1))
                .map(|_| rng.dropout_mask(a.hidden, a.dropout))
                .collect()
        })
    }

    fn cell_handles(&self, g: &mut Graph) -> Result<CellHandles> {
        let p = &self.params;
        let mut leaf = |n: &str| p.leaf(g, &format!("cell.{n}"));
        let mut h = CellHandles {
            w_z: leaf("w_z")?,
            w_r: leaf("w_r")?,
            w_h: leaf("w_h")?,
            b_z: leaf("b_z")?,
            b_r: leaf("b_r")?,
            b_h: leaf("b_h")?,
            ctemp: None,
            hidden: self.config.arch.hidden,
            input: self.config.layout.rows,
        };
        if self.config.arch.cell == CellKind::Memory {
            h.ctemp = Some((leaf("w_ctemp")?, leaf("b_ctemp")?));
        }
        Ok(h)
    }

    fn head(&self, g: &mut Graph, x: NodeId, layers: &[(&str, &str)]) -> Result<NodeId> {
        let mut h = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            let w = self.params.leaf(g, w)?;
            let b = self.params.leaf(g, b)?;
            h = g.affine(w, h, b)?;
            if i + 1 < layers.len() {
                h = g.tanh(h)?;
            }
        }
        g.softmax(h)
    }

    /// Records the forward pass for window `x` on `g`. Parameters become
    /// trainable leaves named as in [`ModelConfig::param_shapes`].
    pub fn forward(&self, g: &mut Graph, x: &Tensor, masks: Option<&[Tensor]>) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let a = &cfg.arch;
        let grid = spatiotemporal::reshape_window(x, cfg.layout)?;
        let steps: Vec<NodeId> = spatiotemporal::time_steps(x, cfg.layout)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();

        let cell = self.cell_handles(g)?;
        let o0 = g.constant(Tensor::zeros(&[a.hidden]));
        let states = memory::unroll_graph(g, &cell, &steps, o0, masks)?;
        let temporal = states.last().expect("non-empty window").output;

        let input = g.constant(grid);
        let ck = self.params.leaf(g, "conv.kernels")?;
        let cb = self.params.leaf(g, "conv.bias")?;
        let conv_map = spatiotemporal::conv_feature_map_graph(g, input, ck, cb)?;
        let proj = if cfg.needs_projection() {
            Some(self.params.leaf(g, "fuse.proj")?)
        } else {
            None
        };
        let fused = spatiotemporal::fuse_spatiotemporal_graph(g, temporal, conv_map, proj)?;

        let pk = self.params.leaf(g, "primary.kernels")?;
        let pb = self.params.leaf(g, "primary.bias")?;
        let primary = spatiotemporal::primary_capsules_graph(g, fused, pk, pb, a.primary_dim)?;
        let cw = self.params.leaf(g, "caps.w")?;
        let pred = g.capsule_predict(primary.squashed, cw)?;
        let (digit, routing) = capsules::route_graph(g, pred, a.routing_iterations, a.routing_grad)?;
        let relationship = capsules::relationship_graph(g, primary.raw, &a.relationship)?;

        let p1 = self.head(g, temporal, &[("head1.w", "head1.b")])?;
        let flat = g.reshape(fused, &[cfg.fused_len()])?;
        let p2 = self.head(
            g,
            flat,
            &[("head2.w0", "head2.b0"), ("head2.w1", "head2.b1"), ("head2.w2", "head2.b2")],
        )?;
        let p3 = self.head(g, relationship, &[("head3.w", "head3.b")])?;
        Ok(ForwardNodes {
            temporal,
            conv_map,
            fused,
            primary,
            digit,
            relationship,
            probs: [p1, p2, p3],
            routing,
        })
    }

    /// Cross-entropy of heads 1 to 3, margin loss of the digit capsules, and
    /// their unweighted sum.
    pub fn loss(&self, g: &mut Graph, fwd: &ForwardNodes, label: usize) -> Result<LossNodes> {
        if label >= self.config.classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        let [p1, p2, p3] = fwd.probs;
        let parts = [
            g.cross_entropy(p1, label)?,
            g.cross_entropy(p2, label)?,
            g.cross_entropy(p3, label)?,
            g.margin_loss(fwd.digit, label, self.config.arch.margin)?,
        ];
        let a = g.add(parts[0], parts[1])?;
        let b = g.add(parts[2], parts[3])?;
        Ok(LossNodes {
            parts,
            total: g.add(a, b)?,
        })
    }

    fn head_outputs(g: &Graph, fwd: &ForwardNodes) -> HeadOutputs {
        HeadOutputs {
            temporal: g.value(fwd.probs[0]).clone(),
            spatiotemporal: g.value(fwd.probs[1]).clone(),
            relationship: g.value(fwd.probs[2]).clone(),
            digit: g.value(fwd.digit).clone(),
        }
    }

    /// Forward, loss and backward for one labelled window.
    pub fn sample_gradients(&self, x: &Tensor, label: usize, masks: Option<&[Tensor]>) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, masks)?;
        let loss = self.loss(&mut g, &fwd, label)?;
        let read = |id: NodeId| g.value(id).item();
        let parts = LossParts {
            temporal: read(loss.parts[0]),
            spatiotemporal: read(loss.parts[1]),
            relationship: read(loss.parts[2]),
            digit: read(loss.parts[3]),
        };
        let grads = g.backward(loss.total)?.params(&g);
        Ok(SampleGrad {
            grads,
            parts,
            votes: Self::head_outputs(&g, &fwd).votes(),
        })
    }

    /// Evaluation-mode heads for one window.
    pub fn heads(&self, x: &Tensor) -> Result<HeadOutputs> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, None)?;
        Ok(Self::head_outputs(&g, &fwd))
    }

    /// Heads, votes and the fused decision for one window.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        let heads = self.heads(x)?;
        let votes = heads.votes();
        let (fused, posterior) = decision::bayes_predict(&self.bayes, &votes).map_err(|e| invalid(e.to_string()))?;
        Ok(Inference {
            heads,
            votes,
            fused,
            posterior,
        })
    }

    /// Evaluation-mode activations of `layer`, flattened.
    pub fn features(&self, x: &Tensor, layer: FeatureLayer) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, None)?;
        let id = match layer {
            FeatureLayer::LowLevel => fwd.fused,
            FeatureLayer::HighLevel => fwd.primary.squashed,
            FeatureLayer::Relationship => fwd.relationship,
            FeatureLayer::Digit => fwd.digit,
        };
        Ok(spatiotemporal::flatten(g.value(id)))
    }
}
