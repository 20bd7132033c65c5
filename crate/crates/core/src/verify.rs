//! Layer-by-layer gradient verification on a toy network.

use serde::Serialize;

use crate::capsules::{self, RelationshipConfig, RoutingGrad};
use crate::graph::{Graph, MarginParams, NodeId};
use crate::gradcheck::grad_check;
use crate::memory::CellKind;
use crate::model::{Architecture, Model, ModelConfig};
use crate::rng::Rng;
use crate::spatiotemporal::WindowLayout;
use crate::tensor::Result;

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub params: Vec<String>,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// A small network that still exercises every layer: 5x4 windows, 2 conv
/// filters, hidden width 3 (so the fusion projection is active), six 4-D
/// primary capsules and three 4-D digit capsules.
pub fn toy_config(cell: CellKind) -> ModelConfig {
    ModelConfig::new(
        WindowLayout::new(5, 4),
        3,
        Architecture {
            cell,
            hidden: 3,
            conv_filters: 2,
            conv_kernel: [2, 2],
            primary_kernel: [2, 2],
            primary_channels: 1,
            primary_dim: 4,
            digit_dim: 4,
            routing_iterations: 3,
            routing_grad: RoutingGrad::StopGradient,
            head2_width: 5,
            dropout: 0.0,
            relationship: RelationshipConfig::default(),
            margin: MarginParams::default(),
        },
    )
}

/// Parameter groups of the full network, by layer.
const GROUPS: [(&str, &[&str]); 6] = [
    ("conv", &["conv."]),
    ("memory_cell", &["cell."]),
    ("fusion", &["fuse."]),
    ("primary_capsules", &["primary."]),
    ("capsule_path", &["caps."]),
    ("heads", &["head1.", "head2.", "head3."]),
];

fn check_params(g: &Graph, loss: NodeId, layer: &str, names: Vec<String>, h: f64) -> Result<LayerCheck> {
    let mut worst = 0.0f64;
    for name in &names {
        worst = worst.max(grad_check(g, loss, name, h)?);
    }
    Ok(LayerCheck {
        layer: layer.to_string(),
        params: names,
        max_rel_error: worst,
    })
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every coordinate of `x` gets a
/// distinct upstream gradient.
fn probe(g: &mut Graph, x: NodeId, rng: &mut Rng) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let r = g.constant(rng.uniform_tensor(&shape, 1.0));
    let m = g.mul(x, r)?;
    g.sum(m)
}

fn isolated(
    name: &str,
    fault: Option<&str>,
    h: f64,
    build: impl FnOnce(&mut Graph, &mut Rng) -> Result<NodeId>,
) -> Result<LayerCheck> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let mut rng = Rng::with_stream(11, name.len() as u64);
    let loss = build(&mut g, &mut rng)?;
    let names = g.params().keys().cloned().collect();
    check_params(&g, loss, name, names, h)
}

/// Checks every layer of the toy network under the joint loss, then the
/// squash, full routing, relationship and loss blocks in isolation.
/// `fault` negates the backward rule of the named graph op everywhere.
pub fn gradcheck_suite(fault: Option<&str>, h: f64) -> Result<Vec<LayerCheck>> {
    let cfg = toy_config(CellKind::Memory);
    let mut model = Model::init(cfg, 3)?;
    // Larger weights than the training init keep every gradient well above
    // the relative-error floor.
    let mut rng = Rng::with_stream(3, 99);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let shape = model.params.require(&name)?.shape().to_vec();
        model.params.insert(name, rng.uniform_tensor(&shape, 0.5));
    }
    let x = rng.uniform_tensor(&[cfg.layout.len()], 1.0);

    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let fwd = model.forward(&mut g, &x, None)?;
    let loss = model.loss(&mut g, &fwd, 1)?;
    let mut out = Vec::new();
    for (layer, prefixes) in GROUPS {
        let names: Vec<String> = g
            .params()
            .keys()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        out.push(check_params(&g, loss.total, layer, names, h)?);
    }

    out.push(isolated("squash", fault, h, |g, rng| {
        let s = g.param("s", &rng.uniform_tensor(&[3, 4], 1.0));
        let v = g.squash(s)?;
        probe(g, v, rng)
    })?);
    out.push(isolated("routing", fault, h, |g, rng| {
        let pred = g.param("predictions", &rng.uniform_tensor(&[4, 3, 4], 1.0));
        let (v, _) = capsules::route_graph(g, pred, 3, RoutingGrad::Full)?;
        probe(g, v, rng)
    })?);
    out.push(isolated("relationship", fault, h, |g, rng| {
        let caps = g.param("capsules", &rng.uniform_tensor(&[4, 3], 1.0));
        let r = capsules::relationship_graph(g, caps, &RelationshipConfig::default())?;
        probe(g, r, rng)
    })?);
    out.push(isolated("margin_loss", fault, h, |g, rng| {
        let v = g.param("digit", &rng.uniform_tensor(&[3, 4], 0.6));
        g.margin_loss(v, 2, MarginParams::default())
    })?);
    out.push(isolated("cross_entropy", fault, h, |g, rng| {
        let logits = g.param("logits", &rng.uniform_tensor(&[3], 2.0));
        let p = g.softmax(logits)?;
        g.cross_entropy(p, 0)
    })?);
    Ok(out)
}
