//! High-level feature extraction: capsule predictions, routing-by-agreement
//! and the relationship layer between adjacent primary capsules.

use serde::{Deserialize, Serialize};

use crate::graph::{self, Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{self, softmax_slice, squash_slice, Result, Tensor, TensorError};

pub const CAPS_INIT_BOUND: f64 = 0.05;

/// `[P, J, d_out, d_in]` transforms, one per (input, output) capsule pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsWeights(pub Tensor);

impl CapsWeights {
    pub fn init(inputs: usize, outputs: usize, d_out: usize, d_in: usize, rng: &mut Rng) -> Self {
        Self(rng.uniform_tensor(&[inputs, outputs, d_out, d_in], CAPS_INIT_BOUND))
    }
}

/// Prediction vectors `ĝ_{j|i} = W_ij g_i`, shaped `[P, J, d_out]`.
pub fn predict_vectors(caps: &Tensor, w: &CapsWeights) -> Result<Tensor> {
    graph::capsule_predict(caps, &w.0)
}

pub fn squash(s: &Tensor) -> Tensor {
    let cols = *s.shape().last().expect("non-empty shape");
    let data = s.data().chunks(cols).flat_map(squash_slice).collect();
    Tensor::from_parts(s.shape().to_vec(), data)
}

fn softmax_rows(b: &Tensor) -> Tensor {
    let cols = b.shape()[1];
    let data = b.data().chunks(cols).flat_map(softmax_slice).collect();
    Tensor::from_parts(b.shape().to_vec(), data)
}

/// How gradients treat the routing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGrad {
    /// Couplings are constants of the forward schedule; only the final
    /// weighted sum and squash are differentiated.
    #[default]
    StopGradient,
    /// Every iteration is recorded and differentiated.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    /// Final logits `[P, J]`.
    pub logits: Tensor,
    /// Couplings used by the last iteration.
    pub couplings: Tensor,
    /// Couplings of every iteration, first to last.
    pub history: Vec<Tensor>,
    pub iterations: usize,
}

fn check_predictions(pred: &Tensor, iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(TensorError::InvalidArgument {
            op: "route",
            msg: "at least one routing iteration is required".into(),
        });
    }
    if pred.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "route",
            msg: format!("predictions must be [P, J, d], got {:?}", pred.shape()),
        });
    }
    Ok(())
}

/// Routing-by-agreement. Logits start at zero; each iteration takes row
/// softmax couplings, forms `s_j = Σ_i c_ij ĝ_{j|i}`, squashes to `v_j`, then
/// adds the agreement `v_j · ĝ_{j|i}` to the logits (skipped on the last pass).
pub fn route(pred: &Tensor, iterations: usize) -> Result<(Tensor, RoutingState)> {
    check_predictions(pred, iterations)?;
    let (np, nj) = (pred.shape()[0], pred.shape()[1]);
    let mut logits = Tensor::zeros(&[np, nj]);
    let mut history = Vec::with_capacity(iterations);
    let mut outputs = None;
    for it in 0..iterations {
        let c = softmax_rows(&logits);
        let s = graph::weighted_sum(pred, &c)?;
        let v = squash(&s);
        if it + 1 < iterations {
            let a = graph::agreement(pred, &v)?;
            logits.add_assign(&a);
            logits = logits.check_finite("route")?;
        }
        history.push(c);
        outputs = Some(v);
    }
    let couplings = history.last().expect("iterations >= 1").clone();
    Ok((
        outputs.expect("iterations >= 1"),
        RoutingState {
            logits,
            couplings,
            history,
            iterations,
        },
    ))
}

/// Records routing on the graph and returns the output capsules `[J, d]`.
pub fn route_graph(g: &mut Graph, pred: NodeId, iterations: usize, mode: RoutingGrad) -> Result<(NodeId, RoutingState)> {
    let pv = g.value(pred).clone();
    check_predictions(&pv, iterations)?;
    match mode {
        RoutingGrad::StopGradient => {
            let (_, state) = route(&pv, iterations)?;
            let c = g.constant(state.couplings.clone());
            let s = g.weighted_sum(pred, c)?;
            let v = g.squash(s)?;
            Ok((v, state))
        }
        RoutingGrad::Full => {
            let (np, nj) = (pv.shape()[0], pv.shape()[1]);
            let mut logits = g.constant(Tensor::zeros(&[np, nj]));
            let mut history = Vec::with_capacity(iterations);
            let mut v = None;
            for it in 0..iterations {
                let c = g.softmax(logits)?;
                let s = g.weighted_sum(pred, c)?;
                let out = g.squash(s)?;
                if it + 1 < iterations {
                    let a = g.agreement(pred, out)?;
                    logits = g.add(logits, a)?;
                }
                history.push(g.value(c).clone());
                v = Some(out);
            }
            let state = RoutingState {
                logits: g.value(logits).clone(),
                couplings: history.last().expect("iterations >= 1").clone(),
                history,
                iterations,
            };
            Ok((v.expect("iterations >= 1"), state))
        }
    }
}

/// Relationship layer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationshipConfig {
    /// Diagonal added to the outer-product lift `u uᵀ + εI`.
    pub lift_eps: f64,
    /// Ridge term of the least-squares solve.
    pub ridge_lambda: f64,
    /// Upper bound on the number of adjacent pairs.
    pub max_pairs: usize,
}

impl Default for RelationshipConfig {
    fn default() -> Self {
        Self {
            lift_eps: 1.0,
            ridge_lambda: 1e-6,
            max_pairs: 32,
        }
    }
}

impl RelationshipConfig {
    pub fn pairs(&self, capsules: usize) -> usize {
        capsules.saturating_sub(1).min(self.max_pairs)
    }
}

/// Transfer matrices `R_i` between adjacent capsules, each `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipSet {
    pub matrices: Vec<Tensor>,
}

impl RelationshipSet {
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.matrices.iter().flat_map(|m| m.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }
}

/// Lifts a capsule vector to the square matrix `u uᵀ + εI`.
pub fn lift(u: &[f64], eps: f64) -> Tensor {
    let d = u.len();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = u[i] * u[j];
        }
        data[i * d + i] += eps;
    }
    Tensor::from_parts(vec![d, d], data)
}

/// Ridge least-squares solution of `R B = A`: `R = A Bᵀ (B Bᵀ + λI)⁻¹`.
pub fn ridge_right_solve(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    let bt = tensor::transpose(b)?;
    let mut gram = tensor::matmul(b, &bt)?;
    let n = gram.shape()[0];
    for i in 0..n {
        gram.data_mut()[i * n + i] += lambda;
    }
    tensor::matmul(&tensor::matmul(a, &bt)?, &tensor::inverse(&gram)?)
}

pub fn relationship_matrices(caps: &Tensor, cfg: &RelationshipConfig) -> Result<RelationshipSet> {
    if caps.rank() != 2 || caps.shape()[0] < 2 {
        return Err(TensorError::InvalidArgument {
            op: "relationship_matrices",
            msg: format!("need at least two capsules, got shape {:?}", caps.shape()),
        });
    }
    let d = caps.shape()[1];
    let lifted: Vec<Tensor> = caps
        .data()
        .chunks(d)
        .take(cfg.pairs(caps.shape()[0]) + 1)
        .map(|u| lift(u, cfg.lift_eps))
        .collect();
    let matrices = lifted
        .windows(2)
        .map(|w| ridge_right_solve(&w[0], &w[1], cfg.ridge_lambda))
        .collect::<Result<_>>()?;
    Ok(RelationshipSet { matrices })
}

/// Graph version of [`relationship_matrices`]; returns the flattened matrices.
pub fn relationship_graph(g: &mut Graph, caps: NodeId, cfg: &RelationshipConfig) -> Result<NodeId> {
    let shape = g.value(caps).shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(TensorError::InvalidArgument {
            op: "relationship_matrices",
            msg: format!("need at least two capsules, got shape {shape:?}"),
        });
    }
    let d = shape[1];
    let eye_eps = g.constant(Tensor::identity(d).map(|x| x * cfg.lift_eps));
    let eye_ridge = g.constant(Tensor::identity(d).map(|x| x * cfg.ridge_lambda));
    let pairs = cfg.pairs(shape[0]);
    let mut lifted = Vec::with_capacity(pairs + 1);
    for i in 0..=pairs {
        let u = g.gather(caps, (i * d..(i + 1) * d).collect(), &[d])?;
        let outer = g.outer(u, u)?;
        lifted.push(g.add(outer, eye_eps)?);
    }
    let mut flat = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let (a, b) = (lifted[i], lifted[i + 1]);
        let bt = g.transpose(b)?;
        let gram = g.matmul(b, bt)?;
        let gram = g.add(gram, eye_ridge)?;
        let inv = g.inverse(gram)?;
        let abt = g.matmul(a, bt)?;
        let r = g.matmul(abt, inv)?;
        flat.push(r);
    }
    g.concat(&flat)
}
