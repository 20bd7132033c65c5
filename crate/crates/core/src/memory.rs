//! Gated recurrent memory cells.
//!
//! [`MemoryCellParams`] is a GRU with an extra selector path: a temporary
//! state `ctemp = tanh(W_ctemp·[O,x] + b_ctemp)` gates the GRU state `c` into
//! the emitted activation `O = c ⊙ σ(ctemp)`. [`GruBaselineParams`] is the
//! plain GRU, kept as a baseline for convergence comparisons.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Memory,
    Gru,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Memory => "memory",
            CellKind::Gru => "gru",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruBaselineParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCellParams {
    pub gru: GruBaselineParams,
    pub w_ctemp: Tensor,
    pub b_ctemp: Tensor,
}

fn init_bound(hidden: usize, input: usize) -> f64 {
    1.0 / ((hidden + input) as f64).sqrt()
}

impl GruBaselineParams {
    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let s = init_bound(hidden, input);
        let shape = [hidden, hidden + input];
        Self {
            w_z: rng.uniform_tensor(&shape, s),
            w_r: rng.uniform_tensor(&shape, s),
            w_h: rng.uniform_tensor(&shape, s),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let shape = [hidden, hidden + input];
        Self {
            w_z: Tensor::zeros(&shape),
            w_r: Tensor::zeros(&shape),
            w_h: Tensor::zeros(&shape),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_z.shape()[1] - self.hidden()
    }

    fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }
}

impl MemoryCellParams {
    /// Draws the GRU weights first, then the selector path, so a baseline
    /// GRU initialized from the same seed shares its gate weights.
    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let gru = GruBaselineParams::init(hidden, input, rng);
        let s = init_bound(hidden, input);
        Self {
            gru,
            w_ctemp: rng.uniform_tensor(&[hidden, hidden + input], s),
            b_ctemp: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            gru: GruBaselineParams::zeros(hidden, input),
            w_ctemp: Tensor::zeros(&[hidden, hidden + input]),
            b_ctemp: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden()
    }

    pub fn input(&self) -> usize {
        self.gru.input()
    }
}

/// Either cell, with uniform access for training code.
#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentParams {
    Memory(MemoryCellParams),
    Gru(GruBaselineParams),
}

impl RecurrentParams {
    pub fn init(kind: CellKind, hidden: usize, input: usize, rng: &mut Rng) -> Self {
        match kind {
            CellKind::Memory => Self::Memory(MemoryCellParams::init(hidden, input, rng)),
            CellKind::Gru => Self::Gru(GruBaselineParams::init(hidden, input, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Self::Memory(_) => CellKind::Memory,
            Self::Gru(_) => CellKind::Gru,
        }
    }

    fn gru(&self) -> &GruBaselineParams {
        match self {
            Self::Memory(p) => &p.gru,
            Self::Gru(p) => p,
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru().hidden()
    }

    pub fn input(&self) -> usize {
        self.gru().input()
    }

    /// Parameter tensors with their short names.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.gru().named().to_vec();
        if let Self::Memory(p) = self {
            out.push(("w_ctemp", &p.w_ctemp));
            out.push(("b_ctemp", &p.b_ctemp));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let (gru, extra) = match self {
            Self::Memory(p) => (&mut p.gru, Some((&mut p.w_ctemp, &mut p.b_ctemp))),
            Self::Gru(p) => (p, None),
        };
        let mut out = vec![
            ("w_z", &mut gru.w_z),
            ("w_r", &mut gru.w_r),
            ("w_h", &mut gru.w_h),
            ("b_z", &mut gru.b_z),
            ("b_r", &mut gru.b_r),
            ("b_h", &mut gru.b_h),
        ];
        if let Some((w, b)) = extra {
            out.push(("w_ctemp", w));
            out.push(("b_ctemp", b));
        }
        out
    }

    /// Registers the weights as trainable leaves named `<prefix>.<name>`.
    pub fn register(&self, g: &mut Graph, prefix: &str) -> CellHandles {
        let mut reg = |name: &str, t: &Tensor| g.param(&format!("{prefix}.{name}"), t);
        let gru = self.gru();
        let mut h = CellHandles {
            w_z: reg("w_z", &gru.w_z),
            w_r: reg("w_r", &gru.w_r),
            w_h: reg("w_h", &gru.w_h),
            b_z: reg("b_z", &gru.b_z),
            b_r: reg("b_r", &gru.b_r),
            b_h: reg("b_h", &gru.b_h),
            ctemp: None,
            hidden: gru.hidden(),
            input: gru.input(),
        };
        if let Self::Memory(p) = self {
            h.ctemp = Some((reg("w_ctemp", &p.w_ctemp), reg("b_ctemp", &p.b_ctemp)));
        }
        h
    }

    /// Same as [`register`](Self::register) but as constants.
    pub fn register_constant(&self, g: &mut Graph) -> CellHandles {
        let gru = self.gru();
        let mut h = CellHandles {
            w_z: g.constant(gru.w_z.clone()),
            w_r: g.constant(gru.w_r.clone()),
            w_h: g.constant(gru.w_h.clone()),
            b_z: g.constant(gru.b_z.clone()),
            b_r: g.constant(gru.b_r.clone()),
            b_h: g.constant(gru.b_h.clone()),
            ctemp: None,
            hidden: gru.hidden(),
            input: gru.input(),
        };
        if let Self::Memory(p) = self {
            h.ctemp = Some((g.constant(p.w_ctemp.clone()), g.constant(p.b_ctemp.clone())));
        }
        h
    }
}

/// Graph nodes of a registered cell.
#[derive(Debug, Clone, Copy)]
pub struct CellHandles {
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
    pub ctemp: Option<(NodeId, NodeId)>,
    pub hidden: usize,
    pub input: usize,
}

/// Nodes produced by one cell step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub z: NodeId,
    pub r: NodeId,
    pub h_tilde: NodeId,
    pub ctemp: Option<NodeId>,
    pub c: NodeId,
    pub output: NodeId,
}

/// One step of the cell. Concatenation order is `[O_prev, x]`.
pub fn step_graph(g: &mut Graph, cell: &CellHandles, o_prev: NodeId, x: NodeId) -> Result<StepNodes> {
    let (ho, xi) = (g.value(o_prev).shape().to_vec(), g.value(x).shape().to_vec());
    if ho != [cell.hidden] || xi != [cell.input] {
        return Err(TensorError::ShapeMismatch {
            op: "memory_cell_step",
            lhs: ho,
            rhs: xi,
        });
    }
    let joined = g.concat(&[o_prev, x])?;
    let z_pre = g.affine(cell.w_z, joined, cell.b_z)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = g.affine(cell.w_r, joined, cell.b_r)?;
    let r = g.sigmoid(r_pre)?;
    let reset = g.mul(r, o_prev)?;
    let joined_reset = g.concat(&[reset, x])?;
    let h_pre = g.affine(cell.w_h, joined_reset, cell.b_h)?;
    let h_tilde = g.tanh(h_pre)?;
    let ones = g.constant(Tensor::ones(&[cell.hidden]));
    let keep = g.sub(ones, z)?;
    let fresh = g.mul(keep, h_tilde)?;
    let carried = g.mul(z, o_prev)?;
    let c = g.add(fresh, carried)?;
    let (ctemp, output) = match cell.ctemp {
        Some((w, b)) => {
            let pre = g.affine(w, joined, b)?;
            let ctemp = g.tanh(pre)?;
            let gate = g.sigmoid(ctemp)?;
            (Some(ctemp), g.mul(c, gate)?)
        }
        None => (None, c),
    };
    Ok(StepNodes {
        z,
        r,
        h_tilde,
        ctemp,
        c,
        output,
    })
}

/// Runs the cell over `inputs` starting from `o0`. When `masks` is given,
/// mask `t` multiplies the output of step `t` before it feeds step `t+1`.
pub fn unroll_graph(
    g: &mut Graph,
    cell: &CellHandles,
    inputs: &[NodeId],
    o0: NodeId,
    masks: Option<&[Tensor]>,
) -> Result<Vec<StepNodes>> {
    if inputs.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "unroll",
            msg: "empty input sequence".into(),
        });
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut prev = o0;
    for (t, &x) in inputs.iter().enumerate() {
        let step = step_graph(g, cell, prev, x)?;
        prev = step.output;
        if t + 1 < inputs.len() {
            if let Some(mask) = masks.and_then(|m| m.get(t)) {
                let m = g.constant(mask.clone());
                prev = g.mul(prev, m)?;
            }
        }
        states.push(step);
    }
    Ok(states)
}

/// Concrete values of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub output: Tensor,
    pub c: Tensor,
    pub z: Tensor,
    pub r: Tensor,
    pub h_tilde: Tensor,
    pub ctemp: Option<Tensor>,
}

impl MemoryState {
    fn read(g: &Graph, s: &StepNodes) -> Self {
        Self {
            output: g.value(s.output).clone(),
            c: g.value(s.c).clone(),
            z: g.value(s.z).clone(),
            r: g.value(s.r).clone(),
            h_tilde: g.value(s.h_tilde).clone(),
            ctemp: s.ctemp.map(|id| g.value(id).clone()),
        }
    }
}

pub fn memory_cell_step(p: &MemoryCellParams, o_prev: &Tensor, x: &Tensor) -> Result<MemoryState> {
    cell_step(&RecurrentParams::Memory(p.clone()), o_prev, x)
}

pub fn gru_cell_step(p: &GruBaselineParams, o_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(cell_step(&RecurrentParams::Gru(p.clone()), o_prev, x)?.output)
}

pub fn cell_step(p: &RecurrentParams, o_prev: &Tensor, x: &Tensor) -> Result<MemoryState> {
    let mut g = Graph::new();
    let cell = p.register_constant(&mut g);
    let o = g.constant(o_prev.clone());
    let xi = g.constant(x.clone());
    let s = step_graph(&mut g, &cell, o, xi)?;
    Ok(MemoryState::read(&g, &s))
}

/// Unrolls over the rows of `x_seq` (`[T, input]`). With `training` set and a
/// positive rate, inverted dropout is applied to each inter-step output.
pub fn unroll(
    p: &RecurrentParams,
    x_seq: &Tensor,
    o0: Option<&Tensor>,
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, Vec<MemoryState>)> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(TensorError::InvalidArgument {
            op: "unroll",
            msg: format!("dropout rate {dropout_rate} outside [0, 1)"),
        });
    }
    if x_seq.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "unroll",
            msg: format!("expected [T, input] sequence, got {:?}", x_seq.shape()),
        });
    }
    let (steps, width) = (x_seq.shape()[0], x_seq.shape()[1]);
    let mut g = Graph::new();
    let cell = p.register_constant(&mut g);
    let inputs: Vec<NodeId> = x_seq
        .data()
        .chunks(width)
        .map(|row| g.constant(Tensor::from_parts(vec![width], row.to_vec())))
        .collect();
    let o0 = g.constant(o0.cloned().unwrap_or_else(|| Tensor::zeros(&[p.hidden()])));
    let masks = (training && dropout_rate > 0.0).then(|| {
        (0..steps.saturating_sub(1))
            .map(|_| rng.dropout_mask(p.hidden(), dropout_rate))
            .collect::<Vec<_>>()
    });
    let states = unroll_graph(&mut g, &cell, &inputs, o0, masks.as_deref())?;
    let last = g.value(states.last().expect("non-empty").output).clone();
    Ok((last, states.iter().map(|s| MemoryState::read(&g, s)).collect()))
}
