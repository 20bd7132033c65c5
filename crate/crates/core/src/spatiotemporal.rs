//! Low-level feature extraction: window reshaping, sigmoid convolution maps,
//! tiling of the temporal state over the maps, and the primary capsule
//! projection.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{self, sigmoid, Result, Tensor, TensorError};

/// A flattened sample of length `N = rows * cols`, viewed as `rows` channels
/// by `cols` time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub rows: usize,
    pub cols: usize,
}

impl WindowLayout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fits(&self, kernel: [usize; 2]) -> bool {
        kernel[0] >= 1 && kernel[1] >= 1 && kernel[0] <= self.rows && kernel[1] <= self.cols
    }
}

pub fn reshape_window(x: &Tensor, layout: WindowLayout) -> Result<Tensor> {
    if x.len() != layout.len() || x.rank() != 1 {
        return Err(TensorError::InvalidArgument {
            op: "reshape_window",
            msg: format!(
                "feature vector of shape {:?} does not match layout {}x{}",
                x.shape(),
                layout.rows,
                layout.cols
            ),
        });
    }
    x.reshape(&[1, layout.rows, layout.cols])
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![x.len()], x.data().to_vec())
}

/// Per-step inputs of a window: column `t` of the `rows x cols` grid.
pub fn time_steps(x: &Tensor, layout: WindowLayout) -> Result<Vec<Tensor>> {
    reshape_window(x, layout)?;
    Ok((0..layout.cols)
        .map(|t| {
            let col = (0..layout.rows).map(|k| x.data()[k * layout.cols + t]).collect();
            Tensor::from_parts(vec![layout.rows], col)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[F, 1, kh, kw]`
    pub kernels: Tensor,
    /// `[F]`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn init(filters: usize, kernel: [usize; 2], rng: &mut Rng) -> Self {
        let fan_in = (kernel[0] * kernel[1]) as f64;
        Self {
            kernels: rng.uniform_tensor(&[filters, 1, kernel[0], kernel[1]], 1.0 / fan_in.sqrt()),
            bias: Tensor::zeros(&[filters]),
        }
    }
}

/// `sigmoid(conv2d(x, kernels) + bias)`
pub fn conv_feature_map(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    Ok(tensor::conv2d(x, &p.kernels, &p.bias)?.map(sigmoid))
}

pub fn conv_feature_map_graph(g: &mut Graph, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
    let pre = g.conv2d(x, kernels, bias)?;
    g.sigmoid(pre)
}

/// Index map that repeats component `f` of a length-`channels` vector over
/// plane `f` of a `[channels, h, w]` cube.
pub fn tile_indices(channels: usize, h: usize, w: usize) -> Vec<usize> {
    (0..channels).flat_map(|f| std::iter::repeat_n(f, h * w)).collect()
}

/// `tile(proj · O) + h_map`. Without a projection, `O` must already have one
/// component per feature-map channel.
pub fn fuse_spatiotemporal_graph(
    g: &mut Graph,
    temporal: NodeId,
    h_map: NodeId,
    projection: Option<NodeId>,
) -> Result<NodeId> {
    let shape = g.value(h_map).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "fuse_spatiotemporal",
            msg: format!("feature map must be [F, H, W], got {shape:?}"),
        });
    }
    let projected = match projection {
        Some(w) => g.matvec(w, temporal)?,
        None => temporal,
    };
    if g.value(projected).shape() != [shape[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_spatiotemporal",
            lhs: g.value(projected).shape().to_vec(),
            rhs: shape,
        });
    }
    let tiled = g.gather(projected, tile_indices(shape[0], shape[1], shape[2]), &shape)?;
    g.add(tiled, h_map)
}

pub fn fuse_spatiotemporal(temporal: &Tensor, h_map: &Tensor, projection: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let o = g.constant(temporal.clone());
    let h = g.constant(h_map.clone());
    let p = projection.map(|w| g.constant(w.clone()));
    let out = fuse_spatiotemporal_graph(&mut g, o, h, p)?;
    Ok(g.value(out).clone())
}

/// Weights of the primary capsule layer: `dim` parallel convolution stacks,
/// each with `channels` filters over the fused cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryCapsParams {
    /// `[dim * channels, F, kh, kw]`; stack `s` owns filters `s*channels..(s+1)*channels`.
    pub kernels: Tensor,
    /// `[dim * channels]`
    pub bias: Tensor,
    pub dim: usize,
}

impl PrimaryCapsParams {
    pub fn init(dim: usize, channels: usize, in_channels: usize, kernel: [usize; 2], rng: &mut Rng) -> Self {
        let fan_in = (in_channels * kernel[0] * kernel[1]) as f64;
        Self {
            kernels: rng.uniform_tensor(&[dim * channels, in_channels, kernel[0], kernel[1]], 1.0 / fan_in.sqrt()),
            bias: Tensor::zeros(&[dim * channels]),
            dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.kernels.shape()[0] / self.dim
    }
}

/// Number of primary capsules produced from an `[F, h, w]` cube.
pub fn primary_capsule_count(channels: usize, h: usize, w: usize, kernel: [usize; 2]) -> usize {
    channels * (h - kernel[0] + 1) * (w - kernel[1] + 1)
}

/// Regroups `[dim * M]` stacked conv outputs into `[M, dim]` capsules:
/// component `s` of capsule `i` is element `i` of stack `s`.
pub fn capsule_regroup_indices(dim: usize, count: usize) -> Vec<usize> {
    (0..count).flat_map(|i| (0..dim).map(move |s| s * count + i)).collect()
}

/// Pre-squash capsule vectors and their squashed form.
#[derive(Debug, Clone, Copy)]
pub struct PrimaryNodes {
    pub raw: NodeId,
    pub squashed: NodeId,
}

pub fn primary_capsules_graph(
    g: &mut Graph,
    fused: NodeId,
    kernels: NodeId,
    bias: NodeId,
    dim: usize,
) -> Result<PrimaryNodes> {
    let conv = g.conv2d(fused, kernels, bias)?;
    let total = g.value(conv).len();
    let count = total / dim;
    let raw = g.gather(conv, capsule_regroup_indices(dim, count), &[count, dim])?;
    let squashed = g.squash(raw)?;
    Ok(PrimaryNodes { raw, squashed })
}

/// Squashed primary capsules `[P, dim]` for a fused cube.
pub fn primary_capsule_projection(fused: &Tensor, p: &PrimaryCapsParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let k = g.constant(p.kernels.clone());
    let b = g.constant(p.bias.clone());
    let nodes = primary_capsules_graph(&mut g, f, k, b, p.dim)?;
    Ok(g.value(nodes.squashed).clone())
}
