//! Direction-aware prompt edges and time-gating weights over a token window.
//!
//! A window of `w` day-slices over `N` regions becomes one graph of `w·N`
//! nodes; node `k·N + i` is region `i` in slice `k`. Slice blocks carry that
//! day's adjacency, and region `i` in slice `k-1` links to itself in slice `k`
//! through two shared learnable weights (forward and backward).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

pub const FORWARD_INIT: f64 = 1.0;
pub const BACKWARD_INIT: f64 = 0.5;
pub const GATE_INIT: f64 = 1.0;

/// Handles to the prompt scalars inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptParams {
    pub forward: ParamId,
    pub backward: ParamId,
    pub gamma: ParamId,
    pub window: usize,
}

impl PromptParams {
    /// Registers freshly initialized, trainable prompt parameters.
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, window: usize) -> Result<Self, Error> {
        if window == 0 {
            return Err(Error::Config("token window must be at least 1".into()));
        }
        Ok(Self {
            forward: store.register("prompt.w_forward", Tensor::scalar(S::lit(FORWARD_INIT)), false),
            backward: store.register("prompt.w_backward", Tensor::scalar(S::lit(BACKWARD_INIT)), false),
            gamma: store.register("prompt.gamma", Tensor::full(&[window], S::lit(GATE_INIT)), false),
            window,
        })
    }

    pub fn values<S: Scalar>(&self, store: &ParamStore<S>) -> PromptValues {
        let gamma: Vec<f64> = store.value(self.gamma).to_f64_vec();
        PromptValues {
            window: self.window,
            w_forward: store.value(self.forward).item().to_f64_lossy(),
            w_backward: store.value(self.backward).item().to_f64_lossy(),
            gates: gamma.iter().map(|&g| sigmoid(g)).collect(),
            gamma,
        }
    }
}

/// Explainability snapshot: edge weights, raw gate weights and their sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptValues {
    pub window: usize,
    pub w_forward: f64,
    pub w_backward: f64,
    /// Oldest slice first.
    pub gamma: Vec<f64>,
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptedGraph<S> {
    pub n_slices: usize,
    /// `[w·N, w·N]`, entry `(u, v)` is the weight of edge `u → v`.
    pub block_adjacency: Tensor<S>,
    pub slice_offsets: Vec<Range<usize>>,
}

/// 0/1 masks marking forward `(i,k-1) → (i,k)` and backward `(i,k) → (i,k-1)` positions.
pub fn prompt_masks<S: Scalar>(window: usize, n: usize) -> (Tensor<S>, Tensor<S>) {
    let size = window * n;
    let mut fwd = Tensor::zeros(&[size, size]);
    let mut bwd = Tensor::zeros(&[size, size]);
    for k in 1..window {
        for i in 0..n {
            let prev = (k - 1) * n + i;
            let cur = k * n + i;
            fwd.set(&[prev, cur], S::one());
            bwd.set(&[cur, prev], S::one());
        }
    }
    (fwd, bwd)
}

/// Places `[..., w, N, N]` slice adjacencies on the diagonal of `[..., w·N, w·N]`.
pub fn block_diagonal<S: Scalar>(windows: &Tensor<S>) -> Result<Tensor<S>, Error> {
    let shape = windows.shape();
    let nd = shape.len();
    if nd < 3 || shape[nd - 1] != shape[nd - 2] {
        return Err(Error::Shape(format!("adjacency windows must be [..., w, N, N], got {shape:?}")));
    }
    let (w, n) = (shape[nd - 3], shape[nd - 1]);
    let batch: usize = shape[..nd - 3].iter().product();
    let size = w * n;
    let mut out_shape = shape[..nd - 3].to_vec();
    out_shape.extend([size, size]);
    let mut out = Tensor::zeros(&out_shape);
    let src = windows.data();
    let dst = out.data_mut();
    for b in 0..batch {
        for k in 0..w {
            for i in 0..n {
                for j in 0..n {
                    let v = src[((b * w + k) * n + i) * n + j];
                    dst[b * size * size + (k * n + i) * size + k * n + j] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Records the prompted block adjacency on the tape so that it is
/// differentiable in both prompt weights. `windows` is `[..., w, N, N]`.
pub fn prompted_block<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prompts: &PromptParams,
    windows: &Tensor<S>,
) -> Result<Var, Error> {
    let shape = windows.shape();
    let nd = shape.len();
    let blocks = block_diagonal(windows)?;
    let (w, n) = (shape[nd - 3], shape[nd - 1]);
    if w != prompts.window {
        return Err(Error::Shape(format!("window {w} does not match prompt window {}", prompts.window)));
    }
    let base = g.constant(blocks)?;
    if w == 1 {
        return Ok(base);
    }
    let (fwd, bwd) = prompt_masks::<S>(w, n);
    let fwd = g.constant(fwd)?;
    let bwd = g.constant(bwd)?;
    let wf = g.param(store, prompts.forward)?;
    let wb = g.param(store, prompts.backward)?;
    let f = g.mul(fwd, wf)?;
    let b = g.mul(bwd, wb)?;
    let edges = g.add(f, b)?;
    Ok(g.add(base, edges)?)
}

/// Builds the prompted graph of a single window of `w` adjacency matrices.
pub fn build_prompted_graph<S: Scalar>(
    a_window: &[Tensor<S>],
    store: &ParamStore<S>,
    prompts: &PromptParams,
) -> Result<PromptedGraph<S>, Error> {
    let n = a_window.first().map_or(0, |a| a.shape().first().copied().unwrap_or(0));
    if a_window.iter().any(|a| a.shape() != [n, n]) {
        return Err(Error::Shape("all window adjacencies must be N×N with the same N".into()));
    }
    let stacked = Tensor::stack(a_window).map_err(|e| Error::Shape(e.to_string()))?;
    let mut g = Graph::new();
    let block = prompted_block(&mut g, store, prompts, &stacked)?;
    Ok(PromptedGraph {
        n_slices: a_window.len(),
        block_adjacency: g.value(block).clone(),
        slice_offsets: (0..a_window.len()).map(|k| k * n..(k + 1) * n).collect(),
    })
}
