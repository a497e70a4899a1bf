//! Token projectors for the two branches and the output adapters.
//!
//! Shapes use `P` patches, `w` slices per patch, `N` regions, `F` case
//! features per slice and `D` token width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::layers::Linear;
use crate::prompt::{prompted_block, PromptParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

/// Lower bound on node degrees before the inverse square root.
const DEGREE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpiEncoder {
    /// Two message-passing layers over the prompted block graph.
    #[default]
    Graph,
    /// The same two layers with the identity as aggregation matrix.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMerge {
    /// `Σ_k σ(γ_k) E_k`.
    #[default]
    Gated,
    /// Unweighted mean of the slice embeddings.
    Average,
    /// `σ(γ_last) E_last` only.
    Last,
}

/// Case-count branch: prompted graph encoder followed by slice merging.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiProjector {
    pub encoder: EpiEncoder,
    pub merge: SliceMerge,
    pub features: usize,
    pub width: usize,
    layer1: Linear,
    layer2: Linear,
}

impl EpiProjector {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        encoder: EpiEncoder,
        merge: SliceMerge,
        features: usize,
        width: usize,
    ) -> Self {
        Self {
            encoder,
            merge,
            features,
            width,
            layer1: Linear::xavier(store, rng, "epi_proj.layer1", features, width, false),
            layer2: Linear::xavier(store, rng, "epi_proj.layer2", width, width, false),
        }
    }

    pub fn layers(&self) -> [Linear; 2] {
        [self.layer1, self.layer2]
    }

    /// Encodes `x: [P, w, N, F]` with slice adjacencies `a: [P, w, N, N]`
    /// into `[P, N, D]` tokens.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        prompts: &PromptParams,
        x: &Tensor<S>,
        a: &Tensor<S>,
    ) -> Result<Var, Error> {
        let xs = x.shape();
        if xs.len() != 4 || xs[3] != self.features {
            return Err(Error::Shape(format!("epi window must be [P, w, N, {}], got {xs:?}", self.features)));
        }
        let (p, w, n) = (xs[0], xs[1], xs[2]);
        if a.shape() != [p, w, n, n] {
            return Err(Error::Shape(format!("adjacency window must be [{p}, {w}, {n}, {n}], got {:?}", a.shape())));
        }
        let nodes = w * n;
        let xv = g.constant(x.clone().reshaped(&[p, nodes, self.features]).expect("same size"))?;
        let agg = match self.encoder {
            EpiEncoder::Graph => Some(self.aggregation(g, store, prompts, a, nodes)?),
            EpiEncoder::Mlp => None,
        };
        let h = self.layer1.forward(g, store, xv)?;
        let h = propagate(g, agg, h)?;
        let h = g.relu(h)?;
        let h = self.layer2.forward(g, store, h)?;
        let e = propagate(g, agg, h)?;
        let e = g.reshape(e, &[p, w, n, self.width])?;
        self.merge_slices(g, store, prompts, e, w)
    }

    /// `D^{-1/2} (Aᵀ + I) D^{-1/2}` over the prompted block graph, so each node
    /// aggregates from its in-neighbours and itself.
    fn aggregation<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        prompts: &PromptParams,
        a: &Tensor<S>,
        nodes: usize,
    ) -> Result<Var, Error> {
        let block = prompted_block(g, store, prompts, a)?;
        let incoming = g.transpose(block)?;
        let eye = g.constant(Tensor::eye(nodes))?;
        let with_self = g.add(incoming, eye)?;
        let deg = g.sum_axis(with_self, 2)?;
        let deg = g.clamp_min(deg, S::lit(DEGREE_FLOOR))?;
        let inv = g.rsqrt(deg)?;
        let p = g.shape(inv)[0];
        let rows = g.reshape(inv, &[p, nodes, 1])?;
        let cols = g.reshape(inv, &[p, 1, nodes])?;
        let left = g.mul(rows, with_self)?;
        Ok(g.mul(left, cols)?)
    }

    fn merge_slices<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        prompts: &PromptParams,
        e: Var,
        w: usize,
    ) -> Result<Var, Error> {
        if w != prompts.window {
            return Err(Error::Shape(format!("window {w} does not match prompt window {}", prompts.window)));
        }
        match self.merge {
            SliceMerge::Gated => {
                let gamma = g.param(store, prompts.gamma)?;
                let gates = g.sigmoid(gamma)?;
                let gates = g.reshape(gates, &[1, w, 1, 1])?;
                let weighted = g.mul(e, gates)?;
                Ok(g.sum_axis(weighted, 1)?)
            }
            SliceMerge::Average => {
                let s = g.sum_axis(e, 1)?;
                Ok(g.mul_scalar(s, S::one() / S::from_usize_lossy(w))?)
            }
            SliceMerge::Last => {
                let shape = g.shape(e).to_vec();
                let last = g.slice(e, 1, w - 1, 1)?;
                let last = g.reshape(last, &[shape[0], shape[2], shape[3]])?;
                let gamma = g.param(store, prompts.gamma)?;
                let gate = g.slice(gamma, 0, w - 1, 1)?;
                let gate = g.sigmoid(gate)?;
                Ok(g.mul(last, gate)?)
            }
        }
    }
}

fn propagate<S: Scalar>(g: &mut Graph<S>, agg: Option<Var>, h: Var) -> Result<Var, Error> {
    match agg {
        Some(a) => Ok(g.matmul(a, h)?),
        None => Ok(h),
    }
}

/// Mobility branch: two-layer perceptron over each region's outgoing flows.
#[derive(Debug, Clone, PartialEq)]
pub struct MobProjector {
    pub regions: usize,
    pub hidden: usize,
    pub width: usize,
    layer1: Linear,
    layer2: Linear,
}

impl MobProjector {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, regions: usize, hidden: usize, width: usize) -> Self {
        Self {
            regions,
            hidden,
            width,
            layer1: Linear::xavier(store, rng, "mob_proj.layer1", regions, hidden, false),
            layer2: Linear::xavier(store, rng, "mob_proj.layer2", hidden, width, false),
        }
    }

    /// `m: [P, N, N]` to `[P, N, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, m: &Tensor<S>) -> Result<Var, Error> {
        let ms = m.shape();
        if ms.len() != 3 || ms[1] != self.regions || ms[2] != self.regions {
            return Err(Error::Shape(format!(
                "mobility window must be [P, {0}, {0}], got {ms:?}",
                self.regions
            )));
        }
        let mv = g.constant(m.clone())?;
        let h = self.layer1.forward(g, store, mv)?;
        let h = g.relu(h)?;
        self.layer2.forward(g, store, h)
    }
}

/// Affine map from token width back to a branch's output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adapter {
    pub linear: Linear,
}

impl Adapter {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, width: usize, out: usize) -> Self {
        Self {
            linear: Linear::xavier(store, rng, name, width, out, false),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<Var, Error> {
        self.linear.forward(g, store, h)
    }
}

/// Node-major tokens `[N, P, D]` ready for the backbone, plus the day range of each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub patch_days: Vec<std::ops::Range<usize>>,
}

/// Reorders patch-major `[P, N, D]` tokens into node-major `[N, P, D]` sequences.
pub fn to_sequences<S: Scalar>(g: &mut Graph<S>, tokens: Var) -> Result<Var, Error> {
    Ok(g.permute(tokens, &[1, 0, 2])?)
}

/// Single-window form of [`EpiProjector::forward`]: `[w, N, F]` and `[w, N, N]` to `[N, D]`.
pub fn epi_tokenize<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prompts: &PromptParams,
    proj: &EpiProjector,
    x_window: &Tensor<S>,
    a_window: &Tensor<S>,
) -> Result<Var, Error> {
    let lift = |t: &Tensor<S>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshaped(&shape).expect("same size")
    };
    let z = proj.forward(g, store, prompts, &lift(x_window), &lift(a_window))?;
    let s = g.shape(z).to_vec();
    Ok(g.reshape(z, &s[1..])?)
}

/// Single-matrix form of [`MobProjector::forward`]: `[N, N]` to `[N, D]`.
pub fn mob_tokenize<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, proj: &MobProjector, m: &Tensor<S>) -> Result<Var, Error> {
    let shape = [1, m.shape().first().copied().unwrap_or(0), m.shape().get(1).copied().unwrap_or(0)];
    let lifted = m.clone().reshaped(&shape).map_err(|e| Error::Shape(e.to_string()))?;
    let h = proj.forward(g, store, &lifted)?;
    let s = g.shape(h).to_vec();
    Ok(g.reshape(h, &s[1..])?)
}
