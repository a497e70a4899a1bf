//! The shared sequence model applied to every region's token sequence.
//!
//! The default is a pre-norm causal transformer with learned absolute
//! position embeddings whose weights are all frozen. The other modes exist
//! for ablations and keep the same `[B, P, D] → [B, P, D]` contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::init;
use crate::layers::{LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::Error;

pub const INIT_STD: f64 = 0.02;
const PREFIX: &str = "backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    #[default]
    FrozenTransformer,
    TrainableTransformer,
    /// Residual position-wise perceptron blocks.
    Mlp,
    /// Stacked GRU cells.
    Rnn,
    Identity,
}

impl BackboneMode {
    pub fn is_frozen(self) -> bool {
        matches!(self, Self::FrozenTransformer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: BackboneMode::FrozenTransformer,
            depth: 2,
            width: 64,
            heads: 4,
            max_positions: 64,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        if matches!(self.mode, BackboneMode::FrozenTransformer | BackboneMode::TrainableTransformer) {
            if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "backbone width {} is not divisible by {} heads",
                    self.width, self.heads
                )));
            }
            if self.max_positions == 0 {
                return Err(Error::Config("max_positions must be positive".into()));
            }
        }
        if self.mode != BackboneMode::Identity && self.depth == 0 {
            return Err(Error::Config("backbone depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpBlock {
    norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct GruCell {
    input: Linear,
    hidden: Linear,
}

#[derive(Debug, Clone, PartialEq)]
enum Layers {
    Transformer {
        positions: ParamId,
        blocks: Vec<TransformerBlock>,
        final_norm: LayerNorm,
    },
    Mlp {
        blocks: Vec<MlpBlock>,
        final_norm: LayerNorm,
    },
    Rnn {
        cells: Vec<GruCell>,
    },
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Layers,
}

/// Registers backbone weights under the `backbone.` prefix. Initialization only
/// depends on `config.seed`, so two models with the same backbone config get
/// bit-identical backbones.
pub fn build_backbone<S: Scalar>(config: &BackboneConfig, store: &mut ParamStore<S>) -> Result<Backbone, Error> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let frozen = config.mode.is_frozen();
    let d = config.width;
    let lin = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: String, i: usize, o: usize| {
        Linear::normal(store, rng, &name, i, o, INIT_STD, frozen)
    };
    let layers = match config.mode {
        BackboneMode::FrozenTransformer | BackboneMode::TrainableTransformer => {
            let pos = init::normal(&mut rng, &[config.max_positions, d], INIT_STD);
            let positions = store.register(format!("{PREFIX}.positions"), pos, frozen);
            let blocks = (0..config.depth)
                .map(|l| {
                    let p = format!("{PREFIX}.block{l}");
                    TransformerBlock {
                        norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, frozen),
                        attn: Attention {
                            query: lin(store, &mut rng, format!("{p}.attn.query"), d, d),
                            key: lin(store, &mut rng, format!("{p}.attn.key"), d, d),
                            value: lin(store, &mut rng, format!("{p}.attn.value"), d, d),
                            output: lin(store, &mut rng, format!("{p}.attn.output"), d, d),
                        },
                        norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, frozen),
                        ff_in: lin(store, &mut rng, format!("{p}.ff_in"), d, 4 * d),
                        ff_out: lin(store, &mut rng, format!("{p}.ff_out"), 4 * d, d),
                    }
                })
                .collect();
            Layers::Transformer {
                positions,
                blocks,
                final_norm: LayerNorm::new(store, &format!("{PREFIX}.final_norm"), d, frozen),
            }
        }
        BackboneMode::Mlp => {
            let blocks = (0..config.depth)
                .map(|l| {
                    let p = format!("{PREFIX}.block{l}");
                    MlpBlock {
                        norm: LayerNorm::new(store, &format!("{p}.norm"), d, frozen),
                        ff_in: lin(store, &mut rng, format!("{p}.ff_in"), d, 4 * d),
                        ff_out: lin(store, &mut rng, format!("{p}.ff_out"), 4 * d, d),
                    }
                })
                .collect();
            Layers::Mlp {
                blocks,
                final_norm: LayerNorm::new(store, &format!("{PREFIX}.final_norm"), d, frozen),
            }
        }
        BackboneMode::Rnn => {
            let cells = (0..config.depth)
                .map(|l| {
                    let p = format!("{PREFIX}.gru{l}");
                    GruCell {
                        input: Linear::xavier(store, &mut rng, &format!("{p}.input"), d, 3 * d, frozen),
                        hidden: Linear::xavier(store, &mut rng, &format!("{p}.hidden"), d, 3 * d, frozen),
                    }
                })
                .collect();
            Layers::Rnn { cells }
        }
        BackboneMode::Identity => Layers::Identity,
    };
    Ok(Backbone {
        config: config.clone(),
        layers,
    })
}

impl Backbone {
    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Longest sequence the backbone accepts, if bounded.
    pub fn max_positions(&self) -> Option<usize> {
        match self.layers {
            Layers::Transformer { .. } => Some(self.config.max_positions),
            _ => None,
        }
    }

    /// Number of scalar weights registered by this backbone.
    pub fn param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store
            .iter()
            .filter(|(_, p)| is_backbone_param(&p.name))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// SHA-256 over the backbone's parameter names and values.
    pub fn digest<S: Scalar>(&self, store: &ParamStore<S>) -> String {
        store.digest(|p| is_backbone_param(&p.name))
    }

    /// `[B, P, D] → [B, P, D]`; output position `p` only sees positions `≤ p`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var, Error> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.width {
            return Err(Error::Shape(format!(
                "backbone input must be [B, P, {}], got {shape:?}",
                self.config.width
            )));
        }
        if shape[1] == 0 {
            return Err(Error::Shape("backbone input has no positions".into()));
        }
        match &self.layers {
            Layers::Transformer {
                positions,
                blocks,
                final_norm,
            } => {
                let p = shape[1];
                if p > self.config.max_positions {
                    return Err(Error::Shape(format!(
                        "sequence of {p} patches exceeds {} positions",
                        self.config.max_positions
                    )));
                }
                let pos = g.param(store, *positions)?;
                let pos = g.slice(pos, 0, 0, p)?;
                let mut h = g.add(x, pos)?;
                for block in blocks {
                    h = self.transformer_block(g, store, block, h, &shape)?;
                }
                final_norm.forward(g, store, h)
            }
            Layers::Mlp { blocks, final_norm } => {
                let mut h = x;
                for block in blocks {
                    let n = block.norm.forward(g, store, h)?;
                    let f = block.ff_in.forward(g, store, n)?;
                    let f = g.gelu(f)?;
                    let f = block.ff_out.forward(g, store, f)?;
                    h = g.add(h, f)?;
                }
                final_norm.forward(g, store, h)
            }
            Layers::Rnn { cells } => {
                let mut h = x;
                for cell in cells {
                    h = gru_layer(g, store, cell, h, &shape)?;
                }
                Ok(h)
            }
            Layers::Identity => Ok(x),
        }
    }

    fn transformer_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        block: &TransformerBlock,
        x: Var,
        shape: &[usize],
    ) -> Result<Var, Error> {
        let n = block.norm1.forward(g, store, x)?;
        let a = self.attention(g, store, &block.attn, n, shape)?;
        let x = g.add(x, a)?;
        let n = block.norm2.forward(g, store, x)?;
        let f = block.ff_in.forward(g, store, n)?;
        let f = g.gelu(f)?;
        let f = block.ff_out.forward(g, store, f)?;
        Ok(g.add(x, f)?)
    }

    fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        attn: &Attention,
        x: Var,
        shape: &[usize],
    ) -> Result<Var, Error> {
        let (b, p, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let dh = d / heads;
        let split = |g: &mut Graph<S>, v: Var| -> Result<Var, Error> {
            let v = g.reshape(v, &[b, p, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[b * heads, p, dh])?)
        };
        let q = attn.query.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = attn.key.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = attn.value.forward(g, store, x)?;
        let v = split(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, S::one() / S::from_usize_lossy(dh).sqrt())?;
        let weights = g.causal_softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.reshape(ctx, &[b, heads, p, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, p, d])?;
        attn.output.forward(g, store, ctx)
    }
}

fn gru_layer<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, cell: &GruCell, x: Var, shape: &[usize]) -> Result<Var, Error> {
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    let gates_x = cell.input.forward(g, store, x)?;
    let mut h = g.constant(crate::tensor::Tensor::zeros(&[b, d]))?;
    let mut outputs = Vec::with_capacity(p);
    for t in 0..p {
        let xt = g.slice(gates_x, 1, t, 1)?;
        let xt = g.reshape(xt, &[b, 3 * d])?;
        let ht = cell.hidden.forward(g, store, h)?;
        let xz = g.slice(xt, 1, 0, d)?;
        let xr = g.slice(xt, 1, d, d)?;
        let xn = g.slice(xt, 1, 2 * d, d)?;
        let hz = g.slice(ht, 1, 0, d)?;
        let hr = g.slice(ht, 1, d, d)?;
        let hn = g.slice(ht, 1, 2 * d, d)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, hn)?;
        let cand = g.add(xn, rn)?;
        let cand = g.tanh(cand)?;
        // h = cand + z ⊙ (h - cand)
        let diff = g.sub(h, cand)?;
        let keep = g.mul(z, diff)?;
        h = g.add(cand, keep)?;
        outputs.push(g.reshape(h, &[b, 1, d])?);
    }
    Ok(g.concat(&outputs, 1)?)
}

pub(crate) fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}
