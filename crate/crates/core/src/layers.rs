//! Small parameterized building blocks shared by the branches and the backbone.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

/// `y = x·W + b` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weight, zero bias.
    pub fn xavier<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        frozen: bool,
    ) -> Self {
        let w = init::xavier(rng, fan_in, fan_out);
        Self::with_weight(store, name, w, frozen)
    }

    /// Normal weight with the given standard deviation, zero bias.
    pub fn normal<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        frozen: bool,
    ) -> Self {
        let w = init::normal(rng, &[fan_in, fan_out], std);
        Self::with_weight(store, name, w, frozen)
    }

    fn with_weight<S: Scalar>(store: &mut ParamStore<S>, name: &str, w: Tensor<S>, frozen: bool) -> Self {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        Self {
            weight: store.register(format!("{name}.weight"), w, frozen),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]), frozen),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var, Error> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, frozen: bool) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::ones(&[width]), frozen),
            shift: store.register(format!("{name}.shift"), Tensor::zeros(&[width]), frozen),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var, Error> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain)?;
        let shift = g.param(store, self.shift)?;
        let y = g.mul(n, gain)?;
        Ok(g.add(y, shift)?)
    }
}
