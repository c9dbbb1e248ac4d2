//! Parameter handles for the layers the blocks are built from.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let make = |shape: &[usize], rng: &mut R| match init {
            Init::FanIn => Tensor::uniform(shape, bound, rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        let weight = store.register(format!("{name}.weight"), make(&[d_in, d_out], rng))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), make(&[d_out], rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[d]))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}
