//! Bidirectional Mamba block and the cross-gated interaction fusion block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{self, DiscretizationMode};

/// Token width `d`, expanded width `e`, state size `n`, conv width `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub e: usize,
    pub n: usize,
    pub w: usize,
}

impl BlockDims {
    /// `E = 2D`, `N = 16`, `W = 4`.
    pub fn with_token_dim(d: usize) -> Self {
        Self {
            d,
            e: 2 * d,
            n: 16,
            w: 4,
        }
    }
}

/// Causal conv, input-dependent `(B, C, Δ)` projections and the scan for one
/// direction or modality.
#[derive(Clone, Copy, Debug)]
pub struct SsmBranch {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub linear_b: Linear,
    pub linear_c: Linear,
    /// Bias-free; [`Self::delta_bias`] plays the role of its offset.
    pub linear_delta: Linear,
    pub delta_bias: ParamId,
    pub a_log: ParamId,
}

impl SsmBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        let BlockDims { e, n, w, .. } = dims;
        let bound = 1.0 / (w as f64).sqrt();
        let conv_weight = store.register(format!("{name}.conv.weight"), Tensor::uniform(&[e, w], bound, rng))?;
        let conv_bias = store.register(format!("{name}.conv.bias"), Tensor::uniform(&[e], bound, rng))?;
        let linear_b = Linear::new(store, &format!("{name}.linear_b"), e, n, true, Init::FanIn, rng)?;
        let linear_c = Linear::new(store, &format!("{name}.linear_c"), e, n, true, Init::FanIn, rng)?;
        let linear_delta = Linear::new(store, &format!("{name}.linear_delta"), e, e, false, Init::FanIn, rng)?;
        let delta_bias = store.register(format!("{name}.delta_bias"), ssm::init_delta_bias(e, rng))?;
        let a_log = store.register(format!("{name}.a_log"), ssm::init_a_log(e, n))?;
        Ok(Self {
            conv_weight,
            conv_bias,
            linear_b,
            linear_c,
            linear_delta,
            delta_bias,
            a_log,
        })
    }

    /// `x: [B, M, E]` -> scan output `[B, M, E]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: DiscretizationMode) -> Result<Var> {
        let kernel = g.param(store, self.conv_weight);
        let bias = g.param(store, self.conv_bias);
        let conv = g.causal_conv(x, kernel, bias)?;
        let xc = g.silu(conv);
        let b = self.linear_b.forward(g, store, xc)?;
        let c = self.linear_c.forward(g, store, xc)?;
        let delta_w = g.param(store, self.linear_delta.weight);
        let delta_b = g.param(store, self.delta_bias);
        let delta_pre = g.linear(xc, delta_w, Some(delta_b))?;
        let delta = g.softplus(delta_pre);
        let a_log = g.param(store, self.a_log);
        let a = g.neg_exp(a_log);
        ssm::selective_scan(g, xc, delta, a, b, c, mode)
    }

    pub fn param_count(dims: BlockDims) -> usize {
        let BlockDims { e, n, w, .. } = dims;
        (e * w + e) + 2 * (e * n + n) + (e * e + e) + e * n
    }
}

fn check_tokens(g: &Graph, t: Var, d: usize, op: &'static str) -> Result<()> {
    match *g.shape(t) {
        [_, m, c] if c == d && m > 0 => Ok(()),
        _ => Err(Error::dim(op, g.shape(t), &[1, 1, d])),
    }
}

/// View a `[M, C]` or `[B, M, C]` tensor as rank 3.
pub(crate) fn as_rank3(t: &Tensor) -> Result<Tensor> {
    let (b, m, c) = t.dims3()?;
    t.clone().reshape(&[b, m, c])
}

/// Norm, shared `x`/`z` projections, independent forward and backward SSM
/// branches, SiLU(z) gating, output projection and residual.
#[derive(Clone, Debug)]
pub struct BiMambaBlock {
    pub dims: BlockDims,
    pub mode: DiscretizationMode,
    pub norm: LayerNorm,
    pub linear_x: Linear,
    pub linear_z: Linear,
    pub forward_branch: SsmBranch,
    pub backward_branch: SsmBranch,
    /// Zero-initialized, so a fresh block is the identity map.
    pub linear_out: Linear,
}

impl BiMambaBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: BlockDims,
        mode: DiscretizationMode,
        rng: &mut R,
    ) -> Result<Self> {
        let BlockDims { d, e, .. } = dims;
        Ok(Self {
            dims,
            mode,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            linear_x: Linear::new(store, &format!("{name}.linear_x"), d, e, true, Init::FanIn, rng)?,
            linear_z: Linear::new(store, &format!("{name}.linear_z"), d, e, true, Init::FanIn, rng)?,
            forward_branch: SsmBranch::new(store, &format!("{name}.fwd"), dims, rng)?,
            backward_branch: SsmBranch::new(store, &format!("{name}.bwd"), dims, rng)?,
            linear_out: Linear::new(store, &format!("{name}.linear_out"), e, d, true, Init::Zeros, rng)?,
        })
    }

    /// The same block with the two direction parameter sets exchanged.
    pub fn with_directions_swapped(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.forward_branch, &mut out.backward_branch);
        out
    }

    /// `t: [B, M, D]` -> `[B, M, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t: Var) -> Result<Var> {
        check_tokens(g, t, self.dims.d, "bi_mamba_forward")?;
        let normed = self.norm.forward(g, store, t)?;
        let x = self.linear_x.forward(g, store, normed)?;
        let z = self.linear_z.forward(g, store, normed)?;
        let gate = g.silu(z);

        let y_fwd = self.forward_branch.forward(g, store, x, self.mode)?;
        let x_rev = g.reverse(x)?;
        let y_rev = self.backward_branch.forward(g, store, x_rev, self.mode)?;
        let y_bwd = g.reverse(y_rev)?;

        let gated_fwd = g.mul(y_fwd, gate)?;
        let gated_bwd = g.mul(y_bwd, gate)?;
        let mixed = g.add(gated_fwd, gated_bwd)?;
        let out = self.linear_out.forward(g, store, mixed)?;
        g.add(out, t)
    }

    pub fn param_count(dims: BlockDims) -> usize {
        let BlockDims { d, e, .. } = dims;
        2 * d + 2 * (d * e + e) + 2 * SsmBranch::param_count(dims) + (e * d + d)
    }
}

/// Evaluate a Bi-Mamba block on a concrete tensor.
pub fn bi_mamba_forward(block: &BiMambaBlock, store: &ParamStore, t: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.constant(as_rank3(t)?);
    let out = block.forward(&mut g, store, input)?;
    g.value(out).clone().reshape(t.shape())
}

/// One modality's half of an [`IfmBlock`].
#[derive(Clone, Debug)]
pub struct IfmBranch {
    pub norm: LayerNorm,
    pub linear_x: Linear,
    pub linear_z: Linear,
    pub ssm: SsmBranch,
}

impl IfmBranch {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        let BlockDims { d, e, .. } = dims;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            linear_x: Linear::new(store, &format!("{name}.linear_x"), d, e, true, Init::FanIn, rng)?,
            linear_z: Linear::new(store, &format!("{name}.linear_z"), d, e, true, Init::FanIn, rng)?,
            ssm: SsmBranch::new(store, &format!("{name}.ssm"), dims, rng)?,
        })
    }

    /// Returns `(scan output, z)`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, t: Var, mode: DiscretizationMode) -> Result<(Var, Var)> {
        let normed = self.norm.forward(g, store, t)?;
        let x = self.linear_x.forward(g, store, normed)?;
        let y = self.ssm.forward(g, store, x, mode)?;
        let z = self.linear_z.forward(g, store, normed)?;
        Ok((y, z))
    }
}

/// Two per-modality scans, each gated by SiLU of the other modality's `z`,
/// concatenated and projected back to `D`. There is no residual path.
#[derive(Clone, Debug)]
pub struct IfmBlock {
    pub dims: BlockDims,
    pub mode: DiscretizationMode,
    pub first: IfmBranch,
    pub second: IfmBranch,
    /// `[2E, D]`, zero-initialized; rows `0..E` read the first modality.
    pub linear_out: Linear,
}

impl IfmBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: BlockDims,
        mode: DiscretizationMode,
        rng: &mut R,
    ) -> Result<Self> {
        let BlockDims { d, e, .. } = dims;
        Ok(Self {
            dims,
            mode,
            first: IfmBranch::new(store, &format!("{name}.a1"), dims, rng)?,
            second: IfmBranch::new(store, &format!("{name}.a2"), dims, rng)?,
            linear_out: Linear::new(store, &format!("{name}.linear_out"), 2 * e, d, true, Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t1: Var, t2: Var) -> Result<Var> {
        check_tokens(g, t1, self.dims.d, "ifm_forward")?;
        check_tokens(g, t2, self.dims.d, "ifm_forward")?;
        if g.shape(t1) != g.shape(t2) {
            return Err(Error::dim("ifm_forward", g.shape(t1), g.shape(t2)));
        }
        let (y1, z1) = self.first.forward(g, store, t1, self.mode)?;
        let (y2, z2) = self.second.forward(g, store, t2, self.mode)?;
        let gate2 = g.silu(z2);
        let gate1 = g.silu(z1);
        let gated1 = g.mul(y1, gate2)?;
        let gated2 = g.mul(y2, gate1)?;
        let cat = g.concat_channels(&[gated1, gated2])?;
        self.linear_out.forward(g, store, cat)
    }

    pub fn param_count(dims: BlockDims) -> usize {
        let BlockDims { d, e, .. } = dims;
        let branch = 2 * d + 2 * (d * e + e) + SsmBranch::param_count(dims);
        2 * branch + (2 * e * d + d)
    }
}

pub fn ifm_forward(block: &IfmBlock, store: &ParamStore, t1: &Tensor, t2: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(as_rank3(t1)?);
    let b = g.constant(as_rank3(t2)?);
    let out = block.forward(&mut g, store, a, b)?;
    g.value(out).clone().reshape(t1.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BlockDims {
        BlockDims { d: 4, e: 8, n: 2, w: 2 }
    }

    #[test]
    fn fresh_bi_mamba_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new(&mut store, "b", dims(), DiscretizationMode::Euler, &mut rng).unwrap();
        let t = Tensor::randn(&[1, 5, 4], &mut rng);
        assert_eq!(bi_mamba_forward(&block, &store, &t).unwrap(), t);
        assert_eq!(store.numel(), BiMambaBlock::param_count(dims()));
    }

    #[test]
    fn fresh_ifm_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = IfmBlock::new(&mut store, "f", dims(), DiscretizationMode::Euler, &mut rng).unwrap();
        let a = Tensor::randn(&[1, 3, 4], &mut rng);
        let b = Tensor::randn(&[1, 3, 4], &mut rng);
        let out = ifm_forward(&block, &store, &a, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(store.numel(), IfmBlock::param_count(dims()));
    }

    #[test]
    fn ifm_rejects_unequal_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = IfmBlock::new(&mut store, "f", dims(), DiscretizationMode::Euler, &mut rng).unwrap();
        let err = ifm_forward(&block, &store, &Tensor::zeros(&[1, 3, 4]), &Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn wrong_token_width_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new(&mut store, "b", dims(), DiscretizationMode::Euler, &mut rng).unwrap();
        assert!(bi_mamba_forward(&block, &store, &Tensor::zeros(&[1, 3, 5])).is_err());
    }
}
