//! Cross-modal fusion at both granularities, the adaptive mix, the discrete
//! hazard head and its negative log-likelihood.

use rand::Rng;

use crate::blocks::{as_rank3, IfmBlock};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::numerics::ops::sigmoid_scalar;
use crate::numerics::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

/// Default cap on the fine-level alignment length.
pub const DEFAULT_ALIGN_LEN: usize = 256;

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Contiguous near-equal segment sizes covering `len` tokens with `segments`
/// pieces; the longer segments come first.
pub fn segment_sizes(len: usize, segments: usize) -> Result<Vec<usize>> {
    if segments < 1 {
        return Err(Error::config("alignment length must be at least 1"));
    }
    if segments > len {
        return Err(Error::config(format!(
            "cannot pool {len} tokens into {segments} non-empty segments"
        )));
    }
    let (base, rem) = (len / segments, len % segments);
    Ok((0..segments).map(|i| base + usize::from(i < rem)).collect())
}

/// Default target length: `min(L_I, L_G, 256)`.
pub fn default_align_len(len_a: usize, len_b: usize) -> usize {
    len_a.min(len_b).min(DEFAULT_ALIGN_LEN)
}

/// Segment-mean a `[B, M, D]` sequence down to `target` tokens.
pub fn align_var(g: &mut Graph, x: Var, target: usize) -> Result<Var> {
    let (_, m, _) = g.value(x).dims3()?;
    if m == target {
        return Ok(x);
    }
    let sizes = segment_sizes(m, target)?;
    g.segment_mean(x, &sizes)
}

/// Segment-mean pool two `[L, D]` token matrices to a common length
/// (`min(L_I, L_G, 256)` when `target` is `None`).
pub fn align_fine_tokens(ti: &Tensor, tg: &Tensor, target: Option<usize>) -> Result<(Tensor, Tensor)> {
    let (_, li, _) = ti.dims3()?;
    let (_, lg, _) = tg.dims3()?;
    if li == 0 || lg == 0 {
        return Err(Error::config("cannot align an empty token sequence"));
    }
    let target = target.unwrap_or_else(|| default_align_len(li, lg));
    let mut g = Graph::new();
    let a = g.constant(as_rank3(ti)?);
    let b = g.constant(as_rank3(tg)?);
    let a = align_var(&mut g, a, target)?;
    let b = align_var(&mut g, b, target)?;
    let d = ti.last_dim();
    Ok((
        g.value(a).clone().reshape(&[target, d])?,
        g.value(b).clone().reshape(&[target, d])?,
    ))
}

/// IFM over two equal-length sequences, then the token mean: `[1, 1, D]`.
pub fn fuse_var(g: &mut Graph, store: &ParamStore, ifm: &IfmBlock, a: Var, b: Var) -> Result<Var> {
    let fused = ifm.forward(g, store, a, b)?;
    g.mean_tokens(fused)
}

/// Align two sequences to `target` tokens and fuse them.
pub fn fuse_aligned_var(
    g: &mut Graph,
    store: &ParamStore,
    ifm: &IfmBlock,
    a: Var,
    b: Var,
    target: usize,
) -> Result<Var> {
    let a = align_var(g, a, target)?;
    let b = align_var(g, b, target)?;
    fuse_var(g, store, ifm, a, b)
}

fn vector_of(g: &Graph, v: Var) -> Tensor {
    Tensor::from_vec(g.value(v).data().to_vec())
}

/// Fine-grained fused vector from already aligned token matrices.
pub fn fuse_fine(ti: &Tensor, tg: &Tensor, ifm: &IfmBlock, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(as_rank3(ti)?);
    let b = g.constant(as_rank3(tg)?);
    let h = fuse_var(&mut g, store, ifm, a, b)?;
    Ok(vector_of(&g, h))
}

/// Coarse-grained fused vector; the group sequences are aligned to the
/// shorter of the two first.
pub fn fuse_coarse(ti: &Tensor, tg: &Tensor, ifm: &IfmBlock, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(as_rank3(ti)?);
    let b = g.constant(as_rank3(tg)?);
    let target = g.value(a).dims3()?.1.min(g.value(b).dims3()?.1);
    let h = fuse_aligned_var(&mut g, store, ifm, a, b, target)?;
    Ok(vector_of(&g, h))
}

/// Mixing weight `α = σ(raw)`.
#[derive(Clone, Copy, Debug)]
pub struct AlphaParam {
    pub raw: ParamId,
}

impl AlphaParam {
    pub fn new(store: &mut ParamStore, name: &str, raw: f64) -> Result<Self> {
        Ok(Self {
            raw: store.register(name, Tensor::scalar(raw))?,
        })
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        sigmoid_scalar(store.get(self.raw).item())
    }

    /// `α H_f + (1 - α) H_c`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, h_fine: Var, h_coarse: Var) -> Result<Var> {
        let raw = g.param(store, self.raw);
        let alpha = g.sigmoid(raw);
        g.lerp(alpha, h_fine, h_coarse)
    }
}

pub fn adaptive_fuse(h_fine: &Tensor, h_coarse: &Tensor, alpha: &AlphaParam, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(h_fine.clone());
    let b = g.constant(h_coarse.clone());
    let h = alpha.fuse(&mut g, store, a, b)?;
    Ok(g.value(h).clone())
}

/// Per-bin hazards, the survival curve they imply, and the scalar risk.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardOutput {
    pub hazards: Vec<f64>,
    /// `S[t] = Π_{k ≤ t} (1 - h[k])`
    pub survival: Vec<f64>,
    /// `-Σ_t S[t]`
    pub risk: f64,
}

impl HazardOutput {
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let mut s = 1.0;
        let survival: Vec<f64> = hazards
            .iter()
            .map(|h| {
                s *= 1.0 - h;
                s
            })
            .collect();
        let risk = -survival.iter().sum::<f64>();
        Self {
            hazards,
            survival,
            risk,
        }
    }

    pub fn bins(&self) -> usize {
        self.hazards.len()
    }
}

/// `hazards = σ(H W + b)` over `T` bins.
#[derive(Clone, Debug)]
pub struct HazardHead {
    pub linear: Linear,
}

impl HazardHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config(format!("need at least 2 time bins, got {bins}")));
        }
        Ok(Self {
            linear: Linear::new(store, name, d, bins, true, Init::FanIn, rng)?,
        })
    }

    pub fn bins(&self) -> usize {
        self.linear.d_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let logits = self.linear.forward(g, store, h)?;
        Ok(g.sigmoid(logits))
    }
}

pub fn hazard_head(h: &Tensor, head: &HazardHead, store: &ParamStore) -> Result<HazardOutput> {
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let hz = head.forward(&mut g, store, x)?;
    Ok(HazardOutput::from_hazards(g.value(hz).data().to_vec()))
}

fn check_bin(t_bin: usize, bins: usize) -> Result<()> {
    if t_bin >= bins {
        return Err(Error::config(format!("time bin {t_bin} outside 0..{bins}")));
    }
    Ok(())
}

fn nll_from_hazards(h: &[f64], t_bin: usize, censored: bool) -> f64 {
    let surv = |upto: usize| h[..upto].iter().map(|v| 1.0 - v).product::<f64>();
    if censored {
        -surv(t_bin + 1).max(PROB_FLOOR).ln()
    } else {
        -surv(t_bin).max(PROB_FLOOR).ln() - h[t_bin].max(PROB_FLOOR).ln()
    }
}

/// Discrete-time survival negative log-likelihood.
///
/// Censored: `-log S[t]`. Event: `-log S[t-1] - log h[t]` with `S[-1] = 1`.
pub fn survival_nll(out: &HazardOutput, t_bin: usize, censored: bool) -> Result<f64> {
    check_bin(t_bin, out.bins())?;
    Ok(nll_from_hazards(&out.hazards, t_bin, censored))
}

/// [`survival_nll`] on a graph variable holding the hazards.
pub fn survival_nll_var(g: &mut Graph, hazards: Var, t_bin: usize, censored: bool) -> Result<Var> {
    let h = g.value(hazards).data().to_vec();
    check_bin(t_bin, h.len())?;
    let loss = nll_from_hazards(&h, t_bin, censored);
    Ok(g.custom(&[hazards], Tensor::scalar(loss), Box::new(NllOp { t_bin, censored })))
}

struct NllOp {
    t_bin: usize,
    censored: bool,
}

impl CustomOp for NllOp {
    fn name(&self) -> &'static str {
        "survival_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let h = inputs[0].data();
        let mut grad = vec![0.0; h.len()];
        let surv_terms = if self.censored { self.t_bin + 1 } else { self.t_bin };
        let s: f64 = h[..surv_terms].iter().map(|v| 1.0 - v).product();
        if s > PROB_FLOOR {
            for k in 0..surv_terms {
                grad[k] += gy[0] / (1.0 - h[k]);
            }
        }
        if !self.censored && h[self.t_bin] > PROB_FLOOR {
            grad[self.t_bin] -= gy[0] / h[self.t_bin];
        }
        vec![Some(grad)]
    }
}
