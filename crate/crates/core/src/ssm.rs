//! Selective state-space scan.
//!
//! Three routes compute the same thing and are checked against each other:
//! the sequential recurrence, the convolution with the unrolled kernel (only
//! for time-invariant parameters), and a Blelloch scan over the affine
//! composition operator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscretizationMode {
    /// `B̄ = Δ·B`
    #[default]
    Euler,
    /// `B̄ = (exp(ΔA) - 1) / A · B`
    Zoh,
}

impl FromStr for DiscretizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "zoh" => Ok(Self::Zoh),
            other => Err(Error::config(format!(
                "unknown discretization mode {other:?} (expected euler or zoh)"
            ))),
        }
    }
}

impl fmt::Display for DiscretizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Zoh => "zoh",
        })
    }
}

/// Continuous, input-dependent SSM parameters for one sequence batch.
#[derive(Clone, Debug)]
pub struct SsmStepParams {
    /// `[E, N]`, strictly negative.
    pub a: Tensor,
    /// `[B, M, E]`, strictly positive.
    pub delta: Tensor,
    /// `[B, M, N]`
    pub b_proj: Tensor,
    /// `[B, M, N]`
    pub c_proj: Tensor,
}

/// Discretized transition and input matrices, both `[B, M, E, N]`.
#[derive(Clone, Debug)]
pub struct DiscreteParams {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

impl DiscreteParams {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.a_bar.shape() {
            [b, m, e, n] if self.b_bar.shape() == self.a_bar.shape() => Ok((b, m, e, n)),
            _ => Err(Error::dim("DiscreteParams", self.a_bar.shape(), self.b_bar.shape())),
        }
    }
}

struct Dims {
    b: usize,
    m: usize,
    e: usize,
    n: usize,
}

fn check_step_shapes(delta: &Tensor, a: &Tensor, b_proj: &Tensor) -> Result<Dims> {
    let (b, m, e) = delta.dims3()?;
    let n = match *a.shape() {
        [ae, n] if ae == e => n,
        _ => return Err(Error::dim("discretize", delta.shape(), a.shape())),
    };
    if b_proj.dims3()? != (b, m, n) {
        return Err(Error::dim("discretize", delta.shape(), b_proj.shape()));
    }
    Ok(Dims { b, m, e, n })
}

/// `(exp(dt·a) - 1) / a`, continuous through `a -> 0`.
fn zoh_factor(dt: f64, a: f64) -> f64 {
    let z = dt * a;
    if z.abs() < 1e-12 {
        dt
    } else {
        z.exp_m1() / a
    }
}

/// Convert `(Δ, A, B)` into `(Ā, B̄)`; `Ā = exp(ΔA)` in both modes.
pub fn discretize(delta: &Tensor, a: &Tensor, b_proj: &Tensor, mode: DiscretizationMode) -> Result<DiscreteParams> {
    let Dims { b, m, e, n } = check_step_shapes(delta, a, b_proj)?;
    let (dd, ad, bd) = (delta.data(), a.data(), b_proj.data());
    let mut a_bar = vec![0.0; b * m * e * n];
    let mut b_bar = vec![0.0; b * m * e * n];
    for row in 0..b * m {
        for ei in 0..e {
            let dt = dd[row * e + ei];
            for ni in 0..n {
                let av = ad[ei * n + ni];
                let idx = (row * e + ei) * n + ni;
                a_bar[idx] = (dt * av).exp();
                b_bar[idx] = match mode {
                    DiscretizationMode::Euler => dt,
                    DiscretizationMode::Zoh => zoh_factor(dt, av),
                } * bd[row * n + ni];
            }
        }
    }
    let shape = [b, m, e, n];
    Ok(DiscreteParams {
        a_bar: Tensor::new(&shape, a_bar)?,
        b_bar: Tensor::new(&shape, b_bar)?,
    })
}

fn check_scan_shapes(x: &Tensor, dp: &DiscreteParams, c_proj: &Tensor) -> Result<Dims> {
    let (b, m, e, n) = dp.dims()?;
    if x.dims3()? != (b, m, e) {
        return Err(Error::dim("selective_scan", x.shape(), dp.a_bar.shape()));
    }
    if c_proj.dims3()? != (b, m, n) {
        return Err(Error::dim("selective_scan", c_proj.shape(), dp.a_bar.shape()));
    }
    Ok(Dims { b, m, e, n })
}

/// Sequential recurrence from `h₀ = 0`:
/// `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = Σ_n C_t[n] h_t[n]`.
pub fn selective_scan_recurrent(x: &Tensor, dp: &DiscreteParams, c_proj: &Tensor) -> Result<Tensor> {
    Ok(scan_with_states(x, dp, c_proj, false)?.0)
}

/// Returns the output and, when requested, every hidden state `[B, M, E, N]`.
fn scan_with_states(x: &Tensor, dp: &DiscreteParams, c_proj: &Tensor, keep_states: bool) -> Result<(Tensor, Vec<f64>)> {
    let Dims { b, m, e, n } = check_scan_shapes(x, dp, c_proj)?;
    let (xd, ab, bb, cd) = (x.data(), dp.a_bar.data(), dp.b_bar.data(), c_proj.data());
    let mut y = vec![0.0; b * m * e];
    let mut states = if keep_states {
        vec![0.0; b * m * e * n]
    } else {
        Vec::new()
    };
    let mut h = vec![0.0; e * n];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..m {
            let row = bi * m + t;
            let c_t = &cd[row * n..(row + 1) * n];
            for ei in 0..e {
                let xv = xd[row * e + ei];
                let base = (row * e + ei) * n;
                let h_e = &mut h[ei * n..(ei + 1) * n];
                let mut acc = 0.0;
                for ni in 0..n {
                    h_e[ni] = ab[base + ni] * h_e[ni] + bb[base + ni] * xv;
                    acc += c_t[ni] * h_e[ni];
                }
                y[row * e + ei] = acc;
                if keep_states {
                    states[base..base + n].copy_from_slice(h_e);
                }
            }
        }
    }
    Ok((Tensor::new(&[b, m, e], y)?, states))
}

/// Element of the affine-map monoid `h -> a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPair {
    pub a: f64,
    pub b: f64,
}

impl ScanPair {
    pub const IDENTITY: ScanPair = ScanPair { a: 1.0, b: 0.0 };

    /// Apply `self` first, then `later`: `(a₁a₂, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, later: ScanPair) -> ScanPair {
        ScanPair {
            a: self.a * later.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// Work-efficient (Blelloch) inclusive scan under [`ScanPair::then`].
///
/// The input is padded to a power of two with the identity element.
pub fn blelloch_inclusive_scan(items: &[ScanPair]) -> Vec<ScanPair> {
    let len = items.len();
    if len == 0 {
        return Vec::new();
    }
    let size = len.next_power_of_two();
    let mut tree = items.to_vec();
    tree.resize(size, ScanPair::IDENTITY);

    // up-sweep: tree[i] holds the reduction of the subtree ending at i
    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = tree[i - stride].then(tree[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }

    // down-sweep to an exclusive scan
    tree[size - 1] = ScanPair::IDENTITY;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = tree[i].then(left);
            i += 2 * stride;
        }
        stride /= 2;
    }

    tree.truncate(len);
    tree.iter_mut()
        .zip(items)
        .for_each(|(prefix, &item)| *prefix = prefix.then(item));
    tree
}

/// Same result as [`selective_scan_recurrent`], computed per `(b, e, n)` lane
/// with [`blelloch_inclusive_scan`]. Lanes run in parallel; each lane's
/// bracketing is fixed, so results do not depend on the thread count.
pub fn selective_scan_parallel(x: &Tensor, dp: &DiscreteParams, c_proj: &Tensor) -> Result<Tensor> {
    let Dims { b, m, e, n } = check_scan_shapes(x, dp, c_proj)?;
    let (xd, ab, bb, cd) = (x.data(), dp.a_bar.data(), dp.b_bar.data(), c_proj.data());
    let lanes: Vec<Vec<f64>> = (0..b * e)
        .into_par_iter()
        .map(|lane| {
            let (bi, ei) = (lane / e, lane % e);
            let mut y = vec![0.0; m];
            let mut pairs = Vec::with_capacity(m);
            for ni in 0..n {
                pairs.clear();
                for t in 0..m {
                    let row = bi * m + t;
                    let idx = (row * e + ei) * n + ni;
                    pairs.push(ScanPair {
                        a: ab[idx],
                        b: bb[idx] * xd[row * e + ei],
                    });
                }
                for (t, h) in blelloch_inclusive_scan(&pairs).iter().enumerate() {
                    y[t] += cd[(bi * m + t) * n + ni] * h.b;
                }
            }
            y
        })
        .collect();
    let mut out = vec![0.0; b * m * e];
    for (lane, y) in lanes.iter().enumerate() {
        let (bi, ei) = (lane / e, lane % e);
        for (t, v) in y.iter().enumerate() {
            out[(bi * m + t) * e + ei] = *v;
        }
    }
    Tensor::new(&[b, m, e], out)
}

/// Unrolled kernel of a time-invariant SSM:
/// `K[e, k] = Σ_n C[n] Ā[e,n]^k B̄[e,n]` for `k < len`.
pub fn lti_kernel(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, len: usize) -> Result<Tensor> {
    let (e, n) = match *a_bar.shape() {
        [e, n] if b_bar.shape() == a_bar.shape() => (e, n),
        _ => return Err(Error::dim("lti_kernel", a_bar.shape(), b_bar.shape())),
    };
    if c.shape() != [n] {
        return Err(Error::dim("lti_kernel", a_bar.shape(), c.shape()));
    }
    let mut k = vec![0.0; e * len];
    for ei in 0..e {
        for ni in 0..n {
            let a = a_bar.data()[ei * n + ni];
            let mut term = c.data()[ni] * b_bar.data()[ei * n + ni];
            for kk in 0..len {
                k[ei * len + kk] += term;
                term *= a;
            }
        }
    }
    Tensor::new(&[e, len], k)
}

/// Causal convolution of `x: [B, M, E]` with per-channel kernels `[E, K]`:
/// `y[t] = Σ_{k ≤ t} K[k] x[t - k]`.
pub fn lti_convolve(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, m, e) = x.dims3()?;
    let klen = match *kernel.shape() {
        [ke, kl] if ke == e => kl,
        _ => return Err(Error::dim("lti_convolve", x.shape(), kernel.shape())),
    };
    let (xd, kd) = (x.data(), kernel.data());
    let mut y = vec![0.0; x.numel()];
    for bi in 0..b {
        for t in 0..m {
            for ei in 0..e {
                let mut acc = 0.0;
                for k in 0..=t.min(klen.saturating_sub(1)) {
                    acc += kd[ei * klen + k] * xd[(bi * m + t - k) * e + ei];
                }
                y[(bi * m + t) * e + ei] = acc;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Differentiable fused discretize + recurrent scan on a [`Graph`].
///
/// Inputs: `x [B,M,E]`, `delta [B,M,E]`, `a [E,N]`, `b_proj [B,M,N]`,
/// `c_proj [B,M,N]`.
pub fn selective_scan(
    g: &mut Graph,
    x: Var,
    delta: Var,
    a: Var,
    b_proj: Var,
    c_proj: Var,
    mode: DiscretizationMode,
) -> Result<Var> {
    let dp = discretize(g.value(delta), g.value(a), g.value(b_proj), mode)?;
    let (y, states) = scan_with_states(g.value(x), &dp, g.value(c_proj), true)?;
    let op = ScanOp { mode, dp, states };
    Ok(g.custom(&[x, delta, a, b_proj, c_proj], y, Box::new(op)))
}

struct ScanOp {
    mode: DiscretizationMode,
    dp: DiscreteParams,
    states: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [x, delta, a, b_proj, c_proj] = inputs else {
            unreachable!("scan takes five inputs");
        };
        let (b, m, e, n) = self.dp.dims().expect("validated in forward");
        let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b_proj.data(), c_proj.data());
        let (ab, bb, hs) = (self.dp.a_bar.data(), self.dp.b_bar.data(), &self.states);

        let mut gx = vec![0.0; x.numel()];
        let mut gdelta = vec![0.0; delta.numel()];
        let mut ga = vec![0.0; a.numel()];
        let mut gb = vec![0.0; b_proj.numel()];
        let mut gc = vec![0.0; c_proj.numel()];
        // adjoint of h_t, carried backwards in time
        let mut gh = vec![0.0; e * n];

        for bi in 0..b {
            gh.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..m).rev() {
                let row = bi * m + t;
                for ei in 0..e {
                    let base = (row * e + ei) * n;
                    let gyv = gy[row * e + ei];
                    let xv = xd[row * e + ei];
                    let dt = dd[row * e + ei];
                    let mut gxv = 0.0;
                    let mut gdt = 0.0;
                    for ni in 0..n {
                        let h = hs[base + ni];
                        gc[row * n + ni] += gyv * h;
                        // gh currently holds Ā_{t+1} ⊙ adj(h_{t+1})
                        let g = gh[ei * n + ni] + gyv * cd[row * n + ni];
                        let h_prev = if t > 0 { hs[base - e * n + ni] } else { 0.0 };
                        let av = ad[ei * n + ni];
                        let abar = ab[base + ni];

                        let g_abar = g * h_prev;
                        gdt += g_abar * abar * av;
                        ga[ei * n + ni] += g_abar * abar * dt;

                        let g_bbar = g * xv;
                        gxv += g * bb[base + ni];
                        let bp = bd[row * n + ni];
                        match self.mode {
                            DiscretizationMode::Euler => {
                                gdt += g_bbar * bp;
                                gb[row * n + ni] += g_bbar * dt;
                            }
                            DiscretizationMode::Zoh => {
                                let phi = zoh_factor(dt, av);
                                gdt += g_bbar * bp * abar;
                                let dphi_da = if (dt * av).abs() < 1e-12 {
                                    0.5 * dt * dt
                                } else {
                                    (dt * av * abar - (abar - 1.0)) / (av * av)
                                };
                                ga[ei * n + ni] += g_bbar * bp * dphi_da;
                                gb[row * n + ni] += g_bbar * phi;
                            }
                        }
                        gh[ei * n + ni] = g * abar;
                    }
                    gx[row * e + ei] = gxv;
                    gdelta[row * e + ei] = gdt;
                }
            }
        }
        vec![Some(gx), Some(gdelta), Some(ga), Some(gb), Some(gc)]
    }
}

/// `A_log[e, n]` such that `-exp(A_log)` is log-spaced over `[1, N]`.
pub fn init_a_log(e: usize, n: usize) -> Tensor {
    let top = (n as f64).ln();
    Tensor::from_fn(&[e, n], |i| {
        let ni = i % n;
        if n > 1 {
            top * ni as f64 / (n - 1) as f64
        } else {
            0.0
        }
    })
}

/// Bias whose softplus is log-uniform in `[1e-3, 1e-1]`.
pub fn init_delta_bias<R: Rng + ?Sized>(e: usize, rng: &mut R) -> Tensor {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    Tensor::from_fn(&[e], |_| {
        let dt: f64 = rng.random_range(lo..hi).exp();
        // inverse softplus
        dt + (-(-dt).exp_m1()).ln()
    })
}
