use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssm::{
    discretize, lti_convolve, lti_kernel, selective_scan_parallel, selective_scan_recurrent, DiscreteParams,
    DiscretizationMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Recurrent,
    Parallel,
    Conv,
}

impl ScanMode {
    pub const ALL: [ScanMode; 3] = [ScanMode::Recurrent, ScanMode::Parallel, ScanMode::Conv];
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Self::Recurrent),
            "parallel" => Ok(Self::Parallel),
            "conv" => Ok(Self::Conv),
            other => Err(Error::config(format!("unknown scan mode {other:?}"))),
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Recurrent => "recurrent",
            Self::Parallel => "parallel",
            Self::Conv => "conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: ScanMode,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub reps: usize,
    pub median_secs: f64,
    pub min_secs: f64,
    /// Max absolute deviation from the recurrent output.
    pub max_dev: f64,
}

/// Time-invariant instance so all three modes apply.
struct Instance {
    x: Tensor,
    dp: DiscreteParams,
    c: Tensor,
    a_bar: Tensor,
    b_bar: Tensor,
    c_vec: Tensor,
}

fn instance(len: usize, channels: usize, state: usize, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[channels, state], |_| -rng.random_range(0.1..1.0));
    let dt: Vec<f64> = (0..channels).map(|_| rng.random_range(0.01..0.5)).collect();
    let bv: Vec<f64> = (0..state).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..state).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_fn(&[1, len, channels], |_| rng.random_range(-1.0..1.0));
    let delta = Tensor::from_fn(&[1, len, channels], |k| dt[k % channels]);
    let b = Tensor::from_fn(&[1, len, state], |k| bv[k % state]);
    let c = Tensor::from_fn(&[1, len, state], |k| cv[k % state]);
    let dp = discretize(&delta, &a, &b, DiscretizationMode::Euler)?;
    let a_bar = Tensor::from_fn(&[channels, state], |k| (dt[k / state] * a.data()[k]).exp());
    let b_bar = Tensor::from_fn(&[channels, state], |k| dt[k / state] * bv[k % state]);
    Ok(Instance {
        x,
        dp,
        c,
        a_bar,
        b_bar,
        c_vec: Tensor::from_vec(cv),
    })
}

fn run(mode: ScanMode, inst: &Instance) -> Result<Tensor> {
    match mode {
        ScanMode::Recurrent => selective_scan_recurrent(&inst.x, &inst.dp, &inst.c),
        ScanMode::Parallel => selective_scan_parallel(&inst.x, &inst.dp, &inst.c),
        ScanMode::Conv => {
            let len = inst.x.shape()[1];
            let k = lti_kernel(&inst.a_bar, &inst.b_bar, &inst.c_vec, len)?;
            lti_convolve(&inst.x, &k)
        }
    }
}

/// Median wall time over `reps` runs of each mode on one seeded instance.
pub fn scan_bench(len: usize, channels: usize, state: usize, modes: &[ScanMode], reps: usize) -> Result<Vec<BenchRow>> {
    if len == 0 || channels == 0 || state == 0 || reps == 0 {
        return Err(Error::config("len, channels, state and reps must be positive"));
    }
    let inst = instance(len, channels, state, 0)?;
    let reference = run(ScanMode::Recurrent, &inst)?;
    modes
        .iter()
        .map(|&mode| {
            let mut times = Vec::with_capacity(reps);
            let mut max_dev: f64 = 0.0;
            for _ in 0..reps {
                let start = Instant::now();
                let y = run(mode, &inst)?;
                times.push(start.elapsed().as_secs_f64());
                max_dev = max_dev.max(y.max_abs_diff(&reference));
            }
            times.sort_by(|a, b| a.total_cmp(b));
            Ok(BenchRow {
                mode,
                len,
                channels,
                state,
                reps,
                median_secs: times[reps / 2],
                min_secs: times[0],
                max_dev,
            })
        })
        .collect()
}

/// Human-readable table followed by one `key=value` line per row.
pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>8} {:>6} {:>5} {:>14} {:>12}\n",
        "mode", "len", "channels", "state", "reps", "median_ms", "max_dev"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>6} {:>5} {:>14.4} {:>12.3e}\n",
            r.mode,
            r.len,
            r.channels,
            r.state,
            r.reps,
            r.median_secs * 1e3,
            r.max_dev
        ));
    }
    for r in rows {
        out.push_str(&format!(
            "bench mode={} len={} channels={} state={} reps={} median_secs={:e} min_secs={:e} max_dev={:e}\n",
            r.mode, r.len, r.channels, r.state, r.reps, r.median_secs, r.min_secs, r.max_dev
        ));
    }
    out
}

/// Least-squares fit `y = a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (my - slope * mx, slope, r2)
}
