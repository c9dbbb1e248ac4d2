//! Independent oracles shared by the integration tests. Everything here is a
//! direct loop-level transcription over `Vec<Vec<f64>>` rows and reads
//! parameters only by name, so it shares no code path with the library.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use survmamba::hierarchy::{GroupingConfig, DEFAULT_FUNCTION_COUNT, DEFAULT_PROCESS_COUNT};
use survmamba::numerics::{ParamStore, Tensor};
use survmamba::pipeline::gradsuite::toy_config;
use survmamba::pipeline::{synth_generate, ModelConfig, SynthSpec};
use survmamba::survstats::SurvivalOutcome;

pub type Rows = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;

pub fn rows_of(t: &Tensor) -> Rows {
    let c = t.last_dim();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data()
        .to_vec()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

/// `x W + b` with `W` stored `[d_in, d_out]` row-major.
pub fn affine(x: &Rows, store: &ParamStore, name: &str, bias: bool) -> Rows {
    let w = param(store, &format!("{name}.weight"));
    let b = if bias {
        param(store, &format!("{name}.bias"))
    } else {
        Vec::new()
    };
    let d_in = x[0].len();
    let d_out = w.len() / d_in;
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|o| {
                    let mut acc = if bias { b[o] } else { 0.0 };
                    for i in 0..d_in {
                        acc += row[i] * w[i * d_out + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Rows, store: &ParamStore, name: &str) -> Rows {
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Zero left padding; tap `w-1` multiplies the current step.
fn causal_conv(x: &Rows, kernel: &[f64], bias: &[f64]) -> Rows {
    let e = bias.len();
    let w = kernel.len() / e;
    (0..x.len())
        .map(|t| {
            (0..e)
                .map(|c| {
                    let mut acc = bias[c];
                    for k in 0..w {
                        let back = w - 1 - k;
                        if t >= back {
                            acc += kernel[c * w + k] * x[t - back][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Sequential recurrence from a zero state over one `(E, N)` sequence:
/// `h = exp(Δ a) h + B̄ x`, `y = C · h`, with `B̄ = Δ B` (Euler) or
/// `(exp(Δ a) - 1) / a · B` (ZOH).
pub fn scan(x: &Rows, delta: &Rows, a: &[f64], b: &Rows, c: &Rows, zoh: bool) -> Rows {
    let e = x[0].len();
    let n = b[0].len();
    let mut h = vec![vec![0.0; n]; e];
    let mut out = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let mut y = vec![0.0; e];
        for ch in 0..e {
            let dt = delta[t][ch];
            for s in 0..n {
                let av = a[ch * n + s];
                let a_bar = (dt * av).exp();
                let b_bar = if zoh { (a_bar - 1.0) / av } else { dt } * b[t][s];
                h[ch][s] = a_bar * h[ch][s] + b_bar * x[t][ch];
                y[ch] += c[t][s] * h[ch][s];
            }
        }
        out.push(y);
    }
    out
}

/// One SSM branch: conv, SiLU, `(B, C, Δ)` projections, scan.
fn ssm_branch(x: &Rows, store: &ParamStore, name: &str, zoh: bool) -> Rows {
    let conv = causal_conv(
        x,
        &param(store, &format!("{name}.conv.weight")),
        &param(store, &format!("{name}.conv.bias")),
    );
    let xc: Rows = conv.iter().map(|r| r.iter().map(|&v| silu(v)).collect()).collect();
    let b = affine(&xc, store, &format!("{name}.linear_b"), true);
    let c = affine(&xc, store, &format!("{name}.linear_c"), true);
    let delta_bias = param(store, &format!("{name}.delta_bias"));
    let delta: Rows = affine(&xc, store, &format!("{name}.linear_delta"), false)
        .iter()
        .map(|r| r.iter().zip(&delta_bias).map(|(v, bb)| softplus(v + bb)).collect())
        .collect();
    let a: Vec<f64> = param(store, &format!("{name}.a_log"))
        .iter()
        .map(|v| -v.exp())
        .collect();
    scan(&xc, &delta, &a, &b, &c, zoh)
}

fn reversed(x: &Rows) -> Rows {
    x.iter().rev().cloned().collect()
}

/// Bi-Mamba block registered under `name`, one sequence `[M, D]`.
pub fn bi_mamba(t: &Rows, store: &ParamStore, name: &str, zoh: bool) -> Rows {
    let normed = layer_norm(t, store, &format!("{name}.norm"));
    let x = affine(&normed, store, &format!("{name}.linear_x"), true);
    let z = affine(&normed, store, &format!("{name}.linear_z"), true);
    let y_fwd = ssm_branch(&x, store, &format!("{name}.fwd"), zoh);
    let y_bwd = reversed(&ssm_branch(&reversed(&x), store, &format!("{name}.bwd"), zoh));
    let mixed: Rows = (0..t.len())
        .map(|i| {
            (0..z[i].len())
                .map(|j| y_fwd[i][j] * silu(z[i][j]) + y_bwd[i][j] * silu(z[i][j]))
                .collect()
        })
        .collect();
    let out = affine(&mixed, store, &format!("{name}.linear_out"), true);
    out.iter()
        .zip(t)
        .map(|(o, r)| o.iter().zip(r).map(|(a, b)| a + b).collect())
        .collect()
}

/// Interaction fusion block registered under `name`.
pub fn ifm(t1: &Rows, t2: &Rows, store: &ParamStore, name: &str, zoh: bool) -> Rows {
    let half = |t: &Rows, side: &str| {
        let normed = layer_norm(t, store, &format!("{name}.{side}.norm"));
        let x = affine(&normed, store, &format!("{name}.{side}.linear_x"), true);
        let z = affine(&normed, store, &format!("{name}.{side}.linear_z"), true);
        (ssm_branch(&x, store, &format!("{name}.{side}.ssm"), zoh), z)
    };
    let (y1, z1) = half(t1, "a1");
    let (y2, z2) = half(t2, "a2");
    let cat: Rows = (0..t1.len())
        .map(|i| {
            let mut row: Vec<f64> = y1[i].iter().zip(&z2[i]).map(|(y, z)| y * silu(*z)).collect();
            row.extend(y2[i].iter().zip(&z1[i]).map(|(y, z)| y * silu(*z)));
            row
        })
        .collect();
    affine(&cat, store, &format!("{name}.linear_out"), true)
}

/// Harrell's c-index by enumerating every ordered pair.
pub fn brute_cindex(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if outcomes[i].event && outcomes[i].time < outcomes[j].time {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Parameter count of the whole model, expanded by hand from the layer list:
///
/// - SSM branch: conv `E W + E`, `B` and `C` projections `2 (E N + N)`,
///   `Δ` projection `E E`, `Δ` bias `E`, `A_log` `E N`
/// - Bi-Mamba: norm `2 D`, `x`/`z` projections `2 (D E + E)`, two branches,
///   output `E D + D`
/// - IFM: per modality norm + `x`/`z` projections + one branch, output `2 E D + D`
/// - model: histology projection, one MLP per function, four Bi-Mamba
///   stacks of `depth`, two IFM blocks, `α`, hazard head
pub fn closed_form_params(cfg: &ModelConfig, d_raw: usize, grouping: &GroupingConfig) -> usize {
    let (d, e, n, w, h, t) = (cfg.d, cfg.e, cfg.n, cfg.w, cfg.hidden, cfg.t_bins);
    let branch = e * e + 3 * e * n + e * w + 2 * e + 2 * n;
    let bi_mamba = 3 * d * e + 3 * d + 2 * e + 2 * branch;
    let ifm = 6 * d * e + 5 * d + 4 * e + 2 * branch;
    let genomics: usize = grouping
        .functions
        .iter()
        .map(|f| (f.genes.len() + 1) * h + (h + 1) * d)
        .sum();
    (d_raw + 1) * d + genomics + 4 * cfg.depth * bi_mamba + 2 * ifm + 1 + (d + 1) * t
}

/// A 30-patient cohort small enough for per-test training.
pub fn small_spec() -> SynthSpec {
    SynthSpec {
        n_patients: 30,
        patches_per_region: 3,
        d_raw: 6,
        planted_dims: 2,
        processes: 3,
        functions_per_process: 2,
        genes: 24,
        genes_per_function: 3,
        ..SynthSpec::default()
    }
}

pub fn wide_grouping() -> GroupingConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // 42 processes x 8 functions = 336, the closest even split of 352
    let per_process = DEFAULT_FUNCTION_COUNT / DEFAULT_PROCESS_COUNT;
    GroupingConfig::random(DEFAULT_PROCESS_COUNT, per_process, 2000, 20, &mut rng).unwrap()
}

/// Configurations whose parameter counts are pinned in the README.
pub fn documented_configs() -> Vec<(&'static str, ModelConfig, usize, GroupingConfig)> {
    let synth = synth_generate(
        &SynthSpec {
            n_patients: 10,
            ..SynthSpec::default()
        },
        7,
    )
    .unwrap()
    .dataset;
    let toy = synth_generate(&small_spec(), 1).unwrap().dataset;
    vec![
        ("toy", toy_config(), toy.histology_dim(), toy.grouping),
        (
            "synthetic",
            ModelConfig {
                d: 32,
                e: 64,
                n: 8,
                ..ModelConfig::default()
            },
            synth.histology_dim(),
            synth.grouping,
        ),
        (
            "default-wide",
            ModelConfig {
                depth: 2,
                ..ModelConfig::default()
            },
            768,
            wide_grouping(),
        ),
    ]
}
