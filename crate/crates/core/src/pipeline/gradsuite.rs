use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::model::SurvMambaModel;
use super::synth::{synth_generate, SynthSpec};
use crate::blocks::{BiMambaBlock, IfmBlock};
use crate::error::{Error, Result};
use crate::fusion::{survival_nll_var, AlphaParam, HazardHead};
use crate::hierarchy::Him;
use crate::nn::LAYER_NORM_EPS;
use crate::numerics::{grad_check_sampled, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{self, DiscretizationMode};

pub const PRIMITIVE_STEP: f64 = 1e-6;
pub const COMPOSITE_STEP: f64 = 3e-4;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Primitives,
    BiMamba,
    Ifm,
    Him,
    Head,
    Pipeline,
}

impl GradModule {
    pub const ALL: [GradModule; 6] = [
        GradModule::Primitives,
        GradModule::BiMamba,
        GradModule::Ifm,
        GradModule::Him,
        GradModule::Head,
        GradModule::Pipeline,
    ];

    pub fn step(self) -> f64 {
        match self {
            Self::Primitives => PRIMITIVE_STEP,
            _ => COMPOSITE_STEP,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Self::Primitives => PRIMITIVE_TOLERANCE,
            _ => COMPOSITE_TOLERANCE,
        }
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown gradcheck module {s:?}")))
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Primitives => "primitives",
            Self::BiMamba => "bimamba",
            Self::Ifm => "ifm",
            Self::Him => "him",
            Self::Head => "head",
            Self::Pipeline => "pipeline",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub module: GradModule,
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.module.tolerance()
    }
}

/// Entry cap per parameter tensor; `None` checks every entry.
#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub max_entries: Option<usize>,
    pub seed: u64,
}

/// Perturb every parameter. Δ biases are redrawn around 0.5 so step sizes
/// are of order one and no gradient is vanishingly small.
pub fn perturb_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let noise = Normal::new(0.0, scale).expect("positive scale");
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let redraw = store.name(id).ends_with("delta_bias");
        for v in store.get_mut(id).data_mut() {
            *v = if redraw { 0.5 } else { *v } + noise.sample(rng);
        }
    }
}

/// `Σ w ⊙ y` with fixed random weights, so no output entry cancels another.
fn probe(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn weights_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

struct Runner {
    module: GradModule,
    opts: SuiteOptions,
    cases: Vec<GradCase>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, store: &mut ParamStore, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check_sampled(store, &ids, self.module.step(), self.opts.max_entries, f)?;
        self.cases.push(GradCase {
            module: self.module,
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

fn primitives(r: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let (b, m, c) = (1, 5, 3);
    let tok = [b, m, c];

    type Unary = fn(&mut Graph, Var) -> Var;
    let unary: [(&str, Unary); 4] = [
        ("silu", Graph::silu),
        ("softplus", Graph::softplus),
        ("sigmoid", Graph::sigmoid),
        ("neg_exp", Graph::neg_exp),
    ];
    for (name, op) in unary {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::randn(&tok, rng))?;
        let w = weights_for(&tok, rng);
        r.check(name, &mut store, |g, s| {
            let xv = g.param(s, x);
            let y = op(g, xv);
            probe(g, y, &w)
        })?;
    }

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::randn(&tok, rng))?;
    let wt = store.register("w", Tensor::randn(&[c, 4], rng))?;
    let bias = store.register("b", Tensor::randn(&[4], rng))?;
    let w = weights_for(&[b, m, 4], rng);
    r.check("linear", &mut store, |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, wt), g.param(s, bias));
        let y = g.linear(xv, wv, Some(bv))?;
        probe(g, y, &w)
    })?;

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::randn(&tok, rng))?;
    let gamma = store.register("gamma", Tensor::randn(&[c], rng))?;
    let beta = store.register("beta", Tensor::randn(&[c], rng))?;
    let w = weights_for(&tok, rng);
    r.check("layer_norm", &mut store, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS)?;
        probe(g, y, &w)
    })?;

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::randn(&tok, rng))?;
    let kernel = store.register("kernel", Tensor::randn(&[c, 3], rng))?;
    let bias = store.register("bias", Tensor::randn(&[c], rng))?;
    let w = weights_for(&tok, rng);
    r.check("causal_conv", &mut store, |g, s| {
        let (xv, kv, bv) = (g.param(s, x), g.param(s, kernel), g.param(s, bias));
        let y = g.causal_conv(xv, kv, bv)?;
        probe(g, y, &w)
    })?;

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::randn(&tok, rng))?;
    let y2 = store.register("y", Tensor::randn(&tok, rng))?;
    let alpha = store.register("alpha", Tensor::scalar(0.3))?;
    let w = weights_for(&tok, rng);
    let w_tok = weights_for(&[b, 1, c], rng);
    let w_seg = weights_for(&[b, 2, c], rng);
    let w_cat = weights_for(&[b, 2 * m, c], rng);
    let w_ch = weights_for(&[b, m, 2 * c], rng);
    r.check("token_ops", &mut store, |g, s| {
        let (xv, yv, av) = (g.param(s, x), g.param(s, y2), g.param(s, alpha));
        let rev = g.reverse(xv)?;
        let sum = g.add(rev, yv)?;
        let prod = g.mul(sum, xv)?;
        let mut total = probe(g, prod, &w)?;
        let mean = g.mean_tokens(xv)?;
        let max = g.max_tokens(yv)?;
        let mix = g.lerp(av, mean, max)?;
        let seg = g.segment_mean(yv, &[3, 2])?;
        let cat = g.concat_tokens(&[xv, yv])?;
        let ch = g.concat_channels(&[xv, yv])?;
        for (v, wt) in [(mix, &w_tok), (seg, &w_seg), (cat, &w_cat), (ch, &w_ch)] {
            let p = probe(g, v, wt)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    })?;

    for mode in [DiscretizationMode::Euler, DiscretizationMode::Zoh] {
        let (e, n) = (3, 2);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::randn(&[b, m, e], rng))?;
        let delta = store.register("delta", Tensor::uniform(&[b, m, e], 1.0, rng).map(|v| 0.2 + 0.15 * v))?;
        let a = store.register("a", Tensor::uniform(&[e, n], 1.0, rng).map(|v| -1.0 + 0.5 * v))?;
        let bp = store.register("b_proj", Tensor::randn(&[b, m, n], rng))?;
        let cp = store.register("c_proj", Tensor::randn(&[b, m, n], rng))?;
        let w = weights_for(&[b, m, e], rng);
        r.check(&format!("selective_scan_{mode}"), &mut store, |g, s| {
            let vars = [x, delta, a, bp, cp].map(|id| g.param(s, id));
            let y = ssm::selective_scan(g, vars[0], vars[1], vars[2], vars[3], vars[4], mode)?;
            probe(g, y, &w)
        })?;
    }

    for (t_bin, censored) in [(0, false), (1, false), (2, true), (0, true)] {
        let mut store = ParamStore::new();
        let h = store.register("hazards", Tensor::uniform(&[3], 1.0, rng).map(|v| 0.5 + 0.4 * v))?;
        r.check(
            &format!("survival_nll_t{t_bin}_{}", if censored { "censored" } else { "event" }),
            &mut store,
            |g, s| {
                let hv = g.param(s, h);
                survival_nll_var(g, hv, t_bin, censored)
            },
        )?;
    }
    Ok(())
}

fn block_cases(r: &mut Runner, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let dims = cfg.dims();
    let m = 6;
    match r.module {
        GradModule::BiMamba => {
            let mut store = ParamStore::new();
            let block = BiMambaBlock::new(&mut store, "block", dims, cfg.mode, rng)?;
            perturb_params(&mut store, rng, 0.3);
            let x = store.register("input", Tensor::randn(&[1, m, dims.d], rng))?;
            let w = weights_for(&[1, m, dims.d], rng);
            r.check("bi_mamba", &mut store, |g, s| {
                let xv = g.param(s, x);
                let y = block.forward(g, s, xv)?;
                probe(g, y, &w)
            })
        }
        GradModule::Ifm => {
            let mut store = ParamStore::new();
            let block = IfmBlock::new(&mut store, "ifm", dims, cfg.mode, rng)?;
            perturb_params(&mut store, rng, 0.3);
            let a = store.register("input_a", Tensor::randn(&[1, m, dims.d], rng))?;
            let b = store.register("input_b", Tensor::randn(&[1, m, dims.d], rng))?;
            let w = weights_for(&[1, m, dims.d], rng);
            r.check("ifm", &mut store, |g, s| {
                let (av, bv) = (g.param(s, a), g.param(s, b));
                let y = block.forward(g, s, av, bv)?;
                probe(g, y, &w)
            })
        }
        GradModule::Him => {
            let mut store = ParamStore::new();
            let him = Him::new(&mut store, "him", dims, cfg.depth, cfg.pool, cfg.mode, rng)?;
            perturb_params(&mut store, rng, 0.3);
            let groups = [3, 1, 4]
                .iter()
                .enumerate()
                .map(|(i, &k)| store.register(format!("group{i}"), Tensor::randn(&[1, k, dims.d], rng)))
                .collect::<Result<Vec<_>>>()?;
            let w_fine = weights_for(&[1, 8, dims.d], rng);
            let w_coarse = weights_for(&[1, 3, dims.d], rng);
            r.check("him", &mut store, |g, s| {
                let vars: Vec<Var> = groups.iter().map(|&id| g.param(s, id)).collect();
                let fine = him.fine_forward(g, s, &vars)?;
                let coarse = him.coarse_forward(g, s, &fine)?;
                let cat = g.concat_tokens(&fine)?;
                let a = probe(g, cat, &w_fine)?;
                let b = probe(g, coarse, &w_coarse)?;
                g.add(a, b)
            })
        }
        GradModule::Head => {
            let mut store = ParamStore::new();
            let head = HazardHead::new(&mut store, "head", dims.d, cfg.t_bins, rng)?;
            let alpha = AlphaParam::new(&mut store, "alpha", 0.4)?;
            let hf = store.register("h_fine", Tensor::randn(&[1, 1, dims.d], rng))?;
            let hc = store.register("h_coarse", Tensor::randn(&[1, 1, dims.d], rng))?;
            let t_bin = cfg.t_bins / 2;
            for censored in [false, true] {
                let name = if censored { "head_censored" } else { "head_event" };
                r.check(name, &mut store, |g, s| {
                    let (a, b) = (g.param(s, hf), g.param(s, hc));
                    let h = alpha.fuse(g, s, a, b)?;
                    let hz = head.forward(g, s, h)?;
                    survival_nll_var(g, hz, t_bin, censored)
                })?;
            }
            Ok(())
        }
        _ => unreachable!("not a block module"),
    }
}

/// Two patients, one censored, through the full model.
fn pipeline_case(r: &mut Runner, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let spec = SynthSpec {
        n_patients: 2,
        regions: 3,
        patches_per_region: 3,
        d_raw: 3,
        planted_dims: 1,
        processes: 3,
        functions_per_process: 2,
        genes: 8,
        genes_per_function: 2,
        noise: 0.5,
        censoring_rate: 0.0,
        t_bins: 2,
        ..SynthSpec::default()
    };
    let mut ds = synth_generate(&spec, r.opts.seed)?.dataset;
    ds.records[1].censored = true;
    let cfg = ModelConfig {
        t_bins: ds.t_bins(),
        ..cfg.clone()
    };
    let mut model = SurvMambaModel::new(&cfg, ds.histology_dim(), &ds.grouping, r.opts.seed)?;
    perturb_params(&mut model.store, rng, 0.3);
    let mut store = std::mem::take(&mut model.store);
    r.check("pipeline", &mut store, |g, s| {
        let mut total = model.loss(g, s, &ds.records[0])?;
        for rec in &ds.records[1..] {
            let l = model.loss(g, s, rec)?;
            total = g.add(total, l)?;
        }
        Ok(total)
    })
}

/// Run every case of `module` at the dims of `cfg`.
pub fn run_gradcheck(module: GradModule, cfg: &ModelConfig, opts: SuiteOptions) -> Result<Vec<GradCase>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut r = Runner {
        module,
        opts,
        cases: Vec::new(),
    };
    match module {
        GradModule::Primitives => primitives(&mut r, &mut rng)?,
        GradModule::Pipeline => pipeline_case(&mut r, cfg, &mut rng)?,
        _ => block_cases(&mut r, cfg, &mut rng)?,
    }
    Ok(r.cases)
}

/// Small dims that keep a full (unsampled) check fast.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        e: 8,
        n: 2,
        w: 2,
        t_bins: 3,
        hidden: 2,
        ..ModelConfig::default()
    }
}
