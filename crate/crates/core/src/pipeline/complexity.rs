use serde::Serialize;

use super::config::ModelConfig;
use super::model::SurvMambaModel;
use crate::blocks::{BiMambaBlock, BlockDims, IfmBlock};
use crate::hierarchy::GroupingConfig;

/// Parameter counts per component, from closed forms only.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamAudit {
    pub histology_encoder: usize,
    pub genomics_encoder: usize,
    pub him: usize,
    pub ifm: usize,
    pub alpha: usize,
    pub head: usize,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.histology_encoder + self.genomics_encoder + self.him + self.ifm + self.alpha + self.head
    }
}

/// Linear map with bias.
fn affine(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

pub fn param_audit(cfg: &ModelConfig, d_raw: usize, grouping: &GroupingConfig) -> ParamAudit {
    let dims = cfg.dims();
    let genomics_encoder = grouping
        .functions
        .iter()
        .map(|f| affine(f.genes.len(), cfg.hidden) + affine(cfg.hidden, cfg.d))
        .sum();
    ParamAudit {
        histology_encoder: affine(d_raw, cfg.d),
        genomics_encoder,
        // two modalities, fine and coarse stacks each
        him: 2 * 2 * cfg.depth * BiMambaBlock::param_count(dims),
        ifm: 2 * IfmBlock::param_count(dims),
        alpha: 1,
        head: affine(cfg.d, cfg.t_bins),
    }
}

/// Multiply-add counts (2 per MAC) for one patient forward pass.
///
/// - linear `[rows, in] -> [rows, out]`: `2 rows in out`
/// - layer norm: `5 rows D`
/// - causal conv: `2 M E W`
/// - selective scan: `6 M E N` (discretise, recur, read out)
/// - gates and residuals: one op per element touched
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    pub linear: u64,
    pub norm: u64,
    pub conv: u64,
    pub scan: u64,
    pub elementwise: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.linear + self.norm + self.conv + self.scan + self.elementwise
    }

    fn add(&mut self, o: &FlopBreakdown) {
        self.linear += o.linear;
        self.norm += o.norm;
        self.conv += o.conv;
        self.scan += o.scan;
        self.elementwise += o.elementwise;
    }
}

fn lin(rows: usize, d_in: usize, d_out: usize) -> u64 {
    (2 * rows * d_in * d_out) as u64
}

/// Conv, `(B, C, Δ)` projections and scan of one branch over `m` tokens.
fn branch_flops(dims: BlockDims, m: usize) -> FlopBreakdown {
    let BlockDims { e, n, w, .. } = dims;
    FlopBreakdown {
        linear: 2 * lin(m, e, n) + lin(m, e, e),
        conv: (2 * m * e * w) as u64,
        scan: (6 * m * e * n) as u64,
        // SiLU after the conv, softplus on Δ
        elementwise: (2 * m * e) as u64,
        ..Default::default()
    }
}

pub fn bi_mamba_flops(dims: BlockDims, m: usize) -> FlopBreakdown {
    let BlockDims { d, e, .. } = dims;
    let mut f = FlopBreakdown {
        linear: 2 * lin(m, d, e) + lin(m, e, d),
        norm: (5 * m * d) as u64,
        // SiLU(z), two gates, direction sum, residual
        elementwise: (4 * m * e + m * d) as u64,
        ..Default::default()
    };
    let b = branch_flops(dims, m);
    f.add(&b);
    f.add(&b);
    f
}

pub fn ifm_flops(dims: BlockDims, m: usize) -> FlopBreakdown {
    let BlockDims { d, e, .. } = dims;
    let mut f = FlopBreakdown {
        linear: 2 * (2 * lin(m, d, e)) + lin(m, 2 * e, d),
        norm: (2 * 5 * m * d) as u64,
        elementwise: (4 * m * e) as u64,
        ..Default::default()
    };
    let b = branch_flops(dims, m);
    f.add(&b);
    f.add(&b);
    f
}

/// Estimate for a patient with the given region sizes (patches per region).
pub fn flops_estimate(
    cfg: &ModelConfig,
    d_raw: usize,
    grouping: &GroupingConfig,
    region_sizes: &[usize],
) -> FlopBreakdown {
    let dims = cfg.dims();
    let mut f = FlopBreakdown::default();
    let patches: usize = region_sizes.iter().sum();
    f.linear += lin(patches, d_raw, cfg.d);
    for func in &grouping.functions {
        f.linear += lin(1, func.genes.len(), cfg.hidden) + lin(1, cfg.hidden, cfg.d);
        f.elementwise += cfg.hidden as u64;
    }
    let process_sizes: Vec<usize> = grouping.processes.iter().map(|p| p.functions.len()).collect();
    for sizes in [region_sizes, process_sizes.as_slice()] {
        for _ in 0..cfg.depth {
            for &m in sizes {
                f.add(&bi_mamba_flops(dims, m));
            }
            f.add(&bi_mamba_flops(dims, sizes.len()));
        }
    }
    let genomic_tokens: usize = process_sizes.iter().sum();
    let fine_len = cfg.align_len.min(patches).min(genomic_tokens);
    let coarse_len = region_sizes.len().min(process_sizes.len());
    f.add(&ifm_flops(dims, fine_len));
    f.add(&ifm_flops(dims, coarse_len));
    f.linear += lin(1, cfg.d, cfg.t_bins);
    f.elementwise += (3 * cfg.d + 2 * cfg.t_bins) as u64;
    f
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    /// Enumerated from the parameter registry.
    pub param_count: usize,
    pub audit: ParamAudit,
    pub flops: FlopBreakdown,
}

pub fn report_complexity(model: &SurvMambaModel, region_sizes: &[usize]) -> ComplexityReport {
    ComplexityReport {
        param_count: model.store.numel(),
        audit: param_audit(&model.config, model.d_raw, &model.grouping),
        flops: flops_estimate(&model.config, model.d_raw, &model.grouping, region_sizes),
    }
}
