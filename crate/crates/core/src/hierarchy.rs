//! Two-level bags and the hierarchical interaction stage.
//!
//! Histology: regions (groups) of patches (tokens) in raster order.
//! Genomics: processes (groups) of functions (tokens) in catalog order.
//! The scans are order-sensitive, so both orders are part of the data contract.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{as_rank3, BiMambaBlock, BlockDims};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::ssm::DiscretizationMode;

pub const DEFAULT_FUNCTION_COUNT: usize = 352;
pub const DEFAULT_PROCESS_COUNT: usize = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Histology,
    Genomics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub id: String,
    /// `[K, D]`
    pub tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalBag {
    pub modality: Modality,
    pub groups: Vec<Group>,
}

impl HierarchicalBag {
    pub fn new(modality: Modality, groups: Vec<Group>) -> Result<Self> {
        let bag = Self { modality, groups };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.groups.first() else {
            return Err(Error::config("bag has no groups"));
        };
        let dim = first.tokens.last_dim();
        for group in &self.groups {
            match *group.tokens.shape() {
                [k, d] if k >= 1 && d == dim => {}
                _ => {
                    return Err(Error::config(format!(
                        "group {} has shape {:?}, expected [K>=1, {dim}]",
                        group.id,
                        group.tokens.shape()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.groups[0].tokens.last_dim()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.tokens.shape()[0]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Process {
    pub id: String,
    pub functions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub id: String,
    pub genes: Vec<usize>,
}

/// Process -> function -> gene membership. A gene may belong to several
/// functions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub processes: Vec<Process>,
    pub functions: Vec<Function>,
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.processes.is_empty() {
            return Err(Error::config("grouping has no processes"));
        }
        let known: HashMap<&str, &Function> = self.functions.iter().map(|f| (f.id.as_str(), f)).collect();
        if known.len() != self.functions.len() {
            return Err(Error::config("grouping has duplicate function ids"));
        }
        for f in &self.functions {
            if f.genes.is_empty() {
                return Err(Error::config(format!("function {} has no genes", f.id)));
            }
        }
        for p in &self.processes {
            if p.functions.is_empty() {
                return Err(Error::config(format!("process {} has no functions", p.id)));
            }
            for fid in &p.functions {
                if !known.contains_key(fid.as_str()) {
                    return Err(Error::config(format!(
                        "process {} references unknown function id {fid}",
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn function(&self, id: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.id == id)
    }

    /// Largest gene index referenced, plus one.
    pub fn min_gene_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| f.genes.iter())
            .map(|&i| i + 1)
            .max()
            .unwrap_or(0)
    }

    /// Function ids in token order (process by process).
    pub fn token_order(&self) -> Vec<&str> {
        self.processes
            .iter()
            .flat_map(|p| p.functions.iter().map(String::as_str))
            .collect()
    }

    /// Random catalog: each process owns `functions_per_process` fresh
    /// functions of `genes_per_function` distinct genes drawn from `n_genes`.
    pub fn random<R: Rng + ?Sized>(
        n_processes: usize,
        functions_per_process: usize,
        n_genes: usize,
        genes_per_function: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if genes_per_function == 0 || genes_per_function > n_genes {
            return Err(Error::config(format!(
                "cannot draw {genes_per_function} genes per function from {n_genes}"
            )));
        }
        let mut processes = Vec::with_capacity(n_processes);
        let mut functions = Vec::new();
        for p in 0..n_processes {
            let mut members = Vec::with_capacity(functions_per_process);
            for _ in 0..functions_per_process {
                let id = format!("F{:03}", functions.len());
                let mut genes = sample(rng, n_genes, genes_per_function).into_vec();
                genes.sort_unstable();
                members.push(id.clone());
                functions.push(Function { id, genes });
            }
            processes.push(Process {
                id: format!("P{p:02}"),
                functions: members,
            });
        }
        let cfg = Self { processes, functions };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear projection of patch embeddings to the model width.
#[derive(Clone, Debug)]
pub struct HistologyEncoder {
    pub projection: Linear,
}

impl HistologyEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_raw: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            projection: Linear::new(store, &format!("{name}.projection"), d_raw, d, true, Init::FanIn, rng)?,
        })
    }

    /// One `[1, K, D]` variable per region.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, regions: &HierarchicalBag) -> Result<Vec<Var>> {
        if regions.dim() != self.projection.d_in {
            return Err(Error::dim(
                "encode_histology",
                &[regions.dim()],
                &[self.projection.d_in, self.projection.d_out],
            ));
        }
        regions
            .groups
            .iter()
            .map(|group| {
                let x = g.constant(as_rank3(&group.tokens)?);
                self.projection.forward(g, store, x)
            })
            .collect()
    }
}

/// Project raw patch embeddings; regions become groups in the given order.
pub fn encode_histology(
    regions: &[(String, Tensor)],
    encoder: &HistologyEncoder,
    store: &ParamStore,
) -> Result<HierarchicalBag> {
    let mut groups = Vec::with_capacity(regions.len());
    for (id, feats) in regions {
        if feats.rank() != 2 || feats.shape()[0] == 0 {
            return Err(Error::data("-", format!("region {id} is empty or not a matrix")));
        }
        groups.push(Group {
            id: id.clone(),
            tokens: feats.clone(),
        });
    }
    let raw = HierarchicalBag::new(Modality::Histology, groups)?;
    let mut g = Graph::new();
    let vars = encoder.forward(&mut g, store, &raw)?;
    let groups = raw
        .groups
        .iter()
        .zip(vars)
        .map(|(grp, v)| {
            let (_, k, d) = g.value(v).dims3()?;
            Ok(Group {
                id: grp.id.clone(),
                tokens: g.value(v).clone().reshape(&[k, d])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HierarchicalBag::new(Modality::Histology, groups)
}

/// Per-function two-layer MLP (`genes -> hidden -> D`, SiLU between).
#[derive(Clone, Debug)]
pub struct GenomicsEncoder {
    pub mlps: Vec<(String, Linear, Linear)>,
}

impl GenomicsEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        grouping: &GroupingConfig,
        hidden: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        grouping.validate()?;
        let mut mlps = Vec::with_capacity(grouping.functions.len());
        for f in &grouping.functions {
            let base = format!("{name}.{}", f.id);
            let fc1 = Linear::new(
                store,
                &format!("{base}.fc1"),
                f.genes.len(),
                hidden,
                true,
                Init::FanIn,
                rng,
            )?;
            let fc2 = Linear::new(store, &format!("{base}.fc2"), hidden, d, true, Init::FanIn, rng)?;
            mlps.push((f.id.clone(), fc1, fc2));
        }
        Ok(Self { mlps })
    }

    fn mlp(&self, id: &str) -> Option<(&Linear, &Linear)> {
        self.mlps.iter().find(|(f, ..)| f == id).map(|(_, a, b)| (a, b))
    }

    /// One `[1, K_j, D]` variable per process.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        expr: &Tensor,
        grouping: &GroupingConfig,
    ) -> Result<Vec<Var>> {
        let n_genes = expr.numel();
        let mut tokens: HashMap<&str, Var> = HashMap::new();
        let mut out = Vec::with_capacity(grouping.processes.len());
        for p in &grouping.processes {
            let mut members = Vec::with_capacity(p.functions.len());
            for fid in &p.functions {
                if let Some(&v) = tokens.get(fid.as_str()) {
                    members.push(v);
                    continue;
                }
                let f = grouping
                    .function(fid)
                    .ok_or_else(|| Error::config(format!("unknown function id {fid}")))?;
                let (fc1, fc2) = self
                    .mlp(fid)
                    .ok_or_else(|| Error::config(format!("no encoder for function {fid}")))?;
                let mut gathered = Vec::with_capacity(f.genes.len());
                for &i in &f.genes {
                    let v = *expr.data().get(i).ok_or_else(|| Error::GeneOutOfRange {
                        function: fid.clone(),
                        index: i,
                        n_genes,
                    })?;
                    gathered.push(v);
                }
                let x = g.constant(Tensor::new(&[1, 1, gathered.len()], gathered)?);
                let hidden = fc1.forward(g, store, x)?;
                let act = g.silu(hidden);
                let token = fc2.forward(g, store, act)?;
                tokens.insert(fid.as_str(), token);
                members.push(token);
            }
            out.push(g.concat_tokens(&members)?);
        }
        Ok(out)
    }
}

/// Encode an expression vector into a process/function bag.
pub fn encode_genomics(
    expr: &Tensor,
    grouping: &GroupingConfig,
    encoder: &GenomicsEncoder,
    store: &ParamStore,
) -> Result<HierarchicalBag> {
    let mut g = Graph::new();
    let vars = encoder.forward(&mut g, store, expr, grouping)?;
    let groups = grouping
        .processes
        .iter()
        .zip(vars)
        .map(|(p, v)| {
            let (_, k, d) = g.value(v).dims3()?;
            Ok(Group {
                id: p.id.clone(),
                tokens: g.value(v).clone().reshape(&[k, d])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HierarchicalBag::new(Modality::Genomics, groups)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

/// Refined fine tokens per group and the coarse group-level sequence.
#[derive(Clone, Debug)]
pub struct HimOutput {
    /// `[K_g, D]` per group.
    pub fine: Vec<Tensor>,
    /// `[G, D]`
    pub coarse: Tensor,
}

/// Shared fine-level Bi-Mamba stack applied within each group, pooling, and a
/// coarse-level stack over the pooled group tokens.
#[derive(Clone, Debug)]
pub struct Him {
    pub fine: Vec<BiMambaBlock>,
    pub coarse: Vec<BiMambaBlock>,
    pub pool: PoolMode,
}

impl Him {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: BlockDims,
        depth: usize,
        pool: PoolMode,
        mode: DiscretizationMode,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("HIM depth must be at least 1"));
        }
        let stack = |level: &str, store: &mut ParamStore, rng: &mut R| -> Result<Vec<BiMambaBlock>> {
            (0..depth)
                .map(|l| {
                    let n = if depth == 1 {
                        format!("{name}.{level}")
                    } else {
                        format!("{name}.{level}.{l}")
                    };
                    BiMambaBlock::new(store, &n, dims, mode, rng)
                })
                .collect()
        };
        let fine = stack("fine", store, rng)?;
        let coarse = stack("coarse", store, rng)?;
        Ok(Self { fine, coarse, pool })
    }

    pub fn fine_forward(&self, g: &mut Graph, store: &ParamStore, groups: &[Var]) -> Result<Vec<Var>> {
        groups.iter().map(|&grp| run_stack(&self.fine, g, store, grp)).collect()
    }

    /// Pool each refined group to one token and run the coarse stack: `[1, G, D]`.
    pub fn coarse_forward(&self, g: &mut Graph, store: &ParamStore, refined: &[Var]) -> Result<Var> {
        let pooled = pool_groups(g, refined, self.pool)?;
        run_stack(&self.coarse, g, store, pooled)
    }
}

fn run_stack(stack: &[BiMambaBlock], g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
    for block in stack {
        x = block.forward(g, store, x)?;
    }
    Ok(x)
}

fn pool_groups(g: &mut Graph, refined: &[Var], pool: PoolMode) -> Result<Var> {
    if refined.is_empty() {
        return Err(Error::config("coarse level needs at least one group"));
    }
    let pooled = refined
        .iter()
        .map(|&v| match pool {
            PoolMode::Mean => g.mean_tokens(v),
            PoolMode::Max => g.max_tokens(v),
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_tokens(&pooled)
}

/// Apply one shared block independently to every group.
pub fn him_fine(bag: &HierarchicalBag, block: &BiMambaBlock, store: &ParamStore) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    bag.groups
        .iter()
        .map(|grp| {
            let x = g.constant(as_rank3(&grp.tokens)?);
            let y = block.forward(&mut g, store, x)?;
            g.value(y).clone().reshape(grp.tokens.shape())
        })
        .collect()
}

/// Pool each refined group and run `block` over the `G` pooled tokens: `[G, D]`.
pub fn him_coarse(refined: &[Tensor], pool: PoolMode, block: &BiMambaBlock, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = refined
        .iter()
        .map(|t| Ok(g.constant(as_rank3(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_groups(&mut g, &vars, pool)?;
    let y = block.forward(&mut g, store, pooled)?;
    let (_, gcount, d) = g.value(y).dims3()?;
    g.value(y).clone().reshape(&[gcount, d])
}

/// Both levels with single blocks.
pub fn him_forward(
    bag: &HierarchicalBag,
    fine: &BiMambaBlock,
    coarse: &BiMambaBlock,
    pool: PoolMode,
    store: &ParamStore,
) -> Result<HimOutput> {
    let fine_out = him_fine(bag, fine, store)?;
    let coarse_out = him_coarse(&fine_out, pool, coarse, store)?;
    Ok(HimOutput {
        fine: fine_out,
        coarse: coarse_out,
    })
}
