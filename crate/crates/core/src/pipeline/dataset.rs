use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{read_json, write_json};
use super::formats::{read_bag, write_bag, Manifest, ManifestPatient};
use crate::error::{Error, Result};
use crate::hierarchy::{Group, GroupingConfig, HierarchicalBag, Modality};
use crate::numerics::Tensor;
use crate::survstats::SurvivalOutcome;

pub const FOLD_COUNT: usize = 5;
pub const DEFAULT_TIME_BINS: usize = 4;
const DEFAULT_FOLD_SEED: u64 = 0;
const EXPRESSION_GROUP: &str = "expression";

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Raw patch embeddings, one group per region.
    pub histology: HierarchicalBag,
    /// Expression vector `[n_genes]`.
    pub expression: Tensor,
    pub time: f64,
    pub censored: bool,
    pub t_bin: usize,
}

impl PatientRecord {
    pub fn outcome(&self) -> SurvivalOutcome {
        SurvivalOutcome {
            time: self.time,
            event: !self.censored,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalDataset {
    pub records: Vec<PatientRecord>,
    pub grouping: GroupingConfig,
    /// `T + 1` edges; the last is `+inf`. Bin `k` is `(edges[k], edges[k+1]]`.
    pub bin_edges: Vec<f64>,
    pub folds: Vec<usize>,
}

impl SurvivalDataset {
    pub fn t_bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn histology_dim(&self) -> usize {
        self.records.first().map(|r| r.histology.dim()).unwrap_or(0)
    }

    pub fn gene_count(&self) -> usize {
        self.records.first().map(|r| r.expression.numel()).unwrap_or(0)
    }

    pub fn outcomes(&self) -> Vec<SurvivalOutcome> {
        self.records.iter().map(PatientRecord::outcome).collect()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    /// Recompute quantile bins for a different bin count.
    pub fn rebin(&mut self, t_bins: usize) -> Result<()> {
        let times: Vec<f64> = self.records.iter().map(|r| r.time).collect();
        let censored: Vec<bool> = self.records.iter().map(|r| r.censored).collect();
        let (edges, bins) = assign_bins(&times, &censored, t_bins)?;
        self.bin_edges = edges;
        for (r, b) in self.records.iter_mut().zip(bins) {
            r.t_bin = b;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        if self.folds.len() != self.records.len() {
            return Err(Error::config("fold assignment does not cover every record"));
        }
        if let Some(&f) = self.folds.iter().find(|&&f| f >= FOLD_COUNT) {
            return Err(Error::config(format!("fold {f} outside 0..{FOLD_COUNT}")));
        }
        check_edges(&self.bin_edges)?;
        let (d_raw, n_genes) = (self.histology_dim(), self.gene_count());
        let needed = self.grouping.min_gene_count();
        for r in &self.records {
            r.histology.validate().map_err(|e| Error::data(&r.id, e.to_string()))?;
            if r.histology.dim() != d_raw {
                return Err(Error::data(
                    &r.id,
                    format!("histology dim {} differs from {d_raw}", r.histology.dim()),
                ));
            }
            if r.expression.numel() != n_genes {
                return Err(Error::data(
                    &r.id,
                    format!("{} genes, other patients have {n_genes}", r.expression.numel()),
                ));
            }
            if r.expression.numel() < needed {
                return Err(Error::data(
                    &r.id,
                    format!(
                        "{} genes but the grouping references gene index {}",
                        r.expression.numel(),
                        needed - 1
                    ),
                ));
            }
            SurvivalOutcome::new(r.time, !r.censored).map_err(|e| Error::data(&r.id, e.to_string()))?;
            if r.t_bin != bin_of(r.time, &self.bin_edges) {
                return Err(Error::data(&r.id, "time bin does not match the bin edges"));
            }
        }
        Ok(())
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 3 {
        return Err(Error::config("need at least two time bins"));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config(format!(
            "bin edges must be strictly increasing: {edges:?}"
        )));
    }
    if *edges.last().unwrap() != f64::INFINITY {
        return Err(Error::config("last bin edge must be +inf"));
    }
    Ok(())
}

/// Index `k` with `edges[k] < time <= edges[k + 1]`; times on an edge fall
/// into the lower bin.
pub fn bin_of(time: f64, edges: &[f64]) -> usize {
    let interior = &edges[1..edges.len() - 1];
    interior.iter().filter(|&&e| e < time).count()
}

/// Linear-interpolation quantile of sorted data (position `q (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile bin edges over uncensored times and each record's bin.
pub fn assign_bins(times: &[f64], censored: &[bool], t_bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if t_bins < 2 {
        return Err(Error::config("need at least two time bins"));
    }
    let mut uncensored: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    if uncensored.len() < t_bins {
        return Err(Error::config(format!(
            "{} uncensored records cannot define {t_bins} quantile bins",
            uncensored.len()
        )));
    }
    uncensored.sort_by(|a, b| a.total_cmp(b));
    let mut edges = Vec::with_capacity(t_bins + 1);
    edges.push(0.0);
    for k in 1..t_bins {
        edges.push(quantile(&uncensored, k as f64 / t_bins as f64));
    }
    edges.push(f64::INFINITY);
    check_edges(&edges)?;
    let bins = times.iter().map(|&t| bin_of(t, &edges)).collect();
    Ok((edges, bins))
}

/// Seeded shuffle dealt round-robin into `k` folds.
pub fn k_fold_assign(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read a manifest and every file it references.
pub fn load_dataset(manifest_path: &Path) -> Result<SurvivalDataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let grouping_path = resolve(base, &manifest.grouping);
    let grouping: GroupingConfig = read_json(&grouping_path)?;
    grouping
        .validate()
        .map_err(|e| Error::parse(&grouping_path, e.to_string()))?;
    if manifest.patients.is_empty() {
        return Err(Error::parse(manifest_path, "manifest lists no patients"));
    }

    let mut records = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        records.push(load_patient(base, p, &grouping)?);
    }

    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let censored: Vec<bool> = records.iter().map(|r| r.censored).collect();
    let bin_edges = match &manifest.bins {
        Some(lower) => {
            let mut edges = lower.clone();
            edges.push(f64::INFINITY);
            check_edges(&edges).map_err(|e| Error::parse(manifest_path, e.to_string()))?;
            if edges[0] != 0.0 {
                return Err(Error::parse(manifest_path, "first bin edge must be 0"));
            }
            edges
        }
        None => assign_bins(&times, &censored, DEFAULT_TIME_BINS)?.0,
    };
    for r in &mut records {
        r.t_bin = bin_of(r.time, &bin_edges);
    }

    let folds = if manifest.patients.iter().all(|p| p.fold.is_some()) {
        manifest.patients.iter().map(|p| p.fold.unwrap()).collect()
    } else if manifest.patients.iter().any(|p| p.fold.is_some()) {
        return Err(Error::parse(
            manifest_path,
            "either every patient or none carries a fold",
        ));
    } else {
        k_fold_assign(records.len(), FOLD_COUNT, DEFAULT_FOLD_SEED)
    };

    let ds = SurvivalDataset {
        records,
        grouping,
        bin_edges,
        folds,
    };
    ds.validate()?;
    Ok(ds)
}

fn load_patient(base: &Path, p: &ManifestPatient, grouping: &GroupingConfig) -> Result<PatientRecord> {
    let read = |rel: &Path| {
        let path = resolve(base, rel);
        if !path.exists() {
            return Err(Error::data(&p.id, format!("missing file {}", path.display())));
        }
        read_bag(&path).map_err(|e| Error::data(&p.id, e.to_string()))
    };
    let hist = read(&p.histology)?;
    if hist.is_empty() {
        return Err(Error::data(&p.id, "histology bag has no regions"));
    }
    let groups = hist
        .into_iter()
        .map(|(id, tokens)| {
            if tokens.shape()[0] == 0 {
                return Err(Error::data(&p.id, format!("region {id} has no patches")));
            }
            Ok(Group { id, tokens })
        })
        .collect::<Result<Vec<_>>>()?;
    let histology = HierarchicalBag::new(Modality::Histology, groups).map_err(|e| Error::data(&p.id, e.to_string()))?;

    let gen = read(&p.genomics)?;
    let expression = match gen.as_slice() {
        [(_, t)] if t.shape()[0] == 1 => Tensor::from_vec(t.data().to_vec()),
        _ => {
            return Err(Error::data(
                &p.id,
                format!(
                    "genomics bag must hold one group with one expression row, found shape {:?}",
                    gen.iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>()
                ),
            ))
        }
    };
    for f in &grouping.functions {
        if let Some(&bad) = f.genes.iter().find(|&&g| g >= expression.numel()) {
            return Err(Error::data(
                &p.id,
                format!(
                    "function {} references gene {bad} but only {} genes are present",
                    f.id,
                    expression.numel()
                ),
            ));
        }
    }
    if !(p.time_months > 0.0) {
        return Err(Error::data(
            &p.id,
            format!("time_months must be positive, got {}", p.time_months),
        ));
    }
    Ok(PatientRecord {
        id: p.id.clone(),
        histology,
        expression,
        time: p.time_months,
        censored: p.censored,
        t_bin: 0,
    })
}

/// Write the dataset as a manifest directory; returns the manifest path.
pub fn save_dataset(ds: &SurvivalDataset, dir: &Path) -> Result<PathBuf> {
    let patients_dir = dir.join("patients");
    std::fs::create_dir_all(&patients_dir).map_err(|e| Error::io(&patients_dir, e))?;
    write_json(&dir.join("grouping.json"), &ds.grouping)?;
    let mut patients = Vec::with_capacity(ds.records.len());
    for (r, &fold) in ds.records.iter().zip(&ds.folds) {
        let hist = PathBuf::from("patients").join(format!("{}.hist.smb", r.id));
        let gen = PathBuf::from("patients").join(format!("{}.gen.smb", r.id));
        let regions: Vec<(String, Tensor)> = r
            .histology
            .groups
            .iter()
            .map(|g| (g.id.clone(), g.tokens.clone()))
            .collect();
        write_bag(&dir.join(&hist), &regions)?;
        let expr = r.expression.clone().reshape(&[1, r.expression.numel()])?;
        write_bag(&dir.join(&gen), &[(EXPRESSION_GROUP.to_string(), expr)])?;
        patients.push(ManifestPatient {
            id: r.id.clone(),
            histology: hist,
            genomics: gen,
            time_months: r.time,
            censored: r.censored,
            fold: Some(fold),
        });
    }
    let manifest = Manifest {
        patients,
        grouping: PathBuf::from("grouping.json"),
        bins: Some(ds.bin_edges[..ds.bin_edges.len() - 1].to_vec()),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
