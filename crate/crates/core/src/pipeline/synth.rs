use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::read_json;
use super::dataset::{assign_bins, k_fold_assign, PatientRecord, SurvivalDataset, DEFAULT_TIME_BINS, FOLD_COUNT};
use crate::error::{Error, Result};
use crate::hierarchy::{Group, GroupingConfig, HierarchicalBag, Modality};
use crate::numerics::Tensor;

/// Synthetic cohort description. The latent risk factor is planted in the
/// first `planted_dims` features of every patch of region 0 and in every gene
/// of function `F000`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub regions: usize,
    pub patches_per_region: usize,
    pub d_raw: usize,
    pub planted_dims: usize,
    pub processes: usize,
    pub functions_per_process: usize,
    pub genes: usize,
    pub genes_per_function: usize,
    pub beta: f64,
    pub noise: f64,
    pub censoring_rate: f64,
    /// Baseline exponential rate per month.
    pub base_rate: f64,
    pub t_bins: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 500,
            regions: 4,
            patches_per_region: 16,
            d_raw: 32,
            planted_dims: 8,
            processes: 8,
            functions_per_process: 4,
            genes: 256,
            genes_per_function: 8,
            beta: 2.0,
            noise: 0.1,
            censoring_rate: 0.3,
            base_rate: 0.03,
            t_bins: DEFAULT_TIME_BINS,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("regions", self.regions),
            ("patches_per_region", self.patches_per_region),
            ("d_raw", self.d_raw),
            ("planted_dims", self.planted_dims),
            ("processes", self.processes),
            ("functions_per_process", self.functions_per_process),
            ("genes", self.genes),
            ("genes_per_function", self.genes_per_function),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.planted_dims > self.d_raw {
            return Err(Error::config("planted_dims exceeds d_raw"));
        }
        if self.genes_per_function > self.genes {
            return Err(Error::config("genes_per_function exceeds genes"));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::config("censoring_rate must lie in [0, 1)"));
        }
        if !(self.base_rate > 0.0) || !self.beta.is_finite() || !(self.noise >= 0.0) {
            return Err(Error::config(
                "base_rate must be positive, beta finite, noise non-negative",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub dataset: SurvivalDataset,
    /// Planted risk factor per patient.
    pub latent: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grouping = GroupingConfig::random(
        spec.processes,
        spec.functions_per_process,
        spec.genes,
        spec.genes_per_function,
        &mut rng,
    )?;
    let mut planted_gene = vec![false; spec.genes];
    for &g in &grouping.functions[0].genes {
        planted_gene[g] = true;
    }

    let mut records = Vec::with_capacity(spec.n_patients);
    let mut latent = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let u = normal(&mut rng);
        let groups = (0..spec.regions)
            .map(|r| {
                let tokens = Tensor::from_fn(&[spec.patches_per_region, spec.d_raw], |k| {
                    let shift = if r == 0 && k % spec.d_raw < spec.planted_dims {
                        u
                    } else {
                        0.0
                    };
                    shift + spec.noise * normal(&mut rng)
                });
                Group {
                    id: format!("R{r}"),
                    tokens,
                }
            })
            .collect();
        let histology = HierarchicalBag::new(Modality::Histology, groups)?;
        let expression = Tensor::from_fn(&[spec.genes], |g| {
            let shift = if planted_gene[g] { u } else { 0.0 };
            shift + spec.noise * normal(&mut rng)
        });

        let rate = spec.base_rate * (spec.beta * u).exp();
        let event_time = -(1.0 - rng.random::<f64>()).ln() / rate;
        let censored = rng.random::<f64>() < spec.censoring_rate;
        let time = if censored {
            (1.0 - rng.random::<f64>()) * event_time
        } else {
            event_time
        };
        records.push(PatientRecord {
            id: format!("S{i:04}"),
            histology,
            expression,
            time,
            censored,
            t_bin: 0,
        });
        latent.push(u);
    }

    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let censored: Vec<bool> = records.iter().map(|r| r.censored).collect();
    let (bin_edges, bins) = assign_bins(&times, &censored, spec.t_bins)?;
    for (r, b) in records.iter_mut().zip(bins) {
        r.t_bin = b;
    }
    let folds = k_fold_assign(records.len(), FOLD_COUNT, seed);
    let dataset = SurvivalDataset {
        records,
        grouping,
        bin_edges,
        folds,
    };
    dataset.validate()?;
    Ok(SynthCohort { dataset, latent })
}
