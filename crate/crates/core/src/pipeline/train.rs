use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::dataset::{SurvivalDataset, FOLD_COUNT};
use super::model::{RiskModel, SurvMambaModel};
use super::radam::{radam_step, RadamConfig, RadamState};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph};
use crate::survstats::{
    concordance_index, kaplan_meier, logrank_test, risk_stratify, KmCurve, LogRankResult, RiskGroup, SurvivalOutcome,
};

pub const THREADS_ENV: &str = "SURVMAMBA_THREADS";
const SHUFFLE_STREAM: u64 = 0x5eed;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SurvMambaModel,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn check_fold(fold: usize) -> Result<()> {
    if fold >= FOLD_COUNT {
        return Err(Error::config(format!("fold {fold} outside 0..{FOLD_COUNT}")));
    }
    Ok(())
}

/// Fit on every record outside `fold`, one optimizer step per batch in a
/// seeded shuffle order.
pub fn train(dataset: &SurvivalDataset, fold: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_fold(fold)?;
    if cfg.model.t_bins != dataset.t_bins() {
        return Err(Error::config(format!(
            "model has {} time bins, dataset has {}",
            cfg.model.t_bins,
            dataset.t_bins()
        )));
    }
    let mut model = SurvMambaModel::new(&cfg.model, dataset.histology_dim(), &dataset.grouping, cfg.seed)?;
    let mut order = dataset.train_indices(fold);
    if order.is_empty() {
        return Err(Error::config(format!("no training records outside fold {fold}")));
    }
    let opt = RadamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut state = RadamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &i in batch {
                let record = &dataset.records[i];
                let mut g = Graph::new();
                let loss = model.loss(&mut g, &model.store, record)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite loss {value} for patient {}",
                        record.id
                    )));
                }
                total += value;
                grads.merge(g.backward(loss)?.into_params());
            }
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f64;
                grads = grads.scaled(scale);
            }
            radam_step(&mut model.store, &grads, &mut state, &opt);
        }
        losses.push(total / order.len() as f64);
    }
    Ok(TrainOutcome { model, losses })
}

/// Thread count from `SURVMAMBA_THREADS`, else the number of cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub risks: Vec<f64>,
    pub outcomes: Vec<SurvivalOutcome>,
    /// `None` when no pair is comparable; see [`Self::diagnostic`].
    pub c_index: Option<f64>,
    pub diagnostic: Option<String>,
    pub groups: Vec<RiskGroup>,
    pub km_low: KmCurve,
    pub km_high: KmCurve,
    /// `None` when one stratum is empty.
    pub logrank: Option<LogRankResult>,
}

/// Risks for every record of `fold`, computed in parallel.
pub fn predict_fold(model: &dyn RiskModel, dataset: &SurvivalDataset, fold: usize) -> Result<Vec<(usize, f64)>> {
    check_fold(fold)?;
    let idx = dataset.fold_indices(fold);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        idx.par_iter()
            .map(|&i| Ok((i, model.risk(&dataset.records[i])?)))
            .collect()
    })
}

pub fn evaluate(model: &dyn RiskModel, dataset: &SurvivalDataset, fold: usize) -> Result<EvalReport> {
    let scored = predict_fold(model, dataset, fold)?;
    if scored.is_empty() {
        return Err(Error::config(format!("fold {fold} is empty")));
    }
    let ids = scored.iter().map(|&(i, _)| dataset.records[i].id.clone()).collect();
    let risks: Vec<f64> = scored.iter().map(|&(_, r)| r).collect();
    let outcomes: Vec<SurvivalOutcome> = scored.iter().map(|&(i, _)| dataset.records[i].outcome()).collect();
    if let Some(p) = risks.iter().position(|r| !r.is_finite()) {
        return Err(Error::Evaluation(format!(
            "non-finite risk for patient {}",
            dataset.records[scored[p].0].id
        )));
    }
    let (c_index, diagnostic) = match concordance_index(&risks, &outcomes) {
        Ok(c) => (Some(c), None),
        Err(Error::Undefined(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    report_strata(ids, risks, outcomes, c_index, diagnostic)
}

/// Median split, KM per stratum and the log-rank test between them.
pub fn stratify(
    risks: &[f64],
    outcomes: &[SurvivalOutcome],
) -> Result<(Vec<RiskGroup>, KmCurve, KmCurve, Option<LogRankResult>)> {
    let groups = risk_stratify(risks)?;
    let pick = |want: RiskGroup| -> Vec<SurvivalOutcome> {
        outcomes
            .iter()
            .zip(&groups)
            .filter(|(_, &g)| g == want)
            .map(|(o, _)| *o)
            .collect()
    };
    let (low, high) = (pick(RiskGroup::Low), pick(RiskGroup::High));
    let logrank = if low.is_empty() || high.is_empty() {
        None
    } else {
        Some(logrank_test(&low, &high)?)
    };
    Ok((groups, kaplan_meier(&low), kaplan_meier(&high), logrank))
}

fn report_strata(
    ids: Vec<String>,
    risks: Vec<f64>,
    outcomes: Vec<SurvivalOutcome>,
    c_index: Option<f64>,
    diagnostic: Option<String>,
) -> Result<EvalReport> {
    let (groups, km_low, km_high, logrank) = stratify(&risks, &outcomes)?;
    Ok(EvalReport {
        ids,
        risks,
        outcomes,
        c_index,
        diagnostic,
        groups,
        km_low,
        km_high,
        logrank,
    })
}

/// Delimited KM table: `group,time,at_risk,events,survival`.
pub fn km_table(low: &KmCurve, high: &KmCurve) -> String {
    let mut out = String::from("group,time,at_risk,events,survival\n");
    for (name, curve) in [("low", low), ("high", high)] {
        for k in 0..curve.times.len() {
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                curve.times[k], curve.at_risk[k], curve.events[k], curve.survival[k]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::PatientRecord;
    use crate::pipeline::synth::{synth_generate, SynthSpec};

    fn tiny() -> SurvivalDataset {
        let spec = SynthSpec {
            n_patients: 30,
            regions: 2,
            patches_per_region: 3,
            d_raw: 4,
            planted_dims: 2,
            processes: 2,
            functions_per_process: 2,
            genes: 16,
            genes_per_function: 3,
            ..SynthSpec::default()
        };
        synth_generate(&spec, 1).unwrap().dataset
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs,
            seed: 3,
            ..TrainConfig::default()
        };
        cfg.model.d = 4;
        cfg.model.e = 8;
        cfg.model.n = 2;
        cfg.model.hidden = 4;
        cfg
    }

    #[test]
    fn zero_epochs_is_initialisation() {
        let ds = tiny();
        let out = train(&ds, 0, &small_cfg(0)).unwrap();
        assert!(out.losses.is_empty());
        let fresh = SurvMambaModel::new(&small_cfg(0).model, 4, &ds.grouping, 3).unwrap();
        assert_eq!(out.model.store.to_parameters(), fresh.store.to_parameters());
    }

    #[test]
    fn seeded_training_repeats() {
        let ds = tiny();
        let a = train(&ds, 1, &small_cfg(2)).unwrap();
        let b = train(&ds, 1, &small_cfg(2)).unwrap();
        assert_eq!(a.losses.len(), 2);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn constant_risk_gives_half() {
        let ds = tiny();
        let constant = |_: &PatientRecord| 1.0;
        let report = evaluate(&constant, &ds, 0).unwrap();
        assert_eq!(report.c_index, Some(0.5));
        // every subject lands in the low stratum
        assert!(report.logrank.is_none());
    }

    #[test]
    fn identical_strata_give_p_one() {
        let o: Vec<SurvivalOutcome> = [1.0, 2.0, 1.0, 2.0]
            .iter()
            .map(|&t| SurvivalOutcome::new(t, true).unwrap())
            .collect();
        let (_, _, _, lr) = stratify(&[0.0, 0.0, 1.0, 1.0], &o).unwrap();
        assert_eq!(lr.unwrap().p_value, 1.0);
    }
}
