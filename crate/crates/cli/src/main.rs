use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use survmamba::pipeline::bench::{format_bench, scan_bench, ScanMode};
use survmamba::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use survmamba::pipeline::complexity::report_complexity;
use survmamba::pipeline::gradsuite::{run_gradcheck, GradModule, SuiteOptions};
use survmamba::pipeline::train::{evaluate, km_table, stratify, train};
use survmamba::pipeline::{load_dataset, save_dataset, synth_generate, SurvMambaModel, SynthSpec, TrainConfig};
use survmamba::survstats::{concordance_index, SurvivalOutcome};

#[derive(Parser)]
#[command(
    name = "survmamba",
    version,
    about = "Multimodal survival model over histology and genomics bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted risk factor
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every fold except `--fold` and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the held-out fold: c-index, log-rank p, KM table
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        ckpt: PathBuf,
        /// KM table destination; defaults to `<ckpt>.fold<K>.km.csv`
        #[arg(long)]
        km_out: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients against finite differences
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// primitives, bimamba, ifm, him, head or pipeline; all when omitted
        #[arg(long)]
        module: Option<GradModule>,
        /// Check at most this many entries per parameter tensor
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Time the scan modes on a time-invariant instance
    ScanBench {
        #[arg(long, default_value_t = 1024)]
        len: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        /// Repeat to select several; all modes when omitted
        #[arg(long)]
        mode: Vec<ScanMode>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Median-split KM curves and log-rank test for given risks
    Km {
        #[arg(long)]
        risks: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
    },
    /// Parameter count, closed-form audit and FLOP estimate
    Complexity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { spec, seed, out } => {
            let spec = SynthSpec::load(&spec)?;
            let cohort = synth_generate(&spec, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let manifest = save_dataset(&cohort.dataset, &out)?;
            let mut latent = String::from("id,u\n");
            for (r, u) in cohort.dataset.records.iter().zip(&cohort.latent) {
                latent.push_str(&format!("{},{u:?}\n", r.id));
            }
            fs::write(out.join("latent.csv"), latent)?;
            let events = cohort.dataset.records.iter().filter(|r| !r.censored).count();
            println!(
                "wrote {} patients ({events} events) to {}",
                cohort.dataset.records.len(),
                manifest.display()
            );
        }
        Command::Train {
            data,
            fold,
            config,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let mut ds = load_dataset(&data)?;
            if ds.t_bins() != cfg.model.t_bins {
                ds.rebin(cfg.model.t_bins)?;
            }
            let result = train(&ds, fold, &cfg)?;
            for (epoch, loss) in result.losses.iter().enumerate() {
                println!("epoch {} loss {loss:.6}", epoch + 1);
            }
            save_checkpoint(&result.model, &out)?;
            println!("saved {} parameters to {}", result.model.param_count(), out.display());
        }
        Command::Eval {
            data,
            fold,
            ckpt,
            km_out,
        } => {
            let ds = load_dataset(&data)?;
            let model = load_checkpoint(&ckpt, ds.histology_dim(), &ds.grouping)?;
            let report = evaluate(&model, &ds, fold)?;
            match report.c_index {
                Some(c) => println!("c_index {c:.6}"),
                None => println!("c_index undefined ({})", report.diagnostic.unwrap_or_default()),
            }
            match report.logrank {
                Some(lr) => println!("logrank chi2 {:.6} p {:.6e}", lr.chi2, lr.p_value),
                None => println!("logrank undefined (one risk stratum is empty)"),
            }
            let km_path = km_out.unwrap_or_else(|| suffixed(&ckpt, &format!(".fold{fold}.km.csv")));
            fs::write(&km_path, km_table(&report.km_low, &report.km_high))
                .with_context(|| format!("writing {}", km_path.display()))?;
            println!("km table {}", km_path.display());
        }
        Command::Gradcheck {
            config,
            module,
            max_entries,
            seed,
        } => {
            let cfg = TrainConfig::load(&config)?.model;
            let modules = module.map_or_else(|| GradModule::ALL.to_vec(), |m| vec![m]);
            let mut failed = 0;
            println!(
                "{:<12} {:<28} {:>10} {:>12} {:>10}  worst",
                "module", "case", "entries", "max_rel", "tol"
            );
            for m in modules {
                for case in run_gradcheck(m, &cfg, SuiteOptions { max_entries, seed })? {
                    let r = &case.report;
                    let worst = r.worst.as_ref().map_or(String::new(), |(n, k)| format!("{n}[{k}]"));
                    println!(
                        "{:<12} {:<28} {:>10} {:>12.3e} {:>10.0e}  {worst}{}",
                        m,
                        case.name,
                        r.entries_checked,
                        r.max_rel_error,
                        m.tolerance(),
                        if case.passed() { "" } else { "  FAIL" }
                    );
                    failed += usize::from(!case.passed());
                }
            }
            if failed > 0 {
                println!("{failed} case(s) above tolerance");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ScanBench {
            len,
            channels,
            state,
            mode,
            reps,
        } => {
            let modes = if mode.is_empty() { ScanMode::ALL.to_vec() } else { mode };
            print!("{}", format_bench(&scan_bench(len, channels, state, &modes, reps)?));
        }
        Command::Km { risks, outcomes } => {
            let risks = read_risks(&risks)?;
            let outcomes = read_outcomes(&outcomes)?;
            if risks.len() != outcomes.len() {
                bail!("{} risks but {} outcomes", risks.len(), outcomes.len());
            }
            let (groups, low, high, logrank) = stratify(&risks, &outcomes)?;
            print!("{}", km_table(&low, &high));
            let n_high = groups
                .iter()
                .filter(|g| **g == survmamba::survstats::RiskGroup::High)
                .count();
            let c =
                concordance_index(&risks, &outcomes).map_or_else(|e| format!("undefined ({e})"), |c| format!("{c:.6}"));
            match logrank {
                Some(lr) => println!(
                    "# logrank chi2={:.6} p={:.6e} n_low={} n_high={n_high} c_index={c}",
                    lr.chi2,
                    lr.p_value,
                    groups.len() - n_high
                ),
                None => println!(
                    "# logrank undefined n_low={} n_high={n_high} c_index={c}",
                    groups.len() - n_high
                ),
            }
        }
        Command::Complexity { data, config } => {
            let cfg = TrainConfig::load(&config)?.model;
            let ds = load_dataset(&data)?;
            let model = SurvMambaModel::new(&cfg, ds.histology_dim(), &ds.grouping, 0)?;
            let regions = ds.records[0].histology.group_sizes();
            let report = report_complexity(&model, &regions);
            println!("params {} (closed form {})", report.param_count, report.audit.total());
            let a = &report.audit;
            for (name, v) in [
                ("histology_encoder", a.histology_encoder),
                ("genomics_encoder", a.genomics_encoder),
                ("him", a.him),
                ("ifm", a.ifm),
                ("alpha", a.alpha),
                ("head", a.head),
            ] {
                println!("  {name:<18} {v}");
            }
            let f = &report.flops;
            println!("flops {} for regions {regions:?}", f.total());
            for (name, v) in [
                ("linear", f.linear),
                ("norm", f.norm),
                ("conv", f.conv),
                ("scan", f.scan),
                ("elementwise", f.elementwise),
            ] {
                println!("  {name:<18} {v}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Numeric rows of a comma or whitespace delimited file; `#` comments and a
/// non-numeric header line are skipped.
fn numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Vec<Option<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        if rows.is_empty() && i == 0 && parsed.iter().all(Option::is_none) {
            continue;
        }
        // a leading id column is allowed
        let skip = usize::from(parsed.first().is_some_and(Option::is_none));
        let row: Option<Vec<f64>> = parsed[skip..].iter().copied().collect();
        match row {
            Some(v) if !v.is_empty() => rows.push(v),
            _ => bail!("{}:{}: not numeric: {line}", path.display(), i + 1),
        }
    }
    Ok(rows)
}

fn read_risks(path: &Path) -> Result<Vec<f64>> {
    numeric_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.last()
                .copied()
                .with_context(|| format!("{}: row {} is empty", path.display(), i + 1))
        })
        .collect()
}

/// Rows end with `time event` (event 1, censored 0).
fn read_outcomes(path: &Path) -> Result<Vec<SurvivalOutcome>> {
    numeric_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let [.., time, event] = row[..] else {
                bail!("{}: row {} needs `time event`", path.display(), i + 1);
            };
            let event = match event {
                1.0 => true,
                0.0 => false,
                other => bail!("{}: row {}: event must be 0 or 1, got {other}", path.display(), i + 1),
            };
            Ok(SurvivalOutcome::new(time, event)?)
        })
        .collect()
}
