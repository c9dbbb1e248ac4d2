//! Data formats, synthetic cohorts, optimisation, training and evaluation.

pub mod bench;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod dataset;
pub mod formats;
pub mod gradsuite;
pub mod model;
pub mod radam;
pub mod synth;
pub mod train;

pub use bench::{format_bench, scan_bench, BenchRow, ScanMode};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use complexity::{param_audit, report_complexity, ComplexityReport, FlopBreakdown, ParamAudit};
pub use config::{ModelConfig, TrainConfig};
pub use dataset::{assign_bins, k_fold_assign, load_dataset, save_dataset, PatientRecord, SurvivalDataset};
pub use formats::{read_bag, write_bag, Manifest, ManifestPatient};
pub use gradsuite::{run_gradcheck, GradCase, GradModule, SuiteOptions};
pub use model::{RiskModel, SurvMambaModel};
pub use radam::{radam_step, RadamConfig, RadamState};
pub use synth::{synth_generate, SynthCohort, SynthSpec};
pub use train::{evaluate, km_table, train, EvalReport, TrainOutcome};
