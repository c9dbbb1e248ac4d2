use survmamba::hierarchy::PoolMode;
use survmamba::pipeline::gradsuite::{run_gradcheck, toy_config, GradModule, SuiteOptions};
use survmamba::pipeline::ModelConfig;
use survmamba::ssm::DiscretizationMode;

fn assert_module(module: GradModule, cfg: &ModelConfig) {
    let cases = run_gradcheck(
        module,
        cfg,
        SuiteOptions {
            max_entries: None,
            seed: 11,
        },
    )
    .unwrap();
    assert!(!cases.is_empty());
    for c in &cases {
        println!(
            "{module} {}: {:.3e} over {} entries",
            c.name, c.report.max_rel_error, c.report.entries_checked
        );
        assert!(c.passed(), "{module}/{}: {:?}", c.name, c.report);
        assert!(c.report.entries_checked > 0);
    }
}

#[test]
fn primitives_within_1e6() {
    assert_module(GradModule::Primitives, &toy_config());
}

#[test]
fn bi_mamba_block() {
    assert_module(GradModule::BiMamba, &toy_config());
}

#[test]
fn ifm_block() {
    assert_module(GradModule::Ifm, &toy_config());
}

#[test]
fn him_mean_and_max_pool() {
    assert_module(GradModule::Him, &toy_config());
    let cfg = ModelConfig {
        pool: PoolMode::Max,
        depth: 2,
        ..toy_config()
    };
    assert_module(GradModule::Him, &cfg);
}

#[test]
fn hazard_head_and_mixing() {
    assert_module(GradModule::Head, &toy_config());
}

#[test]
fn full_pipeline_two_patients() {
    assert_module(GradModule::Pipeline, &toy_config());
}

#[test]
fn zoh_blocks() {
    let cfg = ModelConfig {
        mode: DiscretizationMode::Zoh,
        ..toy_config()
    };
    assert_module(GradModule::BiMamba, &cfg);
    assert_module(GradModule::Ifm, &cfg);
}
