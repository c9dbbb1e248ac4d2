mod common;

use proptest::prelude::*;
use survmamba::survstats::{
    chi2_sf, concordance_index, kaplan_meier, logrank_test, risk_stratify, RiskGroup, SurvivalOutcome,
};

fn outcomes(times: &[f64], events: &[bool]) -> Vec<SurvivalOutcome> {
    times
        .iter()
        .zip(events)
        .map(|(&t, &e)| SurvivalOutcome::new(t, e).unwrap())
        .collect()
}

/// `P(χ²₁ > x)` by composite Simpson on `1 - 2/√(2π) ∫₀^√x e^{-u²/2} du`.
fn chi2_df1_tail_simpson(x: f64) -> f64 {
    let upper = x.sqrt();
    let steps = 20_000;
    let h = upper / steps as f64;
    let f = |u: f64| (-u * u / 2.0).exp();
    let mut acc = f(0.0) + f(upper);
    for i in 1..steps {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 / (2.0 * std::f64::consts::PI).sqrt() * acc * h / 3.0
}

#[test]
fn chi2_critical_value_against_integrator() {
    let p = chi2_sf(3.841, 1.0);
    assert!((p - 0.05).abs() <= 1e-3, "{p}");
    for x in [0.1, 0.5, 1.0, 2.0, 3.841, 6.635, 10.0] {
        let oracle = chi2_df1_tail_simpson(x);
        assert!(
            (chi2_sf(x, 1.0) - oracle).abs() <= 1e-10,
            "x={x}: {} vs {oracle}",
            chi2_sf(x, 1.0)
        );
    }
}

#[test]
fn kaplan_meier_fixtures() {
    let km = kaplan_meier(&outcomes(&[1.0, 2.0, 3.0], &[true, true, true]));
    assert_eq!(km.survival, vec![2.0 / 3.0, 2.0 / 3.0 * (1.0 / 2.0), 0.0]);
    let km = kaplan_meier(&outcomes(&[1.0, 2.0, 3.0], &[true, false, true]));
    assert_eq!(km.times, vec![1.0, 3.0]);
    assert_eq!(km.survival, vec![2.0 / 3.0, 0.0]);
    assert_eq!(km.at_risk, vec![3, 1]);
    let km = kaplan_meier(&outcomes(&[1.0, 2.0], &[false, false]));
    assert!(km.times.is_empty());
    assert_eq!(km.survival_at(5.0), 1.0);
}

/// Hand log-rank on A = {1, 2}, B = {10, 11}, all events:
/// at t=1 `E = 2/4`, `V = 1/4`; at t=2 `E = 1/3`, `V = 2/9`; later times
/// have no subject of A at risk. `O - E = 7/6`, `V = 17/36`, `χ² = 49/17`.
#[test]
fn logrank_fixture() {
    let a = outcomes(&[1.0, 2.0], &[true, true]);
    let b = outcomes(&[10.0, 11.0], &[true, true]);
    let r = logrank_test(&a, &b).unwrap();
    assert!((r.chi2 - 49.0 / 17.0).abs() <= 1e-12, "{}", r.chi2);
    assert!(r.chi2 > 1.5 && r.p_value < 0.2);
    assert!((r.p_value - chi2_df1_tail_simpson(49.0 / 17.0)).abs() <= 1e-10);
    let same = logrank_test(&a, &a).unwrap();
    assert_eq!((same.chi2, same.p_value), (0.0, 1.0));
}

#[test]
fn concordance_fixtures() {
    let all = outcomes(&[1.0, 2.0, 3.0], &[true, true, true]);
    assert_eq!(concordance_index(&[3.0, 2.0, 1.0], &all).unwrap(), 1.0);
    assert_eq!(concordance_index(&[1.0, 2.0, 3.0], &all).unwrap(), 0.0);
    let tied = outcomes(&[2.0, 4.0, 6.0], &[true, true, false]);
    assert_eq!(concordance_index(&[5.0, 3.0, 3.0], &tied).unwrap(), 2.5 / 3.0);
}

#[test]
fn stratify_fixtures() {
    use RiskGroup::{High, Low};
    assert_eq!(
        risk_stratify(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
        vec![Low, Low, High, High]
    );
    assert_eq!(risk_stratify(&[2.0; 4]).unwrap(), vec![Low; 4]);
    assert_eq!(risk_stratify(&[5.0, 1.0, 3.0]).unwrap(), vec![High, Low, Low]);
}

fn cohort(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<SurvivalOutcome>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..20, n),
            prop::collection::vec(1u8..30, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(r, t, e)| {
                let risks = r.into_iter().map(f64::from).collect();
                let times: Vec<f64> = t.into_iter().map(f64::from).collect();
                (risks, outcomes(&times, &e))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn cindex_equals_brute_force((risks, outs) in cohort(200)) {
        match common::brute_cindex(&risks, &outs) {
            Some(c) => prop_assert_eq!(concordance_index(&risks, &outs).unwrap(), c),
            None => prop_assert!(concordance_index(&risks, &outs).is_err()),
        }
    }
}

proptest! {
    #[test]
    fn cindex_invariant_under_increasing_maps((risks, outs) in cohort(60)) {
        prop_assume!(common::brute_cindex(&risks, &outs).is_some());
        let base = concordance_index(&risks, &outs).unwrap();
        let exp: Vec<f64> = risks.iter().map(|r| r.exp()).collect();
        let affine: Vec<f64> = risks.iter().map(|r| 3.0 * r - 7.0).collect();
        prop_assert_eq!(concordance_index(&exp, &outs).unwrap(), base);
        prop_assert_eq!(concordance_index(&affine, &outs).unwrap(), base);
    }

    #[test]
    fn cindex_of_negated_risks_is_complement(perm in Just((0..40).collect::<Vec<usize>>()).prop_shuffle(), (_, outs) in cohort(40)) {
        let risks: Vec<f64> = perm.iter().take(outs.len()).map(|&i| i as f64).collect();
        prop_assume!(common::brute_cindex(&risks, &outs).is_some());
        let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
        let sum = concordance_index(&risks, &outs).unwrap() + concordance_index(&neg, &outs).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "{sum}");
    }

    #[test]
    fn uncensored_km_is_empirical_survival(times in prop::collection::vec(1u8..15, 1..50)) {
        let times: Vec<f64> = times.into_iter().map(f64::from).collect();
        let km = kaplan_meier(&outcomes(&times, &vec![true; times.len()]));
        for (t, s) in km.times.iter().zip(&km.survival) {
            let surviving = times.iter().filter(|&&v| v > *t).count() as f64 / times.len() as f64;
            prop_assert!((s - surviving).abs() <= 1e-12, "S({t}) = {s}, empirical {surviving}");
        }
    }

    #[test]
    fn km_is_a_survival_curve((_, outs) in cohort(80)) {
        let km = kaplan_meier(&outs);
        let mut prev = 1.0;
        for &s in &km.survival {
            prop_assert!((0.0..=prev).contains(&s));
            prev = s;
        }
        prop_assert!(km.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn logrank_symmetric_in_labels((_, a) in cohort(30), (_, b) in cohort(30)) {
        let ab = logrank_test(&a, &b).unwrap();
        let ba = logrank_test(&b, &a).unwrap();
        prop_assert!((ab.chi2 - ba.chi2).abs() <= 1e-12 * ab.chi2.max(1.0));
        prop_assert!(ab.chi2 >= 0.0 && ab.p_value > 0.0 && ab.p_value <= 1.0);
    }
}
