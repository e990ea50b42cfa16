//! End-to-end properties of the generator and the two-stage pipeline.

use policy_did::data::{summarize, Outcome};
use policy_did::did::{build_design, fit_multivariate_mixed, InteractionScheme, MixedOptions};
use policy_did::inference::cluster_bootstrap_fit;
use policy_did::sim::{
    calibrate_alpha, generate_panel, generate_synthetic, recovery_study_with, GeneratorTruth, RecoveryOptions,
    RecoveryPipeline,
};

#[test]
fn default_generator_matches_descriptive_calibration() {
    let ds = generate_synthetic(&GeneratorTruth::default()).expect("admissions");
    let table = summarize(&ds);
    let m = |v: &str| table.moments(v, 2010).expect("summarized").mean;
    assert!((m("MORTALITY") - 0.05).abs() < 0.005, "mortality {}", m("MORTALITY"));
    assert!((m("READMISSIONS") - 0.13).abs() < 0.01, "readmissions {}", m("READMISSIONS"));
    assert!((m("TREATED") - 0.71).abs() < 0.01, "treated {}", m("TREATED"));
    assert!((m("SURGICAL") - 0.51).abs() < 0.01, "surgical {}", m("SURGICAL"));
}

#[test]
fn default_intercepts_are_the_calibrated_ones() {
    let truth = GeneratorTruth::default();
    let targets = [
        (Outcome::Mortality, 0.05),
        (Outcome::Readmissions, 0.13),
        (Outcome::ReturnOr, 0.048),
        (Outcome::Transfers, 0.011),
        (Outcome::Voldisch, 0.009),
    ];
    for (o, rate) in targets {
        let t = &truth.patient[&o];
        let a = calibrate_alpha(t, rate, 200_000, 3).expect("calibration");
        assert!((a - t.alpha).abs() < 0.03, "{o}: calibrated {a}, default {}", t.alpha);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn bootstrap_se_shrinks_with_hospital_count() {
    let se_at = |hospitals: usize| {
        let ses: Vec<f64> = (0..5u64)
            .map(|rep| {
                let mut truth = GeneratorTruth::default().with_seed(500 + rep);
                truth.structure.hospitals = hospitals;
                truth.config.outcomes = vec![Outcome::Readmissions, Outcome::Transfers];
                let panel = generate_panel(&truth).expect("panel");
                let design = build_design(&panel, InteractionScheme::Base).expect("design");
                let fit = fit_multivariate_mixed(&design).expect("fit");
                let opts = MixedOptions::from_config(panel.config());
                let boot = cluster_bootstrap_fit(&design, &fit, &opts, 100, rep).expect("bootstrap");
                boot.get("TREATED:YEAR_2012", Outcome::Readmissions).expect("term").se
            })
            .collect();
        median(ses)
    };
    let (small, large) = (se_at(30), se_at(120));
    assert!(large < small, "se at 120 hospitals {large} not below se at 30 {small}");
}

#[test]
fn recovery_spread_shrinks_with_hospital_count_and_zero_effects_are_unbiased() {
    let study = |hospitals: usize, replicates: usize| {
        let mut truth = GeneratorTruth::default();
        truth.structure.hospitals = hospitals;
        truth.config.outcomes = vec![Outcome::Readmissions, Outcome::Voldisch];
        for t in truth.panel.values_mut() {
            t.delta.clear();
        }
        let opts = RecoveryOptions {
            pipeline: RecoveryPipeline::Panel,
            bootstrap_replicates: None,
            ..Default::default()
        };
        recovery_study_with(&truth, replicates, &opts).expect("study")
    };
    let small = study(30, 50);
    let large = study(150, 200);
    assert_eq!(small.n_failed + large.n_failed, 0);
    for (s, l) in small.parameters.iter().zip(&large.parameters) {
        assert_eq!(l.truth, 0.0);
        assert!(l.bias.abs() < 2.0 * l.mc_se, "{} {}: bias {} mc se {}", l.term, l.outcome, l.bias, l.mc_se);
        assert!(l.empirical_se < s.empirical_se, "{} {}", l.term, l.outcome);
    }
}
