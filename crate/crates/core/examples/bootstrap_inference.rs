//! Hospital-level cluster bootstrap around a DID fit, merged into the
//! fixed-effects table with bracketed standard errors and stars.
//!
//! cargo run --release --example bootstrap_inference

use policy_did::did::{build_design, fit_multivariate_mixed, InteractionScheme, MixedOptions};
use policy_did::inference::{cluster_bootstrap_fit, coefficient_table};
use policy_did::sim::{generate_panel, GeneratorTruth};

fn main() -> policy_did::Result<()> {
    let mut truth = GeneratorTruth::default();
    truth.structure.hospitals = 60;
    let panel = generate_panel(&truth)?;
    let design = build_design(&panel, InteractionScheme::Base)?;
    let fit = fit_multivariate_mixed(&design)?;
    let opts = MixedOptions::from_config(panel.config());

    let boot = cluster_bootstrap_fit(&design, &fit, &opts, 200, 7)?;
    println!("B = {}, failed = {}, valid = {}", boot.replicates, boot.n_failed, boot.valid);
    for t in boot.terms.iter().filter(|t| t.term.starts_with("TREATED:")) {
        println!(
            "  {:<20} {:<13} {:+.4} se {:.4} p {:.3} [{:+.4}, {:+.4}]",
            t.term,
            t.outcome.label(),
            t.estimate,
            t.se,
            t.p_value,
            t.ci_low,
            t.ci_high
        );
    }

    let table = coefficient_table(&design, &fit, Some(&boot))?;
    table.write_csv(std::io::stdout().lock())?;
    Ok(())
}
