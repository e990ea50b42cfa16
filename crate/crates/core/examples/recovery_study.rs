//! Monte-Carlo recovery of the DID coefficients with bootstrap interval
//! coverage, on the panel pipeline with a reduced hospital count.
//!
//! cargo run --release --example recovery_study

use policy_did::data::Outcome;
use policy_did::did::InteractionScheme;
use policy_did::sim::{recovery_study_with, GeneratorTruth, RecoveryOptions, RecoveryPipeline};

fn main() -> policy_did::Result<()> {
    let mut truth = GeneratorTruth::default();
    truth.structure.hospitals = 60;
    truth.config.outcomes = vec![Outcome::Readmissions, Outcome::Transfers];
    let opts = RecoveryOptions {
        pipeline: RecoveryPipeline::Panel,
        scheme: InteractionScheme::Base,
        bootstrap_replicates: Some(100),
        probe_draws: 0,
    };
    let report = recovery_study_with(&truth, 50, &opts)?;
    println!("{} replicates, {} failed", report.replicates, report.n_failed);
    report.write_csv(std::io::stdout().lock())?;
    Ok(())
}
