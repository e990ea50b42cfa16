//! Stage one on synthetic admissions: generate, validate, summarize, then fit
//! the per-outcome logistic mixed models and collapse to the ward-month panel.
//!
//! cargo run --release --example simulate_and_adjust

use policy_did::data::{summarize, validate_did_assumptions};
use policy_did::riskadjust::risk_adjust;
use policy_did::sim::{generate_synthetic, GeneratorTruth};

fn main() -> policy_did::Result<()> {
    let mut truth = GeneratorTruth::default();
    truth.structure.hospitals = 30;
    let admissions = generate_synthetic(&truth)?;
    println!("{} admissions in {} hospitals", admissions.len(), admissions.hospital_count());

    let report = validate_did_assumptions(&admissions)?;
    for g in &report.groups {
        println!("  {g:?}");
    }

    let table = summarize(&admissions);
    for year in admissions.config().years() {
        let m = table.moments("MORTALITY", year).expect("mortality summarized");
        println!("  {year}: mortality {:.4} (n = {})", m.mean, m.n);
    }

    let adj = risk_adjust(&admissions)?;
    for (outcome, fit) in &adj.fits {
        println!(
            "{:<13} alpha {:+.3}  sigma2_mu {:.4}  sigma2_nu {:.4}  converged {}",
            outcome.label(),
            fit.alpha,
            fit.sigma_mu_sq,
            fit.sigma_nu_sq,
            fit.converged
        );
    }
    println!("panel: {} ward-month cells", adj.panel.len());
    Ok(())
}
