//! Marginal effects by year and group, DID reductions and implied savings.
//!
//! cargo run --release --example marginal_effects

use policy_did::did::{build_design, fit_multivariate_mixed, InteractionScheme};
use policy_did::effects::{did_reduction, marginal_effects, reductions_from_differences, savings_count, savings_for};
use policy_did::sim::{generate_panel, GeneratorTruth};

fn main() -> policy_did::Result<()> {
    let panel = generate_panel(&GeneratorTruth::default())?;
    let design = build_design(&panel, InteractionScheme::Base)?;
    let fit = fit_multivariate_mixed(&design)?;

    let margins = marginal_effects(&fit, &design)?;
    margins.write_csv(std::io::stdout().lock())?;

    let summary = did_reduction(&margins)?;
    let savings = savings_count(&summary, &panel.treated_volume())?;
    for row in &summary.rows {
        println!("{:<13} reductions {:?}", row.outcome.label(), row.reductions);
    }
    for s in &savings {
        println!("{:<13} {} {}: {}", s.outcome.label(), s.year, s.direction, s.count);
    }

    // the same arithmetic on plain differences (percentage points)
    let r = reductions_from_differences(&[(2011, 0.31), (2012, 0.91), (2013, 1.52)], 2011)?;
    println!("readmission gaps 0.31 -> 0.91 -> 1.52: reductions {r:?}");
    let (count, dir) = savings_for(0.59, 732_881);
    println!("0.59 points of 732,881 admissions: {count} {dir}");
    Ok(())
}
