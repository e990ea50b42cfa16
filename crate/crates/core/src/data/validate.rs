use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::AdmissionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WardAttrition {
    pub hospital_id: String,
    pub ward_id: String,
    pub missing_years: Vec<i32>,
}

/// Distinct treated and control wards observed in one year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub year: i32,
    pub treated: usize,
    pub control: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DidValidationReport {
    /// Wards whose treatment status changes over time. Always empty on success.
    pub switching: Vec<(String, String)>,
    /// Wards absent in some study years. Listed, not fatal.
    pub attrition: Vec<WardAttrition>,
    pub groups: Vec<GroupCount>,
}

impl DidValidationReport {
    pub fn warnings(&self) -> Vec<String> {
        self.attrition
            .iter()
            .map(|a| {
                format!(
                    "ward {} of hospital {} absent in {:?}",
                    a.ward_id, a.hospital_id, a.missing_years
                )
            })
            .collect()
    }
}

/// Checks the DID design: no group switching, both groups present every year.
pub fn validate_did_assumptions(ds: &AdmissionDataset) -> Result<DidValidationReport> {
    let units = ds
        .records()
        .iter()
        .map(|r| (r.hospital_id.as_str(), r.ward_id.as_str(), r.year, r.ward.treated));
    validate_units(units, &ds.config().years())
}

/// Shared by patient-level datasets and aggregated panels: one item per
/// observation of `(hospital, ward, year, treated)`.
pub(crate) fn validate_units<'a>(
    units: impl Iterator<Item = (&'a str, &'a str, i32, bool)>,
    years: &[i32],
) -> Result<DidValidationReport> {
    let mut status: BTreeMap<(&str, &str), (BTreeSet<bool>, BTreeSet<i32>)> = BTreeMap::new();
    for (h, w, y, t) in units {
        let e = status.entry((h, w)).or_default();
        e.0.insert(t);
        e.1.insert(y);
    }
    let mut report = DidValidationReport::default();
    for ((h, w), (treat, seen)) in &status {
        if treat.len() > 1 {
            report.switching.push((h.to_string(), w.to_string()));
        }
        let missing: Vec<i32> = years.iter().copied().filter(|y| !seen.contains(y)).collect();
        if !missing.is_empty() {
            report.attrition.push(WardAttrition {
                hospital_id: h.to_string(),
                ward_id: w.to_string(),
                missing_years: missing,
            });
        }
    }
    if let Some((h, w)) = report.switching.first() {
        return Err(Error::Validation(format!(
            "ward {w} of hospital {h} switches between treatment and control ({} switching wards)",
            report.switching.len()
        )));
    }
    for &year in years {
        let mut g = GroupCount {
            year,
            treated: 0,
            control: 0,
        };
        for (treat, seen) in status.values() {
            if seen.contains(&year) {
                if treat.contains(&true) {
                    g.treated += 1;
                } else {
                    g.control += 1;
                }
            }
        }
        if g.treated == 0 || g.control == 0 {
            let which = if g.treated == 0 { "treatment" } else { "control" };
            return Err(Error::Validation(format!("{which} group is empty in {year}")));
        }
        report.groups.push(g);
    }
    Ok(report)
}
