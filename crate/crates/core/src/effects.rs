//! Predicted group-year outcomes, DID reductions and implied event counts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::data::{Outcome, Ownership};
use crate::did::{CellProfile, DidDesign, InteractionScheme, MultivariateMixedFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Group {
    Treated,
    Control,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Treated => "treated",
            Group::Control => "control",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalEffect {
    pub outcome: Outcome,
    pub year: i32,
    pub group: Group,
    /// Ward type or ownership level for the extended schemes.
    pub level: Option<&'static str>,
    pub predicted_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalEffectsTable {
    pub scheme: InteractionScheme,
    pub outcomes: Vec<Outcome>,
    pub years: Vec<i32>,
    pub last_pre_year: i32,
    pub rows: Vec<MarginalEffect>,
}

/// Level labels of a scheme, reference first. The base scheme has a single unnamed level.
pub fn scheme_levels(scheme: InteractionScheme) -> Vec<Option<&'static str>> {
    match scheme {
        InteractionScheme::Base => vec![None],
        InteractionScheme::Surgical => vec![Some("MEDICAL"), Some("SURGICAL")],
        InteractionScheme::Ownership => vec![Some("OWN_PUBLIC"), Some("OWN_NOPROFIT"), Some("OWN_PROFIT")],
    }
}

fn profile(year: i32, first_year: i32, treated: bool, level: Option<&str>) -> CellProfile {
    CellProfile {
        year,
        // mean of the twelve month indices of the year
        month_index: f64::from(12 * (year - first_year)) + 6.5,
        treated,
        surgical: level == Some("SURGICAL"),
        ownership: match level {
            Some("OWN_NOPROFIT") => Ownership::NoProfit,
            Some("OWN_PROFIT") => Ownership::Profit,
            _ => Ownership::Public,
        },
    }
}

/// Fixed-part predictions (hospital effects at zero) per outcome, year, group and level, in percent.
pub fn marginal_effects(fit: &MultivariateMixedFit, design: &DidDesign) -> Result<MarginalEffectsTable> {
    if fit.scheme != design.scheme() || fit.columns != design.columns() {
        return Err(Error::SchemeMismatch(format!(
            "{} fit used with a {} design",
            fit.scheme,
            design.scheme()
        )));
    }
    let layout = &design.layout;
    let mut years = vec![layout.reference_year];
    years.extend(&layout.years);
    years.sort_unstable();
    let mut rows = Vec::new();
    for (k, &outcome) in fit.outcomes.iter().enumerate() {
        for level in scheme_levels(fit.scheme) {
            for &year in &years {
                for group in [Group::Treated, Group::Control] {
                    let x = layout.row(&profile(year, design.first_year, group == Group::Treated, level));
                    let pred: f64 = x.iter().zip(&fit.coefficients[k]).map(|(a, b)| a * b).sum();
                    rows.push(MarginalEffect {
                        outcome,
                        year,
                        group,
                        level,
                        predicted_pct: 100.0 * pred,
                    });
                }
            }
        }
    }
    Ok(MarginalEffectsTable {
        scheme: fit.scheme,
        outcomes: fit.outcomes.clone(),
        years,
        last_pre_year: design.last_pre_year,
        rows,
    })
}

impl MarginalEffectsTable {
    pub fn get(&self, outcome: Outcome, year: i32, group: Group, level: Option<&str>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.outcome == outcome && r.year == year && r.group == group && r.level == level)
            .map(|r| r.predicted_pct)
    }

    /// Treated minus control, in percentage points.
    pub fn difference(&self, outcome: Outcome, year: i32, level: Option<&str>) -> Option<f64> {
        Some(self.get(outcome, year, Group::Treated, level)? - self.get(outcome, year, Group::Control, level)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let with_level = self.scheme != InteractionScheme::Base;
        let mut header = vec!["outcome", "year", "group"];
        if with_level {
            header.push("level");
        }
        header.push("predicted_pct");
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.outcome.label().to_string(), r.year.to_string(), r.group.to_string()];
            if with_level {
                rec.push(r.level.unwrap_or_default().to_string());
            }
            rec.push(r.predicted_pct.to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("margins csv", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeDid {
    pub outcome: Outcome,
    pub level: Option<&'static str>,
    /// Treated minus control per year, percentage points.
    pub differences: Vec<(i32, f64)>,
    /// Per post year: previous year's difference minus this year's.
    pub reductions: Vec<(i32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidSummary {
    pub scheme: InteractionScheme,
    pub last_pre_year: i32,
    pub rows: Vec<OutcomeDid>,
}

/// `diff[last_pre] - diff[first post]`, then `diff[prev] - diff[cur]` for later years.
pub fn reductions_from_differences(differences: &[(i32, f64)], last_pre_year: i32) -> Result<Vec<(i32, f64)>> {
    let mut d = differences.to_vec();
    d.sort_by_key(|x| x.0);
    let start = d
        .iter()
        .position(|x| x.0 == last_pre_year)
        .ok_or_else(|| Error::Validation(format!("no difference for the last pre-policy year {last_pre_year}")))?;
    if start + 1 >= d.len() {
        return Err(Error::Validation(format!("no year after {last_pre_year} to compare")));
    }
    Ok(d[start..].windows(2).map(|w| (w[1].0, w[0].1 - w[1].1)).collect())
}

pub fn did_reduction(table: &MarginalEffectsTable) -> Result<DidSummary> {
    let mut rows = Vec::new();
    for &outcome in &table.outcomes {
        for level in scheme_levels(table.scheme) {
            let differences: Vec<(i32, f64)> = table
                .years
                .iter()
                .filter_map(|&y| table.difference(outcome, y, level).map(|d| (y, d)))
                .collect();
            let reductions = reductions_from_differences(&differences, table.last_pre_year)?;
            rows.push(OutcomeDid {
                outcome,
                level,
                differences,
                reductions,
            });
        }
    }
    Ok(DidSummary {
        scheme: table.scheme,
        last_pre_year: table.last_pre_year,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// The treated-control gap shrank.
    Saved,
    Excess,
    Unchanged,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Saved => "saved",
            Direction::Excess => "excess",
            Direction::Unchanged => "unchanged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Savings {
    pub outcome: Outcome,
    pub level: Option<&'static str>,
    pub year: i32,
    pub count: u64,
    pub direction: Direction,
}

/// Events implied by a signed reduction (percentage points) on a volume of admissions.
pub fn savings_for(reduction_pct: f64, volume: u64) -> (u64, Direction) {
    let count = ((reduction_pct / 100.0).abs() * volume as f64).round() as u64;
    let direction = if reduction_pct > 0.0 {
        Direction::Saved
    } else if reduction_pct < 0.0 {
        Direction::Excess
    } else {
        Direction::Unchanged
    };
    (count, direction)
}

/// Counts for every reduction whose year has a treated volume.
pub fn savings_count(summary: &DidSummary, treated_volume: &BTreeMap<i32, u64>) -> Result<Vec<Savings>> {
    if let Some((y, _)) = treated_volume.iter().find(|(_, v)| **v == 0) {
        return Err(Error::Validation(format!("treated volume for {y} is zero")));
    }
    let mut out = Vec::new();
    for r in &summary.rows {
        for &(year, red) in &r.reductions {
            if let Some(&v) = treated_volume.get(&year) {
                let (count, direction) = savings_for(red, v);
                out.push(Savings {
                    outcome: r.outcome,
                    level: r.level,
                    year,
                    count,
                    direction,
                });
            }
        }
    }
    Ok(out)
}

/// One row per outcome (and level) and year: difference, reduction and savings.
pub fn write_did_summary_csv<W: Write>(summary: &DidSummary, savings: &[Savings], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["outcome", "level", "year", "difference_pct", "reduction_pct", "savings", "direction"])?;
    for r in &summary.rows {
        for &(year, diff) in &r.differences {
            let red = r.reductions.iter().find(|x| x.0 == year).map(|x| x.1);
            let sav = savings
                .iter()
                .find(|s| s.outcome == r.outcome && s.level == r.level && s.year == year);
            out.write_record([
                r.outcome.label().to_string(),
                r.level.unwrap_or_default().to_string(),
                year.to_string(),
                diff.to_string(),
                red.map_or(String::new(), |v| v.to_string()),
                sav.map_or(String::new(), |s| s.count.to_string()),
                sav.map_or(String::new(), |s| s.direction.to_string()),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("did summary csv", e))?;
    Ok(())
}
