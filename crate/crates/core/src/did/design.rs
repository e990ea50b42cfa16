use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Outcome, Ownership, StudyConfig};
use crate::error::{Error, Result};
use crate::numerics::{Cholesky, DenseMatrix};
use crate::riskadjust::PanelDataset;

pub const INTERCEPT: &str = "INTERCEPT";
pub const TREATED: &str = "TREATED";
pub const MONTH: &str = "MONTH";

/// Second-stage specification: the base model or one of its extensions by ward
/// type or hospital ownership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InteractionScheme {
    #[default]
    Base,
    /// Medical wards are the reference; RETURN is not modelled.
    Surgical,
    /// Public hospitals are the reference.
    Ownership,
}

impl InteractionScheme {
    pub fn name(self) -> &'static str {
        match self {
            InteractionScheme::Base => "base",
            InteractionScheme::Surgical => "surgical",
            InteractionScheme::Ownership => "ownership",
        }
    }

    /// Non-reference levels of the extension variable with their column prefix.
    pub fn levels(self) -> &'static [&'static str] {
        match self {
            InteractionScheme::Base => &[],
            InteractionScheme::Surgical => &["SURGICAL"],
            InteractionScheme::Ownership => &["OWN_NOPROFIT", "OWN_PROFIT"],
        }
    }

    pub fn admits(self, outcome: Outcome) -> bool {
        !(self == InteractionScheme::Surgical && outcome == Outcome::ReturnOr)
    }
}

impl fmt::Display for InteractionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InteractionScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "base" => Ok(InteractionScheme::Base),
            "surgical" => Ok(InteractionScheme::Surgical),
            "ownership" => Ok(InteractionScheme::Ownership),
            other => Err(format!("unknown scheme {other:?} (expected base, surgical or ownership)")),
        }
    }
}

pub fn year_column(year: i32) -> String {
    format!("YEAR_{year}")
}

pub fn did_column(year: i32) -> String {
    format!("TREATED:YEAR_{year}")
}

/// Label of the triple interaction for one extension level and year.
pub fn level_did_column(level: &str, year: i32) -> String {
    format!("{level}:TREATED:YEAR_{year}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignOptions {
    /// Include the linear MONTH trend.
    pub include_month: bool,
    /// Weight cells by their patient counts.
    pub weighted: bool,
}

impl DesignOptions {
    pub fn from_config(config: &StudyConfig) -> Self {
        DesignOptions {
            include_month: true,
            weighted: config.weighted_cells,
        }
    }
}

/// Attributes that determine a design row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProfile {
    pub year: i32,
    pub month_index: f64,
    pub treated: bool,
    pub surgical: bool,
    pub ownership: Ownership,
}

/// Column labels and row coding for one scheme over a study window.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    pub scheme: InteractionScheme,
    pub reference_year: i32,
    /// Non-reference years in increasing order.
    pub years: Vec<i32>,
    pub include_month: bool,
    pub columns: Vec<String>,
}

impl DesignLayout {
    pub fn new(scheme: InteractionScheme, config: &StudyConfig, include_month: bool) -> Self {
        let years: Vec<i32> = config
            .years()
            .into_iter()
            .filter(|&y| y != config.reference_year)
            .collect();
        let mut columns = vec![INTERCEPT.to_string(), TREATED.to_string()];
        columns.extend(years.iter().map(|&y| year_column(y)));
        columns.extend(years.iter().map(|&y| did_column(y)));
        if include_month {
            columns.push(MONTH.to_string());
        }
        for level in scheme.levels() {
            columns.push(level.to_string());
            columns.extend(years.iter().map(|&y| format!("{level}:YEAR_{y}")));
            columns.push(format!("{level}:TREATED"));
            columns.extend(years.iter().map(|&y| level_did_column(level, y)));
        }
        DesignLayout {
            scheme,
            reference_year: config.reference_year,
            years,
            include_month,
            columns,
        }
    }

    pub fn position(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    fn level_flags(&self, c: &CellProfile) -> Vec<bool> {
        match self.scheme {
            InteractionScheme::Base => vec![],
            InteractionScheme::Surgical => vec![c.surgical],
            InteractionScheme::Ownership => {
                vec![c.ownership == Ownership::NoProfit, c.ownership == Ownership::Profit]
            }
        }
    }

    /// Indicator coding of one cell, in column order.
    pub fn row(&self, c: &CellProfile) -> Vec<f64> {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let mut r = Vec::with_capacity(self.columns.len());
        r.push(1.0);
        r.push(b(c.treated));
        r.extend(self.years.iter().map(|&y| b(c.year == y)));
        r.extend(self.years.iter().map(|&y| b(c.year == y && c.treated)));
        if self.include_month {
            r.push(c.month_index);
        }
        for on in self.level_flags(c) {
            r.push(b(on));
            r.extend(self.years.iter().map(|&y| b(on && c.year == y)));
            r.push(b(on && c.treated));
            r.extend(self.years.iter().map(|&y| b(on && c.treated && c.year == y)));
        }
        r
    }
}

/// Second-stage regression data: one row per panel cell, outcome values with
/// missing entries where undefined.
#[derive(Debug, Clone)]
pub struct DidDesign {
    pub layout: DesignLayout,
    pub outcomes: Vec<Outcome>,
    pub x: DenseMatrix,
    /// Row-major `rows x outcomes`.
    pub y: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    /// Hospital index of each row into `hospitals`.
    pub hospital: Vec<usize>,
    pub hospitals: Vec<String>,
    pub profiles: Vec<CellProfile>,
    pub first_year: i32,
    pub last_pre_year: i32,
}

impl DidDesign {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.layout.columns
    }

    pub fn scheme(&self) -> InteractionScheme {
        self.layout.scheme
    }

    pub fn value(&self, row: usize, k: usize) -> Option<f64> {
        self.y[row * self.outcomes.len() + k]
    }

    pub fn outcome_position(&self, o: Outcome) -> Option<usize> {
        self.outcomes.iter().position(|&x| x == o)
    }

    /// Copy with one outcome's values mapped through `f`; used by invariance checks.
    pub fn map_outcome(&self, k: usize, f: impl Fn(f64) -> f64) -> DidDesign {
        let mut d = self.clone();
        let kk = self.outcomes.len();
        for i in 0..self.rows() {
            if let Some(v) = d.y[i * kk + k] {
                d.y[i * kk + k] = Some(f(v));
            }
        }
        d
    }

    /// Copy with one outcome's values removed on the rows where `mask` is true.
    pub fn mask_outcome(&self, k: usize, mask: impl Fn(&CellProfile) -> bool) -> DidDesign {
        let mut d = self.clone();
        let kk = self.outcomes.len();
        for i in 0..self.rows() {
            if mask(&self.profiles[i]) {
                d.y[i * kk + k] = None;
            }
        }
        d
    }
}

pub fn build_design(panel: &PanelDataset, scheme: InteractionScheme) -> Result<DidDesign> {
    build_design_with(panel, scheme, &DesignOptions::from_config(panel.config()))
}

pub fn build_design_with(
    panel: &PanelDataset,
    scheme: InteractionScheme,
    opts: &DesignOptions,
) -> Result<DidDesign> {
    let config = panel.config();
    panel.validate_did()?;
    let observed = panel.observed_outcomes();
    let outcomes: Vec<Outcome> = config
        .ordered_outcomes()
        .into_iter()
        .filter(|o| scheme.admits(*o) && observed.contains(o))
        .collect();
    if outcomes.is_empty() {
        return Err(Error::Validation(format!(
            "no configured outcome is observed in the panel for scheme {scheme}"
        )));
    }
    let layout = DesignLayout::new(scheme, config, opts.include_month);
    let p = layout.columns.len();
    let mut vals = Vec::new();
    let mut y = Vec::new();
    let mut weights = Vec::new();
    let mut hospital = Vec::new();
    let mut hospitals: Vec<String> = Vec::new();
    let mut profiles = Vec::new();
    for c in panel.cells() {
        let obs: Vec<Option<f64>> = outcomes.iter().map(|o| c.outcome(*o)).collect();
        if obs.iter().all(Option::is_none) {
            continue;
        }
        let prof = CellProfile {
            year: c.year,
            month_index: f64::from(c.month_index),
            treated: c.treated,
            surgical: c.surgical,
            ownership: c.ownership,
        };
        vals.extend(layout.row(&prof));
        y.extend(obs);
        weights.push(if opts.weighted { f64::from(c.n_patients) } else { 1.0 });
        if hospitals.last().is_none_or(|h| *h != c.hospital_id) {
            hospitals.push(c.hospital_id.clone());
        }
        hospital.push(hospitals.len() - 1);
        profiles.push(prof);
    }
    let n = weights.len();
    if hospitals.len() < 2 {
        return Err(Error::Structure(format!(
            "{} hospital(s) in the panel; at least 2 are needed",
            hospitals.len()
        )));
    }
    let x = DenseMatrix::from_row_major(n, p, vals)?;
    let design = DidDesign {
        layout,
        outcomes,
        x,
        y,
        weights,
        hospital,
        hospitals,
        profiles,
        first_year: config.first_year(),
        last_pre_year: config.last_pre_year(),
    };
    check_rank(&design)?;
    Ok(design)
}

/// Full column rank overall and on each outcome's observed rows.
fn check_rank(d: &DidDesign) -> Result<()> {
    let all: Vec<usize> = (0..d.rows()).collect();
    collinear_columns(&d.x, &all, &d.layout.columns).map_err(|cols| Error::Collinear { columns: cols })?;
    for (k, o) in d.outcomes.iter().enumerate() {
        let rows: Vec<usize> = (0..d.rows()).filter(|&i| d.value(i, k).is_some()).collect();
        collinear_columns(&d.x, &rows, &d.layout.columns).map_err(|cols| {
            Error::Collinear {
                columns: cols.into_iter().map(|c| format!("{c} ({o})")).collect(),
            }
        })?;
    }
    Ok(())
}

/// Adds columns one at a time; the first column that depends on earlier ones is
/// reported together with the columns in its linear combination.
fn collinear_columns(x: &DenseMatrix, rows: &[usize], labels: &[String]) -> std::result::Result<(), Vec<String>> {
    let p = x.cols();
    let mut xtx = DenseMatrix::zeros(p, p);
    for &i in rows {
        let r = x.row(i);
        for a in 0..p {
            for b in 0..=a {
                xtx[(a, b)] += r[a] * r[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    // unit diagonal so the pivot tolerance does not depend on column scale
    let norm: Vec<f64> = (0..p).map(|a| xtx[(a, a)].sqrt()).collect();
    if let Some(a) = norm.iter().position(|v| *v == 0.0) {
        return Err(vec![labels[a].clone()]);
    }
    for a in 0..p {
        for b in 0..p {
            xtx[(a, b)] /= norm[a] * norm[b];
        }
    }
    for m in 1..=p {
        let sub = DenseMatrix::from_rows(
            &(0..m)
                .map(|a| (0..m).map(|b| xtx[(a, b)]).collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
        )
        .expect("square block");
        if Cholesky::factor_with_tolerance(&sub, 1e-10).is_err() {
            let bad = m - 1;
            let mut out = vec![labels[bad].clone()];
            let prev = DenseMatrix::from_rows(
                &(0..bad)
                    .map(|a| (0..bad).map(|b| xtx[(a, b)]).collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            )
            .expect("square block");
            if let Ok(ch) = Cholesky::factor(&prev) {
                let rhs: Vec<f64> = (0..bad).map(|a| xtx[(a, bad)]).collect();
                let coef = ch.solve(&rhs);
                out.extend((0..bad).filter(|&a| coef[a].abs() > 1e-8).map(|a| labels[a].clone()));
            }
            return Err(out);
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::riskadjust::PanelCell;

    fn cell(h: usize, w: usize, year: i32, month: u8, treated: bool, surgical: bool, own: Ownership) -> PanelCell {
        let cfg = StudyConfig::default();
        PanelCell {
            hospital_id: format!("H{h:02}"),
            ward_id: format!("W{w}"),
            year,
            month,
            month_index: cfg.month_index(year, month),
            treated,
            surgical,
            ownership: own,
            n_patients: 5,
            ho: [
                Some(0.05),
                Some(0.1 + 0.001 * f64::from(month)),
                surgical.then_some(0.02),
                Some(0.01),
                Some(0.01),
            ],
        }
    }

    pub(crate) fn small_panel() -> PanelDataset {
        let mut cells = Vec::new();
        let owns = [Ownership::Public, Ownership::Profit, Ownership::NoProfit];
        for h in 0..6 {
            for w in 0..4 {
                for year in 2010..=2013 {
                    for month in [1u8, 7] {
                        cells.push(cell(h, w, year, month, w % 2 == 0, w >= 2, owns[h % 3]));
                    }
                }
            }
        }
        PanelDataset::new(cells, &StudyConfig::default()).unwrap()
    }

    #[test]
    fn treated_post_cell_coding() {
        let layout = DesignLayout::new(InteractionScheme::Base, &StudyConfig::default(), true);
        let r = layout.row(&CellProfile {
            year: 2012,
            month_index: 30.0,
            treated: true,
            surgical: false,
            ownership: Ownership::Public,
        });
        let get = |c: &str| r[layout.position(c).unwrap()];
        assert_eq!(get(TREATED), 1.0);
        assert_eq!(get("YEAR_2012"), 1.0);
        assert_eq!(get("TREATED:YEAR_2012"), 1.0);
        assert_eq!(get("YEAR_2011") + get("YEAR_2013") + get("TREATED:YEAR_2011") + get("TREATED:YEAR_2013"), 0.0);
        assert_eq!(get(MONTH), 30.0);
        assert!(layout.position("YEAR_2010").is_none());
    }

    #[test]
    fn reference_cell_has_no_year_terms() {
        let layout = DesignLayout::new(InteractionScheme::Base, &StudyConfig::default(), true);
        let r = layout.row(&CellProfile {
            year: 2010,
            month_index: 3.0,
            treated: false,
            surgical: true,
            ownership: Ownership::Profit,
        });
        assert_eq!(r.iter().filter(|v| **v != 0.0).count(), 2); // intercept and month
    }

    #[test]
    fn column_sums_match_counts() {
        let panel = small_panel();
        let d = build_design(&panel, InteractionScheme::Ownership).unwrap();
        for (j, col) in d.columns().iter().enumerate() {
            let sum: f64 = (0..d.rows()).map(|i| d.x[(i, j)]).sum();
            let count = panel
                .cells()
                .iter()
                .filter(|c| {
                    let yr = |y: &str| c.year.to_string() == y;
                    col.split(':').all(|part| match part {
                        "INTERCEPT" => true,
                        "TREATED" => c.treated,
                        "MONTH" => true,
                        "OWN_NOPROFIT" => c.ownership == Ownership::NoProfit,
                        "OWN_PROFIT" => c.ownership == Ownership::Profit,
                        y => yr(y.trim_start_matches("YEAR_")),
                    })
                })
                .map(|c| if col == MONTH { f64::from(c.month_index) } else { 1.0 })
                .sum::<f64>();
            assert_eq!(sum, count, "{col}");
        }
    }

    #[test]
    fn surgical_scheme_drops_return() {
        let d = build_design(&small_panel(), InteractionScheme::Surgical).unwrap();
        assert_eq!(d.outcomes.len(), 4);
        assert!(!d.outcomes.contains(&Outcome::ReturnOr));
        assert!(d.columns().contains(&"SURGICAL:TREATED:YEAR_2013".to_string()));
    }

    #[test]
    fn return_is_masked_on_medical_rows() {
        let d = build_design(&small_panel(), InteractionScheme::Base).unwrap();
        let k = d.outcome_position(Outcome::ReturnOr).unwrap();
        for i in 0..d.rows() {
            assert_eq!(d.value(i, k).is_some(), d.profiles[i].surgical);
        }
    }

    #[test]
    fn all_wards_treated_is_collinear() {
        let cells: Vec<PanelCell> = small_panel()
            .cells()
            .iter()
            .cloned()
            .map(|mut c| {
                c.treated = true;
                c
            })
            .collect();
        let panel = PanelDataset::new(cells, &StudyConfig::default()).unwrap();
        // both groups must be present, so validation fails first
        assert!(build_design(&panel, InteractionScheme::Base).is_err());
        let layout_cols = DesignLayout::new(InteractionScheme::Base, &StudyConfig::default(), true).columns;
        let x = DenseMatrix::from_row_major(
            8,
            layout_cols.len(),
            (0..8)
                .flat_map(|i| {
                    let l = DesignLayout::new(InteractionScheme::Base, &StudyConfig::default(), true);
                    l.row(&CellProfile {
                        year: 2010 + (i % 4),
                        month_index: f64::from(i + 1),
                        treated: true,
                        surgical: false,
                        ownership: Ownership::Public,
                    })
                })
                .collect(),
        )
        .unwrap();
        let err = collinear_columns(&x, &(0..8).collect::<Vec<_>>(), &layout_cols).unwrap_err();
        assert_eq!(err[0], TREATED);
        assert!(err.contains(&INTERCEPT.to_string()));
    }
}
