//! Admission records, study configuration, ingestion and descriptive summaries.

mod config;
mod io;
mod summary;
pub(crate) mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{Criterion, StudyConfig, Tolerances};
pub use io::{load_admissions, read_admissions, write_admissions, ADMISSION_COLUMNS};
pub use summary::{summarize, Moments, SummaryRow, SummaryTable};
pub use validate::{validate_did_assumptions, DidValidationReport, GroupCount, WardAttrition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ownership {
    #[serde(rename = "PUBLIC")]
    Public,
    #[serde(rename = "PROFIT")]
    Profit,
    #[serde(rename = "NOPROFIT")]
    NoProfit,
}

impl Ownership {
    pub const ALL: [Ownership; 3] = [Ownership::Public, Ownership::Profit, Ownership::NoProfit];

    pub fn code(self) -> &'static str {
        match self {
            Ownership::Public => "PUBLIC",
            Ownership::Profit => "PROFIT",
            Ownership::NoProfit => "NOPROFIT",
        }
    }
}

impl fmt::Display for Ownership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Ownership {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "PUBLIC" => Ok(Ownership::Public),
            "PROFIT" => Ok(Ownership::Profit),
            "NOPROFIT" => Ok(Ownership::NoProfit),
            other => Err(format!("unknown ownership {other:?} (expected PUBLIC, PROFIT or NOPROFIT)")),
        }
    }
}

/// The five binary health outcomes, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Mortality,
    Readmissions,
    ReturnOr,
    Transfers,
    Voldisch,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::Mortality,
        Outcome::Readmissions,
        Outcome::ReturnOr,
        Outcome::Transfers,
        Outcome::Voldisch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column name in the admissions file.
    pub fn column(self) -> &'static str {
        match self {
            Outcome::Mortality => "mortality",
            Outcome::Readmissions => "readmissions",
            Outcome::ReturnOr => "return_or",
            Outcome::Transfers => "transfers",
            Outcome::Voldisch => "voldisch",
        }
    }

    /// Column name in the panel file.
    pub fn panel_column(self) -> &'static str {
        match self {
            Outcome::Mortality => "ho_mortality",
            Outcome::Readmissions => "ho_readmissions",
            Outcome::ReturnOr => "ho_return",
            Outcome::Transfers => "ho_transfers",
            Outcome::Voldisch => "ho_voldisch",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Mortality => "MORTALITY",
            Outcome::Readmissions => "READMISSIONS",
            Outcome::ReturnOr => "RETURN",
            Outcome::Transfers => "TRANSFERS",
            Outcome::Voldisch => "VOLDISCH",
        }
    }

    /// Only defined for surgical wards.
    pub fn surgical_only(self) -> bool {
        self == Outcome::ReturnOr
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Outcome::ALL
            .into_iter()
            .find(|o| o.column() == lower || o.label().eq_ignore_ascii_case(s) || o.panel_column() == lower)
            .ok_or_else(|| format!("unknown outcome {s:?}"))
    }
}

/// Patient-level covariates available for risk adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Gender,
    Age,
    Intcare,
    DrgWeight,
    Comorbidity,
    Technology,
    Teaching,
    Specialised,
}

impl Covariate {
    pub const PATIENT: [Covariate; 5] = [
        Covariate::Gender,
        Covariate::Age,
        Covariate::Intcare,
        Covariate::DrgWeight,
        Covariate::Comorbidity,
    ];

    pub const WARD: [Covariate; 3] = [Covariate::Technology, Covariate::Teaching, Covariate::Specialised];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Gender => "gender",
            Covariate::Age => "age",
            Covariate::Intcare => "intcare",
            Covariate::DrgWeight => "drg_weight",
            Covariate::Comorbidity => "comorbidity",
            Covariate::Technology => "technology",
            Covariate::Teaching => "teaching",
            Covariate::Specialised => "specialised",
        }
    }
}

impl FromStr for Covariate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Covariate::PATIENT
            .into_iter()
            .chain(Covariate::WARD)
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown covariate {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Outcomes {
    pub mortality: bool,
    pub readmissions: bool,
    /// Absent for medical wards.
    pub return_or: Option<bool>,
    pub transfers: bool,
    pub voldisch: bool,
}

impl Outcomes {
    pub fn get(&self, outcome: Outcome) -> Option<bool> {
        match outcome {
            Outcome::Mortality => Some(self.mortality),
            Outcome::Readmissions => Some(self.readmissions),
            Outcome::ReturnOr => self.return_or,
            Outcome::Transfers => Some(self.transfers),
            Outcome::Voldisch => Some(self.voldisch),
        }
    }

    pub fn set(&mut self, outcome: Outcome, value: bool) {
        match outcome {
            Outcome::Mortality => self.mortality = value,
            Outcome::Readmissions => self.readmissions = value,
            Outcome::ReturnOr => self.return_or = Some(value),
            Outcome::Transfers => self.transfers = value,
            Outcome::Voldisch => self.voldisch = value,
        }
    }
}

/// Ward attributes that must not vary across a ward's records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WardAttributes {
    pub technology: bool,
    pub teaching: bool,
    pub specialised: bool,
    pub surgical: bool,
    pub ownership: Ownership,
    pub treated: bool,
}

/// One patient discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub hospital_id: String,
    pub ward_id: String,
    pub year: i32,
    pub month: u8,
    pub gender: bool,
    pub age: f64,
    pub intcare: u32,
    pub drg_weight: f64,
    pub comorbidity: u32,
    pub ward: WardAttributes,
    pub outcomes: Outcomes,
}

impl AdmissionRecord {
    pub fn covariate(&self, c: Covariate) -> f64 {
        match c {
            Covariate::Gender => f64::from(u8::from(self.gender)),
            Covariate::Age => self.age,
            Covariate::Intcare => f64::from(self.intcare),
            Covariate::DrgWeight => self.drg_weight,
            Covariate::Comorbidity => f64::from(self.comorbidity),
            Covariate::Technology => f64::from(u8::from(self.ward.technology)),
            Covariate::Teaching => f64::from(u8::from(self.ward.teaching)),
            Covariate::Specialised => f64::from(u8::from(self.ward.specialised)),
        }
    }

    pub fn ward_key(&self) -> (&str, &str) {
        (&self.hospital_id, &self.ward_id)
    }

    /// Checks the per-record invariants against the study window.
    pub fn check(&self, config: &StudyConfig) -> std::result::Result<(), String> {
        if !(1..=12).contains(&self.month) {
            return Err(format!("month {} outside 1..=12", self.month));
        }
        if !config.contains_year(self.year) {
            return Err(format!("year {} outside the study window {:?}", self.year, config.years()));
        }
        if !(self.age >= 0.0 && self.age.is_finite()) {
            return Err(format!("age {} must be a non-negative number", self.age));
        }
        if !(self.drg_weight >= 0.0 && self.drg_weight.is_finite()) {
            return Err(format!("drg_weight {} must be a non-negative number", self.drg_weight));
        }
        match (self.ward.surgical, self.outcomes.return_or) {
            (false, Some(_)) => Err("return_or defined only for surgical wards".into()),
            (true, None) => Err("return_or missing for a surgical ward".into()),
            _ => Ok(()),
        }
    }
}

/// A validated, immutable collection of admissions.
#[derive(Debug, Clone)]
pub struct AdmissionDataset {
    records: Vec<AdmissionRecord>,
    /// hospital -> ward -> record indices in file order
    index: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    config: StudyConfig,
}

impl AdmissionDataset {
    /// Validates every invariant and builds the hospital/ward index.
    pub fn new(records: Vec<AdmissionRecord>, config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::Validation("dataset is empty".into()));
        }
        let mut index: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        let mut attrs: BTreeMap<(&str, &str), (usize, WardAttributes)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.check(config)
                .map_err(|m| Error::Validation(format!("record {}: {m}", i + 1)))?;
            match attrs.get(&r.ward_key()) {
                Some((first, a)) if *a != r.ward => {
                    return Err(Error::Validation(format!(
                        "ward attribute not constant for hospital {} ward {} (records {} and {})",
                        r.hospital_id,
                        r.ward_id,
                        first + 1,
                        i + 1
                    )));
                }
                Some(_) => {}
                None => {
                    attrs.insert(r.ward_key(), (i, r.ward));
                }
            }
        }
        for (i, r) in records.iter().enumerate() {
            index
                .entry(r.hospital_id.clone())
                .or_default()
                .entry(r.ward_id.clone())
                .or_default()
                .push(i);
        }
        Ok(AdmissionDataset {
            records,
            index,
            config: config.clone(),
        })
    }

    pub fn records(&self) -> &[AdmissionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn hospitals(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn hospital_count(&self) -> usize {
        self.index.len()
    }

    /// `(hospital, ward, record indices)` in key order.
    pub fn wards(&self) -> impl Iterator<Item = (&str, &str, &[usize])> {
        self.index.iter().flat_map(|(h, wards)| {
            wards
                .iter()
                .map(move |(w, idx)| (h.as_str(), w.as_str(), idx.as_slice()))
        })
    }

    pub fn ward_attributes(&self, hospital: &str, ward: &str) -> Option<WardAttributes> {
        let idx = self.index.get(hospital)?.get(ward)?;
        Some(self.records[idx[0]].ward)
    }

    /// Records whose value for `outcome` is defined.
    pub fn observed_indices(&self, outcome: Outcome) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].outcomes.get(outcome).is_some())
            .collect()
    }
}
