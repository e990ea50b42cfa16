use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AdmissionDataset, Outcome, Ownership, StudyConfig};
use crate::error::{Error, Result};

/// Ward-month average of predicted outcome probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelCell {
    pub hospital_id: String,
    pub ward_id: String,
    pub year: i32,
    pub month: u8,
    /// `12 * (year - first_year) + month`
    pub month_index: u32,
    pub treated: bool,
    pub surgical: bool,
    pub ownership: Ownership,
    pub n_patients: u32,
    /// Indexed by [`Outcome::index`]; `None` where undefined or not modelled.
    pub ho: [Option<f64>; 5],
}

impl PanelCell {
    pub fn key(&self) -> (&str, &str, i32, u8) {
        (&self.hospital_id, &self.ward_id, self.year, self.month)
    }

    pub fn outcome(&self, o: Outcome) -> Option<f64> {
        self.ho[o.index()]
    }
}

pub const PANEL_COLUMNS: [&str; 14] = [
    "hospital_id",
    "ward_id",
    "year",
    "month",
    "month_index",
    "treated",
    "surgical",
    "ownership",
    "n_patients",
    "ho_mortality",
    "ho_readmissions",
    "ho_return",
    "ho_transfers",
    "ho_voldisch",
];

/// Ward-month cells sorted by `(hospital, ward, year, month)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    cells: Vec<PanelCell>,
    config: StudyConfig,
}

impl PanelDataset {
    /// Sorts the cells and checks every panel invariant.
    pub fn new(mut cells: Vec<PanelCell>, config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        if cells.is_empty() {
            return Err(Error::Validation("panel is empty".into()));
        }
        cells.sort_by(|a, b| a.key().cmp(&b.key()));
        let mut attrs: HashMap<(&str, &str), (bool, bool, Ownership)> = HashMap::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 && cells[i - 1].key() == c.key() {
                return Err(Error::Validation(format!(
                    "duplicate panel cell for hospital {} ward {} {}-{:02}",
                    c.hospital_id, c.ward_id, c.year, c.month
                )));
            }
            if !config.contains_year(c.year) || !(1..=12).contains(&c.month) {
                return Err(Error::Validation(format!(
                    "panel cell {}-{:02} outside the study window",
                    c.year, c.month
                )));
            }
            if c.month_index != config.month_index(c.year, c.month) {
                return Err(Error::Validation(format!(
                    "month_index {} inconsistent with {}-{:02}",
                    c.month_index, c.year, c.month
                )));
            }
            if c.n_patients == 0 {
                return Err(Error::Validation("panel cell with zero patients".into()));
            }
            for o in Outcome::ALL {
                if let Some(v) = c.ho[o.index()] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Validation(format!(
                            "{} = {v} outside [0,1] for hospital {} ward {}",
                            o.panel_column(),
                            c.hospital_id,
                            c.ward_id
                        )));
                    }
                }
            }
            if !c.surgical && c.ho[Outcome::ReturnOr.index()].is_some() {
                return Err(Error::Validation(format!(
                    "ho_return defined only for surgical wards (hospital {} ward {})",
                    c.hospital_id, c.ward_id
                )));
            }
            let a = (c.treated, c.surgical, c.ownership);
            match attrs.get(&(c.hospital_id.as_str(), c.ward_id.as_str())) {
                Some(prev) if *prev != a => {
                    return Err(Error::Validation(format!(
                        "ward attribute not constant for hospital {} ward {}",
                        c.hospital_id, c.ward_id
                    )));
                }
                Some(_) => {}
                None => {
                    attrs.insert((c.hospital_id.as_str(), c.ward_id.as_str()), a);
                }
            }
        }
        Ok(PanelDataset {
            cells,
            config: config.clone(),
        })
    }

    pub fn cells(&self) -> &[PanelCell] {
        &self.cells
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Distinct hospitals in key order.
    pub fn hospitals(&self) -> Vec<&str> {
        let mut h: Vec<&str> = self.cells.iter().map(|c| c.hospital_id.as_str()).collect();
        h.dedup();
        h
    }

    /// Outcomes with at least one observed cell, in reporting order.
    pub fn observed_outcomes(&self) -> Vec<Outcome> {
        Outcome::ALL
            .into_iter()
            .filter(|o| self.cells.iter().any(|c| c.ho[o.index()].is_some()))
            .collect()
    }

    /// Checks the DID design on the panel.
    pub fn validate_did(&self) -> Result<crate::data::DidValidationReport> {
        let units = self
            .cells
            .iter()
            .map(|c| (c.hospital_id.as_str(), c.ward_id.as_str(), c.year, c.treated));
        crate::data::validate::validate_units(units, &self.config.years())
    }

    /// Treated-ward patient volume per year.
    pub fn treated_volume(&self) -> BTreeMap<i32, u64> {
        let mut v = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.treated) {
            *v.entry(c.year).or_insert(0) += u64::from(c.n_patients);
        }
        v
    }

    /// Replaces the cells (used to build perturbed copies); invariants are rechecked.
    pub fn with_cells(&self, cells: Vec<PanelCell>) -> Result<Self> {
        PanelDataset::new(cells, &self.config)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PANEL_COLUMNS)?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in &self.cells {
            w.write_record([
                c.hospital_id.clone(),
                c.ward_id.clone(),
                c.year.to_string(),
                c.month.to_string(),
                c.month_index.to_string(),
                u8::from(c.treated).to_string(),
                u8::from(c.surgical).to_string(),
                c.ownership.code().to_string(),
                c.n_patients.to_string(),
                f(c.ho[0]),
                f(c.ho[1]),
                f(c.ho[2]),
                f(c.ho[3]),
                f(c.ho[4]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<panel output>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, config: &StudyConfig) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut pos = vec![usize::MAX; PANEL_COLUMNS.len()];
        for (i, h) in headers.iter().enumerate() {
            let k = PANEL_COLUMNS.iter().position(|c| *c == h).ok_or_else(|| Error::Parse {
                line: 1,
                column: h.to_string(),
                message: "unexpected column".into(),
            })?;
            pos[k] = i;
        }
        if let Some(k) = pos.iter().position(|&p| p == usize::MAX) {
            return Err(Error::Parse {
                line: 1,
                column: PANEL_COLUMNS[k].into(),
                message: "missing column".into(),
            });
        }
        let mut cells = Vec::new();
        let mut row = csv::StringRecord::new();
        while rdr.read_record(&mut row)? {
            let line = row.position().map_or(0, |p| p.line());
            let get = |k: usize| row.get(pos[k]).unwrap_or("");
            let err = |k: usize, m: &str| Error::Parse {
                line,
                column: PANEL_COLUMNS[k].into(),
                message: format!("{m}, found {:?}", get(k)),
            };
            let bin = |k: usize| match get(k) {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err(k, "expected 0 or 1")),
            };
            let text = |k: usize| {
                let v = get(k);
                if v.is_empty() {
                    Err(err(k, "missing value"))
                } else {
                    Ok(v.to_string())
                }
            };
            let mut ho = [None; 5];
            for (o, slot) in ho.iter_mut().enumerate() {
                let k = 9 + o;
                *slot = match get(k) {
                    "" => None,
                    v => Some(
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| err(k, "expected a number"))?,
                    ),
                };
            }
            cells.push(PanelCell {
                hospital_id: text(0)?,
                ward_id: text(1)?,
                year: get(2).parse().map_err(|_| err(2, "expected an integer"))?,
                month: get(3).parse().map_err(|_| err(3, "expected an integer"))?,
                month_index: get(4).parse().map_err(|_| err(4, "expected an integer"))?,
                treated: bin(5)?,
                surgical: bin(6)?,
                ownership: get(7).parse().map_err(|m: String| Error::Parse {
                    line,
                    column: "ownership".into(),
                    message: m,
                })?,
                n_patients: get(8).parse().map_err(|_| err(8, "expected a positive integer"))?,
                ho,
            });
        }
        PanelDataset::new(cells, config)
    }

    pub fn load(path: impl AsRef<Path>, config: &StudyConfig) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, config)
    }
}

/// Averages per-record probabilities within each ward-month. `probs` maps an
/// outcome to a vector aligned with `ds.records()`.
pub fn collapse_to_panel(
    ds: &AdmissionDataset,
    probs: &BTreeMap<Outcome, Vec<Option<f64>>>,
) -> Result<PanelDataset> {
    for (o, v) in probs {
        if v.len() != ds.len() {
            return Err(Error::Structure(format!(
                "{o} probabilities have length {}, dataset has {} records",
                v.len(),
                ds.len()
            )));
        }
    }
    let config = ds.config();
    let mut cells: BTreeMap<(&str, &str, i32, u8), (u32, [f64; 5], [u32; 5])> = BTreeMap::new();
    for (i, r) in ds.records().iter().enumerate() {
        let e = cells
            .entry((&r.hospital_id, &r.ward_id, r.year, r.month))
            .or_insert((0, [0.0; 5], [0; 5]));
        e.0 += 1;
        for (o, v) in probs {
            if let Some(p) = v[i] {
                if r.outcomes.get(*o).is_none() {
                    return Err(Error::Structure(format!(
                        "{o} probability supplied for record {} where the outcome is undefined",
                        i + 1
                    )));
                }
                e.1[o.index()] += p;
                e.2[o.index()] += 1;
            }
        }
    }
    let out = cells
        .into_iter()
        .map(|((h, w, year, month), (n, sums, counts))| {
            let attrs = ds.ward_attributes(h, w).expect("indexed ward");
            let mut ho = [None; 5];
            for k in 0..5 {
                if counts[k] > 0 {
                    ho[k] = Some(sums[k] / f64::from(counts[k]));
                }
            }
            PanelCell {
                hospital_id: h.to_string(),
                ward_id: w.to_string(),
                year,
                month,
                month_index: config.month_index(year, month),
                treated: attrs.treated,
                surgical: attrs.surgical,
                ownership: attrs.ownership,
                n_patients: n,
                ho,
            }
        })
        .collect();
    PanelDataset::new(out, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AdmissionRecord, Outcomes, WardAttributes};

    fn rec(h: &str, w: &str, year: i32, month: u8, surgical: bool) -> AdmissionRecord {
        AdmissionRecord {
            hospital_id: h.into(),
            ward_id: w.into(),
            year,
            month,
            gender: false,
            age: 50.0,
            intcare: 0,
            drg_weight: 1.0,
            comorbidity: 0,
            ward: WardAttributes {
                technology: false,
                teaching: false,
                specialised: false,
                surgical,
                ownership: Ownership::NoProfit,
                treated: true,
            },
            outcomes: Outcomes {
                return_or: surgical.then_some(false),
                ..Default::default()
            },
        }
    }

    #[test]
    fn cell_mean_and_count() {
        let ds = AdmissionDataset::new(
            vec![rec("H", "W", 2011, 3, true), rec("H", "W", 2011, 3, true)],
            &StudyConfig::default(),
        )
        .unwrap();
        let probs = BTreeMap::from([(Outcome::Mortality, vec![Some(0.2), Some(0.4)])]);
        let p = collapse_to_panel(&ds, &probs).unwrap();
        assert_eq!(p.len(), 1);
        let c = &p.cells()[0];
        assert!((c.ho[0].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(c.n_patients, 2);
        assert_eq!(c.month_index, 15);
        assert_eq!(c.ho[1], None);
    }

    #[test]
    fn misaligned_probabilities_rejected() {
        let ds = AdmissionDataset::new(vec![rec("H", "W", 2011, 3, false)], &StudyConfig::default()).unwrap();
        let probs = BTreeMap::from([(Outcome::Mortality, vec![Some(0.2), Some(0.4)])]);
        assert!(matches!(collapse_to_panel(&ds, &probs), Err(Error::Structure(_))));
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            rec("H1", "W1", 2010, 1, true),
            rec("H1", "W2", 2013, 12, false),
            rec("H2", "W1", 2012, 6, false),
        ];
        let ds = AdmissionDataset::new(recs, &StudyConfig::default()).unwrap();
        let probs = BTreeMap::from([
            (Outcome::Mortality, vec![Some(0.1), Some(1.0 / 3.0), Some(0.05)]),
            (Outcome::ReturnOr, vec![Some(0.07), None, None]),
        ]);
        let p = collapse_to_panel(&ds, &probs).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = PanelDataset::read_csv(buf.as_slice(), &StudyConfig::default()).unwrap();
        assert_eq!(back, p);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("hospital_id,ward_id,year,month,month_index"));
        assert!(text.contains("H1,W2,2013,12,48,1,0,NOPROFIT,1,0.3333333333333333,,,,"));
    }

    #[test]
    fn return_on_medical_cell_rejected() {
        let cell = PanelCell {
            hospital_id: "H".into(),
            ward_id: "W".into(),
            year: 2010,
            month: 1,
            month_index: 1,
            treated: true,
            surgical: false,
            ownership: Ownership::Public,
            n_patients: 1,
            ho: [Some(0.1), None, Some(0.2), None, None],
        };
        assert!(PanelDataset::new(vec![cell], &StudyConfig::default()).is_err());
    }
}
