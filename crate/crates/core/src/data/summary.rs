use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::{AdmissionDataset, AdmissionRecord, Outcome, Ownership};
use crate::error::{Error, Result};

/// Count, mean and centered second moment; mergeable across disjoint samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let (na, nb) = (self.n as f64, other.n as f64);
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: (na * self.mean + nb * other.mean) / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }

    /// Population (divide-by-n) standard deviation.
    pub fn sd(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.n as f64).sqrt()
        }
    }
}

/// Variables reported by [`summarize`], in table order, with their binary flag.
pub const SUMMARY_VARIABLES: [(&str, bool); 18] = [
    ("GENDER", true),
    ("AGE", false),
    ("INTCARE", false),
    ("DRG_WEIGHT", false),
    ("COMORBIDITY", false),
    ("TECHNOLOGY", true),
    ("TEACHING", true),
    ("SPECIALISED", true),
    ("SURGICAL", true),
    ("OWN_PUBLIC", true),
    ("OWN_PROFIT", true),
    ("OWN_NOPROFIT", true),
    ("TREATED", true),
    ("MORTALITY", true),
    ("READMISSIONS", true),
    ("RETURN", true),
    ("TRANSFERS", true),
    ("VOLDISCH", true),
];

fn values(r: &AdmissionRecord) -> [Option<f64>; 18] {
    let b = |v: bool| Some(f64::from(u8::from(v)));
    let own = |o: Ownership| b(r.ward.ownership == o);
    let out = |o: Outcome| r.outcomes.get(o).map(|v| f64::from(u8::from(v)));
    [
        b(r.gender),
        Some(r.age),
        Some(f64::from(r.intcare)),
        Some(r.drg_weight),
        Some(f64::from(r.comorbidity)),
        b(r.ward.technology),
        b(r.ward.teaching),
        b(r.ward.specialised),
        b(r.ward.surgical),
        own(Ownership::Public),
        own(Ownership::Profit),
        own(Ownership::NoProfit),
        b(r.ward.treated),
        out(Outcome::Mortality),
        out(Outcome::Readmissions),
        out(Outcome::ReturnOr),
        out(Outcome::Transfers),
        out(Outcome::Voldisch),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variable: String,
    pub year: i32,
    pub n: u64,
    pub mean: f64,
    pub sd: f64,
}

/// Per-variable, per-year moments. RETURN is summarized over surgical wards only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    /// (variable position, year) -> moments
    cells: BTreeMap<(usize, i32), Moments>,
}

impl SummaryTable {
    pub fn moments(&self, variable: &str, year: i32) -> Option<Moments> {
        let pos = SUMMARY_VARIABLES.iter().position(|(v, _)| *v == variable)?;
        self.cells.get(&(pos, year)).copied()
    }

    pub fn mean(&self, variable: &str, year: i32) -> Option<f64> {
        self.moments(variable, year).map(|m| m.mean)
    }

    pub fn sd(&self, variable: &str, year: i32) -> Option<f64> {
        self.moments(variable, year).map(|m| m.sd())
    }

    pub fn years(&self) -> Vec<i32> {
        let mut y: Vec<i32> = self.cells.keys().map(|k| k.1).collect();
        y.sort_unstable();
        y.dedup();
        y
    }

    pub fn rows(&self) -> Vec<SummaryRow> {
        self.cells
            .iter()
            .map(|(&(pos, year), m)| SummaryRow {
                variable: SUMMARY_VARIABLES[pos].0.to_string(),
                year,
                n: m.n,
                mean: m.mean,
                sd: m.sd(),
            })
            .collect()
    }

    /// Pools the summaries of two disjoint samples.
    pub fn combine(&self, other: &SummaryTable) -> SummaryTable {
        let mut cells = self.cells.clone();
        for (k, m) in &other.cells {
            let e = cells.entry(*k).or_default();
            *e = e.merge(m);
        }
        SummaryTable { cells }
    }

    /// Long format: `variable,year,n,mean,sd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<summary output>", e))?;
        Ok(())
    }
}

pub fn summarize(ds: &AdmissionDataset) -> SummaryTable {
    summarize_records(ds.records())
}

pub(crate) fn summarize_records(records: &[AdmissionRecord]) -> SummaryTable {
    let mut cells: BTreeMap<(usize, i32), Moments> = BTreeMap::new();
    for r in records {
        for (pos, v) in values(r).into_iter().enumerate() {
            if let Some(v) = v {
                cells.entry((pos, r.year)).or_default().push(v);
            }
        }
    }
    SummaryTable { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Outcomes, WardAttributes};
    use proptest::prelude::*;

    fn record(year: i32, gender: bool, age: f64) -> AdmissionRecord {
        AdmissionRecord {
            hospital_id: "H".into(),
            ward_id: "W".into(),
            year,
            month: 3,
            gender,
            age,
            intcare: 0,
            drg_weight: 1.0,
            comorbidity: 0,
            ward: WardAttributes {
                technology: false,
                teaching: false,
                specialised: false,
                surgical: false,
                ownership: Ownership::Public,
                treated: true,
            },
            outcomes: Outcomes::default(),
        }
    }

    #[test]
    fn two_point_population_sd() {
        let t = summarize_records(&[record(2010, false, 50.0), record(2010, true, 70.0)]);
        assert_eq!(t.mean("GENDER", 2010), Some(0.5));
        assert!((t.sd("GENDER", 2010).unwrap() - 0.5).abs() < 1e-15);
        assert!((t.sd("AGE", 2010).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_record_has_zero_sd() {
        let t = summarize_records(&[record(2012, true, 60.0)]);
        assert_eq!(t.mean("AGE", 2012), Some(60.0));
        assert_eq!(t.sd("AGE", 2012), Some(0.0));
        assert_eq!(t.moments("RETURN", 2012), None);
        assert_eq!(t.mean("OWN_PUBLIC", 2012), Some(1.0));
    }

    #[test]
    fn years_are_kept_apart() {
        let t = summarize_records(&[record(2010, true, 30.0), record(2011, false, 40.0)]);
        assert_eq!(t.years(), vec![2010, 2011]);
        assert_eq!(t.mean("GENDER", 2011), Some(0.0));
    }

    proptest! {
        #[test]
        fn pooling_matches_union(
            a in prop::collection::vec((2010i32..2014, any::<bool>(), 2.0f64..100.0), 1..40),
            b in prop::collection::vec((2010i32..2014, any::<bool>(), 2.0f64..100.0), 1..40),
        ) {
            let ra: Vec<_> = a.iter().map(|&(y, g, x)| record(y, g, x)).collect();
            let rb: Vec<_> = b.iter().map(|&(y, g, x)| record(y, g, x)).collect();
            let union: Vec<_> = ra.iter().chain(&rb).cloned().collect();
            let pooled = summarize_records(&ra).combine(&summarize_records(&rb));
            let direct = summarize_records(&union);
            for row in direct.rows() {
                let p = pooled.moments(&row.variable, row.year).unwrap();
                prop_assert_eq!(p.n, row.n);
                prop_assert!((p.mean - row.mean).abs() <= 1e-12 * (1.0 + row.mean.abs()));
                prop_assert!((p.sd() - row.sd).abs() <= 1e-9 * (1.0 + row.sd));
            }
        }
    }
}
