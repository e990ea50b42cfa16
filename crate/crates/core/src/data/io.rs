use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdmissionDataset, AdmissionRecord, Outcomes, Ownership, StudyConfig, WardAttributes};
use crate::error::{Error, Result};

/// Required columns of the admissions file. Any order is accepted on input;
/// output always uses this order.
pub const ADMISSION_COLUMNS: [&str; 20] = [
    "hospital_id",
    "ward_id",
    "year",
    "month",
    "gender",
    "age",
    "intcare",
    "drg_weight",
    "comorbidity",
    "technology",
    "teaching",
    "specialised",
    "surgical",
    "ownership",
    "treated",
    "mortality",
    "readmissions",
    "return_or",
    "transfers",
    "voldisch",
];

pub fn load_admissions(path: impl AsRef<Path>, config: &StudyConfig) -> Result<AdmissionDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_admissions(file, config)
}

pub fn read_admissions<R: Read>(reader: R, config: &StudyConfig) -> Result<AdmissionDataset> {
    config.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if !ADMISSION_COLUMNS.contains(&h) {
            return Err(Error::Parse {
                line: 1,
                column: h.to_string(),
                message: "unexpected column".into(),
            });
        }
        if position.insert(ADMISSION_COLUMNS[ADMISSION_COLUMNS.iter().position(|c| *c == h).unwrap()], i).is_some() {
            return Err(Error::Parse {
                line: 1,
                column: h.to_string(),
                message: "duplicate column".into(),
            });
        }
    }
    if let Some(missing) = ADMISSION_COLUMNS.iter().find(|c| !position.contains_key(*c)) {
        return Err(Error::Parse {
            line: 1,
            column: missing.to_string(),
            message: "missing column".into(),
        });
    }
    let cols: Vec<usize> = ADMISSION_COLUMNS.iter().map(|c| position[c]).collect();

    let mut records = Vec::new();
    let mut first_seen: HashMap<(String, String), (u64, WardAttributes)> = HashMap::new();
    let mut row = csv::StringRecord::new();
    while rdr.read_record(&mut row)? {
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(cols[k]).unwrap_or("");
        let rec = parse_record(&field, line)?;
        rec.check(config).map_err(|message| Error::Parse {
            line,
            column: column_for_violation(&message).into(),
            message,
        })?;
        let key = (rec.hospital_id.clone(), rec.ward_id.clone());
        match first_seen.get(&key) {
            Some((first_line, attrs)) if *attrs != rec.ward => {
                return Err(Error::Validation(format!(
                    "ward attribute not constant for hospital {} ward {} (lines {first_line} and {line})",
                    rec.hospital_id, rec.ward_id
                )));
            }
            Some(_) => {}
            None => {
                first_seen.insert(key, (line, rec.ward));
            }
        }
        records.push(rec);
    }
    AdmissionDataset::new(records, config)
}

fn column_for_violation(message: &str) -> &'static str {
    if message.starts_with("month") {
        "month"
    } else if message.starts_with("year") {
        "year"
    } else if message.starts_with("age") {
        "age"
    } else if message.starts_with("drg_weight") {
        "drg_weight"
    } else {
        "return_or"
    }
}

fn parse_record<'a>(field: &dyn Fn(usize) -> &'a str, line: u64) -> Result<AdmissionRecord> {
    let err = |k: usize, message: String| Error::Parse {
        line,
        column: ADMISSION_COLUMNS[k].to_string(),
        message,
    };
    let text = |k: usize| -> Result<String> {
        let v = field(k);
        if v.is_empty() {
            Err(err(k, "missing value".into()))
        } else {
            Ok(v.to_string())
        }
    };
    let int = |k: usize| -> Result<i64> {
        let v = field(k);
        v.parse::<i64>()
            .map_err(|_| err(k, format!("expected an integer, found {v:?}")))
    };
    let count = |k: usize| -> Result<u32> {
        let v = field(k);
        v.parse::<u32>()
            .map_err(|_| err(k, format!("expected a non-negative integer, found {v:?}")))
    };
    let real = |k: usize| -> Result<f64> {
        let v = field(k);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(err(k, format!("expected a number, found {v:?}"))),
        }
    };
    let binary = |k: usize| -> Result<bool> {
        match field(k) {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(err(k, format!("expected 0 or 1, found {v:?}"))),
        }
    };
    let year = int(2)?;
    let month = int(3)?;
    if !(1..=12).contains(&month) {
        return Err(err(3, format!("month {month} outside 1..=12")));
    }
    let ownership = field(13)
        .parse::<Ownership>()
        .map_err(|m| err(13, m))?;
    let return_or = match field(17) {
        "" => None,
        "0" => Some(false),
        "1" => Some(true),
        v => return Err(err(17, format!("expected 0, 1 or empty, found {v:?}"))),
    };
    Ok(AdmissionRecord {
        hospital_id: text(0)?,
        ward_id: text(1)?,
        year: i32::try_from(year).map_err(|_| err(2, format!("year {year} out of range")))?,
        month: month as u8,
        gender: binary(4)?,
        age: real(5)?,
        intcare: count(6)?,
        drg_weight: real(7)?,
        comorbidity: count(8)?,
        ward: WardAttributes {
            technology: binary(9)?,
            teaching: binary(10)?,
            specialised: binary(11)?,
            surgical: binary(12)?,
            ownership,
            treated: binary(14)?,
        },
        outcomes: Outcomes {
            mortality: binary(15)?,
            readmissions: binary(16)?,
            return_or,
            transfers: binary(18)?,
            voldisch: binary(19)?,
        },
    })
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes records in the canonical column order.
pub fn write_admissions<W: Write>(writer: W, records: &[AdmissionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ADMISSION_COLUMNS)?;
    for r in records {
        w.write_record([
            r.hospital_id.as_str(),
            r.ward_id.as_str(),
            &r.year.to_string(),
            &r.month.to_string(),
            bit(r.gender),
            &r.age.to_string(),
            &r.intcare.to_string(),
            &r.drg_weight.to_string(),
            &r.comorbidity.to_string(),
            bit(r.ward.technology),
            bit(r.ward.teaching),
            bit(r.ward.specialised),
            bit(r.ward.surgical),
            r.ward.ownership.code(),
            bit(r.ward.treated),
            bit(r.outcomes.mortality),
            bit(r.outcomes.readmissions),
            r.outcomes.return_or.map_or("", bit),
            bit(r.outcomes.transfers),
            bit(r.outcomes.voldisch),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<admissions output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "hospital_id,ward_id,year,month,gender,age,intcare,drg_weight,comorbidity,technology,teaching,specialised,surgical,ownership,treated,mortality,readmissions,return_or,transfers,voldisch\n";

    fn parse(body: &str) -> Result<AdmissionDataset> {
        read_admissions(format!("{HEADER}{body}").as_bytes(), &StudyConfig::default())
    }

    #[test]
    fn three_rows() {
        let ds = parse(
            "H1,W1,2010,1,0,64.5,0,1.2,1,1,0,0,1,PUBLIC,1,0,1,0,0,0\n\
             H1,W1,2011,2,1,30,1,0.8,0,1,0,0,1,PUBLIC,1,0,0,1,0,0\n\
             H2,W9,2013,12,1,71,0,2.1,2,0,1,0,0,PROFIT,0,1,0,,0,1\n",
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records()[2].outcomes.return_or, None);
        assert_eq!(ds.records()[0].age, 64.5);
        assert_eq!(ds.hospital_count(), 2);
    }

    #[test]
    fn return_on_medical_ward_rejected() {
        let err = parse("H1,W1,2010,1,0,64,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,1,0,0\n").unwrap_err();
        match err {
            Error::Parse { line, column, message } => {
                assert_eq!(line, 2);
                assert_eq!(column, "return_or");
                assert!(message.contains("return_or defined only for surgical wards"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn switching_ward_rejected() {
        let err = parse(
            "H1,W1,2010,1,0,64,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,,0,0\n\
             H1,W1,2012,1,0,64,0,1.2,1,1,0,0,0,PUBLIC,0,0,1,,0,0\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("ward attribute not constant"), "{err}");
    }

    #[test]
    fn malformed_fields_report_line_and_column() {
        let err = parse(
            "H1,W1,2010,1,0,64,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,,0,0\n\
             H1,W1,2010,1,2,64,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,,0,0\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, ref column, .. } if column == "gender"), "{err:?}");

        let err = parse("H1,W1,2010,1,0,64,0,1.2,1,1,0,0,0,STATE,1,0,1,,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "ownership"));

        let err = parse("H1,W1,2010,1,0,,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "age"));
    }

    #[test]
    fn year_outside_window_rejected() {
        let err = parse("H1,W1,2009,1,0,64,0,1.2,1,1,0,0,0,PUBLIC,1,0,1,,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "year"), "{err:?}");
    }

    #[test]
    fn missing_column_rejected() {
        let short = HEADER.replace(",voldisch", "");
        let err = read_admissions(short.as_bytes(), &StudyConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "voldisch"));
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse(""), Err(Error::Validation(_))));
    }

    #[test]
    fn column_order_is_free() {
        let cols: Vec<&str> = ADMISSION_COLUMNS.iter().rev().copied().collect();
        let vals = ["H1", "W1", "2010", "1", "0", "64", "0", "1.2", "1", "1", "0", "0", "0", "PUBLIC", "1", "0", "1", "", "0", "0"];
        let row: Vec<&str> = vals.iter().rev().copied().collect();
        let text = format!("{}\n{}\n", cols.join(","), row.join(","));
        let ds = read_admissions(text.as_bytes(), &StudyConfig::default()).unwrap();
        assert_eq!(ds.records()[0].hospital_id, "H1");
        assert!(ds.records()[0].outcomes.readmissions);
    }
}
