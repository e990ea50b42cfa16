use std::io::Write;

use serde::Serialize;

use super::bootstrap::BootstrapResult;
use crate::data::Outcome;
use crate::did::{reported_terms, reported_values, DidDesign, InteractionScheme, MultivariateMixedFit};
use crate::error::{Error, Result};

/// `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCell {
    pub estimate: f64,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub scheme: InteractionScheme,
    pub outcomes: Vec<Outcome>,
    pub terms: Vec<String>,
    /// `cells[t][k]`
    pub cells: Vec<Vec<TableCell>>,
}

/// Estimates of the reported terms, with bootstrap SEs and stars when given.
pub fn coefficient_table(
    design: &DidDesign,
    fit: &MultivariateMixedFit,
    boot: Option<&BootstrapResult>,
) -> Result<CoefficientTable> {
    if fit.scheme != design.scheme() || fit.outcomes != design.outcomes {
        return Err(Error::SchemeMismatch(format!(
            "fit ({}) does not belong to the {} design",
            fit.scheme,
            design.scheme()
        )));
    }
    if let Some(b) = boot {
        if b.scheme != fit.scheme || b.outcomes != fit.outcomes {
            return Err(Error::SchemeMismatch(format!(
                "bootstrap of the {} scheme merged with a {} fit",
                b.scheme, fit.scheme
            )));
        }
    }
    let terms = reported_terms(&design.layout);
    let values = reported_values(&design.layout, &fit.coefficients);
    let mut cells = Vec::with_capacity(terms.len());
    for (t, term) in terms.iter().enumerate() {
        let mut row = Vec::with_capacity(fit.outcomes.len());
        for (k, &o) in fit.outcomes.iter().enumerate() {
            let bt = match boot {
                Some(b) => Some(b.get(term, o).ok_or_else(|| {
                    Error::SchemeMismatch(format!("bootstrap has no {term} row for {o}"))
                })?),
                None => None,
            };
            let p_value = bt.map(|b| b.p_value).filter(|p| !p.is_nan());
            row.push(TableCell {
                estimate: values[t][k],
                se: bt.map(|b| b.se),
                p_value,
                stars: p_value.map_or("", significance_stars),
            });
        }
        cells.push(row);
    }
    Ok(CoefficientTable {
        scheme: fit.scheme,
        outcomes: fit.outcomes.clone(),
        terms,
        cells,
    })
}

impl CoefficientTable {
    /// One row per term, an estimate column and a bracketed SE column per outcome.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["term".to_string()];
        for o in &self.outcomes {
            header.push(o.label().to_string());
            header.push(format!("{}_se", o.label()));
        }
        out.write_record(&header)?;
        for (term, row) in self.terms.iter().zip(&self.cells) {
            let mut rec = vec![term.clone()];
            for c in row {
                rec.push(format!("{:.6}{}", c.estimate, c.stars));
                rec.push(c.se.map_or(String::new(), |s| format!("[{s:.6}]")));
            }
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("coefficient table", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did::design::tests::small_panel;
    use crate::did::{build_design, fit_multivariate_mixed};

    #[test]
    fn star_thresholds() {
        assert_eq!(significance_stars(0.004), "***");
        assert_eq!(significance_stars(0.03), "**");
        assert_eq!(significance_stars(0.06), "*");
        assert_eq!(significance_stars(0.5), "");
        assert_eq!(significance_stars(0.01), "**");
    }

    #[test]
    fn table_shape_without_bootstrap() {
        let d = build_design(&small_panel(), InteractionScheme::Base).unwrap();
        let fit = fit_multivariate_mixed(&d).unwrap();
        let t = coefficient_table(&d, &fit, None).unwrap();
        assert_eq!(t.terms.len(), 9);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("term,MORTALITY,MORTALITY_se,READMISSIONS"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn mismatched_scheme_is_rejected() {
        let base = build_design(&small_panel(), InteractionScheme::Base).unwrap();
        let surg = build_design(&small_panel(), InteractionScheme::Surgical).unwrap();
        let fit = fit_multivariate_mixed(&surg).unwrap();
        assert!(matches!(coefficient_table(&base, &fit, None), Err(Error::SchemeMismatch(_))));
    }
}
