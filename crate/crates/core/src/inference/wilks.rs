use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::did::{build_design, did_column, DidDesign, InteractionScheme};
use crate::error::{Error, Result};
use crate::numerics::{Cholesky, DenseMatrix};
use crate::riskadjust::PanelDataset;

/// Joint test of the pre-policy TREATED x YEAR coefficients across outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTestResult {
    pub lambda: f64,
    /// Rao's F.
    pub stat: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
    #[serde(skip)]
    pub hypothesis: Vec<String>,
    #[serde(skip)]
    pub n_rows: usize,
}

impl JointTestResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers serialize")
    }
}

pub fn wilks_parallel_trend_test(panel: &PanelDataset, scheme: InteractionScheme) -> Result<JointTestResult> {
    let design = build_design(panel, scheme)?;
    let hyp: Vec<String> = panel.config().placebo_years().into_iter().map(did_column).collect();
    wilks_test(&design, &hyp)
}

/// Wilks' lambda for `columns = 0` jointly over all outcomes of `design`.
///
/// Uses rows with every outcome observed. Hospital intercepts are absorbed by
/// weighted within-hospital demeaning; columns constant within hospitals drop
/// out. The multivariate least-squares fit then gives the residual (E) and
/// hypothesis (H) cross-product matrices.
pub fn wilks_test(design: &DidDesign, columns: &[String]) -> Result<JointTestResult> {
    if columns.is_empty() {
        return Err(Error::Config("no pre-policy coefficients to test".into()));
    }
    let k = design.n_outcomes();
    let rows: Vec<usize> = (0..design.rows())
        .filter(|&i| (0..k).all(|kk| design.value(i, kk).is_some()))
        .collect();
    let p_all = design.x.cols();
    let nh = design.hospitals.len();
    // weighted hospital means
    let mut wsum = vec![0.0; nh];
    let mut xm = vec![vec![0.0; p_all]; nh];
    let mut ym = vec![vec![0.0; k]; nh];
    for &i in &rows {
        let (h, w) = (design.hospital[i], design.weights[i]);
        wsum[h] += w;
        for a in 0..p_all {
            xm[h][a] += w * design.x[(i, a)];
        }
        for kk in 0..k {
            ym[h][kk] += w * design.value(i, kk).expect("complete row");
        }
    }
    for h in 0..nh {
        if wsum[h] > 0.0 {
            xm[h].iter_mut().chain(ym[h].iter_mut()).for_each(|v| *v /= wsum[h]);
        }
    }
    let n_clusters = wsum.iter().filter(|w| **w > 0.0).count();
    // weighted, demeaned cross products
    let mut xtx = DenseMatrix::zeros(p_all, p_all);
    let mut xty = DenseMatrix::zeros(p_all, k);
    let mut yty = DenseMatrix::zeros(k, k);
    for &i in &rows {
        let (h, w) = (design.hospital[i], design.weights[i]);
        let x: Vec<f64> = (0..p_all).map(|a| design.x[(i, a)] - xm[h][a]).collect();
        let y: Vec<f64> = (0..k).map(|kk| design.value(i, kk).unwrap() - ym[h][kk]).collect();
        for a in 0..p_all {
            for b in 0..p_all {
                xtx[(a, b)] += w * x[a] * x[b];
            }
            for kk in 0..k {
                xty[(a, kk)] += w * x[a] * y[kk];
            }
        }
        for a in 0..k {
            for b in 0..k {
                yty[(a, b)] += w * y[a] * y[b];
            }
        }
    }
    // keep a maximal independent set of columns, in design order
    let scale: Vec<f64> = (0..p_all).map(|a| xtx[(a, a)].sqrt()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for a in 0..p_all {
        if scale[a] <= 1e-12 * scale.iter().cloned().fold(0.0, f64::max) {
            continue;
        }
        let mut trial = kept.clone();
        trial.push(a);
        let m = sub_normalized(&xtx, &trial, &scale);
        if Cholesky::factor_with_tolerance(&m, 1e-10).is_ok() {
            kept = trial;
        }
    }
    let hyp: Vec<usize> = columns
        .iter()
        .map(|c| {
            let a = design
                .layout
                .position(c)
                .ok_or_else(|| Error::SchemeMismatch(format!("column {c} is not in the {} design", design.scheme())))?;
            kept.iter()
                .position(|&j| j == a)
                .ok_or_else(|| Error::Rank(format!("hypothesis column {c} is not identified within hospitals")))
        })
        .collect::<Result<_>>()?;
    let p = kept.len();
    let xx = DenseMatrix::from_row_major(p, p, kept.iter().flat_map(|&a| kept.iter().map(move |&b| (a, b))).map(|(a, b)| xtx[(a, b)]).collect())?;
    let ch = Cholesky::factor(&xx).map_err(|_| Error::Rank("design is rank deficient within hospitals".into()))?;
    let xx_inv = ch.inverse();
    // B = (X'X)^{-1} X'Y
    let mut b = DenseMatrix::zeros(p, k);
    for kk in 0..k {
        let rhs: Vec<f64> = kept.iter().map(|&a| xty[(a, kk)]).collect();
        let sol = ch.solve(&rhs);
        for a in 0..p {
            b[(a, kk)] = sol[a];
        }
    }
    // E = Y'Y - B' X'Y
    let mut e = yty.clone();
    for r in 0..k {
        for s in 0..k {
            let fitted: f64 = kept.iter().enumerate().map(|(a, &j)| b[(a, r)] * xty[(j, s)]).sum();
            e[(r, s)] -= fitted;
        }
    }
    symmetrize(&mut e);
    // H = (LB)' (L (X'X)^{-1} L')^{-1} (LB)
    let q = hyp.len();
    let lb = DenseMatrix::from_row_major(q, k, hyp.iter().flat_map(|&a| (0..k).map(move |kk| (a, kk))).map(|(a, kk)| b[(a, kk)]).collect())?;
    let lvl = DenseMatrix::from_row_major(q, q, hyp.iter().flat_map(|&a| hyp.iter().map(move |&c| (a, c))).map(|(a, c)| xx_inv[(a, c)]).collect())?;
    let lvl_ch = Cholesky::factor(&lvl)?;
    let mut h = DenseMatrix::zeros(k, k);
    for r in 0..k {
        let sol = lvl_ch.solve(&lb.column(r));
        for s in 0..k {
            h[(r, s)] = (0..q).map(|t| lb[(t, s)] * sol[t]).sum();
        }
    }
    symmetrize(&mut h);

    let df_e = rows.len() as f64 - n_clusters as f64 - p as f64;
    if df_e < k as f64 {
        return Err(Error::Rank(format!(
            "{df_e} residual degrees of freedom for {k} outcomes; remove outcomes or add data"
        )));
    }
    let e_ch = Cholesky::factor_with_tolerance(&e, 1e-12).map_err(|_| {
        Error::Rank("residual cross-product matrix is singular; remove a linearly dependent outcome".into())
    })?;
    let mut eh = e.clone();
    eh.add_assign(&h);
    let lambda = (e_ch.log_det() - Cholesky::factor(&eh)?.log_det()).exp().min(1.0);
    let (stat, df1, df2, pval) = rao_f(lambda, k as f64, q as f64, df_e);
    Ok(JointTestResult {
        lambda,
        stat,
        df1,
        df2,
        p: pval,
        hypothesis: columns.to_vec(),
        n_rows: rows.len(),
    })
}

/// Rao's F approximation for Wilks' lambda with `p` responses, `q` hypothesis
/// and `df_e` error degrees of freedom. Exact when `min(p, q) <= 2`.
pub fn rao_f(lambda: f64, p: f64, q: f64, df_e: f64) -> (f64, f64, f64, f64) {
    let m = df_e - (p - q + 1.0) / 2.0;
    let t = if p * p + q * q - 5.0 > 0.0 {
        ((p * p * q * q - 4.0) / (p * p + q * q - 5.0)).sqrt()
    } else {
        1.0
    };
    let df1 = p * q;
    let df2 = m * t - df1 / 2.0 + 1.0;
    let l = lambda.powf(1.0 / t);
    let f = (1.0 - l) / l * df2 / df1;
    let pval = if f <= 0.0 {
        1.0
    } else {
        let dist = FisherSnedecor::new(df1, df2).expect("positive degrees of freedom");
        dist.sf(f).clamp(0.0, 1.0)
    };
    (f, df1, df2, pval)
}

fn sub_normalized(m: &DenseMatrix, idx: &[usize], scale: &[f64]) -> DenseMatrix {
    let n = idx.len();
    let v = idx
        .iter()
        .flat_map(|&a| idx.iter().map(move |&b| (a, b)))
        .map(|(a, b)| m[(a, b)] / (scale[a] * scale[b]))
        .collect();
    DenseMatrix::from_row_major(n, n, v).expect("square")
}

fn symmetrize(m: &mut DenseMatrix) {
    let n = m.rows();
    for r in 0..n {
        for s in 0..r {
            let v = 0.5 * (m[(r, s)] + m[(s, r)]);
            m[(r, s)] = v;
            m[(s, r)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rao_f_matches_exact_single_hypothesis_form() {
        // q = 1: F = (1 - L)/L * (df_e - p + 1)/p
        let (f, df1, df2, _) = rao_f(0.9, 3.0, 1.0, 50.0);
        assert_eq!(df1, 3.0);
        assert!((df2 - 48.0).abs() < 1e-12);
        assert!((f - (0.1 / 0.9) * 48.0 / 3.0).abs() < 1e-12);
        let (_, _, _, p) = rao_f(1.0, 5.0, 1.0, 100.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn p_two_single_hypothesis_matches_two_sample_hotelling() {
        // p = 2, q = 2: t = 2
        let (f, df1, df2, _) = rao_f(0.81, 2.0, 2.0, 30.0);
        assert_eq!(df1, 4.0);
        assert!((df2 - 58.0).abs() < 1e-12);
        assert!((f - (1.0 - 0.9) / 0.9 * 58.0 / 4.0).abs() < 1e-12);
    }
}
