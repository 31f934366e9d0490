//! Two-sample t-tests on per-view scores.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variance {
    /// Welch: unequal variances, Welch-Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Student: pooled variance, `na + nb - 2` degrees of freedom.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 })
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom,
/// `I_{df / (df + t^2)}(df / 2, 1 / 2)`.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0 && df.is_finite()) || t.is_nan() {
        return Err(Error::invalid(format!("invalid t statistic {t} with df {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let x = df / (df + t * t);
    Ok(beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0))
}

pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    ttest(a, b, Variance::Welch)
}

pub fn ttest(a: &[f64], b: &[f64], variance: Variance) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test sample"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (se2, df) = match variance {
        Variance::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            (se2, se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0)))
        }
        Variance::Pooled => {
            let df = na + nb - 2.0;
            let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp * (1.0 / na + 1.0 / nb), df)
        }
    };
    let t = (ma - mb) / se2.sqrt();
    Ok(TTestResult {
        t,
        df,
        p: t_two_sided_p(t, df)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_means_give_unit_p() {
        let a = [-1.5, 0.25, 2.0, -0.75, 0.0];
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let r = welch_ttest(&a, &b).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            welch_ttest(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(welch_ttest(&[1.0], &[2.0, 3.0]).is_err());
        assert!(welch_ttest(&[1.0, f64::NAN], &[2.0, 3.0]).is_err());
        // One constant sample is fine.
        assert!(welch_ttest(&[1.0, 1.0, 1.0], &[2.0, 3.0]).is_ok());
    }

    #[test]
    fn pooled_matches_welch_for_equal_sizes_and_variances() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0];
        let w = ttest(&a, &b, Variance::Welch).unwrap();
        let p = ttest(&a, &b, Variance::Pooled).unwrap();
        assert!((w.t - p.t).abs() < 1e-15);
        assert!((w.df - p.df).abs() < 1e-12);
    }
}
