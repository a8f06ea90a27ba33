//! Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("each sample needs at least 2 values (got {0} and {1})")]
    TooFewSamples(usize, usize),
    #[error("sample contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-tailed Welch test. With both variances zero the statistic is
/// undefined: equal means give p = 1, unequal means give p = 0.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if ma == mb {
            WelchResult {
                t: 0.0,
                df,
                p_value: 1.0,
            }
        } else {
            WelchResult {
                t: f64::INFINITY.copysign(ma - mb),
                df,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive and finite");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub dataset_a: String,
    pub dataset_b: String,
    pub metric: String,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// `p_value < ALPHA`.
    pub significant: bool,
}

pub fn compare(
    dataset_a: &str,
    dataset_b: &str,
    metric: &str,
    a: &[f64],
    b: &[f64],
) -> Result<SignificanceResult, StatsError> {
    let r = welch_t_test(a, b)?;
    Ok(SignificanceResult {
        dataset_a: dataset_a.into(),
        dataset_b: dataset_b.into(),
        metric: metric.into(),
        t: r.t,
        df: r.df,
        p_value: r.p_value,
        significant: r.p_value < ALPHA,
    })
}
