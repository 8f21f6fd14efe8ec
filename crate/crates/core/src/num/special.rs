//! Stable link functions, Student-t tail helpers, and quantiles.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Numerically stable logistic function. The input saturates at +-36 so the
/// output stays strictly inside (0, 1) for every finite argument; beyond
/// that point the exact value is not representable apart from 0 or 1 anyway.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-36.0, 36.0);
    if x >= 0.0 {
        let e = (-x).exp();
        1.0 / (1.0 + e)
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `ln(1 + e^x)`.
#[inline]
pub fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood contribution for response `y` at linear
/// predictor `eta`: `y*eta - ln(1 + e^eta)`.
#[inline]
pub fn bernoulli_loglik_term(y: f64, eta: f64) -> f64 {
    y * eta - log1pexp(eta)
}

/// Two-sided p-value for a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::data(format!("t test needs positive df, got {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::numerical(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Upper quantile `t` such that `P(T <= t) = p` for `df` degrees of freedom.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || !(0.0..1.0).contains(&p) {
        return Err(Error::data(format!("bad t quantile request p={p} df={df}")));
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::numerical(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Linear-interpolation quantile (the common "type 7" definition) of an
/// already sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = h - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Z-scores using the sample (N-1) standard deviation.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::data("standardize needs at least 2 values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !var.is_finite() || var <= 0.0 {
        return Err(Error::data("zero variance"));
    }
    let sd = var.sqrt();
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Median and interquartile range (Q3 - Q1).
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let med = quantile_sorted(&v, 0.5);
    let iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
    Some((med, iqr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_stable_and_open_interval() {
        assert!(sigmoid(800.0) < 1.0);
        assert!(sigmoid(-800.0) > 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn t_symmetric_two_sided() {
        let p = t_two_sided_p(1.0606601717798212, 2.0).unwrap();
        // r = 0.6 on 4 points: t = 0.6*sqrt(2/0.64), p is exactly 0.4 for df=2.
        assert!((p - 0.4).abs() < 1e-12, "{p}");
        assert!((t_two_sided_p(0.0, 5.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t_quantile_round_trip() {
        let q = t_quantile(0.975, 10.0).unwrap();
        assert!((q - 2.228138852).abs() < 1e-6, "{q}");
        let p = t_two_sided_p(q, 10.0).unwrap();
        assert!((p - 0.05).abs() < 1e-9);
    }

    #[test]
    fn quantile_type7_matches_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        let (med, iqr) = median_iqr(&v).unwrap();
        assert_eq!(med, 2.5);
        assert_eq!(iqr, 3.25 - 1.75);
    }
}
