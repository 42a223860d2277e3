//! Error metrics and the paired t-test used by the bootstrap comparison.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (ddof = 1). Zero for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    let ss: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (ss / pred.len() as f64).sqrt()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

/// Two-sided paired Student t-test; returns (t statistic, p-value).
///
/// Zero variance of the differences is a degenerate case: t = 0 with p = 1
/// when the means are equal, +/-inf with p = 0 otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "need at least 2 paired observations");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let sd = std_dev(&d);
    if sd == 0.0 {
        return if md == 0.0 {
            (0.0, 1.0)
        } else {
            (md.signum() * f64::INFINITY, 0.0)
        };
    }
    let n = d.len() as f64;
    let t = md / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    (t, 2.0 * dist.cdf(-t.abs()))
}
