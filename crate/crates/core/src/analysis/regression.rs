use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GandaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub n: usize,
}

/// Ordinary least squares `y = slope * x + intercept` with a two-sided
/// t-test on the slope (n - 2 degrees of freedom).
///
/// A perfect fit has zero residual variance; its p-value is reported as 0.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    if x.len() != y.len() {
        return Err(GandaError::ShapeMismatch(format!(
            "regression inputs have {} and {} points",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(GandaError::DegenerateInput(format!("need at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GandaError::DegenerateInput("non-finite input".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(GandaError::DegenerateInput("x is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (slope * xi + intercept);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };

    let df = nf - 2.0;
    let se = (ss_res / df / sxx).sqrt();
    let p_value = if se == 0.0 {
        0.0
    } else {
        let t = (slope / se).abs();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t)).clamp(0.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept,
        r_squared,
        p_value,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let r = linear_regression(&x, &x).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12);
        assert!(r.intercept.abs() < 1e-12);
        assert_eq!(r.r_squared, 1.0);
        assert_eq!(r.n, 10);
    }

    #[test]
    fn affine_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = linear_regression(&x, &y).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12);
        assert!((r.intercept - 1.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(linear_regression(&[1.0, 2.0], &[1.0, 2.0]), Err(GandaError::DegenerateInput(_))));
        assert!(matches!(
            linear_regression(&[3.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]),
            Err(GandaError::DegenerateInput(_))
        ));
    }

    #[test]
    fn p_value_matches_reference() {
        // scipy.stats.linregress([1,2,3,4,5], [2,4,5,4,5]).pvalue
        let r = linear_regression(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
        assert!((r.slope - 0.6).abs() < 1e-12);
        assert!((r.r_squared - 0.6).abs() < 1e-12);
        assert!((r.p_value - 0.12402706265755).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn noise_has_low_r2_and_high_p() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let r = linear_regression(&x, &y).unwrap();
        assert!(r.r_squared < 0.3);
        assert!(r.p_value > 0.2 && r.p_value <= 1.0);
    }
}
