use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub slope: f64,
    /// Intercept in log space: `ln y ≈ intercept + slope·ln x`.
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares on `(ln x, ln y)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return invalid(format!("power-law fit needs at least 3 points, got {}", points.len()));
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return invalid(format!("power-law fit needs positive finite values, got ({x}, {y})"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("power-law fit needs at least two distinct x values");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(PowerLawFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_laws() {
        let inv: Vec<_> = [1.0, 2.0, 4.0, 10.0].iter().map(|&x| (x, 5.0 / x)).collect();
        let f = fit_power_law(&inv).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.intercept - 5f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);

        let sq: Vec<_> = [0.5, 1.0, 3.0].iter().map(|&x| (x, 2.0 * x * x)).collect();
        assert!((fit_power_law(&sq).unwrap().slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perturbed_inverse_law() {
        let signs = [1.0, -1.0, -1.0, 1.0, 1.0, -1.0];
        let pts: Vec<_> = signs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x = 100.0 * 2f64.powi(i as i32);
                (x, (1.0 + 0.01 * s) / x)
            })
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!(f.slope > -1.05 && f.slope < -0.95, "{}", f.slope);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(-1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(2.0, 1.0), (2.0, 3.0), (2.0, 1.0)]).is_err());
    }
}
