//! Distances between densities and summaries of error time series.

use crate::error::Result;
use crate::ring::GridValues;

pub fn l2_error(a: &impl GridValues, b: &impl GridValues) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let h = a.grid().cell_width();
    Ok((a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() * h).sqrt())
}

pub fn l1_error(a: &impl GridValues, b: &impl GridValues) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let h = a.grid().cell_width();
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() * h)
}

/// Wasserstein-1 distance on the ring, `min_c int |F_a - F_b - c| dx`, using
/// cumulative masses at cell centres.
pub fn w1_circle(a: &impl GridValues, b: &impl GridValues) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let h = a.grid().cell_width();
    let mut acc = 0.0;
    let mut g: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let d = (x - y) * h;
            let at_centre = acc + 0.5 * d;
            acc += d;
            at_centre
        })
        .collect();
    let mut sorted = g.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    g.iter_mut().for_each(|v| *v = (*v - median).abs());
    Ok(g.iter().sum::<f64>() * h)
}

/// Mean of the trailing `fraction` of a series (at least one sample).
pub fn tail_mean(series: &[f64], fraction: f64) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let k = ((series.len() as f64 * fraction).ceil() as usize).clamp(1, series.len());
    series[series.len() - k..].iter().sum::<f64>() / k as f64
}

/// Least-squares fit `y = intercept + slope * x` with the coefficient of
/// determination and a 95% normal-approximation interval on the slope.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_ci95: (f64, f64),
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let se = if n > 2 { (ss_res / (nf - 2.0) / sxx).sqrt() } else { f64::INFINITY };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
        slope_ci95: (slope - 1.96 * se, slope + 1.96 * se),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::{DensityField, RingGrid};
    use approx::assert_abs_diff_eq;

    #[test]
    fn w1_matches_exhaustive_offset_search() {
        let g = RingGrid::circle(256).unwrap();
        let a = DensityField::from_fn(g, |x| (2.0 * (x - 1.0).cos()).exp()).unwrap().with_mass(1.0).unwrap();
        let b = a.rotate_cells(5);
        // exhaustive oracle: the optimal offset is one of the sampled CDF differences
        let h = g.cell_width();
        let mut acc = 0.0;
        let diff: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| {
                acc += (x - y) * h;
                acc - 0.5 * (x - y) * h
            })
            .collect();
        let brute = diff
            .iter()
            .map(|c| diff.iter().map(|d| (d - c).abs()).sum::<f64>() * h)
            .fold(f64::INFINITY, f64::min);
        let w = w1_circle(&a, &b).unwrap();
        assert_abs_diff_eq!(w, brute, epsilon = 1e-12);
        assert!(w <= 5.0 * h + 1e-12);
        assert_eq!(w1_circle(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn norms() {
        let g = RingGrid::default();
        let a = crate::ring::GridFn::from_fn(g, f64::cos);
        let z = crate::ring::GridFn::zeros(g);
        assert_abs_diff_eq!(l2_error(&a, &z).unwrap(), std::f64::consts::PI.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(l1_error(&a, &z).unwrap(), 4.0, epsilon = 1e-3);
    }

    #[test]
    fn fit_recovers_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert_abs_diff_eq!(f.slope, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0, 4.0], 0.5), 3.5);
    }
}
