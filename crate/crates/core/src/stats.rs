//! Small statistics helpers shared by the experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_slope(&lx, &ly)
}

pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the sample mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Pearson chi-square goodness of fit. Cells with expected count below
/// `min_expected` are pooled into one cell. Returns `(statistic, dof, p)`.
pub fn chi_square_gof(observed: &[u64], expected: &[f64], min_expected: f64) -> (f64, usize, f64) {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= min_expected {
            cells.push((o as f64, e));
        } else {
            pool_o += o as f64;
            pool_e += e;
        }
    }
    if pool_e > 0.0 {
        cells.push((pool_o, pool_e));
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len().saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(stat);
    (stat, dof, p)
}

/// Chi-square test of homogeneity for a `rows x cols` contingency table.
pub fn chi_square_homogeneity(table: &[Vec<u64>]) -> (f64, usize, f64) {
    let cols = table[0].len();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let total: f64 = row_sums.iter().sum();
    let used: Vec<usize> = (0..cols).filter(|&j| col_sums[j] > 0.0).collect();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for &j in &used {
            let e = row_sums[i] * col_sums[j] / total;
            let o = row[j] as f64;
            stat += (o - e) * (o - e) / e;
        }
    }
    let dof = ((table.len() - 1) * (used.len().saturating_sub(1))).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(stat);
    (stat, dof, p)
}

/// `n` points spaced geometrically over `[a, b]`.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 0.5).abs() < 1e-12);
        assert!((linear_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((standard_error(&[1.0, 2.0, 3.0]) - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn chi_square_exact_fit() {
        let (stat, dof, p) = chi_square_gof(&[10, 20, 30], &[10.0, 20.0, 30.0], 5.0);
        assert_eq!((stat, dof), (0.0, 2));
        assert!((p - 1.0).abs() < 1e-12);
        let (_, _, p) = chi_square_gof(&[100, 0], &[50.0, 50.0], 5.0);
        assert!(p < 1e-10);
        let (_, _, p) = chi_square_homogeneity(&[vec![10, 20], vec![20, 40]]);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(1e-3, 1e3, 50);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[49] - 1e3).abs() < 1e-9);
    }
}
