//! Small statistical helpers shared by the estimators.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean treating `xs` as independent.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Mean and standard error from `n_batches` contiguous batch means of a series.
pub fn batch_means(series: &[f64], n_batches: usize) -> (f64, f64) {
    let nb = n_batches.max(2).min(series.len());
    let len = series.len() / nb;
    let means: Vec<f64> = (0..nb)
        .map(|b| mean(&series[b * len..(b + 1) * len]))
        .collect();
    (mean(&means), std_error(&means))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(mean: f64, stderr: f64) -> Self {
        Self { mean, stderr }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        Self::new(mean(xs), std_error(xs))
    }

    pub fn ci95(&self) -> [f64; 2] {
        [self.mean - Z95 * self.stderr, self.mean + Z95 * self.stderr]
    }

    pub fn contains(&self, x: f64, n_se: f64) -> bool {
        (x - self.mean).abs() <= n_se * self.stderr
    }

    /// `|a - b| / sqrt(se_a² + se_b²)`.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean).abs() / self.stderr.hypot(other.stderr)
    }

    pub fn relative_error(&self, target: f64) -> f64 {
        (self.mean - target).abs() / target.abs()
    }
}

/// Least-squares slope of `y` against `x` with its standard error.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let se = if n > 2.0 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (slope, intercept, se)
}

/// Welch two-sample statistic; `|t| > 2.576` rejects equality of means at 1%.
pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let va = variance(a) / a.len() as f64;
    let vb = variance(b) / b.len() as f64;
    (mean(a) - mean(b)) / (va + vb).sqrt()
}

/// One-way ANOVA F statistic over groups.
pub fn anova_f(groups: &[Vec<f64>]) -> (f64, usize, usize) {
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let grand = mean(&all);
    let ssb: f64 = groups
        .iter()
        .map(|g| g.len() as f64 * (mean(g) - grand).powi(2))
        .sum();
    let ssw: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let df1 = k - 1;
    let df2 = n - k;
    ((ssb / df1 as f64) / (ssw / df2 as f64), df1, df2)
}

/// Upper-tail probability of the F distribution via the regularized incomplete beta.
pub fn f_sf(f: f64, d1: usize, d2: usize) -> f64 {
    let (a, b) = (d1 as f64 / 2.0, d2 as f64 / 2.0);
    let x = d2 as f64 / (d2 as f64 + d1 as f64 * f);
    statrs::function::beta::beta_reg(b, a, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (s, i, se) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn batch_means_of_constant() {
        let (m, se) = batch_means(&[3.0; 100], 10);
        assert_eq!(m, 3.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn f_tail() {
        // F(1, ∞)-like check: F = 0 gives tail 1
        assert!((f_sf(0.0, 3, 20) - 1.0).abs() < 1e-12);
        assert!(f_sf(10.0, 3, 200) < 1e-4);
    }
}
