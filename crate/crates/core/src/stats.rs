//! Streaming mean/variance accumulators with an exact, order-fixed merge.

use serde::{Deserialize, Serialize};

/// Welford accumulator. Merging uses the pairwise update of Chan et al., so
/// per-block accumulators combined in a fixed order give a result that does
/// not depend on how blocks were scheduled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let w = other.n as f64 / n as f64;
        self.mean += delta * w;
        self.m2 += other.m2 + delta * delta * self.n as f64 * w;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Ordinary least squares `y = a + b x`. Returns `(a, b, stderr_b)`, the
/// slope error from the residual scatter (zero when `n ≤ 2`).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    weighted_linear_fit(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares with weights `w_i` (inverse variances).
/// The slope error is `sqrt(1 / S_xx)` in the weighted metric, scaled by the
/// residual scatter when the weights are uniform.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((x, y), w)| w * (x - xm) * (y - ym))
        .sum();
    let b = sxy / sxx;
    let a = ym - b * xm;
    let n = x.len();
    let uniform = w.iter().all(|&wi| wi == w[0]);
    let se = if uniform {
        if n > 2 {
            let rss: f64 = x.iter().zip(y).map(|(x, y)| (y - a - b * x).powi(2)).sum();
            (rss / (n - 2) as f64 / (sxx / w[0])).sqrt()
        } else {
            0.0
        }
    } else {
        (1.0 / sxx).sqrt()
    };
    (a, b, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_two_pass_formulas() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let s: RunningStats = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-14);
        assert!((s.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|x| 1.5 - 2.0 * x).collect();
        let (a, b, se) = linear_fit(&x, &y);
        assert!((a - 1.5).abs() < 1e-12 && (b + 2.0).abs() < 1e-12 && se < 1e-12);
    }

    proptest! {
        #[test]
        fn merge_equals_sequential(xs in prop::collection::vec(-1e3f64..1e3, 1..60), split in 0usize..60) {
            let split = split.min(xs.len());
            let all: RunningStats = xs.iter().copied().collect();
            let mut left: RunningStats = xs[..split].iter().copied().collect();
            let right: RunningStats = xs[split..].iter().copied().collect();
            left.merge(&right);
            prop_assert_eq!(left.count(), all.count());
            prop_assert!((left.mean() - all.mean()).abs() <= 1e-9 * (1.0 + all.mean().abs()));
            prop_assert!((left.variance() - all.variance()).abs() <= 1e-7 * (1.0 + all.variance()));
        }
    }
}
