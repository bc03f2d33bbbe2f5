//! Survey-weighted empirical CDF and quantiles.

use crate::population::SurveySample;

/// Right-continuous nondecreasing step function
/// F(z) = sum_{i: z_i <= z} w_i / sum_i w_i, evaluable in O(log n).
#[derive(Debug, Clone)]
pub struct WeightedCdf {
    /// Distinct support points, ascending.
    z: Vec<f64>,
    /// Cumulative weights at each support point.
    cum: Vec<f64>,
    total: f64,
}

impl WeightedCdf {
    /// Build from (value, weight) pairs; O(n log n).
    pub fn new(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut v: Vec<(f64, f64)> = pairs.into_iter().collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut z = Vec::with_capacity(v.len());
        let mut cum = Vec::with_capacity(v.len());
        let mut running = 0.0;
        for (zi, wi) in v {
            running += wi;
            if z.last() == Some(&zi) {
                *cum.last_mut().unwrap() = running;
            } else {
                z.push(zi);
                cum.push(running);
            }
        }
        WeightedCdf { z, cum, total: running }
    }

    /// Weighted by the reciprocal inclusion probabilities.
    pub fn from_sample(sample: &SurveySample) -> Self {
        Self::new(sample.rows.iter().map(|r| (r.z, 1.0 / r.pi)))
    }

    pub fn eval(&self, at: f64) -> f64 {
        // number of support points <= at
        let k = self.z.partition_point(|&v| v <= at);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1] / self.total
        }
    }

    /// Left-continuous generalized inverse inf{z : F(z) >= tau} for
    /// tau in (0, 1]; always one of the observed values.
    ///
    /// A relative slack of 1e-12 on the weight comparison protects exact-tie
    /// cases (e.g. tau = 0.5 with equal weights) from one-ulp rounding in the
    /// cumulative sums.
    pub fn quantile(&self, tau: f64) -> f64 {
        assert!(tau > 0.0 && tau <= 1.0, "tau must be in (0, 1], got {tau}");
        let target = tau * self.total * (1.0 - 1e-12);
        let k = self.cum.partition_point(|&c| c < target);
        self.z[k.min(self.z.len() - 1)]
    }

    pub fn min_z(&self) -> f64 {
        self.z[0]
    }

    pub fn max_z(&self) -> f64 {
        *self.z.last().unwrap()
    }

    pub fn support(&self) -> &[f64] {
        &self.z
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }
}
