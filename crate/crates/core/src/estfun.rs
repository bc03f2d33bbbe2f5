//! Estimating systems for the inequality measures.
//!
//! A system bundles the raw moment function g(z, theta, phi), the plug-in
//! nuisance estimate phi-hat, the augmentation term Xi(z, theta, phi) whose
//! addition makes the score insensitive to the first-step plug-in, and
//! optional auxiliary moments q(z, theta). The augmented function is
//! psi = g + Xi; with `augmented = false` the system degrades to the
//! conventional plug-in score (psi = g), which is the comparison baseline
//! throughout.
//!
//! Concrete measures:
//!
//! * Gini coefficient: g = psi{F(z)} z - theta z with the weighted CDF as
//!   nuisance. The augmentation's outer expectation is replaced by its
//!   survey-weighted plug-in
//!   Xi(z) = N^-1 sum_j w_j z_j psi'{F(z_j)} (I(z_j >= z) - F(z_j)).
//! * Lorenz ordinate at tau: g = z{I(z <= xi) - theta},
//!   Xi = -xi{I(z <= xi) - tau}, with the tau-th weighted quantile xi.
//! * Quantile share on (tau1, tau2]: g = z{I(xi1 < z <= xi2) - theta},
//!   Xi = -xi2{I(z <= xi2) - tau2} + xi1{I(z <= xi1) - tau1}.
//!
//! Boundary conventions: tau1 = 0 treats xi1 as -infinity and drops its
//! augmentation term; tau2 = 1 takes xi2 as the maximum observed value and
//! drops its term (the indicator is then identically one on the data).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cdf::WeightedCdf;
use crate::error::{Error, Result};
use crate::population::{FinitePopulation, SurveySample};

/// Evaluator signature: (z, theta, out-buffer).
pub type MomentFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Survey-weighted CDF plug-in.
pub fn weighted_cdf(sample: &SurveySample) -> WeightedCdf {
    WeightedCdf::from_sample(sample)
}

/// The tau-th survey-weighted quantile, the left-continuous generalized
/// inverse of [`weighted_cdf`]. tau must lie in (0, 1].
pub fn weighted_quantile(sample: &SurveySample, tau: f64) -> f64 {
    WeightedCdf::from_sample(sample).quantile(tau)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "measure", rename_all = "snake_case")]
pub enum Measure {
    /// Gini coefficient with the original carrier psi{u} = 2u - 1.
    Gini,
    Lorenz { tau: f64 },
    QuantileShare { tau1: f64, tau2: f64 },
    /// Joint vector of share cells (p >= 2), sharing one quantile fit.
    ShareVector { cells: Vec<(f64, f64)> },
    /// Population mean via g = z - theta; no nuisance. Mostly a diagnostic
    /// and test system.
    Mean,
}

/// Recipe for an estimating system: measure plus the augmentation switch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemSpec {
    #[serde(flatten)]
    pub measure: Measure,
    pub augmented: bool,
}

impl SystemSpec {
    pub fn gini(augmented: bool) -> Self {
        Self { measure: Measure::Gini, augmented }
    }

    pub fn lorenz(tau: f64, augmented: bool) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("lorenz tau {tau} outside (0, 1]")));
        }
        Ok(Self { measure: Measure::Lorenz { tau }, augmented })
    }

    pub fn quantile_share(tau1: f64, tau2: f64, augmented: bool) -> Result<Self> {
        check_cell(tau1, tau2)?;
        Ok(Self { measure: Measure::QuantileShare { tau1, tau2 }, augmented })
    }

    pub fn share_vector(cells: Vec<(f64, f64)>, augmented: bool) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Config("share vector needs at least one cell".into()));
        }
        for &(a, b) in &cells {
            check_cell(a, b)?;
        }
        Ok(Self { measure: Measure::ShareVector { cells }, augmented })
    }

    pub fn mean(augmented: bool) -> Self {
        Self { measure: Measure::Mean, augmented }
    }

    pub fn p(&self) -> usize {
        match &self.measure {
            Measure::ShareVector { cells } => cells.len(),
            _ => 1,
        }
    }

    /// Fit the nuisance plug-in from a sample (survey-weighted).
    pub fn fit_nuisance(&self, sample: &SurveySample) -> Result<Nuisance> {
        sample.validate()?;
        let nui = match &self.measure {
            Measure::Gini => Nuisance::GiniCdf(Arc::new(GiniFit::new(sample, default_carrier()))),
            Measure::Lorenz { tau } => {
                let cdf = WeightedCdf::from_sample(sample);
                Nuisance::Quantile { tau: *tau, xi: cdf.quantile(*tau) }
            }
            Measure::QuantileShare { tau1, tau2 } => {
                let cdf = WeightedCdf::from_sample(sample);
                Nuisance::QuantilePair(fit_pair(&cdf, *tau1, *tau2))
            }
            Measure::ShareVector { cells } => {
                let cdf = WeightedCdf::from_sample(sample);
                Nuisance::QuantilePairs(
                    cells.iter().map(|&(a, b)| fit_pair(&cdf, a, b)).collect(),
                )
            }
            Measure::Mean => Nuisance::None,
        };
        Ok(nui)
    }

    /// Freeze evaluators against an already-fitted nuisance. Splitting this
    /// from [`SystemSpec::fit`] lets callers pair a census-fitted nuisance
    /// with sample data, which the orthogonality diagnostics need.
    pub fn system_with(&self, nuisance: Nuisance) -> Result<FittedSystem> {
        let aug = self.augmented;
        match (&self.measure, &nuisance) {
            (Measure::Gini, Nuisance::GiniCdf(fit)) => {
                let f = fit.clone();
                let g: MomentFn = Arc::new(move |z, th, out| {
                    out[0] = f.carrier_at(z) * z - th[0] * z;
                });
                let f2 = fit.clone();
                let xi: MomentFn = Arc::new(move |z, _th, out| out[0] = f2.xi_at(z));
                Ok(FittedSystem::new(1, 1, vec![-1.0], vec![1.0], aug, g, Some(xi), nuisance)
                    .assume_linear_in_theta())
            }
            (Measure::Lorenz { tau }, Nuisance::Quantile { xi, .. }) => {
                let (t, x) = (*tau, *xi);
                let g: MomentFn = Arc::new(move |z, th, out| {
                    out[0] = z * (ind(z <= x) - th[0]);
                });
                let xi_fn: MomentFn = Arc::new(move |z, _th, out| {
                    out[0] = -x * (ind(z <= x) - t);
                });
                Ok(FittedSystem::new(1, 1, vec![0.0], vec![1.0], aug, g, Some(xi_fn), nuisance)
                    .assume_linear_in_theta())
            }
            (Measure::QuantileShare { .. }, Nuisance::QuantilePair(pair)) => {
                let pr = *pair;
                let g: MomentFn = Arc::new(move |z, th, out| out[0] = pr.g(z, th[0]));
                let xi_fn: MomentFn = Arc::new(move |z, _th, out| out[0] = pr.xi(z));
                Ok(FittedSystem::new(1, 1, vec![0.0], vec![1.0], aug, g, Some(xi_fn), nuisance)
                    .assume_linear_in_theta())
            }
            (Measure::ShareVector { cells }, Nuisance::QuantilePairs(pairs)) => {
                if cells.len() != pairs.len() {
                    return Err(Error::Config("cell/nuisance arity mismatch".into()));
                }
                let prs = pairs.clone();
                let g: MomentFn = Arc::new(move |z, th, out| {
                    for (k, pr) in prs.iter().enumerate() {
                        out[k] = pr.g(z, th[k]);
                    }
                });
                let prs2 = pairs.clone();
                let xi_fn: MomentFn = Arc::new(move |z, _th, out| {
                    for (k, pr) in prs2.iter().enumerate() {
                        out[k] = pr.xi(z);
                    }
                });
                let p = cells.len();
                Ok(FittedSystem::new(
                    p,
                    p,
                    vec![0.0; p],
                    vec![1.0; p],
                    aug,
                    g,
                    Some(xi_fn),
                    nuisance,
                )
                .assume_linear_in_theta())
            }
            (Measure::Mean, Nuisance::None) => {
                let g: MomentFn = Arc::new(move |z, th, out| out[0] = z - th[0]);
                // data-free bounds; callers can tighten via with_theta_bounds
                Ok(FittedSystem::new(
                    1,
                    1,
                    vec![-1e12],
                    vec![1e12],
                    aug,
                    g,
                    None,
                    nuisance,
                )
                .assume_linear_in_theta())
            }
            _ => Err(Error::Config("nuisance kind does not match the measure".into())),
        }
    }

    /// Two-step fit: estimate the nuisance from the sample, then freeze.
    pub fn fit(&self, sample: &SurveySample) -> Result<FittedSystem> {
        let mut sys = self.system_with(self.fit_nuisance(sample)?)?;
        if let Measure::Mean = self.measure {
            let lo = sample.rows.iter().map(|r| r.z).fold(f64::INFINITY, f64::min);
            let hi = sample.rows.iter().map(|r| r.z).fold(f64::NEG_INFINITY, f64::max);
            let pad = 0.5 * (hi - lo).max(1.0);
            sys = sys.with_theta_bounds(vec![lo - pad], vec![hi + pad]);
        }
        Ok(sys)
    }

    /// Fit against the census sample (all inclusion probabilities one).
    pub fn fit_census(&self, pop: &FinitePopulation) -> Result<FittedSystem> {
        self.fit(&pop.census_sample())
    }
}

fn check_cell(tau1: f64, tau2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau1) || !(0.0..=1.0).contains(&tau2) || tau1 > tau2 {
        return Err(Error::Config(format!(
            "share cell needs 0 <= tau1 <= tau2 <= 1, got ({tau1}, {tau2})"
        )));
    }
    Ok(())
}

#[inline]
fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Fitted share-cell nuisance. A `None` endpoint is a dropped boundary
/// (tau1 = 0 or tau2 = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharePair {
    pub tau1: f64,
    pub tau2: f64,
    pub xi1: Option<f64>,
    pub xi2: Option<f64>,
}

impl SharePair {
    #[inline]
    fn in_cell(&self, z: f64) -> f64 {
        let lower = self.xi1.is_none_or(|x1| z > x1);
        let upper = self.xi2.is_none_or(|x2| z <= x2);
        ind(lower && upper)
    }

    #[inline]
    pub fn g(&self, z: f64, theta: f64) -> f64 {
        z * (self.in_cell(z) - theta)
    }

    #[inline]
    pub fn xi(&self, z: f64) -> f64 {
        let mut v = 0.0;
        if let Some(x2) = self.xi2 {
            v -= x2 * (ind(z <= x2) - self.tau2);
        }
        if let Some(x1) = self.xi1 {
            v += x1 * (ind(z <= x1) - self.tau1);
        }
        v
    }
}

fn fit_pair(cdf: &WeightedCdf, tau1: f64, tau2: f64) -> SharePair {
    SharePair {
        tau1,
        tau2,
        xi1: (tau1 > 0.0).then(|| cdf.quantile(tau1)),
        xi2: (tau2 < 1.0).then(|| cdf.quantile(tau2)),
    }
}

/// Fitted nuisance plug-in, frozen against the data it was computed from.
#[derive(Clone)]
pub enum Nuisance {
    None,
    Mean(f64),
    Quantile { tau: f64, xi: f64 },
    QuantilePair(SharePair),
    QuantilePairs(Vec<SharePair>),
    GiniCdf(Arc<GiniFit>),
}

impl std::fmt::Debug for Nuisance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Nuisance::None => write!(f, "None"),
            Nuisance::Mean(m) => write!(f, "Mean({m})"),
            Nuisance::Quantile { tau, xi } => write!(f, "Quantile(tau={tau}, xi={xi})"),
            Nuisance::QuantilePair(p) => write!(f, "QuantilePair({p:?})"),
            Nuisance::QuantilePairs(v) => write!(f, "QuantilePairs({v:?})"),
            Nuisance::GiniCdf(_) => write!(f, "GiniCdf(..)"),
        }
    }
}

/// Carrier function for the Gini family: psi{u} and its derivative.
pub struct GiniCarrier {
    pub psi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub dpsi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// The original Gini coefficient: psi{u} = 2u - 1.
pub fn default_carrier() -> GiniCarrier {
    GiniCarrier { psi: Arc::new(|u| 2.0 * u - 1.0), dpsi: Arc::new(|_| 2.0) }
}

/// Gini plug-in: weighted CDF plus the precomputed augmentation table.
pub struct GiniFit {
    cdf: WeightedCdf,
    carrier: GiniCarrier,
    /// Suffix sums N^-1 sum_{z_j >= z_k} w_j z_j psi'(F(z_j)), aligned with
    /// the CDF support.
    tail: Vec<f64>,
    /// N^-1 sum_j w_j z_j psi'(F(z_j)) F(z_j).
    center: f64,
}

impl GiniFit {
    pub fn new(sample: &SurveySample, carrier: GiniCarrier) -> Self {
        let cdf = WeightedCdf::from_sample(sample);
        Self::from_cdf(cdf, carrier)
    }

    fn from_cdf(cdf: WeightedCdf, carrier: GiniCarrier) -> Self {
        let total = cdf.total_weight();
        let support = cdf.support().to_vec();
        // per-support-point mass (ties already merged by the CDF)
        let mut terms = Vec::with_capacity(support.len());
        let mut center = 0.0;
        let mut prev = 0.0;
        for &zk in &support {
            let fk = cdf.eval(zk);
            let mass = fk - prev; // w_k / total
            prev = fk;
            let t = mass * zk * (carrier.dpsi)(fk);
            center += t * fk;
            terms.push(t);
        }
        let mut tail = vec![0.0; terms.len()];
        let mut run = 0.0;
        for k in (0..terms.len()).rev() {
            run += terms[k];
            tail[k] = run;
        }
        let _ = total;
        GiniFit { cdf, carrier, tail, center }
    }

    pub fn cdf(&self) -> &WeightedCdf {
        &self.cdf
    }

    pub fn carrier_at(&self, z: f64) -> f64 {
        (self.carrier.psi)(self.cdf.eval(z))
    }

    /// Plug-in augmentation
    /// Xi(z) = N^-1 sum_j w_j z_j psi'(F(z_j)) {I(z_j >= z) - F(z_j)}.
    pub fn xi_at(&self, z: f64) -> f64 {
        let support = self.cdf.support();
        let k = support.partition_point(|&v| v < z);
        let tail = if k < self.tail.len() { self.tail[k] } else { 0.0 };
        tail - self.center
    }
}

/// A fitted estimating system: frozen nuisance plus pure evaluators.
///
/// All evaluators are pure functions of (z, theta) and safe for concurrent
/// use.
#[derive(Clone)]
pub struct FittedSystem {
    r: usize,
    p: usize,
    s: usize,
    theta_lo: Vec<f64>,
    theta_hi: Vec<f64>,
    augmented: bool,
    g_fn: MomentFn,
    xi_fn: Option<MomentFn>,
    q_fn: Option<MomentFn>,
    /// The moment is affine in theta (true for every built-in measure);
    /// lets root solvers finish in two evaluations.
    linear_in_theta: bool,
    pub nuisance: Nuisance,
}

impl FittedSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        r: usize,
        p: usize,
        theta_lo: Vec<f64>,
        theta_hi: Vec<f64>,
        augmented: bool,
        g_fn: MomentFn,
        xi_fn: Option<MomentFn>,
        nuisance: Nuisance,
    ) -> Self {
        assert!(r >= p && p >= 1, "need r >= p >= 1");
        assert_eq!(theta_lo.len(), p);
        assert_eq!(theta_hi.len(), p);
        FittedSystem {
            r,
            p,
            s: 0,
            theta_lo,
            theta_hi,
            augmented,
            g_fn,
            xi_fn,
            q_fn: None,
            linear_in_theta: false,
            nuisance,
        }
    }

    /// Mark the moment as affine in theta (enables two-evaluation root
    /// solves).
    pub fn assume_linear_in_theta(mut self) -> Self {
        self.linear_in_theta = true;
        self
    }

    pub fn is_linear_in_theta(&self) -> bool {
        self.linear_in_theta
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Side-moment dimension (0 when no auxiliary information attached).
    pub fn s(&self) -> usize {
        self.s
    }

    pub fn augmented(&self) -> bool {
        self.augmented
    }

    pub fn theta_lo(&self) -> &[f64] {
        &self.theta_lo
    }

    pub fn theta_hi(&self) -> &[f64] {
        &self.theta_hi
    }

    pub fn with_theta_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), self.p);
        assert_eq!(hi.len(), self.p);
        self.theta_lo = lo;
        self.theta_hi = hi;
        self
    }

    /// Attach s auxiliary moments q(z, theta) (population-level side
    /// information).
    pub fn with_side_info(mut self, s: usize, q_fn: MomentFn) -> Self {
        self.s = s;
        self.q_fn = Some(q_fn);
        self
    }

    /// Known population mean as a single side moment q = z - mu.
    pub fn with_known_mean(self, mu: f64) -> Self {
        self.with_side_info(1, Arc::new(move |z, _th, out| out[0] = z - mu))
    }

    pub fn g(&self, z: f64, theta: &[f64], out: &mut [f64]) {
        (self.g_fn)(z, theta, &mut out[..self.r]);
    }

    pub fn xi(&self, z: f64, theta: &[f64], out: &mut [f64]) {
        match &self.xi_fn {
            Some(f) => f(z, theta, &mut out[..self.r]),
            None => out[..self.r].fill(0.0),
        }
    }

    /// psi = g + Xi when augmented, psi = g otherwise.
    pub fn psi(&self, z: f64, theta: &[f64], out: &mut [f64]) {
        self.g(z, theta, out);
        if self.augmented {
            if let Some(f) = &self.xi_fn {
                let mut buf = [0.0; 8];
                if self.r <= buf.len() {
                    f(z, theta, &mut buf[..self.r]);
                    for (o, b) in out[..self.r].iter_mut().zip(&buf[..self.r]) {
                        *o += b;
                    }
                } else {
                    let mut v = vec![0.0; self.r];
                    f(z, theta, &mut v);
                    for (o, b) in out[..self.r].iter_mut().zip(&v) {
                        *o += b;
                    }
                }
            }
        }
    }

    pub fn q(&self, z: f64, theta: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.q_fn {
            f(z, theta, &mut out[..self.s]);
        }
    }

    /// Moment dimension: r, or r + s when side information is included.
    pub fn moment_dim(&self, include_side: bool) -> usize {
        if include_side {
            self.r + self.s
        } else {
            self.r
        }
    }

    /// Stacked moment vector (psi', q')' when `include_side`.
    pub fn moments(&self, z: f64, theta: &[f64], include_side: bool, out: &mut [f64]) {
        self.psi(z, theta, out);
        if include_side && self.s > 0 {
            let (_, rest) = out.split_at_mut(self.r);
            self.q(z, theta, rest);
        }
    }
}

/// Gini-family system with a custom carrier psi{u} (and its derivative,
/// which the augmentation term requires). The default carrier 2u - 1 gives
/// the original Gini coefficient; see [`default_carrier`].
pub fn fit_gini_with_carrier(
    sample: &SurveySample,
    carrier: GiniCarrier,
    augmented: bool,
) -> Result<FittedSystem> {
    sample.validate()?;
    let fit = Arc::new(GiniFit::new(sample, carrier));
    let nuisance = Nuisance::GiniCdf(fit.clone());
    let g: MomentFn = Arc::new(move |z, th, out| {
        out[0] = fit.carrier_at(z) * z - th[0] * z;
    });
    let fit2 = match &nuisance {
        Nuisance::GiniCdf(f) => f.clone(),
        _ => unreachable!(),
    };
    let xi: MomentFn = Arc::new(move |z, _th, out| out[0] = fit2.xi_at(z));
    Ok(FittedSystem::new(1, 1, vec![-2.0], vec![2.0], augmented, g, Some(xi), nuisance)
        .assume_linear_in_theta())
}

/// Survey-weighted estimating-function average
/// U-hat(theta) = N^-1 sum_{i in S} pi_i^-1 psi(z_i, theta).
pub fn weighted_moment_mean(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> Vec<f64> {
    let dim = system.moment_dim(include_side);
    let mut acc = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for row in &sample.rows {
        system.moments(row.z, theta, include_side, &mut buf);
        let w = 1.0 / row.pi;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    for a in &mut acc {
        *a /= sample.population_size;
    }
    acc
}

/// Like [`weighted_moment_mean`] but for the raw g (no augmentation),
/// regardless of the system's augmented flag.
pub fn weighted_raw_mean(sample: &SurveySample, system: &FittedSystem, theta: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; system.r()];
    let mut buf = vec![0.0; system.r()];
    for row in &sample.rows {
        system.g(row.z, theta, &mut buf);
        let w = 1.0 / row.pi;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    for a in &mut acc {
        *a /= sample.population_size;
    }
    acc
}

/// Solve the census estimating equation U_N(theta, phi_N) = 0 on the full
/// population: the nuisance is computed with all pi_i = 1 and the raw g
/// (not the augmented psi) defines the root, matching the definition of the
/// finite-population parameter. Scalar components are solved by bisection to
/// 1e-12; vector share systems solve each cell independently.
pub fn census_solve(pop: &FinitePopulation, spec: &SystemSpec) -> Result<Vec<f64>> {
    let census = pop.census_sample();
    let system = spec.fit(&census)?;
    let p = system.p();
    if p == 1 {
        let f = |theta: f64| weighted_raw_mean(&census, &system, &[theta])[0];
        Ok(vec![bisect_root(f, system.theta_lo()[0], system.theta_hi()[0])?])
    } else {
        // separable vector systems: component k depends only on theta_k
        let mut out = Vec::with_capacity(p);
        for k in 0..p {
            let f = |t: f64| {
                let mut theta = vec![0.0; p];
                theta[k] = t;
                weighted_raw_mean(&census, &system, &theta)[k]
            };
            out.push(bisect_root(f, system.theta_lo()[k], system.theta_hi()[k])?);
        }
        Ok(out)
    }
}

/// Root of the survey-weighted (augmented) moment, the just-identified point
/// estimator used for bootstrap refits and as the GMM pilot. Affine systems
/// solve in two evaluations; anything else bisects.
pub fn moment_root(sample: &SurveySample, system: &FittedSystem) -> Result<f64> {
    if system.r() != 1 || system.p() != 1 {
        return Err(Error::Config("moment_root needs a scalar just-identified system".into()));
    }
    let f = |theta: f64| weighted_moment_mean(sample, system, &[theta], false)[0];
    let (lo, hi) = (system.theta_lo()[0], system.theta_hi()[0]);
    if system.is_linear_in_theta() {
        let f_lo = f(lo);
        let f_hi = f(hi);
        if f_lo == f_hi {
            return Err(Error::RootNotBracketed("constant moment in theta".into()));
        }
        let root = lo - f_lo * (hi - lo) / (f_hi - f_lo);
        if root >= lo && root <= hi {
            return Ok(root);
        }
        return Err(Error::RootNotBracketed(format!(
            "affine root {root} falls outside [{lo}, {hi}]"
        )));
    }
    bisect_root(f, lo, hi)
}

/// Fit the system on the sample and solve for the point estimate.
pub fn point_estimate(sample: &SurveySample, spec: &SystemSpec) -> Result<f64> {
    moment_root(sample, &spec.fit(sample)?)
}

pub(crate) fn bisect_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64> {
    let mut a = lo;
    let mut b = hi;
    let mut fa = f(a);
    let fb = f(b);
    let scale = fa.abs().max(fb.abs()).max(1e-30);
    if fa.abs() <= 1e-13 * scale.max(1.0) {
        return Ok(a);
    }
    if fb.abs() <= 1e-13 * scale.max(1.0) {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(Error::RootNotBracketed(format!(
            "no sign change on [{lo}, {hi}]: f(lo) = {fa:.3e}, f(hi) = {fb:.3e}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fm == 0.0 || (b - a).abs() < 1e-12 {
            return Ok(mid);
        }
        if fa * fm < 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{FinitePopulation, UnitRecord};

    fn pop_of(z: &[f64]) -> FinitePopulation {
        FinitePopulation::new(
            z.iter()
                .enumerate()
                .map(|(i, &zi)| UnitRecord {
                    id: i as u32 + 1,
                    z: zi,
                    x: 1.0,
                    stratum: None,
                    cluster: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lorenz_census_brute_force() {
        // independent oracle: theta = sum z I(z <= xi(tau)) / sum z
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let spec = SystemSpec::lorenz(0.5, true).unwrap();
        let theta = census_solve(&pop, &spec).unwrap()[0];
        assert!((theta - 0.3).abs() < 1e-10, "theta {theta}");
        let spec1 = SystemSpec::lorenz(1.0, true).unwrap();
        assert!((census_solve(&pop, &spec1).unwrap()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn share_census_brute_force() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let spec = SystemSpec::quantile_share(0.5, 1.0, true).unwrap();
        let theta = census_solve(&pop, &spec).unwrap()[0];
        // oracle: (3 + 4) / 10 with xi(0.5) = 2
        assert!((theta - 0.7).abs() < 1e-10, "theta {theta}");
    }

    #[test]
    fn share_boundary_cells() {
        let pop = pop_of(&[1.0, 5.0, 2.0, 8.0, 3.0]);
        // tau1 = tau2: empty interval, share 0
        let spec = SystemSpec::quantile_share(0.4, 0.4, true).unwrap();
        assert!(census_solve(&pop, &spec).unwrap()[0].abs() < 1e-10);
        // (0, 1): full share
        let spec = SystemSpec::quantile_share(0.0, 1.0, true).unwrap();
        assert!((census_solve(&pop, &spec).unwrap()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn share_rejects_bad_cells() {
        assert!(SystemSpec::quantile_share(0.6, 0.4, true).is_err());
        assert!(SystemSpec::quantile_share(-0.1, 0.4, true).is_err());
        assert!(SystemSpec::lorenz(0.0, true).is_err());
    }

    #[test]
    fn gini_census_matches_definition() {
        // oracle: theta = sum psi{F(z_i)} z_i / sum z_i with psi{u} = 2u - 1
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let spec = SystemSpec::gini(true);
        let theta = census_solve(&pop, &spec).unwrap()[0];
        let expect = (-0.5 * 1.0 + 0.0 * 2.0 + 0.5 * 3.0 + 1.0 * 4.0) / 10.0;
        assert!((theta - expect).abs() < 1e-10, "theta {theta} expect {expect}");
        assert!((theta - 0.5).abs() < 1e-10);
    }

    #[test]
    fn gini_of_constants_is_carrier_at_one() {
        // with the weak-inequality population CDF, F(z_i) = 1 for constant
        // data, so theta = psi{1} = 1 (documented tie convention)
        let pop = pop_of(&[3.0; 5]);
        let theta = census_solve(&pop, &SystemSpec::gini(true)).unwrap()[0];
        assert!((theta - 1.0).abs() < 1e-10, "theta {theta}");
    }

    #[test]
    fn gini_augmentation_sums_to_zero_at_census() {
        // brute-force check of the centering identity on a small census
        let z: Vec<f64> = (1..=17).map(|i| (i as f64).powf(1.3)).collect();
        let pop = pop_of(&z);
        let census = pop.census_sample();
        let spec = SystemSpec::gini(true);
        let system = spec.fit(&census).unwrap();
        let n = census.n() as f64;
        let mut total = 0.0;
        let mut buf = [0.0];
        for row in &census.rows {
            system.xi(row.z, &[0.0], &mut buf);
            total += buf[0] / n;
        }
        assert!(total.abs() < 1e-10, "sum Xi = {total:.2e}");

        // brute-force double sum against the table-based evaluator
        let nn = z.len() as f64;
        for &zi in &z {
            let brute: f64 = z
                .iter()
                .map(|&zj| {
                    let f = z.iter().filter(|&&v| v <= zj).count() as f64 / nn;
                    zj * 2.0 * (if zj >= zi { 1.0 } else { 0.0 } - f)
                })
                .sum::<f64>()
                / nn;
            system.xi(zi, &[0.0], &mut buf);
            assert!((buf[0] - brute).abs() < 1e-10, "xi({zi}) {} vs {brute}", buf[0]);
        }
    }

    #[test]
    fn custom_gini_carrier_matches_brute_force() {
        // extended carrier psi{u} = u^2: census value sum F(z_i)^2 z_i / sum z_i
        let z = [1.0, 2.0, 3.0, 4.0, 5.0];
        let pop = pop_of(&z);
        let census = pop.census_sample();
        let carrier = GiniCarrier {
            psi: Arc::new(|u| u * u),
            dpsi: Arc::new(|u| 2.0 * u),
        };
        let system = fit_gini_with_carrier(&census, carrier, true).unwrap();
        let theta = moment_root(&census, &system).unwrap();
        let n = z.len() as f64;
        let brute: f64 = z
            .iter()
            .map(|&zi| {
                let f = z.iter().filter(|&&v| v <= zi).count() as f64 / n;
                f * f * zi
            })
            .sum::<f64>()
            / z.iter().sum::<f64>();
        // the moment root solves the augmented equation; at the census the
        // augmentation is exactly centered, so the root is the brute ratio
        assert!((theta - brute).abs() < 1e-9, "{theta} vs {brute}");
    }

    #[test]
    fn mean_system_census_is_population_mean() {
        let pop = pop_of(&[2.0, 4.0, 9.0]);
        let theta = census_solve(&pop, &SystemSpec::mean(true)).unwrap()[0];
        assert!((theta - 5.0).abs() < 1e-9);
    }

    #[test]
    fn psi_equals_g_plus_xi_exactly() {
        let pop = pop_of(&[1.0, 2.0, 5.0, 9.0, 12.0]);
        let census = pop.census_sample();
        for augmented in [true, false] {
            let spec = SystemSpec::quantile_share(0.25, 0.75, augmented).unwrap();
            let system = spec.fit(&census).unwrap();
            let (mut g, mut x, mut p) = ([0.0], [0.0], [0.0]);
            for row in &census.rows {
                for theta in [0.1, 0.5] {
                    system.g(row.z, &[theta], &mut g);
                    system.xi(row.z, &[theta], &mut x);
                    system.psi(row.z, &[theta], &mut p);
                    let expect = if augmented { g[0] + x[0] } else { g[0] };
                    assert!((p[0] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn lorenz_xi_at_mass_point() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let census = pop.census_sample();
        let spec = SystemSpec::lorenz(0.5, true).unwrap();
        let system = spec.fit(&census).unwrap();
        // xi = 2; at z = xi the term is -xi (F(xi) - tau) with I = 1
        let mut buf = [0.0];
        system.xi(2.0, &[0.0], &mut buf);
        assert!((buf[0] - (-2.0 * (1.0 - 0.5))).abs() < 1e-12);
    }

    #[test]
    fn share_vector_matches_scalar_cells() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0, 7.0, 9.0, 11.0, 15.0]);
        let cells = vec![(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];
        let spec_v = SystemSpec::share_vector(cells.clone(), true).unwrap();
        let thetas = census_solve(&pop, &spec_v).unwrap();
        let mut total = 0.0;
        for (k, &(a, b)) in cells.iter().enumerate() {
            let spec_k = SystemSpec::quantile_share(a, b, true).unwrap();
            let tk = census_solve(&pop, &spec_k).unwrap()[0];
            assert!((thetas[k] - tk).abs() < 1e-10);
            total += tk;
        }
        assert!((total - 1.0).abs() < 1e-9, "shares total {total}");
    }

    #[test]
    fn system_spec_matches_cli_config_shape() {
        let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"measure":"quantile_share","tau1":0.25,"tau2":0.5,"augmented":true}"#
        );
        let back: SystemSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let gini: SystemSpec =
            serde_json::from_str(r#"{"measure":"gini","augmented":false}"#).unwrap();
        assert_eq!(gini, SystemSpec::gini(false));
    }

    #[test]
    fn moment_root_recovers_hajek_mean() {
        let pop = pop_of(&[1.0, 4.0, 10.0, 2.0]);
        let census = pop.census_sample();
        let root = point_estimate(&census, &SystemSpec::mean(true)).unwrap();
        assert!((root - 4.25).abs() < 1e-9);
    }
}
