//! Ratio-statistic inference: confidence intervals by test inversion,
//! chi-square or weighted chi-square calibration, restricted estimation
//! under parametric constraints with optional auxiliary information, and
//! subvector profiling.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::FittedSystem;
use crate::gel::{
    fit_gel, fit_gmm, minimize_scalar, nelder_mead, profile_objective, FitMethod, GelFit,
    RhoFamily,
};
use crate::population::{DesignTag, SurveySample};
use crate::prob::{chi2_sf, chi2_upper_quantile, imhof_sf, imhof_upper_quantile};
use crate::variance::{
    gamma_resample, omega_by_method, psd_repair, psd_sqrt, resolve_omega_method, w_hat,
    VarianceOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Calibration {
    ChiSquare { df: usize },
    WeightedChiSquare { weights: Vec<f64> },
}

/// A ratio test outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationRule {
    /// Chi-square for single-stage designs with negligible sampling
    /// fraction, weighted chi-square otherwise.
    Auto,
    ForceChiSquare,
    ForceWeighted,
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub calibration: CalibrationRule,
    pub variance: VarianceOptions,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { calibration: CalibrationRule::Auto, variance: VarianceOptions::default() }
    }
}

fn is_single_stage(tag: DesignTag) -> bool {
    matches!(
        tag,
        DesignTag::Srswor | DesignTag::Poisson | DesignTag::SystematicPps | DesignTag::RaoSampfordPps
    )
}

/// Ratio evaluator around a solved unrestricted fit.
pub(crate) struct RatioEngine<'a> {
    sample: &'a SurveySample,
    system: &'a FittedSystem,
    method: FitMethod,
    pub fit: GelFit,
}

impl<'a> RatioEngine<'a> {
    pub fn new(
        sample: &'a SurveySample,
        system: &'a FittedSystem,
        method: FitMethod,
        theta0: Option<&[f64]>,
    ) -> Result<Self> {
        let fit = match method {
            FitMethod::Gel(family) => fit_gel(sample, system, family, theta0)?,
            FitMethod::Gmm => fit_gmm(sample, system, theta0)?,
        };
        Ok(RatioEngine { sample, system, method, fit })
    }

    /// T(theta): -2n[P(theta-hat) - P(theta)] for GEL families, the
    /// fixed-weight criterion difference n_B[Q(theta) - Q(theta-hat)] for
    /// GMM.
    pub fn t_at(&self, theta: &[f64]) -> f64 {
        self.t_at_cut(theta, None)
    }

    /// Like [`Self::t_at`] with an early-exit bound: when the returned value
    /// exceeds `cutoff` it is only guaranteed to be a lower bound on T (still
    /// above the cutoff), which is all that threshold comparisons need.
    pub fn t_at_cut(&self, theta: &[f64], cutoff: Option<f64>) -> f64 {
        match self.method {
            FitMethod::Gel(family) => {
                let n = self.sample.n() as f64;
                let stop = cutoff.map(|tc| self.fit.objective + (tc + 2.0) / (2.0 * n));
                let prof = crate::gel::profile_objective_cut(
                    self.sample,
                    self.system,
                    theta,
                    family,
                    false,
                    stop,
                );
                -2.0 * n * (self.fit.objective - prof.objective)
            }
            FitMethod::Gmm => {
                let w_inv = self.fit.gmm_w_inv.as_ref().expect("gmm fit carries W^-1");
                let r = self.system.r();
                let u = crate::estfun::weighted_moment_mean(self.sample, self.system, theta, false);
                let mut q = 0.0;
                for j in 0..r {
                    for k in 0..r {
                        q += u[j] * w_inv[j * r + k] * u[k];
                    }
                }
                self.sample.expected_n * (q - self.fit.objective)
            }
        }
    }

    /// Profile ratio with the listed coordinates fixed and the rest
    /// minimized out. Points whose inner value exceeds the running best by
    /// a wide slack are abandoned early.
    pub fn t_profiled(&self, fixed: &[(usize, f64)]) -> f64 {
        let p = self.system.p();
        if fixed.len() == p {
            let mut theta = vec![0.0; p];
            for &(j, v) in fixed {
                theta[j] = v;
            }
            return self.t_at(&theta);
        }
        let free: Vec<usize> = (0..p).filter(|j| fixed.iter().all(|&(k, _)| k != *j)).collect();
        let assemble = |beta: &[f64]| -> Vec<f64> {
            let mut theta = vec![0.0; p];
            for &(j, v) in fixed {
                theta[j] = v;
            }
            for (b, &j) in beta.iter().zip(&free) {
                theta[j] = *b;
            }
            theta
        };
        let n = self.sample.n() as f64;
        let best = std::cell::Cell::new(f64::INFINITY);
        let eval = |beta: &[f64]| -> f64 {
            let cutoff = if best.get().is_finite() { Some(best.get() + 2.0 * n) } else { None };
            let t = self.t_at_cut(&assemble(beta), cutoff);
            if t < best.get() {
                best.set(t);
            }
            t
        };
        if free.len() == 1 {
            let j = free[0];
            let start = self.fit.theta[j];
            let sm = crate::gel::minimize_scalar_tol(
                |b| eval(&[b]),
                self.system.theta_lo()[j],
                self.system.theta_hi()[j],
                &[start],
                1e-5,
            );
            sm.f
        } else {
            let x0: Vec<f64> = free.iter().map(|&j| self.fit.theta[j]).collect();
            let lo: Vec<f64> = free.iter().map(|&j| self.system.theta_lo()[j]).collect();
            let hi: Vec<f64> = free.iter().map(|&j| self.system.theta_hi()[j]).collect();
            let (_x, fx, _e) = nelder_mead(|b| eval(b), &x0, &lo, &hi, 400 * free.len());
            fx
        }
    }
}

fn weighted_chi2_weights(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    opts: &InferenceOptions,
) -> Result<Vec<f64>> {
    let v = &opts.variance;
    let method = resolve_omega_method(sample, v.omega, v.negligible_threshold);
    let raw = omega_by_method(sample, system, theta, false, method, v.negligible_threshold)?;
    let (omega, _) = psd_repair(&raw);
    let w = w_hat(sample, system, theta, false);
    let gamma = gamma_resample(sample, system, theta, v.gamma_b, v.seed, v.scale, false)?;
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("W-hat is singular".into()))?;
    let sigma = (gamma.transpose() * &w_inv * &gamma)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Gamma' W^-1 Gamma is singular".into()))?;
    let omega_half = psd_sqrt(&omega);
    let delta =
        &omega_half * &w_inv * &gamma * sigma * gamma.transpose() * &w_inv * &omega_half;
    let eig = ((delta.clone() + delta.transpose()) * 0.5).symmetric_eigen();
    let mut weights: Vec<f64> =
        eig.eigenvalues.iter().copied().filter(|v| v.abs() > 1e-10).collect();
    weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(weights)
}

fn calibrate(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    df: usize,
    opts: &InferenceOptions,
) -> Result<Calibration> {
    let chi = match opts.calibration {
        CalibrationRule::ForceChiSquare => true,
        CalibrationRule::ForceWeighted => false,
        CalibrationRule::Auto => {
            is_single_stage(sample.design)
                && sample.sampling_fraction() <= opts.variance.negligible_threshold
        }
    };
    if chi {
        Ok(Calibration::ChiSquare { df })
    } else {
        Ok(Calibration::WeightedChiSquare {
            weights: weighted_chi2_weights(sample, system, theta, opts)?,
        })
    }
}

fn p_value_for(statistic: f64, calibration: &Calibration) -> f64 {
    match calibration {
        Calibration::ChiSquare { df } => chi2_sf(statistic, *df as f64),
        Calibration::WeightedChiSquare { weights } => imhof_sf(statistic, weights),
    }
}

fn threshold_for(level: f64, calibration: &Calibration) -> f64 {
    let alpha = 1.0 - level;
    match calibration {
        Calibration::ChiSquare { df } => chi2_upper_quantile(alpha, *df as f64),
        Calibration::WeightedChiSquare { weights } => imhof_upper_quantile(alpha, weights),
    }
}

/// GEL ratio test of H0: theta = theta0.
pub fn gel_ratio(
    sample: &SurveySample,
    system: &FittedSystem,
    method: FitMethod,
    theta0: &[f64],
    opts: &InferenceOptions,
) -> Result<RatioTest> {
    let engine = RatioEngine::new(sample, system, method, None)?;
    let statistic = engine.t_at(theta0).max(0.0);
    let calibration = calibrate(sample, system, &engine.fit.theta, system.p(), opts)?;
    Ok(RatioTest {
        statistic,
        df: system.p(),
        p_value: p_value_for(statistic, &calibration),
        calibration,
    })
}

/// A test-inversion confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiResult {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub threshold: f64,
    /// Endpoint ran into the theta-space boundary before crossing.
    pub clipped_lower: bool,
    pub clipped_upper: bool,
}

fn invert_side<T: Fn(f64) -> f64>(
    t_fn: &T,
    theta_hat: f64,
    bound: f64,
    threshold: f64,
    range: f64,
) -> (f64, bool) {
    let dir = if bound >= theta_hat { 1.0 } else { -1.0 };
    let dist = (bound - theta_hat).abs();
    if dist <= 0.0 {
        return (theta_hat, true);
    }
    // geometric ladder out to the boundary; keep the outermost crossing
    let mut step = 1e-4 * range;
    let mut pts: Vec<f64> = Vec::new();
    loop {
        if step >= dist {
            pts.push(bound);
            break;
        }
        pts.push(theta_hat + dir * step);
        step *= 2.0;
    }
    let vals: Vec<f64> = pts.iter().map(|&t| t_fn(t)).collect();
    let mut inside_idx: Option<usize> = None;
    for (i, &v) in vals.iter().enumerate() {
        if v <= threshold {
            inside_idx = Some(i);
        }
    }
    let (mut a, mut b) = match inside_idx {
        None => (theta_hat, pts[0]),
        Some(i) if i + 1 == pts.len() => return (bound, true), // inside at the boundary
        Some(i) => (pts[i], pts[i + 1]),
    };
    // Illinois regula falsi on T - threshold over [a, b] with
    // T(a) <= threshold < T(b); interpolation may see truncated values
    // above the threshold, which only slows it toward plain bisection
    let mut fa = t_fn(a) - threshold;
    let mut fb = t_fn(b) - threshold;
    let mut side = 0i8;
    for _ in 0..60 {
        if (b - a).abs() < 1e-9 * range {
            break;
        }
        let mid = if (fb - fa).abs() > 0.0 {
            let m = (a * fb - b * fa) / (fb - fa);
            if m > a && m < b {
                m
            } else {
                0.5 * (a + b)
            }
        } else {
            0.5 * (a + b)
        };
        let fm = t_fn(mid) - threshold;
        if fm <= 0.0 {
            a = mid;
            fa = fm;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = mid;
            fb = fm;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    (0.5 * (a + b), false)
}

/// Invert the ratio test into a confidence interval for a scalar parameter.
/// Monotonicity of T is not assumed: the outermost crossings inside the
/// theta space are returned, and an endpoint that never crosses is clipped
/// to the boundary with a flag.
pub fn ci_invert(
    sample: &SurveySample,
    system: &FittedSystem,
    method: FitMethod,
    level: f64,
    opts: &InferenceOptions,
) -> Result<CiResult> {
    if system.p() != 1 {
        return Err(Error::Config("ci_invert needs a scalar parameter; see subvector_ci".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("level {level} outside (0, 1)")));
    }
    let engine = RatioEngine::new(sample, system, method, None)?;
    let theta_hat = engine.fit.theta[0];
    let calibration = calibrate(sample, system, &engine.fit.theta, 1, opts)?;
    let threshold = threshold_for(level, &calibration);
    let (lo_bound, hi_bound) = (system.theta_lo()[0], system.theta_hi()[0]);
    let range = hi_bound - lo_bound;
    let t_fn = |t: f64| engine.t_at_cut(&[t], Some(threshold)).max(0.0);
    let (upper, clipped_upper) = invert_side(&t_fn, theta_hat, hi_bound, threshold, range);
    let (lower, clipped_lower) = invert_side(&t_fn, theta_hat, lo_bound, threshold, range);
    Ok(CiResult { estimate: theta_hat, lower, upper, level, threshold, clipped_lower, clipped_upper })
}

/// Profile ratio statistic with the coordinates in `indices` pinned at
/// `values` and the remaining block minimized out. With a full index set
/// this is the plain ratio statistic at that point.
pub fn profile_ratio(
    sample: &SurveySample,
    system: &FittedSystem,
    method: FitMethod,
    indices: &[usize],
    values: &[f64],
) -> Result<f64> {
    if indices.len() != values.len() || indices.is_empty() {
        return Err(Error::Config("indices/values arity mismatch".into()));
    }
    if indices.iter().any(|&j| j >= system.p()) {
        return Err(Error::Config("component index out of range".into()));
    }
    let engine = RatioEngine::new(sample, system, method, None)?;
    let fixed: Vec<(usize, f64)> = indices.iter().copied().zip(values.iter().copied()).collect();
    Ok(engine.t_profiled(&fixed).max(0.0))
}

/// Profile confidence interval for one component of a vector parameter,
/// thresholded at the chi-square(1) quantile.
pub fn subvector_ci(
    sample: &SurveySample,
    system: &FittedSystem,
    method: FitMethod,
    index: usize,
    level: f64,
    opts: &InferenceOptions,
) -> Result<CiResult> {
    if system.p() == 1 {
        return ci_invert(sample, system, method, level, opts);
    }
    if index >= system.p() {
        return Err(Error::Config("component index out of range".into()));
    }
    let engine = RatioEngine::new(sample, system, method, None)?;
    let theta_hat = engine.fit.theta[index];
    let calibration = calibrate(sample, system, &engine.fit.theta, 1, opts)?;
    let threshold = threshold_for(level, &calibration);
    let (lo_bound, hi_bound) = (system.theta_lo()[index], system.theta_hi()[index]);
    let range = hi_bound - lo_bound;
    let t_fn = |t: f64| engine.t_profiled(&[(index, t)]).max(0.0);
    let (upper, clipped_upper) = invert_side(&t_fn, theta_hat, hi_bound, threshold, range);
    let (lower, clipped_lower) = invert_side(&t_fn, theta_hat, lo_bound, threshold, range);
    Ok(CiResult { estimate: theta_hat, lower, upper, level, threshold, clipped_lower, clipped_upper })
}

/// Parametric constraint R(theta) = 0 with k <= p rows.
#[derive(Clone)]
pub enum Constraint {
    /// k = p: theta fully pinned.
    Pinned(Vec<f64>),
    /// R(theta) = A theta - c.
    Linear { a: DMatrix<f64>, c: Vec<f64> },
    /// General smooth constraint; the Jacobian falls back to central
    /// differences when not supplied.
    Nonlinear {
        r_fun: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
        jacobian: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
        k: usize,
    },
}

impl Constraint {
    pub fn k(&self) -> usize {
        match self {
            Constraint::Pinned(v) => v.len(),
            Constraint::Linear { a, .. } => a.nrows(),
            Constraint::Nonlinear { k, .. } => *k,
        }
    }

    pub fn residual(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Constraint::Pinned(v) => theta.iter().zip(v).map(|(t, v)| t - v).collect(),
            Constraint::Linear { a, c } => {
                let mut out = vec![0.0; a.nrows()];
                for i in 0..a.nrows() {
                    for j in 0..a.ncols() {
                        out[i] += a[(i, j)] * theta[j];
                    }
                    out[i] -= c[i];
                }
                out
            }
            Constraint::Nonlinear { r_fun, .. } => r_fun(theta),
        }
    }

    /// k x p Jacobian (row-major), by central differences when no analytic
    /// form is available.
    pub fn jacobian(&self, theta: &[f64]) -> Vec<f64> {
        let p = theta.len();
        match self {
            Constraint::Pinned(v) => {
                let k = v.len();
                let mut jac = vec![0.0; k * p];
                for i in 0..k.min(p) {
                    jac[i * p + i] = 1.0;
                }
                jac
            }
            Constraint::Linear { a, .. } => {
                let mut jac = vec![0.0; a.nrows() * p];
                for i in 0..a.nrows() {
                    for j in 0..p {
                        jac[i * p + j] = a[(i, j)];
                    }
                }
                jac
            }
            Constraint::Nonlinear { r_fun, jacobian, k } => {
                if let Some(j) = jacobian {
                    return j(theta);
                }
                let mut jac = vec![0.0; k * p];
                let h = 1e-6;
                for j in 0..p {
                    let mut up = theta.to_vec();
                    let mut dn = theta.to_vec();
                    up[j] += h;
                    dn[j] -= h;
                    let ru = r_fun(&up);
                    let rd = r_fun(&dn);
                    for i in 0..*k {
                        jac[i * p + j] = (ru[i] - rd[i]) / (2.0 * h);
                    }
                }
                jac
            }
        }
    }
}

fn check_rank(constraint: &Constraint, theta: &[f64]) -> Result<()> {
    let k = constraint.k();
    let p = theta.len();
    let jac = DMatrix::from_row_slice(k, p, &constraint.jacobian(theta));
    let svd = jac.svd(false, false);
    let max_sv = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * max_sv.max(1.0)).count();
    if rank < k {
        return Err(Error::InfeasibleConstraint(format!(
            "constraint Jacobian is rank deficient ({rank} < {k}) at the solution"
        )));
    }
    Ok(())
}

/// Restricted maximum GEL estimator over {theta : R(theta) = 0}, with the
/// side moments (when attached to the system) stacked into the criterion.
/// Linear constraints are handled by affine reparameterization, nonlinear
/// ones by a quadratic-penalty outer loop with escalation until
/// ||R(theta)|| < 1e-8.
pub fn fit_restricted(
    sample: &SurveySample,
    system: &FittedSystem,
    family: RhoFamily,
    constraint: Option<&Constraint>,
    opts: &InferenceOptions,
) -> Result<GelFit> {
    let _ = opts;
    let p = system.p();
    let include_side = system.s() > 0;
    let profile = |theta: &[f64]| profile_objective(sample, system, theta, family, include_side);

    let theta = match constraint {
        None => {
            // side-information-only fit over the full box
            if p == 1 {
                let sm = minimize_scalar(
                    |t| profile(&[t]).objective,
                    system.theta_lo()[0],
                    system.theta_hi()[0],
                    &[],
                );
                vec![sm.x]
            } else {
                let x0: Vec<f64> = system
                    .theta_lo()
                    .iter()
                    .zip(system.theta_hi())
                    .map(|(l, h)| 0.5 * (l + h))
                    .collect();
                nelder_mead(
                    |t| profile(t).objective,
                    &x0,
                    system.theta_lo(),
                    system.theta_hi(),
                    500 * p,
                )
                .0
            }
        }
        Some(Constraint::Pinned(v)) => {
            if v.len() != p {
                return Err(Error::Config("pinned constraint arity mismatch".into()));
            }
            for (j, t) in v.iter().enumerate() {
                if *t < system.theta_lo()[j] || *t > system.theta_hi()[j] {
                    return Err(Error::InfeasibleConstraint(format!(
                        "pinned value {t} outside the theta space for component {j}"
                    )));
                }
            }
            v.clone()
        }
        Some(con @ Constraint::Linear { a, c }) => {
            let k = a.nrows();
            if k > p {
                return Err(Error::Config("constraint has more rows than parameters".into()));
            }
            // particular solution and nullspace basis via SVD
            let svd = a.clone().svd(true, true);
            let cv = nalgebra::DVector::from_column_slice(c);
            let theta_p = svd
                .solve(&cv, 1e-12)
                .map_err(|e| Error::InfeasibleConstraint(format!("linear solve failed: {e}")))?;
            let v_t = svd.v_t.as_ref().expect("svd with V requested");
            let max_sv = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
            let rank =
                svd.singular_values.iter().filter(|&&s| s > 1e-12 * max_sv.max(1.0)).count();
            let null_dim = p - rank;
            if null_dim == 0 {
                let theta: Vec<f64> = theta_p.iter().copied().collect();
                check_rank(con, &theta)?;
                theta
            } else {
                // last rows of V' span the nullspace
                let basis: Vec<Vec<f64>> =
                    (rank..p).map(|i| (0..p).map(|j| v_t[(i, j)]).collect()).collect();
                let assemble = |beta: &[f64]| -> Vec<f64> {
                    let mut theta: Vec<f64> = theta_p.iter().copied().collect();
                    for (bi, base) in beta.iter().zip(&basis) {
                        for j in 0..p {
                            theta[j] += bi * base[j];
                        }
                    }
                    for j in 0..p {
                        theta[j] = theta[j].clamp(system.theta_lo()[j], system.theta_hi()[j]);
                    }
                    theta
                };
                let spread = (0..p)
                    .map(|j| system.theta_hi()[j] - system.theta_lo()[j])
                    .fold(0.0f64, f64::max);
                let beta = if null_dim == 1 {
                    let sm = minimize_scalar(
                        |b| profile(&assemble(&[b])).objective,
                        -2.0 * spread,
                        2.0 * spread,
                        &[0.0],
                    );
                    vec![sm.x]
                } else {
                    nelder_mead(
                        |b| profile(&assemble(b)).objective,
                        &vec![0.0; null_dim],
                        &vec![-2.0 * spread; null_dim],
                        &vec![2.0 * spread; null_dim],
                        400 * null_dim,
                    )
                    .0
                };
                let theta = assemble(&beta);
                check_rank(con, &theta)?;
                theta
            }
        }
        Some(con @ Constraint::Nonlinear { .. }) => {
            let x0: Vec<f64> = system
                .theta_lo()
                .iter()
                .zip(system.theta_hi())
                .map(|(l, h)| 0.5 * (l + h))
                .collect();
            let mut mu = 1e3;
            let mut theta = x0;
            let mut feasible = false;
            for _ in 0..12 {
                let penalized = |t: &[f64]| -> f64 {
                    let res = con.residual(t);
                    profile(t).objective + mu * res.iter().map(|r| r * r).sum::<f64>()
                };
                theta = if p == 1 {
                    vec![
                        minimize_scalar(
                            |t| penalized(&[t]),
                            system.theta_lo()[0],
                            system.theta_hi()[0],
                            &[theta[0]],
                        )
                        .x,
                    ]
                } else {
                    nelder_mead(
                        |t| penalized(t),
                        &theta,
                        system.theta_lo(),
                        system.theta_hi(),
                        400 * p,
                    )
                    .0
                };
                let viol: f64 =
                    con.residual(&theta).iter().map(|r| r * r).sum::<f64>().sqrt();
                if viol < 1e-8 {
                    feasible = true;
                    break;
                }
                mu *= 10.0;
            }
            if !feasible {
                return Err(Error::InfeasibleConstraint(
                    "penalty escalation did not reach ||R(theta)|| < 1e-8".into(),
                ));
            }
            check_rank(con, &theta)?;
            theta
        }
    };

    let inner = profile(&theta);
    let p_hat = crate::gel::probabilities_from_inner_side(
        sample,
        system,
        &theta,
        &inner.eta,
        family,
        include_side,
    );
    Ok(GelFit {
        theta,
        eta: inner.eta.clone(),
        p_hat,
        objective: inner.objective,
        inner_iters: inner.iters,
        outer_evals: 0,
        converged: inner.converged(),
        f_n: sample.f_n(),
        n_b: sample.expected_n,
        method: FitMethod::Gel(family),
        gmm_w_inv: None,
    })
}

/// Restricted GEL ratio statistic for H0: R(theta) = 0 (with any side
/// moments attached to the system):
/// T^R = -2n[P_psi(theta-hat) - P^R(theta-hat^R)], df = s + k.
pub fn restricted_ratio(
    sample: &SurveySample,
    system: &FittedSystem,
    family: RhoFamily,
    constraint: Option<&Constraint>,
    opts: &InferenceOptions,
) -> Result<RatioTest> {
    let unrestricted = fit_gel(sample, system, family, None)?;
    let restricted = fit_restricted(sample, system, family, constraint, opts)?;
    let n = sample.n() as f64;
    let statistic = (-2.0 * n * (unrestricted.objective - restricted.objective)).max(0.0);
    let k = constraint.map(|c| c.k()).unwrap_or(0);
    let df = system.s() + k;
    if df == 0 {
        return Err(Error::Config(
            "restricted ratio needs a constraint or side information (s + k >= 1)".into(),
        ));
    }
    let calibration = match opts.calibration {
        CalibrationRule::ForceWeighted => Calibration::WeightedChiSquare {
            weights: restricted_weights(sample, system, &restricted.theta, constraint, opts)?,
        },
        CalibrationRule::ForceChiSquare => Calibration::ChiSquare { df },
        CalibrationRule::Auto => {
            if is_single_stage(sample.design)
                && sample.sampling_fraction() <= opts.variance.negligible_threshold
            {
                Calibration::ChiSquare { df }
            } else {
                Calibration::WeightedChiSquare {
                    weights: restricted_weights(
                        sample,
                        system,
                        &restricted.theta,
                        constraint,
                        opts,
                    )?,
                }
            }
        }
    };
    Ok(RatioTest { statistic, df, p_value: p_value_for(statistic, &calibration), calibration })
}

/// Sandwich variance of the restricted estimator with stacked moments
/// (psi', q')': V^R = C^R Pi' W^-1 Omega^R W^-1 Pi C^R with
/// C^R = Sigma^R - Sigma^R Phi'(Phi Sigma^R Phi')^-1 Phi Sigma^R and
/// Sigma^R = (Pi' W^-1 Pi)^-1. Standard errors are sqrt(diag(V^R)/n_B).
pub fn restricted_variance(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    constraint: Option<&Constraint>,
    opts: &InferenceOptions,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let v = &opts.variance;
    let p = system.p();
    let method = resolve_omega_method(sample, v.omega, v.negligible_threshold);
    let (omega_r, _) =
        psd_repair(&omega_by_method(sample, system, theta, true, method, v.negligible_threshold)?);
    let w_r = w_hat(sample, system, theta, true);
    let pi_mat = gamma_resample(sample, system, theta, v.gamma_b, v.seed, v.scale, true)?;
    let w_inv = w_r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("stacked W-hat is singular".into()))?;
    let sigma_r = (pi_mat.transpose() * &w_inv * &pi_mat)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Pi' W^-1 Pi is singular".into()))?;
    let c_r = match constraint {
        None => sigma_r.clone(),
        Some(con) => {
            let phi = DMatrix::from_row_slice(con.k(), p, &con.jacobian(theta));
            let mid = (&phi * &sigma_r * phi.transpose())
                .try_inverse()
                .ok_or_else(|| Error::Singular("Phi Sigma Phi' is singular".into()))?;
            &sigma_r - &sigma_r * phi.transpose() * mid * &phi * &sigma_r
        }
    };
    let core = pi_mat.transpose() * &w_inv * &omega_r * &w_inv * &pi_mat;
    let v_r = &c_r * core * &c_r;
    let se = (0..p).map(|j| (v_r[(j, j)].max(0.0) / sample.expected_n).sqrt()).collect();
    Ok((v_r, se))
}

/// Eigen-weights of the restricted-ratio limit: the stacked-moment analog
/// of the unrestricted Delta, with the constraint projection applied to the
/// restricted block.
fn restricted_weights(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    constraint: Option<&Constraint>,
    opts: &InferenceOptions,
) -> Result<Vec<f64>> {
    let v = &opts.variance;
    let p = system.p();

    // stacked quantities
    let method = resolve_omega_method(sample, v.omega, v.negligible_threshold);
    let (omega_r, _) =
        psd_repair(&omega_by_method(sample, system, theta, true, method, v.negligible_threshold)?);
    let w_r = w_hat(sample, system, theta, true);
    let pi_mat = gamma_resample(sample, system, theta, v.gamma_b, v.seed, v.scale, true)?;
    let w_r_inv = w_r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("stacked W-hat is singular".into()))?;
    let sigma_r = (pi_mat.transpose() * &w_r_inv * &pi_mat)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Pi' W^-1 Pi is singular".into()))?;
    let c_r = match constraint {
        None => sigma_r.clone(),
        Some(con) => {
            let phi = DMatrix::from_row_slice(con.k(), p, &con.jacobian(theta));
            let mid = (&phi * &sigma_r * phi.transpose())
                .try_inverse()
                .ok_or_else(|| Error::Singular("Phi Sigma Phi' is singular".into()))?;
            &sigma_r - &sigma_r * phi.transpose() * mid * &phi * &sigma_r
        }
    };
    let p_r = &w_r_inv - &w_r_inv * &pi_mat * &c_r * pi_mat.transpose() * &w_r_inv;

    // psi-only block embedded at the top-left
    let dim = system.moment_dim(true);
    let r = system.r();
    let w_psi = w_hat(sample, system, theta, false);
    let gamma_psi = gamma_resample(sample, system, theta, v.gamma_b, v.seed, v.scale, false)?;
    let w_psi_inv = w_psi
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("W-hat is singular".into()))?;
    let sigma_psi = (gamma_psi.transpose() * &w_psi_inv * &gamma_psi)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Gamma' W^-1 Gamma is singular".into()))?;
    let p_psi =
        &w_psi_inv - &w_psi_inv * &gamma_psi * sigma_psi * gamma_psi.transpose() * &w_psi_inv;
    let mut embedded = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..r {
        for j in 0..r {
            embedded[(i, j)] = p_psi[(i, j)];
        }
    }

    let omega_half = psd_sqrt(&omega_r);
    let delta = &omega_half * (p_r - embedded) * &omega_half;
    let eig = ((delta.clone() + delta.transpose()) * 0.5).symmetric_eigen();
    let mut weights: Vec<f64> =
        eig.eigenvalues.iter().copied().filter(|v| v.abs() > 1e-10).collect();
    weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(weights)
}
