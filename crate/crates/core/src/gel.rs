//! Saddle-point solvers for the augmented two-step GEL families (EL, ET,
//! CU) and the two-step GMM estimator.
//!
//! The computational form is the f_N-scaled dual criterion
//!
//! ```text
//! P(theta, eta) = n^-1 sum_{i in S} [ rho(eta' d_i psi(z_i, theta)) - rho(0) ],
//! d_i = f_N / pi_i,   f_N = n_B / N,
//! ```
//!
//! whose scaled weights d_i have O(1) magnitude. The unscaled criterion
//! differs only by the reparameterization eta -> f_N eta, so the estimator,
//! the ratio statistic and the empirical probabilities are invariant to the
//! choice. The inner maximization over eta is a damped Newton iteration on a
//! concave function; the outer minimization over theta is golden-section
//! with a parabolic polish for scalar parameters and Nelder-Mead with
//! restarts otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::{weighted_moment_mean, FittedSystem};
use crate::population::SurveySample;

/// Carrier function family for the GEL criterion, normalized so that
/// rho1(0) = rho2(0) = -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoFamily {
    /// Empirical likelihood: rho(v) = log(1 - v) on (-inf, 1).
    El,
    /// Exponential tilting: rho(v) = -exp(v).
    Et,
    /// Continuous updating: rho(v) = -v - v^2/2.
    Cu,
}

/// Margin inside the EL carrier domain guarding log(0).
const EL_DOMAIN_MARGIN: f64 = 1e-10;

impl RhoFamily {
    #[inline]
    pub fn rho(self, v: f64) -> f64 {
        match self {
            RhoFamily::El => (1.0 - v).ln(),
            RhoFamily::Et => -v.exp(),
            RhoFamily::Cu => -v - 0.5 * v * v,
        }
    }

    #[inline]
    pub fn rho1(self, v: f64) -> f64 {
        match self {
            RhoFamily::El => -1.0 / (1.0 - v),
            RhoFamily::Et => -v.exp(),
            RhoFamily::Cu => -1.0 - v,
        }
    }

    #[inline]
    pub fn rho2(self, v: f64) -> f64 {
        match self {
            RhoFamily::El => -1.0 / ((1.0 - v) * (1.0 - v)),
            RhoFamily::Et => -v.exp(),
            RhoFamily::Cu => -1.0,
        }
    }

    #[inline]
    pub fn rho0(self) -> f64 {
        match self {
            RhoFamily::El | RhoFamily::Cu => 0.0,
            RhoFamily::Et => -1.0,
        }
    }

    #[inline]
    pub fn in_domain(self, v: f64) -> bool {
        match self {
            RhoFamily::El => v < 1.0 - EL_DOMAIN_MARGIN,
            _ => true,
        }
    }
}

/// Fitting method label carried on a [`GelFit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMethod {
    Gel(RhoFamily),
    Gmm,
}

/// A solved saddle point.
#[derive(Debug, Clone)]
pub struct GelFit {
    pub theta: Vec<f64>,
    /// Multiplier on the f_N-scaled moments.
    pub eta: Vec<f64>,
    /// Empirical probabilities (uniform for GMM).
    pub p_hat: Vec<f64>,
    /// Value of the scaled criterion at the saddle (the GMM quadratic form
    /// at the minimum for GMM fits).
    pub objective: f64,
    pub inner_iters: usize,
    pub outer_evals: usize,
    pub converged: bool,
    pub f_n: f64,
    pub n_b: f64,
    pub method: FitMethod,
    /// Fixed weight matrix (row-major inverse) for two-step GMM ratio
    /// evaluations.
    pub(crate) gmm_w_inv: Option<Vec<f64>>,
}

/// Scaled moment rows u_i = d_i m(z_i, theta) for one theta.
pub(crate) struct MomentMatrix {
    pub n: usize,
    pub dim: usize,
    pub u: Vec<f64>, // row-major n x dim
}

pub(crate) fn build_moments(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> MomentMatrix {
    let dim = system.moment_dim(include_side);
    let n = sample.n();
    let f_n = sample.f_n();
    let mut u = vec![0.0; n * dim];
    let mut buf = vec![0.0; dim];
    for (i, row) in sample.rows.iter().enumerate() {
        system.moments(row.z, theta, include_side, &mut buf);
        let d = f_n / row.pi;
        for j in 0..dim {
            u[i * dim + j] = d * buf[j];
        }
    }
    MomentMatrix { n, dim, u }
}

impl MomentMatrix {
    /// Recentred criterion value; `None` when the carrier domain is violated.
    pub fn objective(&self, family: RhoFamily, eta: &[f64]) -> Option<f64> {
        let mut total = 0.0;
        let rho0 = family.rho0();
        for i in 0..self.n {
            let v = dot(&self.u[i * self.dim..(i + 1) * self.dim], eta);
            if !family.in_domain(v) {
                return None;
            }
            total += family.rho(v) - rho0;
        }
        Some(total / self.n as f64)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStatus {
    Converged,
    MaxIter,
    /// Degenerate moment matrix (e.g. all moments zero): eta = 0 is
    /// stationary.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct InnerMax {
    pub eta: Vec<f64>,
    pub objective: f64,
    pub iters: usize,
    pub status: InnerStatus,
}

impl InnerMax {
    pub fn converged(&self) -> bool {
        !matches!(self.status, InnerStatus::MaxIter)
    }
}

const INNER_MAX_ITERS: usize = 200;
const INNER_GRAD_TOL: f64 = 1e-10;

pub(crate) fn inner_max_eta_m(m: &MomentMatrix, family: RhoFamily) -> InnerMax {
    inner_max_eta_cut(m, family, None)
}

/// Maximize the concave criterion over eta by damped Newton with step
/// halving. Steps leaving the carrier domain are halved; non-convergence is
/// reported in the status, not as an error (an unbounded inner problem means
/// theta is infeasible and shows up as a large objective).
///
/// `stop_above` short-circuits once the running value (a lower bound on the
/// supremum) exceeds the cutoff; callers that only compare the profile
/// against a threshold use this to skip hopeless theta values cheaply.
pub(crate) fn inner_max_eta_cut(
    m: &MomentMatrix,
    family: RhoFamily,
    stop_above: Option<f64>,
) -> InnerMax {
    if m.dim == 1 {
        // the scalar case dominates the simulation workload
        return inner_scalar(&m.u, family, stop_above);
    }
    let (n, r) = (m.n, m.dim);
    let nf = n as f64;
    let mut eta = vec![0.0; r];
    let mut obj = 0.0;
    let mut grad = vec![0.0; r];
    let mut hess = vec![0.0; r * r];

    for iter in 0..INNER_MAX_ITERS {
        if let Some(cut) = stop_above {
            if obj > cut {
                return InnerMax { eta, objective: obj, iters: iter, status: InnerStatus::Converged };
            }
        }
        grad.fill(0.0);
        hess.fill(0.0);
        for i in 0..n {
            let ui = &m.u[i * r..(i + 1) * r];
            let v = dot(ui, &eta);
            let r1 = family.rho1(v);
            let r2 = family.rho2(v);
            for j in 0..r {
                grad[j] += r1 * ui[j];
                for k in j..r {
                    hess[j * r + k] += r2 * ui[j] * ui[k];
                }
            }
        }
        for g in &mut grad {
            *g /= nf;
        }
        for j in 0..r {
            for k in j..r {
                hess[j * r + k] /= nf;
                hess[k * r + j] = hess[j * r + k];
            }
        }

        let gnorm = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        if gnorm < INNER_GRAD_TOL {
            return InnerMax { eta, objective: obj, iters: iter, status: InnerStatus::Converged };
        }

        // Newton direction: solve (-H) delta = grad, -H positive semidefinite
        let mut neg_h: Vec<f64> = hess.iter().map(|&h| -h).collect();
        let scale = (0..r).map(|j| neg_h[j * r + j]).fold(0.0f64, f64::max);
        if scale <= 0.0 {
            return InnerMax {
                eta,
                objective: obj,
                iters: iter,
                status: InnerStatus::Degenerate,
            };
        }
        let delta = match solve_spd(&mut neg_h, &grad, r) {
            Some(d) => d,
            None => {
                // ridge fallback for near-singular curvature
                let mut ridged: Vec<f64> = hess.iter().map(|&h| -h).collect();
                for j in 0..r {
                    ridged[j * r + j] += 1e-10 * scale;
                }
                match solve_spd(&mut ridged, &grad, r) {
                    Some(d) => d,
                    None => {
                        return InnerMax {
                            eta,
                            objective: obj,
                            iters: iter,
                            status: InnerStatus::Degenerate,
                        }
                    }
                }
            }
        };

        // cap the step so every carrier argument stays inside the domain,
        // then backtrack on the objective alone
        let slope = dot(&grad, &delta); // > 0 for an ascent direction
        let mut t_max = f64::INFINITY;
        if matches!(family, RhoFamily::El) {
            for i in 0..n {
                let ui = &m.u[i * r..(i + 1) * r];
                let dv = dot(ui, &delta);
                if dv > 0.0 {
                    let v = dot(ui, &eta);
                    t_max = t_max.min((1.0 - 2.0 * EL_DOMAIN_MARGIN - v) / dv);
                }
            }
        }
        let mut t = if t_max.is_finite() { (0.95 * t_max).min(1.0) } else { 1.0 };
        let mut moved = false;
        while t >= 1e-14 {
            let cand: Vec<f64> =
                eta.iter().zip(&delta).map(|(e, d)| e + t * d).collect();
            if let Some(new_obj) = m.objective(family, &cand) {
                if new_obj >= obj + 1e-4 * t * slope {
                    eta = cand;
                    obj = new_obj;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            // cannot improve: at numerical stationarity
            let status = if gnorm < 1e-6 { InnerStatus::Converged } else { InnerStatus::MaxIter };
            return InnerMax { eta, objective: obj, iters: iter, status };
        }
    }
    InnerMax { eta, objective: obj, iters: INNER_MAX_ITERS, status: InnerStatus::MaxIter }
}

/// One-dimensional damped Newton, with fused per-family passes: one
/// division (EL) or one exponential (ET) per row serves gradient and
/// curvature, and the carrier-domain check for a candidate eta costs O(1)
/// from the precomputed moment extremes.
fn inner_scalar(u: &[f64], family: RhoFamily, stop_above: Option<f64>) -> InnerMax {
    let nf = u.len() as f64;
    let (u_min, u_max) =
        u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let feasible = |eta: f64| -> bool {
        match family {
            RhoFamily::El => {
                eta * u_max < 1.0 - EL_DOMAIN_MARGIN && eta * u_min < 1.0 - EL_DOMAIN_MARGIN
            }
            _ => true,
        }
    };
    let objective = |eta: f64| -> f64 {
        let mut total = 0.0;
        match family {
            RhoFamily::El => {
                for &ui in u {
                    total += (1.0 - eta * ui).ln();
                }
            }
            RhoFamily::Et => {
                for &ui in u {
                    total += 1.0 - (eta * ui).exp();
                }
            }
            RhoFamily::Cu => {
                for &ui in u {
                    let v = eta * ui;
                    total -= v + 0.5 * v * v;
                }
            }
        }
        total / nf
    };
    let grad_hess = |eta: f64| -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        match family {
            RhoFamily::El => {
                for &ui in u {
                    let r1 = 1.0 / (1.0 - eta * ui); // -rho1
                    let gu = r1 * ui;
                    g -= gu;
                    h -= gu * gu;
                }
            }
            RhoFamily::Et => {
                for &ui in u {
                    let e = (eta * ui).exp();
                    g -= e * ui;
                    h -= e * ui * ui;
                }
            }
            RhoFamily::Cu => {
                for &ui in u {
                    g -= (1.0 + eta * ui) * ui;
                    h -= ui * ui;
                }
            }
        }
        (g / nf, h / nf)
    };

    let mut eta = 0.0f64;
    let mut obj = 0.0f64;
    for iter in 0..INNER_MAX_ITERS {
        if let Some(cut) = stop_above {
            if obj > cut {
                return InnerMax {
                    eta: vec![eta],
                    objective: obj,
                    iters: iter,
                    status: InnerStatus::Converged,
                };
            }
        }
        let (g, h) = grad_hess(eta);
        if g.abs() < INNER_GRAD_TOL {
            return InnerMax {
                eta: vec![eta],
                objective: obj,
                iters: iter,
                status: InnerStatus::Converged,
            };
        }
        if h >= 0.0 || !h.is_finite() {
            return InnerMax {
                eta: vec![eta],
                objective: obj,
                iters: iter,
                status: InnerStatus::Degenerate,
            };
        }
        let delta = -g / h;
        let slope = g * delta; // -g^2/h > 0
        let mut t = 1.0;
        let mut moved = false;
        while t >= 1e-14 {
            let cand = eta + t * delta;
            if feasible(cand) {
                let new_obj = objective(cand);
                if new_obj >= obj + 1e-4 * t * slope {
                    eta = cand;
                    obj = new_obj;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            let status =
                if g.abs() < 1e-6 { InnerStatus::Converged } else { InnerStatus::MaxIter };
            return InnerMax { eta: vec![eta], objective: obj, iters: iter, status };
        }
    }
    InnerMax { eta: vec![eta], objective: obj, iters: INNER_MAX_ITERS, status: InnerStatus::MaxIter }
}

/// Cholesky solve of a (small) symmetric positive definite system; `a` is
/// clobbered. Returns `None` when the factorization breaks down.
fn solve_spd(a: &mut [f64], b: &[f64], r: usize) -> Option<Vec<f64>> {
    // in-place LL'
    for j in 0..r {
        let mut d = a[j * r + j];
        for k in 0..j {
            d -= a[j * r + k] * a[j * r + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let l = d.sqrt();
        a[j * r + j] = l;
        for i in (j + 1)..r {
            let mut s = a[i * r + j];
            for k in 0..j {
                s -= a[i * r + k] * a[j * r + k];
            }
            a[i * r + j] = s / l;
        }
    }
    // forward then backward substitution
    let mut y = b.to_vec();
    for i in 0..r {
        for k in 0..i {
            let t = y[k];
            y[i] -= a[i * r + k] * t;
        }
        y[i] /= a[i * r + i];
    }
    for i in (0..r).rev() {
        for k in (i + 1)..r {
            let t = y[k];
            y[i] -= a[k * r + i] * t;
        }
        y[i] /= a[i * r + i];
    }
    Some(y)
}

/// Recentred GEL criterion at explicit (theta, eta).
pub fn gel_objective(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    eta: &[f64],
    family: RhoFamily,
) -> Result<f64> {
    let m = build_moments(sample, system, theta, false);
    m.objective(family, eta).ok_or(Error::DomainViolation)
}

/// Inner maximization at fixed theta.
pub fn inner_max_eta(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    family: RhoFamily,
) -> InnerMax {
    let m = build_moments(sample, system, theta, false);
    inner_max_eta_m(&m, family)
}

/// Profile objective used by the outer minimization; `include_side` stacks
/// the auxiliary moments.
pub(crate) fn profile_objective(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    family: RhoFamily,
    include_side: bool,
) -> InnerMax {
    let m = build_moments(sample, system, theta, include_side);
    inner_max_eta_m(&m, family)
}

/// [`profile_objective`] with an early-exit cutoff on the inner value.
pub(crate) fn profile_objective_cut(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    family: RhoFamily,
    include_side: bool,
    stop_above: Option<f64>,
) -> InnerMax {
    let m = build_moments(sample, system, theta, include_side);
    inner_max_eta_cut(&m, family, stop_above)
}

pub(crate) struct ScalarMin {
    pub x: f64,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Scalar minimization on [lo, hi]: a coarse grid augmented with
/// van der Corput points (guards against flat or multimodal profiles),
/// golden-section on the best bracket, then a short parabolic polish.
/// Ties resolve to the smallest x.
pub(crate) fn minimize_scalar<F: FnMut(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    extra: &[f64],
) -> ScalarMin {
    minimize_scalar_tol(f, lo, hi, extra, 1e-11)
}

pub(crate) fn minimize_scalar_tol<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    extra: &[f64],
    rel_tol: f64,
) -> ScalarMin {
    let range = hi - lo;
    assert!(range > 0.0, "degenerate theta space [{lo}, {hi}]");
    let mut evals = 0usize;
    let mut pts: Vec<f64> = (0..=8).map(|i| lo + range * i as f64 / 8.0).collect();
    for &v in &[0.5, 0.25, 0.75, 0.125, 0.625] {
        pts.push(lo + range * v);
    }
    pts.extend(extra.iter().copied().filter(|x| *x >= lo && *x <= hi));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * range.max(1.0));

    let vals: Vec<f64> = pts
        .iter()
        .map(|&x| {
            evals += 1;
            f(x)
        })
        .collect();
    // strict improvement only: with ascending points, exact ties (genuinely
    // flat segments) keep the smallest x
    let mut best = 0usize;
    for i in 1..pts.len() {
        if vals[i] < vals[best] {
            best = i;
        }
    }

    let mut a = if best == 0 { pts[0] } else { pts[best - 1] };
    let mut b = if best + 1 == pts.len() { pts[best] } else { pts[best + 1] };
    let (mut xm, mut fm) = (pts[best], vals[best]);

    // golden-section down to rel_tol of the range
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let tol = rel_tol * range;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    evals += 2;
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        evals += 1;
        if evals > 500 {
            break;
        }
    }
    for &(x, v) in &[(x1, f1), (x2, f2)] {
        if v < fm || (v == fm && x < xm) {
            xm = x;
            fm = v;
        }
    }

    // parabolic polish inside the bracket
    for _ in 0..4 {
        let h = (b - a).max(1e-12 * range);
        let (xl, xr) = ((xm - h).max(lo), (xm + h).min(hi));
        let (fl, fr) = (f(xl), f(xr));
        evals += 2;
        let denom = (xl - xm) * (fr - fm) - (xr - xm) * (fl - fm);
        if denom.abs() > 0.0 {
            let num = (xl - xm).powi(2) * (fr - fm) - (xr - xm).powi(2) * (fl - fm);
            let cand = xm - 0.5 * num / denom;
            if cand.is_finite() && cand > lo && cand < hi {
                let fc = f(cand);
                evals += 1;
                if fc < fm {
                    xm = cand;
                    fm = fc;
                    continue;
                }
            }
        }
        if fl < fm {
            xm = xl;
            fm = fl;
        } else if fr < fm {
            xm = xr;
            fm = fr;
        } else {
            break;
        }
    }

    ScalarMin { x: xm, f: fm, evals, converged: evals <= 500 }
}

/// Nelder-Mead with box projection and shrink restarts.
pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    budget: usize,
) -> (Vec<f64>, f64, usize) {
    let p = x0.len();
    let clamp = |x: &mut Vec<f64>| {
        for j in 0..p {
            x[j] = x[j].clamp(lo[j], hi[j]);
        }
    };
    let mut evals = 0usize;
    let mut best_x = x0.to_vec();
    let mut best_f = {
        evals += 1;
        f(&best_x)
    };

    for restart in 0..3 {
        let scale = 0.1f64.powi(restart) * 0.25;
        let mut simplex: Vec<Vec<f64>> = vec![best_x.clone()];
        for j in 0..p {
            let mut v = best_x.clone();
            let step = scale * (hi[j] - lo[j]).max(1e-6);
            v[j] = if v[j] + step <= hi[j] { v[j] + step } else { v[j] - step };
            simplex.push(v);
        }
        let mut fv: Vec<f64> = simplex
            .iter()
            .map(|x| {
                evals += 1;
                f(x)
            })
            .collect();

        while evals < budget {
            // order
            let mut idx: Vec<usize> = (0..=p).collect();
            idx.sort_by(|&i, &j| fv[i].partial_cmp(&fv[j]).unwrap());
            let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
            let fo: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
            simplex = ordered;
            fv = fo;

            let spread = fv[p] - fv[0];
            if spread.abs() < 1e-12 * (1.0 + fv[0].abs()) {
                break;
            }

            let centroid: Vec<f64> = (0..p)
                .map(|j| simplex[..p].iter().map(|x| x[j]).sum::<f64>() / p as f64)
                .collect();
            let mut xr: Vec<f64> =
                (0..p).map(|j| centroid[j] + (centroid[j] - simplex[p][j])).collect();
            clamp(&mut xr);
            let fr = {
                evals += 1;
                f(&xr)
            };
            if fr < fv[0] {
                let mut xe: Vec<f64> =
                    (0..p).map(|j| centroid[j] + 2.0 * (centroid[j] - simplex[p][j])).collect();
                clamp(&mut xe);
                let fe = {
                    evals += 1;
                    f(&xe)
                };
                if fe < fr {
                    simplex[p] = xe;
                    fv[p] = fe;
                } else {
                    simplex[p] = xr;
                    fv[p] = fr;
                }
            } else if fr < fv[p - 1] {
                simplex[p] = xr;
                fv[p] = fr;
            } else {
                let mut xc: Vec<f64> =
                    (0..p).map(|j| centroid[j] + 0.5 * (simplex[p][j] - centroid[j])).collect();
                clamp(&mut xc);
                let fc = {
                    evals += 1;
                    f(&xc)
                };
                if fc < fv[p] {
                    simplex[p] = xc;
                    fv[p] = fc;
                } else {
                    // shrink towards the best vertex
                    for i in 1..=p {
                        for j in 0..p {
                            simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
                        }
                        evals += 1;
                        fv[i] = f(&simplex[i]);
                    }
                }
            }
        }
        if fv[0] < best_f {
            best_f = fv[0];
            best_x = simplex[0].clone();
        }
    }
    (best_x, best_f, evals)
}

/// Solve the saddle-point problem: outer minimization of the inner-maximized
/// profile over the theta box.
pub fn fit_gel(
    sample: &SurveySample,
    system: &FittedSystem,
    family: RhoFamily,
    theta0: Option<&[f64]>,
) -> Result<GelFit> {
    sample.validate()?;
    let p = system.p();

    // Just-identified scalar shortcut: the profile is nonnegative and
    // vanishes exactly where the weighted moment balances, so the moment
    // root is the saddle point whenever the inner solve confirms it.
    if p == 1 && system.r() == 1 && system.s() == 0 {
        if let Ok(root) = crate::estfun::moment_root(sample, system) {
            let inner = profile_objective(sample, system, &[root], family, false);
            if inner.converged() && inner.objective.abs() < 1e-12 {
                let p_hat =
                    probabilities_from_inner(sample, system, &[root], &inner.eta, family);
                return Ok(GelFit {
                    theta: vec![root],
                    eta: inner.eta.clone(),
                    p_hat,
                    objective: inner.objective,
                    inner_iters: inner.iters,
                    outer_evals: 1,
                    converged: true,
                    f_n: sample.f_n(),
                    n_b: sample.expected_n,
                    method: FitMethod::Gel(family),
                    gmm_w_inv: None,
                });
            }
        }
    }
    // points whose inner value exceeds the running best by a wide slack
    // cannot be the minimizer; let the inner solver abandon them early
    let best = std::cell::Cell::new(f64::INFINITY);
    let prof = |t: &[f64]| -> f64 {
        let cut = if best.get().is_finite() { Some(best.get() + 1.0) } else { None };
        let v = profile_objective_cut(sample, system, t, family, false, cut).objective;
        if v < best.get() {
            best.set(v);
        }
        v
    };
    let (theta, outer_evals, outer_ok) = if p == 1 {
        let mut extra: Vec<f64> = theta0.map(|t| t.to_vec()).unwrap_or_default();
        // the just-identified root is an excellent starting hint when it exists
        if system.r() == 1 {
            if let Ok(root) = crate::estfun::moment_root(sample, system) {
                extra.push(root);
            }
        }
        let sm = minimize_scalar(
            |t| prof(&[t]),
            system.theta_lo()[0],
            system.theta_hi()[0],
            &extra,
        );
        (vec![sm.x], sm.evals, sm.converged)
    } else {
        let x0: Vec<f64> = theta0.map(|t| t.to_vec()).unwrap_or_else(|| {
            system
                .theta_lo()
                .iter()
                .zip(system.theta_hi())
                .map(|(l, h)| 0.5 * (l + h))
                .collect()
        });
        let (x, _fx, evals) = nelder_mead(
            |t| prof(t),
            &x0,
            system.theta_lo(),
            system.theta_hi(),
            500 * p,
        );
        (x, evals, true)
    };

    let inner = profile_objective(sample, system, &theta, family, false);
    let p_hat = probabilities_from_inner(sample, system, &theta, &inner.eta, family);
    Ok(GelFit {
        theta,
        eta: inner.eta.clone(),
        p_hat,
        objective: inner.objective,
        inner_iters: inner.iters,
        outer_evals,
        converged: outer_ok && inner.converged(),
        f_n: sample.f_n(),
        n_b: sample.expected_n,
        method: FitMethod::Gel(family),
        gmm_w_inv: None,
    })
}

pub(crate) fn probabilities_from_inner_side(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    eta: &[f64],
    family: RhoFamily,
    include_side: bool,
) -> Vec<f64> {
    let m = build_moments(sample, system, theta, include_side);
    let mut p = Vec::with_capacity(m.n);
    let mut total = 0.0;
    for i in 0..m.n {
        let v = dot(&m.u[i * m.dim..(i + 1) * m.dim], eta);
        let r1 = family.rho1(v);
        p.push(r1);
        total += r1;
    }
    for q in &mut p {
        *q /= total;
    }
    p
}

fn probabilities_from_inner(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    eta: &[f64],
    family: RhoFamily,
) -> Vec<f64> {
    probabilities_from_inner_side(sample, system, theta, eta, family, false)
}

/// Empirical probabilities at a solved fit:
/// p_i = rho1(eta' d_i psi_i) / sum_j rho1(eta' d_j psi_j).
pub fn empirical_probabilities(
    fit: &GelFit,
    sample: &SurveySample,
    system: &FittedSystem,
    family: RhoFamily,
) -> Vec<f64> {
    probabilities_from_inner(sample, system, &fit.theta, &fit.eta, family)
}

/// Weight matrix W-hat(theta) = (n_B/N^2) sum_i pi_i^-2 psi_i psi_i'
/// (row-major r x r).
pub(crate) fn w_hat_matrix(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> Vec<f64> {
    let dim = system.moment_dim(include_side);
    let mut w = vec![0.0; dim * dim];
    let mut buf = vec![0.0; dim];
    for row in &sample.rows {
        system.moments(row.z, theta, include_side, &mut buf);
        let wi = 1.0 / (row.pi * row.pi);
        for j in 0..dim {
            for k in j..dim {
                w[j * dim + k] += wi * buf[j] * buf[k];
            }
        }
    }
    let scale = sample.expected_n / (sample.population_size * sample.population_size);
    for j in 0..dim {
        for k in j..dim {
            w[j * dim + k] *= scale;
            w[k * dim + j] = w[j * dim + k];
        }
    }
    w
}

/// Invert a small symmetric positive definite matrix (row-major).
pub(crate) fn invert_spd(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let mut work = a.to_vec();
        let col = solve_spd(&mut work, &e, dim)?;
        for i in 0..dim {
            inv[i * dim + j] = col[i];
        }
    }
    Some(inv)
}

/// Two-step GMM: minimize U'(theta) W^-1(theta~) U(theta) with the weight
/// matrix fixed at a pilot estimate theta~ (the just-identified root when
/// available). The reported eta is the implied -W^-1 U(theta-hat)
/// diagnostic; the empirical probabilities are uniform.
pub fn fit_gmm(
    sample: &SurveySample,
    system: &FittedSystem,
    theta_tilde: Option<&[f64]>,
) -> Result<GelFit> {
    sample.validate()?;
    let p = system.p();
    let r = system.r();

    let pilot: Vec<f64> = match theta_tilde {
        Some(t) => t.to_vec(),
        None => {
            if r == 1 && p == 1 {
                vec![crate::estfun::moment_root(sample, system)?]
            } else {
                // fall back to the CU point as a design-consistent pilot
                fit_gel(sample, system, RhoFamily::Cu, None)?.theta
            }
        }
    };

    let w = w_hat_matrix(sample, system, &pilot, false);
    let w_inv = invert_spd(&w, r)
        .ok_or_else(|| Error::Singular("GMM weight matrix W(theta~) is singular".into()))?;

    let quad = |theta: &[f64]| -> f64 {
        let u = weighted_moment_mean(sample, system, theta, false);
        let mut q = 0.0;
        for j in 0..r {
            for k in 0..r {
                q += u[j] * w_inv[j * r + k] * u[k];
            }
        }
        q
    };

    let (theta, outer_evals) = if p == 1 {
        let sm =
            minimize_scalar(|t| quad(&[t]), system.theta_lo()[0], system.theta_hi()[0], &pilot);
        (vec![sm.x], sm.evals)
    } else {
        let (x, _f, evals) =
            nelder_mead(|t| quad(t), &pilot, system.theta_lo(), system.theta_hi(), 500 * p);
        (x, evals)
    };

    let u = weighted_moment_mean(sample, system, &theta, false);
    let mut eta = vec![0.0; r];
    for j in 0..r {
        for k in 0..r {
            eta[j] -= w_inv[j * r + k] * u[k];
        }
    }
    let n = sample.n();
    Ok(GelFit {
        objective: quad(&theta),
        theta,
        eta,
        p_hat: vec![1.0 / n as f64; n],
        inner_iters: 0,
        outer_evals,
        converged: true,
        f_n: sample.f_n(),
        n_b: sample.expected_n,
        method: FitMethod::Gmm,
        gmm_w_inv: Some(w_inv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estfun::SystemSpec;
    use crate::population::{DesignTag, SampleRow, SurveySample};

    fn flat_sample(z: &[f64]) -> SurveySample {
        let rows = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| SampleRow {
                unit_id: i as u32 + 1,
                z: zi,
                pi: 1.0,
                stratum: None,
                cluster: None,
            })
            .collect::<Vec<_>>();
        let n = z.len() as f64;
        SurveySample { rows, population_size: n, design: DesignTag::Srswor, expected_n: n }
    }

    fn mean_system(sample: &SurveySample) -> crate::estfun::FittedSystem {
        SystemSpec::mean(true).fit(sample).unwrap()
    }

    #[test]
    fn objective_zero_at_eta_zero() {
        let s = flat_sample(&[1.0, 2.0, 5.0]);
        let sys = mean_system(&s);
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let v = gel_objective(&s, &sys, &[2.0], &[0.0], family).unwrap();
            assert!(v.abs() < 1e-15, "{family:?}: {v}");
        }
    }

    #[test]
    fn objective_zero_when_moments_vanish() {
        // psi == 0 data: g = z - theta at theta = z for a constant sample
        let s = flat_sample(&[4.0, 4.0, 4.0]);
        let sys = mean_system(&s);
        for eta in [-2.0, 0.0, 3.0] {
            let v = gel_objective(&s, &sys, &[4.0], &[eta], RhoFamily::El).unwrap();
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn objective_single_observation_el() {
        // one unit, d psi = 1, eta = 0.5 -> log(0.5)
        let s = SurveySample {
            rows: vec![SampleRow { unit_id: 1, z: 1.5, pi: 1.0, stratum: None, cluster: None }],
            population_size: 1.0,
            design: DesignTag::Srswor,
            expected_n: 1.0,
        };
        let sys = mean_system(&s);
        // theta = 0.5 makes psi = z - theta = 1.0
        let v = gel_objective(&s, &sys, &[0.5], &[0.5], RhoFamily::El).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12, "{v}");
        assert!((v + 0.6931).abs() < 1e-4);
    }

    #[test]
    fn objective_signals_domain_violation() {
        let s = flat_sample(&[2.0]);
        let sys = mean_system(&s);
        // d psi = 1 at theta = 1; eta = 2 puts v = 2 outside EL's domain
        match gel_objective(&s, &sys, &[1.0], &[2.0], RhoFamily::El) {
            Err(Error::DomainViolation) => {}
            other => panic!("expected domain violation, got {other:?}"),
        }
    }

    #[test]
    fn inner_balanced_data_gives_zero_eta() {
        let s = flat_sample(&[-1.0, 1.0, -2.0, 2.0]);
        let sys = mean_system(&s);
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let inner = inner_max_eta(&s, &sys, &[0.0], family);
            assert!(inner.converged());
            assert!(inner.eta[0].abs() < 1e-9, "{family:?}: eta {}", inner.eta[0]);
            assert!(inner.objective.abs() < 1e-12);
        }
    }

    #[test]
    fn inner_cu_matches_closed_form() {
        let s = flat_sample(&[0.3, -1.2, 2.5, 0.9, -0.4]);
        let sys = mean_system(&s);
        let theta = [0.2];
        let inner = inner_max_eta(&s, &sys, &theta, RhoFamily::Cu);
        // closed form: eta = -(sum u^2)^-1 sum u on the scaled moments
        let m = build_moments(&s, &sys, &theta, false);
        let su: f64 = m.u.iter().sum();
        let suu: f64 = m.u.iter().map(|u| u * u).sum();
        let expect = -su / suu;
        assert!(inner.converged());
        assert!((inner.eta[0] - expect).abs() < 1e-8, "{} vs {expect}", inner.eta[0]);
    }

    #[test]
    fn inner_el_matches_grid_search() {
        // n = 3, d = 1, psi = (-1, 0.2, 0.9) at theta fixed
        let s = flat_sample(&[-1.0, 0.2, 0.9]);
        let sys = mean_system(&s);
        let theta = [0.0];
        let inner = inner_max_eta(&s, &sys, &theta, RhoFamily::El);
        assert!(inner.converged());
        // 1-D grid oracle over the feasible eta interval
        let m = build_moments(&s, &sys, &theta, false);
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut eta = -1.1; // domain: eta * 0.9 < 1 and eta * (-1) < 1 -> (-1, 1.11)
        while eta < 1.1 {
            if let Some(v) = m.objective(RhoFamily::El, &[eta]) {
                if v > best.0 {
                    best = (v, eta);
                }
            }
            eta += 1e-6;
        }
        assert!((inner.eta[0] - best.1).abs() < 1e-5, "{} vs {}", inner.eta[0], best.1);
        assert!((inner.objective - best.0).abs() < 1e-9);
    }

    #[test]
    fn fit_recovers_hajek_mean_under_unequal_weights() {
        // just-identified smooth case: theta-hat equals the weighted mean
        let rows = vec![
            SampleRow { unit_id: 1, z: 1.0, pi: 0.8, stratum: None, cluster: None },
            SampleRow { unit_id: 2, z: 2.0, pi: 0.4, stratum: None, cluster: None },
            SampleRow { unit_id: 3, z: 5.0, pi: 0.2, stratum: None, cluster: None },
            SampleRow { unit_id: 4, z: 3.0, pi: 0.5, stratum: None, cluster: None },
        ];
        let s = SurveySample {
            rows,
            population_size: 10.0,
            design: DesignTag::Poisson,
            expected_n: 1.9,
        };
        let sys = SystemSpec::mean(true)
            .fit(&s)
            .unwrap();
        let hajek = {
            let num: f64 = s.rows.iter().map(|r| r.z / r.pi).sum();
            let den: f64 = s.rows.iter().map(|r| 1.0 / r.pi).sum();
            num / den
        };
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let fit = fit_gel(&s, &sys, family, None).unwrap();
            assert!(fit.converged);
            assert!(
                (fit.theta[0] - hajek).abs() < 1e-8,
                "{family:?}: {} vs {hajek}",
                fit.theta[0]
            );
            assert!(fit.eta[0].abs() < 1e-7);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_kill_the_moment() {
        let s = flat_sample(&[0.5, 1.9, 2.2, 3.7, 0.1, 5.5, 2.8]);
        let sys = mean_system(&s);
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let fit = fit_gel(&s, &sys, family, None).unwrap();
            let p = empirical_probabilities(&fit, &s, &sys, family);
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let moment: f64 =
                p.iter().zip(&s.rows).map(|(pi, r)| pi * (r.z - fit.theta[0])).sum();
            let scale: f64 =
                s.rows.iter().map(|r| (r.z - fit.theta[0]).abs()).sum::<f64>() / s.n() as f64;
            assert!(moment.abs() < 1e-8 * scale.max(1.0), "{family:?}: moment {moment:.2e}");
        }
    }

    #[test]
    fn el_probabilities_match_lagrange_form() {
        // EL: p_i proportional to (1 - eta d_i psi_i)^-1, i.e. the classical
        // Lagrange representation; p_i (1 - v_i) must be constant
        let s = flat_sample(&[0.4, 1.9, 2.2, 3.1, 0.8]);
        let sys = mean_system(&s);
        let fit = fit_gel(&s, &sys, RhoFamily::El, None).unwrap();
        // evaluate at a displaced theta so eta is nonzero
        let theta = [fit.theta[0] + 0.3];
        let inner = inner_max_eta(&s, &sys, &theta, RhoFamily::El);
        assert!(inner.converged());
        let m = build_moments(&s, &sys, &theta, false);
        let p = probabilities_from_inner(&s, &sys, &theta, &inner.eta, RhoFamily::El);
        let c0 = p[0] * (1.0 - inner.eta[0] * m.u[0]);
        for i in 1..m.n {
            let ci = p[i] * (1.0 - inner.eta[0] * m.u[i]);
            assert!((ci - c0).abs() < 1e-12, "Lagrange identity broken: {ci} vs {c0}");
        }
    }

    #[test]
    fn uniform_probabilities_at_eta_zero() {
        let s = flat_sample(&[1.0, 2.0, 3.0]);
        let sys = mean_system(&s);
        let fit = GelFit {
            theta: vec![2.0],
            eta: vec![0.0],
            p_hat: vec![],
            objective: 0.0,
            inner_iters: 0,
            outer_evals: 0,
            converged: true,
            f_n: 1.0,
            n_b: 3.0,
            method: FitMethod::Gel(RhoFamily::El),
            gmm_w_inv: None,
        };
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let p = empirical_probabilities(&fit, &s, &sys, family);
            assert!(p.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-14), "{family:?}");
        }
    }

    #[test]
    fn cu_probabilities_hand_case() {
        // n = 3, moments u = z - theta with d = 1; rho1(v) = -1 - v
        let s = flat_sample(&[1.0, 2.0, 4.0]);
        let sys = mean_system(&s);
        let theta = [2.0];
        let eta = [0.1];
        let fit = GelFit {
            theta: theta.to_vec(),
            eta: eta.to_vec(),
            p_hat: vec![],
            objective: 0.0,
            inner_iters: 0,
            outer_evals: 0,
            converged: true,
            f_n: 1.0,
            n_b: 3.0,
            method: FitMethod::Gel(RhoFamily::Cu),
            gmm_w_inv: None,
        };
        let p = empirical_probabilities(&fit, &s, &sys, RhoFamily::Cu);
        let raw = [-1.0 - 0.1 * (1.0 - 2.0), -1.0 - 0.1 * 0.0, -1.0 - 0.1 * 2.0];
        let total: f64 = raw.iter().sum();
        for (got, want) in p.iter().zip(raw.iter().map(|v| v / total)) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn gmm_matches_root_in_just_identified_case() {
        let s = flat_sample(&[0.5, 1.9, 2.2, 3.7, 0.1, 5.5, 2.8]);
        let sys = mean_system(&s);
        let fit = fit_gmm(&s, &sys, None).unwrap();
        let root = crate::estfun::moment_root(&s, &sys).unwrap();
        assert!((fit.theta[0] - root).abs() < 1e-8, "{} vs {root}", fit.theta[0]);
        assert!(fit.objective < 1e-16);
    }

    #[test]
    fn weight_scaling_leaves_theta_invariant() {
        // multiply all weights by c (halve every pi) and rescale f_N: the
        // criterion depends on the weights only through d_i
        let rows = vec![
            SampleRow { unit_id: 1, z: 1.0, pi: 0.8, stratum: None, cluster: None },
            SampleRow { unit_id: 2, z: 2.5, pi: 0.4, stratum: None, cluster: None },
            SampleRow { unit_id: 3, z: 5.0, pi: 0.6, stratum: None, cluster: None },
            SampleRow { unit_id: 4, z: 4.1, pi: 0.9, stratum: None, cluster: None },
            SampleRow { unit_id: 5, z: 0.3, pi: 0.2, stratum: None, cluster: None },
        ];
        let s1 = SurveySample {
            rows: rows.clone(),
            population_size: 12.0,
            design: DesignTag::Poisson,
            expected_n: 2.9,
        };
        let scaled_rows: Vec<SampleRow> =
            rows.iter().map(|r| SampleRow { pi: r.pi / 2.0, ..r.clone() }).collect();
        let s2 = SurveySample {
            rows: scaled_rows,
            population_size: 24.0,
            design: DesignTag::Poisson,
            expected_n: 2.9,
        };
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let sys1 = SystemSpec::mean(true).fit(&s1).unwrap();
            let sys2 = SystemSpec::mean(true).fit(&s2).unwrap();
            let f1 = fit_gel(&s1, &sys1, family, None).unwrap();
            let f2 = fit_gel(&s2, &sys2, family, None).unwrap();
            assert!(
                (f1.theta[0] - f2.theta[0]).abs() < 1e-8,
                "{family:?}: {} vs {}",
                f1.theta[0],
                f2.theta[0]
            );
        }
    }

    #[test]
    fn saddle_kkt_conditions_hold() {
        let s = flat_sample(&[0.4, 1.3, 2.9, 4.4, 1.1, 0.9, 3.3, 2.0]);
        let sys = mean_system(&s);
        for family in [RhoFamily::El, RhoFamily::Et, RhoFamily::Cu] {
            let fit = fit_gel(&s, &sys, family, None).unwrap();
            // gradient in eta at the saddle
            let m = build_moments(&s, &sys, &fit.theta, false);
            let mut grad = 0.0;
            for i in 0..m.n {
                grad += family.rho1(m.u[i] * fit.eta[0]) * m.u[i];
            }
            grad /= m.n as f64;
            assert!(grad.abs() < 1e-8, "{family:?}: grad {grad:.2e}");
            // profile minimal at theta-hat against small perturbations
            let range = sys.theta_hi()[0] - sys.theta_lo()[0];
            let eps = 1e-4 * range;
            for dt in [-eps, eps] {
                let off = profile_objective(&s, &sys, &[fit.theta[0] + dt], family, false);
                assert!(
                    off.objective >= fit.objective - 1e-10,
                    "{family:?}: profile dips at offset {dt}"
                );
            }
        }
    }
}
