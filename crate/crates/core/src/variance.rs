//! Design-based variance estimation: the moment-variance matrix Omega per
//! design, the weight matrix W, the random-perturbation Jacobian, the
//! sandwich covariance, and design-respecting bootstrap intervals.
//!
//! No second-order inclusion probabilities are used anywhere; every Omega
//! variant is one of the standard single-sum approximations.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::{weighted_moment_mean, FittedSystem, SystemSpec};
use crate::population::{DesignTag, SampleRow, SurveySample};
use crate::prob::normal_quantile;
use crate::rng::{child_seed, rng_from, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMethod {
    Auto,
    PpsWr,
    Hajek,
    Stratified,
    ClusterSelfWeighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbScale {
    /// N^(-1/2) perturbations (the theoretical scale).
    PopulationSqrt,
    /// n_B^(-1/2) perturbations, for sensitivity studies.
    SampleSqrt,
}

#[derive(Debug, Clone)]
pub struct VarianceOptions {
    pub omega: OmegaMethod,
    pub gamma_b: usize,
    pub seed: u64,
    pub scale: PerturbScale,
    /// Sampling fractions at or below this are treated as negligible.
    pub negligible_threshold: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions {
            omega: OmegaMethod::Auto,
            gamma_b: 200,
            seed: 0x5eed,
            scale: PerturbScale::PopulationSqrt,
            negligible_threshold: 0.02,
        }
    }
}

fn scaled_outer_sum<F>(dim: usize, rows: &[SampleRow], mut term: F) -> DMatrix<f64>
where
    F: FnMut(&SampleRow, &mut Vec<f64>) -> f64,
{
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut buf = vec![0.0; dim];
    for row in rows {
        let c = term(row, &mut buf);
        for j in 0..dim {
            for k in j..dim {
                acc[(j, k)] += c * buf[j] * buf[k];
            }
        }
    }
    for j in 0..dim {
        for k in 0..j {
            acc[(j, k)] = acc[(k, j)];
        }
    }
    acc
}

/// Omega-hat for with-replacement PPS or without-replacement PPS with
/// negligible sampling fractions:
/// (n/N^2) sum_i [pi_i^-1 psi_i - N n^-1 U-hat]^x2.
pub fn omega_pps_wr(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> DMatrix<f64> {
    let dim = system.moment_dim(include_side);
    let n = sample.n() as f64;
    let u = weighted_moment_mean(sample, system, theta, include_side);
    let center: Vec<f64> = u.iter().map(|v| v * sample.population_size / n).collect();
    let mut m = scaled_outer_sum(dim, &sample.rows, |row, buf| {
        system.moments(row.z, theta, include_side, buf);
        let w = 1.0 / row.pi;
        for (b, c) in buf.iter_mut().zip(&center) {
            *b = *b * w - c;
        }
        1.0
    });
    m *= n / (sample.population_size * sample.population_size);
    m
}

/// Hajek variance estimator for single-stage PPS with non-negligible
/// fractions, with c_i = n(1 - pi_i)/(n - 1) and B-hat the c-weighted mean
/// of pi_i^-1 psi_i.
pub fn omega_hajek(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> Result<DMatrix<f64>> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Config("Hajek estimator needs n >= 2".into()));
    }
    if sample.rows.iter().any(|r| r.pi > 1.0) {
        return Err(Error::Config(
            "Hajek estimator needs genuine inclusion probabilities (pi <= 1); \
             rescaled pseudo-weights require the with-replacement form"
                .into(),
        ));
    }
    let dim = system.moment_dim(include_side);
    let nf = n as f64;
    let c: Vec<f64> = sample.rows.iter().map(|r| nf * (1.0 - r.pi) / (nf - 1.0)).collect();
    let c_total: f64 = c.iter().sum();

    let mut b_hat = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for (row, &ci) in sample.rows.iter().zip(&c) {
        system.moments(row.z, theta, include_side, &mut buf);
        let w = ci / row.pi;
        for (b, v) in b_hat.iter_mut().zip(&buf) {
            *b += w * v;
        }
    }
    if c_total > 0.0 {
        for b in &mut b_hat {
            *b /= c_total;
        }
    }

    let mut idx = 0usize;
    let mut m = scaled_outer_sum(dim, &sample.rows, |row, buf| {
        system.moments(row.z, theta, include_side, buf);
        let w = 1.0 / row.pi;
        for (b, c0) in buf.iter_mut().zip(&b_hat) {
            *b = *b * w - c0;
        }
        let ci = c[idx];
        idx += 1;
        ci
    });
    m *= nf / (sample.population_size * sample.population_size);
    Ok(m)
}

/// Stratified Omega-hat: independent per-stratum contributions. With
/// negligible fractions each stratum is centered at its own mean of
/// pi^-1 psi; otherwise the per-stratum Hajek weighting applies.
pub fn omega_stratified(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
    negligible: bool,
) -> Result<DMatrix<f64>> {
    let dim = system.moment_dim(include_side);
    let mut strata: Vec<u32> =
        sample.rows.iter().map(|r| r.stratum.ok_or(())).collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("stratified Omega needs stratum tags".into()))?;
    strata.sort_unstable();
    strata.dedup();

    let mut total = DMatrix::<f64>::zeros(dim, dim);
    let n = sample.n() as f64;
    for h in strata {
        let rows: Vec<SampleRow> =
            sample.rows.iter().filter(|r| r.stratum == Some(h)).cloned().collect();
        let n_h = rows.len() as f64;
        if rows.len() < 2 {
            return Err(Error::Config(format!("stratum {h} has fewer than 2 sampled units")));
        }
        if negligible {
            // center at the per-stratum mean of pi^-1 psi
            let mut center = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            for row in &rows {
                system.moments(row.z, theta, include_side, &mut buf);
                for (c, v) in center.iter_mut().zip(&buf) {
                    *c += v / row.pi;
                }
            }
            for c in &mut center {
                *c /= n_h;
            }
            total += scaled_outer_sum(dim, &rows, |row, buf| {
                system.moments(row.z, theta, include_side, buf);
                let w = 1.0 / row.pi;
                for (b, c) in buf.iter_mut().zip(&center) {
                    *b = *b * w - c;
                }
                1.0
            });
        } else {
            let c: Vec<f64> =
                rows.iter().map(|r| n_h * (1.0 - r.pi) / (n_h - 1.0)).collect();
            let c_total: f64 = c.iter().sum();
            let mut b_hat = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            for (row, &ci) in rows.iter().zip(&c) {
                system.moments(row.z, theta, include_side, &mut buf);
                for (b, v) in b_hat.iter_mut().zip(&buf) {
                    *b += ci * v / row.pi;
                }
            }
            if c_total > 0.0 {
                for b in &mut b_hat {
                    *b /= c_total;
                }
            }
            let mut idx = 0usize;
            total += scaled_outer_sum(dim, &rows, |row, buf| {
                system.moments(row.z, theta, include_side, buf);
                let w = 1.0 / row.pi;
                for (b, c0) in buf.iter_mut().zip(&b_hat) {
                    *b = *b * w - c0;
                }
                let ci = c[idx];
                idx += 1;
                ci
            });
        }
    }
    total *= n / (sample.population_size * sample.population_size);
    Ok(total)
}

/// Between-PSU estimator for self-weighting two-stage designs:
/// [k(k-1)]^-1 sum_i (G-bar_i - G-bar)^x2 with G-bar_i the within-PSU mean
/// of psi.
///
/// As conventionally displayed this targets Var(G-bar) = Omega/n_B;
/// [`variance_report`] rescales by n_B when assembling the sandwich on the
/// common Omega scale.
pub fn omega_cluster_selfweighting(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> Result<DMatrix<f64>> {
    let dim = system.moment_dim(include_side);
    let mut psus: Vec<u32> =
        sample.rows.iter().map(|r| r.cluster.ok_or(())).collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("cluster Omega needs cluster tags".into()))?;
    psus.sort_unstable();
    psus.dedup();
    let k = psus.len();
    if k < 2 {
        return Err(Error::Config("cluster Omega needs at least 2 PSUs".into()));
    }

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut buf = vec![0.0; dim];
    for &c in &psus {
        let mut acc = vec![0.0; dim];
        let mut m_i = 0usize;
        for row in sample.rows.iter().filter(|r| r.cluster == Some(c)) {
            system.moments(row.z, theta, include_side, &mut buf);
            for (a, v) in acc.iter_mut().zip(&buf) {
                *a += v;
            }
            m_i += 1;
        }
        for a in &mut acc {
            *a /= m_i as f64;
        }
        means.push(acc);
    }
    let grand: Vec<f64> = (0..dim)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64)
        .collect();
    let mut total = DMatrix::<f64>::zeros(dim, dim);
    for m in &means {
        for j in 0..dim {
            for l in j..dim {
                total[(j, l)] += (m[j] - grand[j]) * (m[l] - grand[l]);
            }
        }
    }
    for j in 0..dim {
        for l in 0..j {
            total[(j, l)] = total[(l, j)];
        }
    }
    total /= (k * (k - 1)) as f64;
    Ok(total)
}

/// W-hat = (n_B/N^2) sum_i pi_i^-2 psi_i psi_i'.
pub fn w_hat(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
) -> DMatrix<f64> {
    let dim = system.moment_dim(include_side);
    let v = crate::gel::w_hat_matrix(sample, system, theta, include_side);
    DMatrix::from_row_slice(dim, dim, &v)
}

/// Random-perturbation Jacobian estimate (least-squares regression of the
/// scaled moment differences on the perturbations):
///
/// ```text
/// D_b = sqrt(N) [U-hat(theta + N^(-1/2) V_b) - U-hat(theta)],  V_b ~ N(0, I_p),
/// Gamma-hat_j = (B^-1 sum_b V_b V_b')^-1 B^-1 sum_b D_{jb} V_b.
/// ```
pub fn gamma_resample(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    b: usize,
    seed: u64,
    scale: PerturbScale,
    include_side: bool,
) -> Result<DMatrix<f64>> {
    let p = system.p();
    let dim = system.moment_dim(include_side);
    if b < 10 * p {
        return Err(Error::Config(format!("gamma_resample needs B >= 10 p, got B = {b}")));
    }
    let root_n = match scale {
        PerturbScale::PopulationSqrt => sample.population_size.sqrt(),
        PerturbScale::SampleSqrt => sample.expected_n.sqrt(),
    };
    let base = weighted_moment_mean(sample, system, theta, include_side);
    let mut rng = rng_from(seed);

    let mut vv = DMatrix::<f64>::zeros(p, p);
    let mut dv = DMatrix::<f64>::zeros(dim, p);
    let mut shifted = vec![0.0; p];
    for _ in 0..b {
        let v: Vec<f64> = (0..p).map(|_| standard_normal(&mut rng)).collect();
        for j in 0..p {
            shifted[j] = theta[j] + v[j] / root_n;
        }
        let u = weighted_moment_mean(sample, system, &shifted, include_side);
        for j in 0..p {
            for l in 0..p {
                vv[(j, l)] += v[j] * v[l];
            }
        }
        for i in 0..dim {
            let d_i = root_n * (u[i] - base[i]);
            for j in 0..p {
                dv[(i, j)] += d_i * v[j];
            }
        }
    }
    vv /= b as f64;
    dv /= b as f64;
    let vv_inv = vv
        .try_inverse()
        .ok_or_else(|| Error::Singular("perturbation Gram matrix is singular".into()))?;
    Ok(dv * vv_inv)
}

/// Plug-in sandwich: V2 = S Gamma' W^-1 Omega W^-1 Gamma S with
/// S = (Gamma' W^-1 Gamma)^-1; standard errors sqrt(diag(V2)/n_B).
pub fn sandwich_v2(
    omega: &DMatrix<f64>,
    w: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    n_b: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("W-hat is singular".into()))?;
    let gw = gamma.transpose() * &w_inv;
    let sigma = (&gw * gamma)
        .try_inverse()
        .ok_or_else(|| Error::Singular("Gamma' W^-1 Gamma is singular".into()))?;
    let v2 = &sigma * &gw * omega * gw.transpose() * &sigma;
    let se = (0..v2.nrows()).map(|j| (v2[(j, j)].max(0.0) / n_b).sqrt()).collect();
    Ok((v2, se))
}

/// Symmetrize and clip negative eigenvalues at zero. Returns the repaired
/// matrix and whether clipping occurred.
pub fn psd_repair(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let mut repaired = false;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            repaired = true;
        }
    }
    if !repaired {
        return (sym, false);
    }
    let q = eig.eigenvectors;
    (&q * DMatrix::from_diagonal(&vals) * q.transpose(), true)
}

/// Symmetric PSD square root.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Full variance assembly: Omega per the (auto-resolved) design method, the
/// perturbation Jacobian, and the sandwich.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub omega: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub se: Vec<f64>,
    pub omega_method: OmegaMethod,
    pub resample_b: usize,
    pub psd_repaired: bool,
    pub n_b: f64,
}

/// Resolve `Auto` against the sample's design tag and sampling fraction.
pub fn resolve_omega_method(
    sample: &SurveySample,
    requested: OmegaMethod,
    negligible_threshold: f64,
) -> OmegaMethod {
    match requested {
        OmegaMethod::Auto => match sample.design {
            DesignTag::Stratified => OmegaMethod::Stratified,
            DesignTag::TwoStageCluster => OmegaMethod::ClusterSelfWeighting,
            _ => {
                if sample.sampling_fraction() <= negligible_threshold {
                    OmegaMethod::PpsWr
                } else {
                    OmegaMethod::Hajek
                }
            }
        },
        other => other,
    }
}

pub fn omega_by_method(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    include_side: bool,
    method: OmegaMethod,
    negligible_threshold: f64,
) -> Result<DMatrix<f64>> {
    match method {
        OmegaMethod::Auto => unreachable!("resolve before dispatch"),
        OmegaMethod::PpsWr => Ok(omega_pps_wr(sample, system, theta, include_side)),
        OmegaMethod::Hajek => omega_hajek(sample, system, theta, include_side),
        OmegaMethod::Stratified => {
            let negligible = sample.sampling_fraction() <= negligible_threshold;
            omega_stratified(sample, system, theta, include_side, negligible)
        }
        // rescale the Var(G-bar) form onto the common Omega scale
        OmegaMethod::ClusterSelfWeighting => Ok(omega_cluster_selfweighting(
            sample,
            system,
            theta,
            include_side,
        )? * sample.expected_n),
    }
}

pub fn variance_report(
    sample: &SurveySample,
    system: &FittedSystem,
    theta: &[f64],
    opts: &VarianceOptions,
) -> Result<VarianceReport> {
    let method = resolve_omega_method(sample, opts.omega, opts.negligible_threshold);
    let raw = omega_by_method(sample, system, theta, false, method, opts.negligible_threshold)?;
    let (omega, psd_repaired) = psd_repair(&raw);
    let w = w_hat(sample, system, theta, false);
    let gamma =
        gamma_resample(sample, system, theta, opts.gamma_b, opts.seed, opts.scale, false)?;
    let (v2, se) = sandwich_v2(&omega, &w, &gamma, sample.expected_n)?;
    Ok(VarianceReport {
        omega,
        w,
        gamma,
        v2,
        se,
        omega_method: method,
        resample_b: opts.gamma_b,
        psd_repaired,
        n_b: sample.expected_n,
    })
}

/// Bootstrap output: both interval flavors are computed from one replicate
/// set.
#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub theta_hat: f64,
    pub se: f64,
    /// theta-hat +/- z_{alpha/2} se.
    pub normal: (f64, f64),
    /// Empirical quantile interval.
    pub percentile: (f64, f64),
    pub used: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    SeNormal,
    Percentile,
}

/// Design-respecting with-replacement bootstrap: units within the sample
/// for single-stage designs, units within strata for stratified samples,
/// whole PSUs for cluster samples. Each replicate refits the nuisance and
/// solves the just-identified moment root (the point estimators coincide in
/// the r = p case and this is far cheaper than a full saddle-point solve
/// per replicate).
pub fn bootstrap(
    sample: &SurveySample,
    spec: &SystemSpec,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<Bootstrap> {
    if b < 50 {
        return Err(Error::Config(format!("bootstrap needs B >= 50, got {b}")));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("level {level} outside (0, 1)")));
    }
    let theta_hat = crate::estfun::point_estimate(sample, spec)?;

    // index groups for the resampling unit
    let groups: Vec<Vec<usize>> = match sample.design {
        DesignTag::TwoStageCluster => {
            let mut ids: Vec<u32> = sample.rows.iter().filter_map(|r| r.cluster).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.iter()
                .map(|&c| {
                    (0..sample.n()).filter(|&i| sample.rows[i].cluster == Some(c)).collect()
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let strata: Vec<Vec<usize>> = match sample.design {
        DesignTag::Stratified => {
            let mut ids: Vec<u32> = sample.rows.iter().filter_map(|r| r.stratum).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.iter()
                .map(|&h| {
                    (0..sample.n()).filter(|&i| sample.rows[i].stratum == Some(h)).collect()
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let mut thetas = Vec::with_capacity(b);
    let mut failed = 0usize;
    for rep in 0..b {
        let mut rng = rng_from(child_seed(seed, rep as u64));
        let mut rows = Vec::with_capacity(sample.n());
        match sample.design {
            DesignTag::TwoStageCluster => {
                for _ in 0..groups.len() {
                    let g = &groups[rng.random_range(0..groups.len())];
                    rows.extend(g.iter().map(|&i| sample.rows[i].clone()));
                }
            }
            DesignTag::Stratified => {
                for h in &strata {
                    for _ in 0..h.len() {
                        rows.push(sample.rows[h[rng.random_range(0..h.len())]].clone());
                    }
                }
            }
            _ => {
                for _ in 0..sample.n() {
                    rows.push(sample.rows[rng.random_range(0..sample.n())].clone());
                }
            }
        }
        let resampled = SurveySample {
            rows,
            population_size: sample.population_size,
            design: sample.design,
            expected_n: sample.expected_n,
        };
        match crate::estfun::point_estimate(&resampled, spec) {
            Ok(t) => thetas.push(t),
            Err(_) => failed += 1,
        }
    }
    if failed * 20 > b {
        return Err(Error::NonConvergence(format!(
            "bootstrap replicate failure rate {failed}/{b} exceeds 5%"
        )));
    }

    let used = thetas.len();
    let mean = thetas.iter().sum::<f64>() / used as f64;
    let var = thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (used as f64 - 1.0);
    let se = var.sqrt();
    let alpha = 1.0 - level;
    let z = normal_quantile(1.0 - alpha / 2.0);

    thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (used as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        thetas[lo] * (1.0 - frac) + thetas[hi.min(used - 1)] * frac
    };

    Ok(Bootstrap {
        theta_hat,
        se,
        normal: (theta_hat - z * se, theta_hat + z * se),
        percentile: (quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)),
        used,
        failed,
    })
}
