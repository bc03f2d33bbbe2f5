//! Generic augmentation builder for nuisance parameters defined by census
//! estimating equations.
//!
//! When the nuisance phi is the root of a census system
//! T_N(phi) = N^-1 sum_i T(z_i, phi) = 0 and the system is just-identified
//! (dim T = dim phi), the orthogonalizing augmentation is
//!
//! ```text
//! Xi(z, theta, phi) = -D(theta, phi) H(phi)^-1 T(z, phi),
//! ```
//!
//! where D is the pathwise-derivative evaluator of the limiting moment in
//! the phi direction and H(phi) is the Jacobian of the survey-weighted mean
//! of T, estimated here by central finite differences.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estfun::MomentFn;
use crate::population::SurveySample;

/// Evaluator for T(z, phi): fills `out` with the dim(phi) components.
pub type NuisanceEe = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Evaluator for D(theta, phi): returns the r x dim(phi) pathwise
/// derivative, row-major.
pub type PathDerivative = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Build the augmentation evaluator for a just-identified census-equation
/// nuisance.
///
/// `fd_step` overrides the finite-difference step; the default
/// 0.9 sd(z) n^(-1/5) is sized for indicator-type T (where the derivative
/// of the weighted mean is a density).
pub fn census_ee_augmentation(
    sample: &SurveySample,
    phi_hat: &[f64],
    t_fun: NuisanceEe,
    d_fun: PathDerivative,
    r: usize,
    fd_step: Option<f64>,
) -> Result<MomentFn> {
    sample.validate()?;
    let dim = phi_hat.len();
    if dim == 0 {
        return Err(Error::Config("empty nuisance vector".into()));
    }

    let weighted_t_mean = |phi: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for row in &sample.rows {
            t_fun(row.z, phi, &mut buf);
            let w = 1.0 / row.pi;
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        for a in &mut acc {
            *a /= sample.population_size;
        }
        acc
    };

    let h = fd_step.unwrap_or_else(|| {
        let wt: f64 = sample.rows.iter().map(|r| 1.0 / r.pi).sum();
        let mean = sample.rows.iter().map(|r| r.z / r.pi).sum::<f64>() / wt;
        let var = sample.rows.iter().map(|r| (r.z - mean).powi(2) / r.pi).sum::<f64>() / wt;
        (0.9 * var.sqrt() * (sample.n() as f64).powf(-0.2)).max(1e-8)
    });

    // H-hat by central differences, column per phi coordinate
    let mut h_mat = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let mut hi = phi_hat.to_vec();
        let mut lo = phi_hat.to_vec();
        hi[j] += h;
        lo[j] -= h;
        let up = weighted_t_mean(&hi);
        let dn = weighted_t_mean(&lo);
        for i in 0..dim {
            h_mat[(i, j)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }

    let h_inv = h_mat.clone().try_inverse().ok_or_else(|| {
        Error::Singular(format!(
            "H-hat is singular (condition unbounded): {:?}",
            h_mat.as_slice()
        ))
    })?;
    let cond = h_mat.norm() * h_inv.norm();
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::Singular(format!(
            "H-hat is numerically singular: condition estimate {cond:.3e}"
        )));
    }

    let phi = phi_hat.to_vec();
    let h_inv_rows: Vec<f64> = {
        let mut v = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                v[i * dim + j] = h_inv[(i, j)];
            }
        }
        v
    };

    Ok(Arc::new(move |z, theta, out| {
        let mut t = vec![0.0; dim];
        t_fun(z, &phi, &mut t);
        // s = H^-1 T(z, phi)
        let mut s = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                s[i] += h_inv_rows[i * dim + j] * t[j];
            }
        }
        let d = d_fun(theta, &phi); // r x dim
        for (k, o) in out.iter_mut().enumerate().take(r) {
            let mut v = 0.0;
            for j in 0..dim {
                v += d[k * dim + j] * s[j];
            }
            *o = -v;
        }
    }))
}
