//! Distribution functions used for calibration: chi-square tail and
//! quantile through the regularized incomplete gamma function, the standard
//! normal, the Kolmogorov distribution, and Imhof's method for tails of
//! weighted chi-square variables.

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..600 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (a * x.ln() - x - libm::lgamma(a)).exp()
}

// Continued fraction for Q(a, x), modified Lentz.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..600 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (a * x.ln() - x - libm::lgamma(a)).exp() * h
}

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    gamma_p(df / 2.0, x / 2.0)
}

pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

fn chi2_pdf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = df / 2.0;
    ((a - 1.0) * x.ln() - x / 2.0 - a * std::f64::consts::LN_2 - libm::lgamma(a)).exp()
}

/// Upper-alpha quantile: the x with Pr(chi2_df >= x) = alpha.
///
/// Inverts the regularized incomplete gamma by bisection with a Newton
/// polish.
pub fn chi2_upper_quantile(alpha: f64, df: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha in (0,1)");
    let mut lo = 0.0;
    let mut hi = df + 10.0 * (2.0 * df).sqrt() + 10.0;
    while chi2_sf(hi, df) > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_sf(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let f = chi2_sf(x, df) - alpha;
        let d = -chi2_pdf(x, df);
        if d.abs() > 0.0 {
            let step = f / d;
            if step.is_finite() && (x - step) > 0.0 {
                x -= step;
            }
        }
    }
    x
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile (Acklam's rational approximation plus one
/// Newton step).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    let mut x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if pdf > 0.0 {
        x -= (normal_cdf(x) - p) / pdf;
    }
    x
}

/// Survival function of the Kolmogorov distribution,
/// Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test p-value for `data` against the CDF
/// `f0`, using the asymptotic distribution with the Stephens small-sample
/// correction.
pub fn ks_test<F: Fn(f64) -> f64>(data: &[f64], f0: F) -> (f64, f64) {
    let mut xs: Vec<f64> = data.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = f0(x);
        let lo = i as f64 / n;
        let hi = (i as f64 + 1.0) / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let lambda = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    (d, kolmogorov_sf(lambda))
}

/// Tail probability Pr(sum_j w_j X_j > t) for independent chi-square(1)
/// variables X_j, by Imhof's integral (a single positive weight reduces to
/// the exact scaled chi-square tail).
pub fn imhof_sf(t: f64, weights: &[f64]) -> f64 {
    let w: Vec<f64> = weights.iter().copied().filter(|v| v.abs() > 1e-14).collect();
    if w.is_empty() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    if w.len() == 1 && w[0] > 0.0 {
        return chi2_sf(t / w[0], 1.0);
    }
    let theta = |u: f64| -> f64 {
        0.5 * w.iter().map(|&wj| (wj * u).atan()).sum::<f64>() - 0.5 * t * u
    };
    let rho = |u: f64| -> f64 {
        w.iter().map(|&wj| (1.0 + wj * wj * u * u).ln()).sum::<f64>().mul_add(0.25, 0.0).exp()
    };
    let integrand = |u: f64| -> f64 {
        if u <= 0.0 {
            // limit at zero
            0.5 * (w.iter().sum::<f64>() - t)
        } else {
            theta(u).sin() / (u * rho(u))
        }
    };
    // Composite Simpson with a step tied to the oscillation period. The
    // integrand alternates with envelope 1/(u rho(u)), so truncation error
    // is bounded by one half-period of the envelope; stopping once the
    // envelope drops below 1e-7 max(t, 1/2) keeps the tail under the 1e-6
    // target without chasing the slow u^(-1-r/2) decay to zero.
    let freq = 0.5 * t.abs() + 0.5 * w.iter().map(|v| v.abs()).sum::<f64>();
    let period = 2.0 * std::f64::consts::PI / freq.max(1e-3);
    let h = period / 10.0;
    let env_stop = 1e-7 * t.abs().max(0.5);
    let mut integral = 0.0;
    let mut u = 0.0;
    let mut quiet = 0;
    for _ in 0..2_000_000 {
        let f0 = integrand(u);
        let f1 = integrand(u + 0.5 * h);
        let f2 = integrand(u + h);
        integral += h / 6.0 * (f0 + 4.0 * f1 + f2);
        u += h;
        let env = 1.0 / (u * rho(u));
        if env.abs() < env_stop {
            quiet += 1;
            if quiet > 8 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    (0.5 + integral / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// Upper-alpha quantile of sum_j w_j chi-square(1): Illinois regula falsi
/// on [`imhof_sf`] (exact scaled chi-square for a single weight).
pub fn imhof_upper_quantile(alpha: f64, weights: &[f64]) -> f64 {
    let w: Vec<f64> = weights.iter().copied().filter(|v| v.abs() > 1e-14).collect();
    if w.len() == 1 && w[0] > 0.0 {
        return w[0] * chi2_upper_quantile(alpha, 1.0);
    }
    let total: f64 = weights.iter().sum();
    let mut lo = 0.0;
    let mut f_lo = 1.0 - alpha; // sf(0) = 1
    let mut hi = (total.abs() + 1.0) * 20.0;
    let mut f_hi = imhof_sf(hi, weights) - alpha;
    while f_hi > 0.0 {
        hi *= 2.0;
        f_hi = imhof_sf(hi, weights) - alpha;
    }
    let mut side = 0i8;
    for _ in 0..64 {
        if hi - lo < 1e-8 * hi.max(1.0) {
            break;
        }
        let mid = if (f_hi - f_lo).abs() > 0.0 {
            let m = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            if m > lo && m < hi {
                m
            } else {
                0.5 * (lo + hi)
            }
        } else {
            0.5 * (lo + hi)
        };
        let fm = imhof_sf(mid, weights) - alpha;
        if fm > 0.0 {
            lo = mid;
            f_lo = fm;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = mid;
            f_hi = fm;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_quantiles_match_tables() {
        // Published table values to four decimals.
        assert!((chi2_upper_quantile(0.05, 1.0) - 3.8415).abs() < 5e-4);
        assert!((chi2_upper_quantile(0.05, 2.0) - 5.9915).abs() < 5e-4);
        assert!((chi2_upper_quantile(0.05, 3.0) - 7.8147).abs() < 5e-4);
        assert!((chi2_upper_quantile(0.01, 1.0) - 6.6349).abs() < 5e-4);
        assert!((chi2_upper_quantile(0.01, 5.0) - 15.0863).abs() < 5e-4);
        assert!((chi2_upper_quantile(0.95, 1.0) - 0.0039).abs() < 5e-4);
    }

    #[test]
    fn chi2_cdf_roundtrip() {
        for &df in &[1.0, 2.0, 3.0, 7.0] {
            for &alpha in &[0.9, 0.5, 0.1, 0.05, 0.01] {
                let q = chi2_upper_quantile(alpha, df);
                assert!((chi2_sf(q, df) - alpha).abs() < 1e-9, "df {df} alpha {alpha}");
            }
        }
    }

    #[test]
    fn normal_quantile_matches_tables() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.995) - 2.575829).abs() < 1e-6);
        assert!((normal_quantile(0.5)).abs() < 1e-9);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-7);
    }

    #[test]
    fn imhof_reduces_to_chi2_for_unit_weight() {
        // single weight short-circuits to the exact scaled chi-square
        for &t in &[0.5, 1.0, 3.84, 6.63] {
            let p = imhof_sf(t, &[1.0]);
            assert!((p - chi2_sf(t, 1.0)).abs() < 1e-9, "t {t}: {p}");
        }
        // the integral itself: two unit weights give chi-square(2)
        for &t in &[1.0, 5.99] {
            let p = imhof_sf(t, &[1.0, 1.0]);
            assert!((p - chi2_sf(t, 2.0)).abs() < 1e-5, "t {t}: {p}");
        }
        // equal half weights scale chi-square(2): P(0.5 X > t) = sf(2t)
        for &t in &[0.8, 2.996] {
            let p = imhof_sf(t, &[0.5, 0.5]);
            assert!((p - chi2_sf(2.0 * t, 2.0)).abs() < 1e-5, "t {t}: {p}");
        }
    }

    #[test]
    fn imhof_quantile_consistency() {
        let w = [0.7, 0.3];
        let q = imhof_upper_quantile(0.05, &w);
        assert!((imhof_sf(q, &w) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn kolmogorov_known_value() {
        // Q(1.36) is about 0.049 (the classic 5% critical value).
        let q = kolmogorov_sf(1.36);
        assert!((q - 0.049).abs() < 2e-3, "{q}");
    }
}
