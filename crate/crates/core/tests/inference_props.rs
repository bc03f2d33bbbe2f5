//! Statistical properties of the tests and intervals: size, power,
//! efficiency gains from side information, profile coverage, and the
//! calibration consistency link.

mod common;

use common::median;
use svygel::design::draw_srswor;
use svygel::estfun::{census_solve, SystemSpec};
use svygel::gel::{FitMethod, RhoFamily};
use svygel::inference::{
    ci_invert, fit_restricted, restricted_ratio, restricted_variance, subvector_ci,
    CalibrationRule, Constraint, InferenceOptions,
};
use svygel::population::generate_population;
use svygel::rng::child_seed;
use svygel::variance::{variance_report, VarianceOptions};

fn chi_opts() -> InferenceOptions {
    InferenceOptions { calibration: CalibrationRule::ForceChiSquare, ..Default::default() }
}

#[test]
fn restricted_ratio_holds_size_under_true_null() {
    let pop = generate_population(100_000, 71).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let theta_n = census_solve(&pop, &spec).unwrap()[0];
    let opts = chi_opts();
    let crit = svygel::prob::chi2_upper_quantile(0.05, 1.0);

    let reps = 1000;
    let mut rejections = 0usize;
    for rep in 0..reps {
        let sample = draw_srswor(&pop, 500, child_seed(72, rep)).unwrap();
        let system = spec.fit(&sample).unwrap();
        let con = Constraint::Pinned(vec![theta_n]);
        let rt = restricted_ratio(&sample, &system, RhoFamily::El, Some(&con), &opts).unwrap();
        if rt.statistic > crit {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!((rate - 0.05).abs() < 0.02, "size {rate} at nominal 0.05");
}

#[test]
fn restricted_ratio_rejects_distant_null() {
    let pop = generate_population(100_000, 73).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let theta_n = census_solve(&pop, &spec).unwrap()[0];
    let opts = chi_opts();
    let crit = svygel::prob::chi2_upper_quantile(0.05, 1.0);

    // pilot dispersion of the point estimator to place the null 5 SDs away
    let mut pilot: Vec<f64> = (0..100)
        .map(|rep| {
            let sample = draw_srswor(&pop, 500, child_seed(74, rep)).unwrap();
            svygel::estfun::point_estimate(&sample, &spec).unwrap()
        })
        .collect();
    let m = pilot.iter().sum::<f64>() / pilot.len() as f64;
    let sd =
        (pilot.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (pilot.len() as f64 - 1.0)).sqrt();
    pilot.clear();
    let shifted = theta_n + 5.0 * sd;

    let reps = 500;
    let mut rejections = 0usize;
    for rep in 0..reps {
        let sample = draw_srswor(&pop, 500, child_seed(75, rep)).unwrap();
        let system = spec.fit(&sample).unwrap();
        let con = Constraint::Pinned(vec![shifted]);
        let rt = restricted_ratio(&sample, &system, RhoFamily::El, Some(&con), &opts).unwrap();
        if rt.statistic > crit {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!(rate >= 0.95, "power {rate} against a 5-SD violation");
}

/// Known population mean as one side moment tightens the share estimator in
/// most replicates.
#[test]
fn side_information_reduces_standard_errors() {
    let pop = generate_population(100_000, 76).unwrap();
    let mu_n = pop.units.iter().map(|u| u.z).sum::<f64>() / pop.size() as f64;
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let opts = chi_opts();

    let reps: usize = 200;
    let mut tighter = 0usize;
    for rep in 0..reps {
        let sample = draw_srswor(&pop, 400, child_seed(77, rep as u64)).unwrap();
        let plain = spec.fit(&sample).unwrap();
        let theta = svygel::estfun::moment_root(&sample, &plain).unwrap();
        let var_opts = VarianceOptions { seed: child_seed(78, rep as u64), ..Default::default() };
        let se_plain = variance_report(&sample, &plain, &[theta], &var_opts).unwrap().se[0];

        let with_side = spec.fit(&sample).unwrap().with_known_mean(mu_n);
        let fit = fit_restricted(&sample, &with_side, RhoFamily::El, None, &opts).unwrap();
        let infer_opts = InferenceOptions {
            calibration: CalibrationRule::ForceChiSquare,
            variance: var_opts,
        };
        let (_, se_side) =
            restricted_variance(&sample, &with_side, &fit.theta, None, &infer_opts).unwrap();
        if se_side[0] <= se_plain {
            tighter += 1;
        }
    }
    assert!(
        tighter * 10 >= reps * 9,
        "side information tightened only {tighter}/{reps} replicates"
    );
}

#[test]
fn profiled_interval_covers_at_nominal_rate() {
    let pop = generate_population(20_000, 79).unwrap();
    let cells = vec![(0.0, 0.25), (0.25, 0.5)];
    let spec = SystemSpec::share_vector(cells, true).unwrap();
    let theta_n = census_solve(&pop, &spec).unwrap();
    let opts = chi_opts();

    let reps = 500;
    let mut covered = 0usize;
    for rep in 0..reps {
        let sample =
            svygel::design::draw_systematic_pps(&pop, 300, child_seed(80, rep)).unwrap();
        let system = spec.fit(&sample).unwrap();
        let ci =
            subvector_ci(&sample, &system, FitMethod::Gel(RhoFamily::Cu), 1, 0.95, &opts)
                .unwrap();
        if ci.lower < theta_n[1] && theta_n[1] < ci.upper {
            covered += 1;
        }
    }
    let cp = covered as f64 / reps as f64;
    assert!((cp - 0.95).abs() < 0.025, "profiled coverage {cp}");
}

/// Consistency link: with negligible fractions the weighted chi-square
/// calibration collapses to the standard chi-square, so forcing either
/// calibration produces the same interval.
#[test]
fn weighted_calibration_collapses_to_chi_square_at_small_fractions() {
    let pop = generate_population(100_000, 81).unwrap();
    let sample = draw_srswor(&pop, 2000, 7).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let system = spec.fit(&sample).unwrap();
    let chi = ci_invert(&sample, &system, FitMethod::Gel(RhoFamily::El), 0.95, &chi_opts())
        .unwrap();
    let weighted_opts = InferenceOptions {
        calibration: CalibrationRule::ForceWeighted,
        ..Default::default()
    };
    let weighted =
        ci_invert(&sample, &system, FitMethod::Gel(RhoFamily::El), 0.95, &weighted_opts)
            .unwrap();
    // the eigen-weight is near one, so thresholds and endpoints almost match
    assert!(
        (weighted.threshold / chi.threshold - 1.0).abs() < 0.05,
        "thresholds {} vs {}",
        weighted.threshold,
        chi.threshold
    );
    let len = chi.upper - chi.lower;
    assert!((weighted.lower - chi.lower).abs() < 0.05 * len);
    assert!((weighted.upper - chi.upper).abs() < 0.05 * len);
}

#[test]
fn interval_medians_are_stable_across_seeds() {
    // light regression guard on the inversion itself
    let pop = generate_population(20_000, 82).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let opts = chi_opts();
    let mut widths: Vec<f64> = (0..40)
        .map(|rep| {
            let sample =
                svygel::design::draw_systematic_pps(&pop, 300, child_seed(83, rep)).unwrap();
            let system = spec.fit(&sample).unwrap();
            let ci = ci_invert(&sample, &system, FitMethod::Gel(RhoFamily::El), 0.95, &opts)
                .unwrap();
            ci.upper - ci.lower
        })
        .collect();
    let med = median(&mut widths);
    assert!(med > 0.01 && med < 0.04, "median EL width {med}");
}
