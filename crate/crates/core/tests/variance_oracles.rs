//! Independent oracles for the variance machinery: exhaustive design
//! enumeration, analytic derivatives, and cross-method consistency.

mod common;

use std::sync::Arc;

use common::{mean, median, sd};
use svygel::design::{draw_poisson, draw_rao_sampford_pps, draw_srswor};
use svygel::estfun::{census_solve, moment_root, FittedSystem, Nuisance, SystemSpec};
use svygel::population::{generate_population, FinitePopulation, SampleRow, SurveySample, UnitRecord};
use svygel::rng::child_seed;
use svygel::simulation::ScenarioDesign;
use svygel::variance::{
    bootstrap, gamma_resample, omega_pps_wr, variance_report, w_hat, PerturbScale,
    VarianceOptions,
};

/// Smooth nonlinear test system: g(z, theta) = exp(theta z / 10) - (1 + z/5).
fn smooth_system() -> FittedSystem {
    let g = Arc::new(|z: f64, th: &[f64], out: &mut [f64]| {
        out[0] = (th[0] * z / 10.0).exp() - (1.0 + z / 5.0);
    });
    FittedSystem::new(1, 1, vec![-2.0], vec![2.0], false, g, None, Nuisance::None)
}

#[test]
fn poisson_enumeration_oracle_for_omega() {
    // N = 6 units, exhaustive enumeration of all 64 samples. The moment
    // variance is carried by the small-pi units, keeping the
    // with-replacement approximation inside its stated accuracy while the
    // large-pi units keep the realized size away from n < 2.
    let z_offsets = [0.1, -0.1, 0.0, 3.0, -3.0, 0.0];
    let pi = [0.9, 0.9, 0.9, 0.1, 0.1, 0.1];
    let pop = FinitePopulation::new(
        z_offsets
            .iter()
            .enumerate()
            .map(|(i, &dz)| UnitRecord {
                id: i as u32 + 1,
                z: 5.0 + dz,
                x: 1.0,
                stratum: None,
                cluster: None,
            })
            .collect(),
    )
    .unwrap();
    let n_b: f64 = pi.iter().sum();
    let mu = pop.units.iter().map(|u| u.z).sum::<f64>() / 6.0;
    let spec = SystemSpec::mean(true);

    // truth: Var(sum pi^-1 psi) = sum (1-pi)/pi psi^2 for independent draws
    let psi: Vec<f64> = pop.units.iter().map(|u| u.z - mu).collect();
    let true_omega = n_b / 36.0
        * psi.iter().zip(&pi).map(|(p, q)| (1.0 - q) / q * p * p).sum::<f64>();

    let mut mean_omega = 0.0;
    let mut prob_covered = 0.0;
    for mask in 0u32..64 {
        let rows: Vec<SampleRow> = (0..6)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| SampleRow {
                unit_id: i as u32 + 1,
                z: pop.units[i].z,
                pi: pi[i],
                stratum: None,
                cluster: None,
            })
            .collect();
        let prob: f64 = (0..6)
            .map(|i| if mask & (1 << i) != 0 { pi[i] } else { 1.0 - pi[i] })
            .product();
        if rows.len() < 2 {
            continue; // negligible mass; the estimator needs n >= 2
        }
        let sample = SurveySample {
            rows,
            population_size: 6.0,
            design: svygel::population::DesignTag::Poisson,
            expected_n: n_b,
        };
        let system = spec.fit(&sample).unwrap();
        let omega = omega_pps_wr(&sample, &system, &[mu], false);
        mean_omega += prob * omega[(0, 0)];
        prob_covered += prob;
    }
    mean_omega /= prob_covered;
    assert!(
        (mean_omega / true_omega - 1.0).abs() < 0.15,
        "mean Omega-hat {mean_omega:.4} vs design variance {true_omega:.4}"
    );
}

#[test]
fn gamma_matches_analytic_derivative_for_smooth_system() {
    let pop = generate_population(20_000, 52).unwrap();
    let sample = draw_srswor(&pop, 2000, 3).unwrap();
    let system = smooth_system();
    let theta = [0.3];
    // analytic weighted derivative: N^-1 sum_S pi^-1 (z/10) exp(theta z/10)
    let analytic: f64 = sample
        .rows
        .iter()
        .map(|r| (r.z / 10.0) * (theta[0] * r.z / 10.0).exp() / r.pi)
        .sum::<f64>()
        / sample.population_size;
    let gamma =
        gamma_resample(&sample, &system, &theta, 200, 77, PerturbScale::PopulationSqrt, false)
            .unwrap();
    let rel = (gamma[(0, 0)] - analytic).abs() / analytic.abs();
    assert!(rel < 1e-2, "Gamma {} vs analytic {analytic} (rel {rel:.2e})", gamma[(0, 0)]);
}

#[test]
fn gamma_for_share_system_matches_census_finite_difference() {
    let pop = generate_population(20_000, 53).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let theta_n = census_solve(&pop, &spec).unwrap();
    // population-limit derivative by central finite differences on the census
    let census = pop.census_sample();
    let census_system = spec.fit(&census).unwrap();
    let h = 1e-3;
    let up = svygel::estfun::weighted_moment_mean(&census, &census_system, &[theta_n[0] + h], false);
    let dn = svygel::estfun::weighted_moment_mean(&census, &census_system, &[theta_n[0] - h], false);
    let fd = (up[0] - dn[0]) / (2.0 * h);

    let sample = draw_srswor(&pop, 300, 8).unwrap();
    let system = spec.fit(&sample).unwrap();
    let theta_hat = moment_root(&sample, &system).unwrap();
    let gamma = gamma_resample(
        &sample,
        &system,
        &[theta_hat],
        200,
        78,
        PerturbScale::PopulationSqrt,
        false,
    )
    .unwrap();
    let rel = (gamma[(0, 0)] - fd).abs() / fd.abs();
    assert!(rel < 0.10, "Gamma {} vs census FD {fd} (rel {rel:.2e})", gamma[(0, 0)]);
}

#[test]
fn doubling_b_moves_gamma_less_than_its_mc_se() {
    let pop = generate_population(20_000, 54).unwrap();
    let sample = draw_srswor(&pop, 1000, 4).unwrap();
    let system = smooth_system();
    let theta = [0.3];
    let g200 =
        gamma_resample(&sample, &system, &theta, 200, 6, PerturbScale::PopulationSqrt, false)
            .unwrap()[(0, 0)];
    let g400 =
        gamma_resample(&sample, &system, &theta, 400, 6, PerturbScale::PopulationSqrt, false)
            .unwrap()[(0, 0)];
    // MC spread of independent B=200 estimates
    let runs: Vec<f64> = (0..8)
        .map(|k| {
            gamma_resample(
                &sample,
                &system,
                &theta,
                200,
                1000 + k,
                PerturbScale::PopulationSqrt,
                false,
            )
            .unwrap()[(0, 0)]
        })
        .collect();
    let spread = sd(&runs);
    assert!(
        (g400 - g200).abs() <= 3.0 * spread.max(1e-12),
        "B doubling moved Gamma by {} vs MC SE {spread}",
        (g400 - g200).abs()
    );
}

#[test]
fn w_hat_tracks_omega_under_small_fraction_pps() {
    // with-replacement regime: Omega ~ W at the truth
    let pop = generate_population(100_000, 55).unwrap();
    let total_x: f64 = pop.units.iter().map(|u| u.x).sum();
    let pi: Vec<f64> = pop.units.iter().map(|u| 2000.0 * u.x / total_x).collect();
    let sample = draw_poisson(&pop, &pi, 9).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let system = spec.fit(&sample).unwrap();
    let theta = moment_root(&sample, &system).unwrap();
    let omega = omega_pps_wr(&sample, &system, &[theta], false);
    let w = w_hat(&sample, &system, &[theta], false);
    let ratio = omega[(0, 0)] / w[(0, 0)];
    assert!((ratio - 1.0).abs() < 0.2, "Omega/W = {ratio}");
}

#[test]
fn bootstrap_and_sandwich_standard_errors_agree() {
    let pop = generate_population(100_000, 56).unwrap();
    let sample = draw_srswor(&pop, 2000, 5).unwrap();
    let spec = SystemSpec::quantile_share(0.25, 0.5, true).unwrap();
    let system = spec.fit(&sample).unwrap();
    let theta = moment_root(&sample, &system).unwrap();
    let report = variance_report(&sample, &system, &[theta], &VarianceOptions::default()).unwrap();
    let boot = bootstrap(&sample, &spec, 500, 0.95, 31).unwrap();
    let rel = (boot.se / report.se[0] - 1.0).abs();
    assert!(rel < 0.25, "bootstrap se {} vs sandwich se {} (rel {rel:.2})", boot.se, report.se[0]);
}

/// Sandwich standard errors track the Monte Carlo dispersion of the
/// estimator for the non-negligible-fraction, stratified, and cluster
/// designs (Hajek, per-stratum, and rescaled between-PSU Omega forms).
#[test]
fn sandwich_se_tracks_sd_for_designs_b_c_d() {
    for (design, seed) in [
        (ScenarioDesign::B, 61u64),
        (ScenarioDesign::C, 62),
        (ScenarioDesign::D, 63),
    ] {
        let scenario = svygel::simulation::Scenario {
            design,
            cells: vec![(0.0, 0.25)],
            methods: vec![],
            augmented: svygel::simulation::AugmentedMode::Augmented,
            replicates: 300,
            seed,
            level: 0.95,
            boot_b: 50,
            gamma_b: 200,
        };
        let out = svygel::simulation::run_scenario(&scenario).unwrap();
        let p = &out.points[0];
        let ratio = p.se_mean / p.sd;
        assert!(
            (ratio - 1.0).abs() < 0.25,
            "{}: se {:.5} vs sd {:.5}",
            out.design,
            p.se_mean,
            p.sd
        );
        assert!(
            p.sd > 0.003 && p.sd < 0.013,
            "{}: sd {:.5} outside the study band",
            out.design,
            p.sd
        );
    }
}

#[test]
fn hajek_se_requires_genuine_probabilities() {
    let pop = common::toy_population(40, 57);
    let mut sample = draw_rao_sampford_pps(&pop, 8, 2).unwrap();
    // corrupt one pi beyond 1 as a rescaled pseudo-weight would
    sample.rows[0].pi = 1.2;
    let spec = SystemSpec::mean(true);
    let system = spec.fit(&sample).unwrap();
    assert!(svygel::variance::omega_hajek(&sample, &system, &[5.0], false).is_err());
}

// keep the helpers exercised even when the heavy suites shrink
#[test]
fn helper_sanity() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(mean(&[1.0, 3.0]), 2.0);
    let _ = FinitePopulation::new(vec![
        UnitRecord { id: 1, z: 1.0, x: 1.0, stratum: None, cluster: None },
        UnitRecord { id: 2, z: 2.0, x: 1.0, stratum: None, cluster: None },
    ])
    .unwrap();
}
