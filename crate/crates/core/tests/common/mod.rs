//! Shared helpers for the integration suites.
#![allow(dead_code)]

use svygel::population::{FinitePopulation, UnitRecord};

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}

/// Median over replicates of sqrt(n) * |U-hat_psi(theta_N, phi-hat) -
/// U-hat_psi(theta_N, phi_N)| for SRS samples of each size, returned for the
/// augmented psi and for the raw g.
///
/// The augmented gap must shrink as n grows (first-step insensitivity); the
/// raw gap must not.
pub fn orthogonality_gap_medians(
    pop: &FinitePopulation,
    spec: &svygel::estfun::SystemSpec,
    sizes: &[usize],
    reps: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    use svygel::design::draw_srswor;
    use svygel::estfun::{census_solve, weighted_moment_mean, weighted_raw_mean};
    use svygel::rng::child_seed;

    let theta_n = census_solve(pop, spec).unwrap();
    let census_nuisance = spec.fit_nuisance(&pop.census_sample()).unwrap();
    let census_system = spec.system_with(census_nuisance).unwrap();

    let mut aug_medians = Vec::new();
    let mut raw_medians = Vec::new();
    for (si, &n) in sizes.iter().enumerate() {
        let mut aug_gaps = Vec::with_capacity(reps);
        let mut raw_gaps = Vec::with_capacity(reps);
        for rep in 0..reps {
            let sample =
                draw_srswor(pop, n, child_seed(seed, (si * reps + rep) as u64)).unwrap();
            let sample_system = spec.fit(&sample).unwrap();
            let root_n = (n as f64).sqrt();

            let u_hat = weighted_moment_mean(&sample, &sample_system, &theta_n, false);
            let u_true = weighted_moment_mean(&sample, &census_system, &theta_n, false);
            let gap: f64 =
                u_hat.iter().zip(&u_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            aug_gaps.push(root_n * gap);

            let g_hat = weighted_raw_mean(&sample, &sample_system, &theta_n);
            let g_true = weighted_raw_mean(&sample, &census_system, &theta_n);
            let gap: f64 =
                g_hat.iter().zip(&g_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            raw_gaps.push(root_n * gap);
        }
        aug_medians.push(median(&mut aug_gaps));
        raw_medians.push(median(&mut raw_gaps));
    }
    (aug_medians, raw_medians)
}

/// Small population with heterogeneous study values and size measures.
pub fn toy_population(n: usize, seed: u64) -> FinitePopulation {
    use rand::Rng;
    let mut rng = svygel::rng::rng_from(seed);
    FinitePopulation::new(
        (0..n)
            .map(|i| UnitRecord {
                id: i as u32 + 1,
                z: 1.0 + 9.0 * rng.random::<f64>(),
                x: 0.5 + rng.random::<f64>(),
                stratum: None,
                cluster: None,
            })
            .collect(),
    )
    .unwrap()
}
