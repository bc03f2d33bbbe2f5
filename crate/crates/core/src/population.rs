//! Finite populations and survey samples.
//!
//! A [`FinitePopulation`] holds the labelled unit records: the study value
//! `z`, the positive size measure `x` used by unequal-probability designs,
//! and optional stratum/cluster labels. A [`SurveySample`] holds the sampled
//! rows together with their exact first-order inclusion probabilities and is
//! the sole input to every estimator in the crate. The internal canonical
//! representation is the inclusion probability; survey weights are the view
//! `1/pi`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    /// Label 1..=N.
    pub id: u32,
    /// Study value (income-like; nonnegative for the inequality measures).
    pub z: f64,
    /// Design size measure, strictly positive.
    pub x: f64,
    pub stratum: Option<u32>,
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub units: Vec<UnitRecord>,
}

impl FinitePopulation {
    pub fn new(units: Vec<UnitRecord>) -> Result<Self> {
        if units.len() < 2 {
            return Err(Error::InvalidPopulation(format!(
                "population needs at least 2 units, got {}",
                units.len()
            )));
        }
        if let Some(u) = units.iter().find(|u| !(u.x > 0.0)) {
            return Err(Error::InvalidPopulation(format!(
                "unit {} has nonpositive size measure x = {}",
                u.id, u.x
            )));
        }
        let with_stratum = units.iter().filter(|u| u.stratum.is_some()).count();
        if with_stratum != 0 && with_stratum != units.len() {
            return Err(Error::InvalidPopulation(
                "stratum labels must cover all units or none".into(),
            ));
        }
        let with_cluster = units.iter().filter(|u| u.cluster.is_some()).count();
        if with_cluster != 0 && with_cluster != units.len() {
            return Err(Error::InvalidPopulation(
                "cluster labels must cover all units or none".into(),
            ));
        }
        Ok(Self { units })
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    /// Relabel consecutive blocks of units as strata with the given sizes.
    pub fn with_strata(mut self, sizes: &[usize]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != self.units.len() {
            return Err(Error::InvalidPopulation(format!(
                "stratum sizes sum to {}, population has {}",
                sizes.iter().sum::<usize>(),
                self.units.len()
            )));
        }
        let mut at = 0;
        for (h, &sz) in sizes.iter().enumerate() {
            for u in &mut self.units[at..at + sz] {
                u.stratum = Some(h as u32 + 1);
            }
            at += sz;
        }
        Ok(self)
    }

    /// Relabel consecutive blocks of units as clusters with the given sizes.
    pub fn with_clusters(mut self, sizes: &[usize]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != self.units.len() {
            return Err(Error::InvalidPopulation(format!(
                "cluster sizes sum to {}, population has {}",
                sizes.iter().sum::<usize>(),
                self.units.len()
            )));
        }
        let mut at = 0;
        for (c, &sz) in sizes.iter().enumerate() {
            for u in &mut self.units[at..at + sz] {
                u.cluster = Some(c as u32 + 1);
            }
            at += sz;
        }
        Ok(self)
    }

    /// The census sample: every unit observed with inclusion probability 1.
    ///
    /// Population-level ("census") quantities are computed by running the
    /// estimators on this sample.
    pub fn census_sample(&self) -> SurveySample {
        let rows = self
            .units
            .iter()
            .map(|u| SampleRow {
                unit_id: u.id,
                z: u.z,
                pi: 1.0,
                stratum: u.stratum,
                cluster: u.cluster,
            })
            .collect::<Vec<_>>();
        let n = rows.len();
        SurveySample {
            rows,
            population_size: n as f64,
            design: DesignTag::Srswor,
            expected_n: n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignTag {
    Srswor,
    Poisson,
    SystematicPps,
    RaoSampfordPps,
    Stratified,
    TwoStageCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub unit_id: u32,
    pub z: f64,
    /// First-order inclusion probability, in (0, 1].
    pub pi: f64,
    pub stratum: Option<u32>,
    pub cluster: Option<u32>,
}

/// A drawn (or imported) probability sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveySample {
    pub rows: Vec<SampleRow>,
    /// Population size N. For imported data without a known N this is the
    /// Horvitz-Thompson estimate (the sum of weights).
    pub population_size: f64,
    pub design: DesignTag,
    /// Expected sample size n_B: the realized n for fixed-size designs, the
    /// sum of inclusion probabilities for Poisson sampling.
    pub expected_n: f64,
}

impl SurveySample {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Sampling-fraction scale f_N = n_B / N used by the dual criterion.
    pub fn f_n(&self) -> f64 {
        self.expected_n / self.population_size
    }

    pub fn sampling_fraction(&self) -> f64 {
        self.expected_n / self.population_size
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| 1.0 / r.pi).collect()
    }

    /// Drawn samples carry analytic pi in (0, 1]; rescaled imports carry
    /// pseudo-probabilities (reciprocal normalized weights) that may exceed
    /// one, so validation only demands positive finite values.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidDesign("empty sample".into()));
        }
        for r in &self.rows {
            if !(r.pi > 0.0 && r.pi.is_finite()) {
                return Err(Error::InvalidDesign(format!(
                    "unit {} has nonpositive inclusion probability {}",
                    r.unit_id, r.pi
                )));
            }
        }
        Ok(())
    }
}

/// Generate the synthetic study population: z = x + e with
/// x ~ 0.25 + Weibull(shape 2, scale 2) stored as the size measure and
/// e ~ chi-squared(3). Deterministic for a fixed seed.
pub fn generate_population(n: usize, seed: u64) -> Result<FinitePopulation> {
    if n < 2 {
        return Err(Error::InvalidPopulation(format!(
            "population needs at least 2 units, got {n}"
        )));
    }
    let mut r = rng::rng_from(seed);
    let units = (0..n)
        .map(|i| {
            let x = 0.25 + rng::weibull(&mut r, 2.0, 2.0);
            let e = rng::chi_squared_3(&mut r);
            UnitRecord { id: i as u32 + 1, z: x + e, x, stratum: None, cluster: None }
        })
        .collect();
    FinitePopulation::new(units)
}

/// Rescale the survey weights so they sum to the sample size:
/// w_i = n * w~_i / sum_j w~_j. Relative weight ratios are preserved and the
/// operation is idempotent. The implied population size becomes n, so the
/// rescaled sample has f_N = 1.
pub fn rescale_weights(sample: &SurveySample) -> SurveySample {
    let n = sample.n() as f64;
    let total: f64 = sample.rows.iter().map(|r| 1.0 / r.pi).sum();
    let rows = sample
        .rows
        .iter()
        .map(|r| {
            let w = n * (1.0 / r.pi) / total;
            SampleRow { pi: 1.0 / w, ..r.clone() }
        })
        .collect();
    SurveySample {
        rows,
        population_size: n,
        design: sample.design,
        expected_n: n,
    }
}
