//! Design-based inference for finite-population parameters defined through
//! estimating equations with nuisance functionals, under complex survey
//! designs.
//!
//! The crate covers the full pipeline: synthetic population generation and
//! CSV ingestion ([`population`], [`io`]), probability sampling designs with
//! exact first-order inclusion probabilities ([`design`]), estimating systems
//! for the Gini coefficient, Lorenz ordinates and quantile shares with
//! orthogonalizing augmentation terms ([`estfun`]), saddle-point solvers for
//! the EL/ET/CU generalized-empirical-likelihood families and two-step GMM
//! ([`gel`]), ratio-statistic confidence intervals and restricted tests
//! ([`inference`]), design-based variance estimation ([`variance`]), and a
//! Monte Carlo harness producing coverage tables ([`simulation`]).

pub mod augment;
pub mod cdf;
pub mod design;
pub mod error;
pub mod estfun;
pub mod gel;
pub mod inference;
pub mod io;
pub mod population;
pub mod prob;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use error::{Error, Result};
pub use population::{
    generate_population, rescale_weights, DesignTag, FinitePopulation, SampleRow, SurveySample,
    UnitRecord,
};

/// Bound the global thread pool used for replicate-level parallelism.
///
/// Must be called before the first parallel computation; later calls are
/// ignored by rayon.
pub fn set_parallelism(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}
