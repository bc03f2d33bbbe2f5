//! Monte Carlo harness: repeated sampling from a fixed finite population,
//! interval construction by several methods, and the coverage/length
//! metrics tables.
//!
//! The population is generated once per scenario seed and held fixed across
//! all replicates; each replicate draws with an independent child stream,
//! so aggregation is order-independent and a rerun with the same scenario
//! is bit-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::design::{self, DesignSpec};
use crate::error::{Error, Result};
use crate::estfun::{census_solve, moment_root, SystemSpec};
use crate::gel::{FitMethod, RhoFamily};
use crate::inference::{ci_invert, CalibrationRule, InferenceOptions};
use crate::population::{generate_population, FinitePopulation, SurveySample};
use crate::rng::child_seed;
use crate::variance::{bootstrap, variance_report, VarianceOptions};

/// Interval methods of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    El,
    Et,
    Cu,
    Gmm,
    /// Normal interval with a bootstrap standard error.
    BcN,
    /// Bootstrap percentile interval.
    BcP,
}

impl CiMethod {
    pub fn label(self) -> &'static str {
        match self {
            CiMethod::El => "EL",
            CiMethod::Et => "ET",
            CiMethod::Cu => "CU",
            CiMethod::Gmm => "GMM",
            CiMethod::BcN => "BCn",
            CiMethod::BcP => "BCp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentedMode {
    Augmented,
    Conventional,
    Both,
}

impl AugmentedMode {
    fn variants(self) -> Vec<bool> {
        match self {
            AugmentedMode::Augmented => vec![true],
            AugmentedMode::Conventional => vec![false],
            AugmentedMode::Both => vec![true, false],
        }
    }
}

/// The four study designs plus a custom escape hatch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ScenarioDesign {
    /// Randomized systematic PPS, N = 20000, n = 300 (1.5% fraction).
    A,
    /// Rao-Sampford PPS, N = 3000, n = 300 (10% fraction).
    B,
    /// Stratified Rao-Sampford PPS, strata (4000, 6000, 10000) with
    /// (50, 100, 150).
    C,
    /// Self-weighting two-stage cluster sampling: 1350 clusters of sizes
    /// 30/20/10 (200/250/900 of each), k = 60, m = 5.
    D,
    Custom { population_size: usize, design: DesignSpec },
}

impl ScenarioDesign {
    pub fn label(&self) -> String {
        match self {
            ScenarioDesign::A => "A".into(),
            ScenarioDesign::B => "B".into(),
            ScenarioDesign::C => "C".into(),
            ScenarioDesign::D => "D".into(),
            ScenarioDesign::Custom { .. } => "custom".into(),
        }
    }

    fn build_population(&self, seed: u64) -> Result<FinitePopulation> {
        match self {
            ScenarioDesign::A => generate_population(20_000, seed),
            ScenarioDesign::B => generate_population(3_000, seed),
            ScenarioDesign::C => {
                generate_population(20_000, seed)?.with_strata(&[4_000, 6_000, 10_000])
            }
            ScenarioDesign::D => {
                let mut sizes = Vec::with_capacity(1350);
                sizes.extend(std::iter::repeat_n(30, 200));
                sizes.extend(std::iter::repeat_n(20, 250));
                sizes.extend(std::iter::repeat_n(10, 900));
                generate_population(20_000, seed)?.with_clusters(&sizes)
            }
            ScenarioDesign::Custom { population_size, .. } => {
                generate_population(*population_size, seed)
            }
        }
    }

    fn draw(&self, pop: &FinitePopulation, seed: u64) -> Result<SurveySample> {
        match self {
            ScenarioDesign::A => design::draw_systematic_pps(pop, 300, seed),
            ScenarioDesign::B => design::draw_rao_sampford_pps(pop, 300, seed),
            ScenarioDesign::C => design::draw_stratified(
                pop,
                &[
                    (1, DesignSpec::RaoSampfordPps { n: 50 }),
                    (2, DesignSpec::RaoSampfordPps { n: 100 }),
                    (3, DesignSpec::RaoSampfordPps { n: 150 }),
                ],
                seed,
            ),
            ScenarioDesign::D => design::draw_two_stage_cluster(pop, 60, 5, seed),
            ScenarioDesign::Custom { design, .. } => design::draw(pop, design, seed),
        }
    }
}

fn default_cells() -> Vec<(f64, f64)> {
    vec![(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]
}

fn default_methods() -> Vec<CiMethod> {
    vec![CiMethod::El, CiMethod::Et, CiMethod::Cu, CiMethod::Gmm, CiMethod::BcN, CiMethod::BcP]
}

fn default_level() -> f64 {
    0.95
}

fn default_boot_b() -> usize {
    500
}

fn default_gamma_b() -> usize {
    200
}

fn default_augmented() -> AugmentedMode {
    AugmentedMode::Both
}

/// One simulation cell of the study grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub design: ScenarioDesign,
    #[serde(default = "default_cells")]
    pub cells: Vec<(f64, f64)>,
    #[serde(default = "default_methods")]
    pub methods: Vec<CiMethod>,
    #[serde(default = "default_augmented")]
    pub augmented: AugmentedMode,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_boot_b")]
    pub boot_b: usize,
    #[serde(default = "default_gamma_b")]
    pub gamma_b: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("scenario needs at least one replicate".into()));
        }
        if !(0.0 < self.level && self.level < 1.0) {
            return Err(Error::Config(format!("level {} outside (0, 1)", self.level)));
        }
        for &(a, b) in &self.cells {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return Err(Error::Config(format!("bad share cell ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Coverage/length metrics for one (method, cell, variant) of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: CiMethod,
    pub cell: (f64, f64),
    pub augmented: bool,
    pub le: f64,
    pub cp: f64,
    pub ue: f64,
    pub al: f64,
    pub failures: usize,
    /// Invalidated when the failure rate exceeds 2%.
    pub valid: bool,
}

/// Point-estimation summary for one (cell, variant).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRow {
    pub cell: (f64, f64),
    pub augmented: bool,
    pub theta_n: f64,
    pub bias: f64,
    pub sd: f64,
    pub se_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub design: String,
    pub theta_n: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub points: Vec<PointRow>,
    pub meta: Meta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub seed: u64,
    pub replicates: usize,
    pub level: f64,
    pub boot_b: usize,
    pub gamma_b: usize,
    pub runtime_seconds: f64,
    pub failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct CellOutcome {
    theta: f64,
    se: f64,
    intervals: Vec<(CiMethod, Option<(f64, f64)>)>,
}

/// Exact displayed formulas: mutually exclusive tail errors with boundary
/// ties counted as errors, so LE + CP + UE = 1.
pub fn metrics(intervals: &[(f64, f64)], theta_n: f64) -> (f64, f64, f64, f64) {
    let m = intervals.len() as f64;
    let mut le = 0.0;
    let mut ue = 0.0;
    let mut cp = 0.0;
    let mut al = 0.0;
    for &(lo, hi) in intervals {
        al += hi - lo;
        if theta_n <= lo {
            le += 1.0;
        } else if theta_n >= hi {
            ue += 1.0;
        } else {
            cp += 1.0;
        }
    }
    (le / m, cp / m, ue / m, al / m)
}

/// Run the scenario grid: one fixed population, `replicates` independent
/// draws, point estimates with sandwich standard errors, and one interval
/// per requested method, cell, and variant.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    scenario.validate()?;
    let start = std::time::Instant::now();
    let pop = scenario.design.build_population(child_seed(scenario.seed, 0))?;

    let variants = scenario.augmented.variants();
    let mut theta_n = Vec::with_capacity(scenario.cells.len());
    for &(a, b) in &scenario.cells {
        let spec = SystemSpec::quantile_share(a, b, true)?;
        theta_n.push(census_solve(&pop, &spec)?[0]);
    }

    let needs_boot = scenario.methods.iter().any(|m| matches!(m, CiMethod::BcN | CiMethod::BcP));
    let gel_methods: Vec<(CiMethod, FitMethod)> = scenario
        .methods
        .iter()
        .filter_map(|&m| match m {
            CiMethod::El => Some((m, FitMethod::Gel(RhoFamily::El))),
            CiMethod::Et => Some((m, FitMethod::Gel(RhoFamily::Et))),
            CiMethod::Cu => Some((m, FitMethod::Gel(RhoFamily::Cu))),
            CiMethod::Gmm => Some((m, FitMethod::Gmm)),
            _ => None,
        })
        .collect();

    // The study protocol calibrates every ratio interval on the standard
    // chi-square limit; variance machinery is still exercised for the
    // standard errors.
    let infer_opts = InferenceOptions {
        calibration: CalibrationRule::ForceChiSquare,
        variance: VarianceOptions::default(),
    };

    let replicate_outcomes: Vec<Result<Vec<Vec<CellOutcome>>>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|m| {
            let draw_seed = child_seed(scenario.seed, 1 + m as u64);
            let sample = scenario.design.draw(&pop, draw_seed)?;
            let mut per_variant = Vec::with_capacity(variants.len());
            for (vi, &augmented) in variants.iter().enumerate() {
                let mut per_cell = Vec::with_capacity(scenario.cells.len());
                for (ci, &(a, b)) in scenario.cells.iter().enumerate() {
                    let spec = SystemSpec::quantile_share(a, b, augmented)?;
                    let system = spec.fit(&sample)?;
                    let theta = moment_root(&sample, &system)?;
                    let var_opts = VarianceOptions {
                        gamma_b: scenario.gamma_b,
                        seed: child_seed(draw_seed, (1000 + vi * 16 + ci) as u64),
                        ..Default::default()
                    };
                    let se = variance_report(&sample, &system, &[theta], &var_opts)
                        .map(|r| r.se[0])
                        .unwrap_or(f64::NAN);

                    let boot = if needs_boot {
                        bootstrap(
                            &sample,
                            &spec,
                            scenario.boot_b,
                            scenario.level,
                            child_seed(draw_seed, (2000 + vi * 16 + ci) as u64),
                        )
                        .ok()
                    } else {
                        None
                    };

                    let mut intervals = Vec::with_capacity(scenario.methods.len());
                    for &m in &scenario.methods {
                        let iv = match m {
                            CiMethod::BcN => boot.as_ref().map(|b| b.normal),
                            CiMethod::BcP => boot.as_ref().map(|b| b.percentile),
                            _ => {
                                let fit_method = gel_methods
                                    .iter()
                                    .find(|(mm, _)| *mm == m)
                                    .map(|(_, f)| *f)
                                    .expect("method listed");
                                ci_invert(&sample, &system, fit_method, scenario.level, &infer_opts)
                                    .ok()
                                    .map(|ci| (ci.lower, ci.upper))
                            }
                        };
                        intervals.push((m, iv));
                    }
                    per_cell.push(CellOutcome { theta, se, intervals });
                }
                per_variant.push(per_cell);
            }
            Ok(per_variant)
        })
        .collect();

    // deterministic sequential reduction
    let mut ok_reps: Vec<Vec<Vec<CellOutcome>>> = Vec::with_capacity(scenario.replicates);
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for rep in replicate_outcomes {
        match rep {
            Ok(r) => ok_reps.push(r),
            Err(e) => {
                *failures.entry(format!("replicate: {e}")).or_insert(0) += 1;
            }
        }
    }
    if ok_reps.is_empty() {
        return Err(Error::NonConvergence("all replicates failed".into()));
    }

    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (vi, &augmented) in variants.iter().enumerate() {
        for (ci, &cell) in scenario.cells.iter().enumerate() {
            let thetas: Vec<f64> = ok_reps.iter().map(|r| r[vi][ci].theta).collect();
            let ses: Vec<f64> =
                ok_reps.iter().map(|r| r[vi][ci].se).filter(|s| s.is_finite()).collect();
            let mean = thetas.iter().sum::<f64>() / thetas.len() as f64;
            let sd = (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>()
                / (thetas.len() as f64 - 1.0))
                .sqrt();
            let se_mean = if ses.is_empty() {
                f64::NAN
            } else {
                ses.iter().sum::<f64>() / ses.len() as f64
            };
            points.push(PointRow {
                cell,
                augmented,
                theta_n: theta_n[ci],
                bias: mean - theta_n[ci],
                sd,
                se_mean,
            });

            for (mi, &method) in scenario.methods.iter().enumerate() {
                let ivs: Vec<(f64, f64)> = ok_reps
                    .iter()
                    .filter_map(|r| r[vi][ci].intervals[mi].1)
                    .collect();
                let failed = ok_reps.len() - ivs.len();
                if failed > 0 {
                    *failures
                        .entry(format!(
                            "{} cell ({:.2},{:.2}) {}",
                            method.label(),
                            cell.0,
                            cell.1,
                            if augmented { "aug" } else { "conv" }
                        ))
                        .or_insert(0) += failed;
                }
                let valid = failed * 50 <= ok_reps.len(); // 2% budget
                let (le, cp, ue, al) = if ivs.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                } else {
                    metrics(&ivs, theta_n[ci])
                };
                rows.push(MetricsRow {
                    method,
                    cell,
                    augmented,
                    le,
                    cp,
                    ue,
                    al,
                    failures: failed,
                    valid,
                });
            }
        }
    }

    Ok(ScenarioResult {
        design: scenario.design.label(),
        theta_n,
        rows,
        points,
        meta: Meta {
            seed: scenario.seed,
            replicates: scenario.replicates,
            level: scenario.level,
            boot_b: scenario.boot_b,
            gamma_b: scenario.gamma_b,
            runtime_seconds: start.elapsed().as_secs_f64(),
            failures,
        },
    })
}

/// Interval-table file name: design A reports in table 2, B in 3, C in 4,
/// D in 5.
fn interval_table_index(design: &str) -> String {
    match design {
        "A" => "table2".into(),
        "B" => "table3".into(),
        "C" => "table4".into(),
        "D" => "table5".into(),
        other => format!("tables_{other}"),
    }
}

/// Write the point table fragment, the interval table, and a meta record.
pub fn write_tables<P: AsRef<Path>>(result: &ScenarioResult, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let point_path = dir.join(format!("table1_{}.csv", result.design));
    let mut f = std::fs::File::create(&point_path)?;
    writeln!(f, "design,tau1,tau2,variant,theta_n,bias,sd,se")?;
    for p in &result.points {
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            result.design,
            p.cell.0,
            p.cell.1,
            if p.augmented { "augmented" } else { "conventional" },
            p.theta_n,
            p.bias,
            p.sd,
            p.se_mean
        )?;
    }

    let iv_path = dir.join(format!("{}.csv", interval_table_index(&result.design)));
    let mut f = std::fs::File::create(&iv_path)?;
    writeln!(f, "design,method,tau1,tau2,variant,le,cp,ue,al,failures,valid")?;
    for r in &result.rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}",
            result.design,
            r.method.label(),
            r.cell.0,
            r.cell.1,
            if r.augmented { "augmented" } else { "conventional" },
            r.le,
            r.cp,
            r.ue,
            r.al,
            r.failures,
            r.valid
        )?;
    }

    let meta_path = dir.join(format!("meta_{}.json", result.design));
    let f = std::fs::File::create(&meta_path)?;
    serde_json::to_writer_pretty(f, &result.meta).map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}
