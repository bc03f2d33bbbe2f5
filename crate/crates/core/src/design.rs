//! Probability sampling designs with exact first-order inclusion
//! probabilities.
//!
//! Every draw is a pure function of (population, design, seed). The
//! inclusion probabilities attached to the sample rows are the analytic
//! formulas for the design, not estimates. Certainty units (n x_i / sum x
//! >= 1) are rejected with an error rather than auto-included, which keeps
//! > the first-order formulas exact.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{DesignTag, FinitePopulation, SampleRow, SurveySample};
use crate::rng::{child_seed, rng_from};

/// Serializable description of a sampling design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    Srswor { n: usize },
    /// Poisson sampling with pi_i proportional to the size measure, scaled
    /// so the inclusion probabilities sum to `expected_n`.
    Poisson { expected_n: f64 },
    SystematicPps { n: usize },
    RaoSampfordPps { n: usize },
    Stratified { strata: Vec<StratumDesign> },
    TwoStageCluster { k: usize, m: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumDesign {
    pub stratum: u32,
    pub design: Box<DesignSpec>,
}

/// Draw a sample according to `spec`.
pub fn draw(pop: &FinitePopulation, spec: &DesignSpec, seed: u64) -> Result<SurveySample> {
    match spec {
        DesignSpec::Srswor { n } => draw_srswor(pop, *n, seed),
        DesignSpec::Poisson { expected_n } => {
            let total_x: f64 = pop.units.iter().map(|u| u.x).sum();
            let pi: Vec<f64> =
                pop.units.iter().map(|u| expected_n * u.x / total_x).collect();
            draw_poisson(pop, &pi, seed)
        }
        DesignSpec::SystematicPps { n } => draw_systematic_pps(pop, *n, seed),
        DesignSpec::RaoSampfordPps { n } => draw_rao_sampford_pps(pop, *n, seed),
        DesignSpec::Stratified { strata } => {
            let specs: Vec<(u32, DesignSpec)> =
                strata.iter().map(|s| (s.stratum, (*s.design).clone())).collect();
            draw_stratified(pop, &specs, seed)
        }
        DesignSpec::TwoStageCluster { k, m } => draw_two_stage_cluster(pop, *k, *m, seed),
    }
}

fn check_sample_size(n: usize, pop_n: usize) -> Result<()> {
    if n == 0 || n > pop_n {
        return Err(Error::InvalidDesign(format!(
            "sample size {n} must be in 1..={pop_n}"
        )));
    }
    Ok(())
}

/// Simple random sampling without replacement; pi_i = n/N.
pub fn draw_srswor(pop: &FinitePopulation, n: usize, seed: u64) -> Result<SurveySample> {
    check_sample_size(n, pop.size())?;
    let mut rng = rng_from(seed);
    let mut idx: Vec<usize> = (0..pop.size()).collect();
    // partial Fisher-Yates: the first n entries are the sample
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let pi = n as f64 / pop.size() as f64;
    let rows = idx[..n]
        .iter()
        .map(|&i| {
            let u = &pop.units[i];
            SampleRow { unit_id: u.id, z: u.z, pi, stratum: u.stratum, cluster: u.cluster }
        })
        .collect();
    Ok(SurveySample {
        rows,
        population_size: pop.size() as f64,
        design: DesignTag::Srswor,
        expected_n: n as f64,
    })
}

/// Poisson sampling: independent Bernoulli(pi_i) inclusion. The realized
/// sample size is random; `expected_n` records the sum of the pi.
pub fn draw_poisson(pop: &FinitePopulation, pi: &[f64], seed: u64) -> Result<SurveySample> {
    if pi.len() != pop.size() {
        return Err(Error::InvalidDesign(format!(
            "pi vector length {} != population size {}",
            pi.len(),
            pop.size()
        )));
    }
    if let Some((i, &p)) = pi.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidDesign(format!(
            "unit {} has pi = {p} outside (0, 1]",
            i + 1
        )));
    }
    let mut rng = rng_from(seed);
    let rows: Vec<SampleRow> = pop
        .units
        .iter()
        .zip(pi)
        .filter_map(|(u, &p)| {
            (rng.random::<f64>() < p).then_some(SampleRow {
                unit_id: u.id,
                z: u.z,
                pi: p,
                stratum: u.stratum,
                cluster: u.cluster,
            })
        })
        .collect();
    Ok(SurveySample {
        rows,
        population_size: pop.size() as f64,
        design: DesignTag::Poisson,
        expected_n: pi.iter().sum(),
    })
}

fn pps_probabilities(pop: &FinitePopulation, n: usize, strict: bool) -> Result<Vec<f64>> {
    let total_x: f64 = pop.units.iter().map(|u| u.x).sum();
    let pi: Vec<f64> = pop.units.iter().map(|u| n as f64 * u.x / total_x).collect();
    let bad: Vec<u32> = pop
        .units
        .iter()
        .zip(&pi)
        .filter(|(_, &p)| if strict { p >= 1.0 } else { p > 1.0 })
        .map(|(u, _)| u.id)
        .collect();
    if !bad.is_empty() {
        return Err(Error::InvalidDesign(format!(
            "certainty units (n x_i / sum x {} 1): {:?}",
            if strict { ">=" } else { ">" },
            bad
        )));
    }
    Ok(pi)
}

/// Randomized systematic PPS sampling without replacement: a fresh random
/// permutation of the units, then a linear systematic pass with a single
/// uniform start on the cumulated-size scale. Exactly n distinct units;
/// pi_i = n x_i / sum x.
pub fn draw_systematic_pps(pop: &FinitePopulation, n: usize, seed: u64) -> Result<SurveySample> {
    check_sample_size(n, pop.size())?;
    let pi = pps_probabilities(pop, n, false)?;
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..pop.size()).collect();
    order.shuffle(&mut rng);
    let start: f64 = rng.random();

    let mut rows = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut next = start; // selection points start, start+1, ...
    for &i in &order {
        let hi = cum + pi[i];
        if next < hi && rows.len() < n {
            let u = &pop.units[i];
            rows.push(SampleRow {
                unit_id: u.id,
                z: u.z,
                pi: pi[i],
                stratum: u.stratum,
                cluster: u.cluster,
            });
            next += 1.0;
        }
        cum = hi;
    }
    // cumulative roundoff can starve the final crossing; complete from the
    // tail of the permutation
    if rows.len() < n {
        for &i in order.iter().rev() {
            if rows.iter().all(|r| r.unit_id != pop.units[i].id) {
                let u = &pop.units[i];
                rows.push(SampleRow {
                    unit_id: u.id,
                    z: u.z,
                    pi: pi[i],
                    stratum: u.stratum,
                    cluster: u.cluster,
                });
                if rows.len() == n {
                    break;
                }
            }
        }
    }
    Ok(SurveySample {
        rows,
        population_size: pop.size() as f64,
        design: DesignTag::SystematicPps,
        expected_n: n as f64,
    })
}

/// Total Bernoulli sweeps allowed in the conditional-Poisson sampler and
/// full-sample rejections allowed in the rejective sampler.
pub const SAMPFORD_RETRY_BUDGET: u64 = 1_000_000;

/// Rao-Sampford PPS sampling without replacement; pi_i = n x_i / sum x with
/// n x_i / sum x < 1 strictly for all units.
///
/// Samples the Sampford design exactly through its conditional-Poisson
/// representation: the design law is proportional to
/// (sum_{i in s} (1 - n p_i)) prod_{i in s} p_i/(1 - n p_i), so a
/// conditional-Poisson draw with odds proportional to p_i/(1 - n p_i),
/// accepted with probability 1 - sum_{i in s} p_i, has exactly the Sampford
/// law. This stays fast at large sampling fractions where the classical
/// rejective scheme (see [`draw_rao_sampford_rejective`]) stalls on
/// duplicate collisions.
pub fn draw_rao_sampford_pps(pop: &FinitePopulation, n: usize, seed: u64) -> Result<SurveySample> {
    check_sample_size(n, pop.size())?;
    let pi = pps_probabilities(pop, n, true)?;
    if n == pop.size() {
        return Err(Error::InvalidDesign("Rao-Sampford requires n < N".into()));
    }
    let total_x: f64 = pop.units.iter().map(|u| u.x).sum();
    let p: Vec<f64> = pop.units.iter().map(|u| u.x / total_x).collect();
    let lambda: Vec<f64> = p.iter().map(|&pi| pi / (1.0 - n as f64 * pi)).collect();

    // scale t so the Bernoulli means mu_i = t lambda_i / (1 + t lambda_i)
    // sum to n, putting the conditional-Poisson size mode at n
    let mean_at = |t: f64| -> f64 { lambda.iter().map(|&l| t * l / (1.0 + t * l)).sum() };
    let mut t_lo = 1e-12;
    let mut t_hi = 1.0;
    while mean_at(t_hi) < n as f64 {
        t_hi *= 2.0;
        if t_hi > 1e18 {
            return Err(Error::InvalidDesign("cannot scale Sampford odds".into()));
        }
    }
    for _ in 0..200 {
        let mid = (t_lo * t_hi).sqrt();
        if mean_at(mid) < n as f64 {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    let t = (t_lo * t_hi).sqrt();
    let mu: Vec<f64> = lambda.iter().map(|&l| t * l / (1.0 + t * l)).collect();

    let mut rng = rng_from(seed);
    let mut selected: Vec<usize> = Vec::with_capacity(n + 8);
    for sweep in 0..SAMPFORD_RETRY_BUDGET {
        selected.clear();
        for (i, &m) in mu.iter().enumerate() {
            if rng.random::<f64>() < m {
                selected.push(i);
            }
        }
        if selected.len() != n {
            continue;
        }
        let accept = 1.0 - selected.iter().map(|&i| p[i]).sum::<f64>();
        if rng.random::<f64>() < accept {
            let rows = selected
                .iter()
                .map(|&i| {
                    let u = &pop.units[i];
                    SampleRow {
                        unit_id: u.id,
                        z: u.z,
                        pi: pi[i],
                        stratum: u.stratum,
                        cluster: u.cluster,
                    }
                })
                .collect();
            return Ok(SurveySample {
                rows,
                population_size: pop.size() as f64,
                design: DesignTag::RaoSampfordPps,
                expected_n: n as f64,
            });
        }
        let _ = sweep;
    }
    Err(Error::InvalidDesign(format!(
        "Rao-Sampford retry budget ({SAMPFORD_RETRY_BUDGET} sweeps) exceeded: N={}, n={n}, max pi={:.6}",
        pop.size(),
        pi.iter().cloned().fold(0.0, f64::max),
    )))
}

/// The classical Rao-Sampford rejective scheme: one draw with probabilities
/// p_i, the remaining n-1 draws with probabilities proportional to
/// p_i/(1 - n p_i), rejecting and restarting whenever a duplicate appears.
///
/// Exact but impractical when n^2/N is large (the no-duplicate probability
/// decays like exp(-n^2/2N)); kept as the reference law for tests and for
/// small problems. [`draw_rao_sampford_pps`] samples the same design.
pub fn draw_rao_sampford_rejective(
    pop: &FinitePopulation,
    n: usize,
    seed: u64,
) -> Result<SurveySample> {
    check_sample_size(n, pop.size())?;
    let pi = pps_probabilities(pop, n, true)?;
    let total_x: f64 = pop.units.iter().map(|u| u.x).sum();
    let p: Vec<f64> = pop.units.iter().map(|u| u.x / total_x).collect();
    let lambda: Vec<f64> = p.iter().map(|&pi| pi / (1.0 - n as f64 * pi)).collect();

    let cum_of = |v: &[f64]| -> Vec<f64> {
        let mut c = Vec::with_capacity(v.len());
        let mut s = 0.0;
        for &x in v {
            s += x;
            c.push(s);
        }
        c
    };
    let cum_p = cum_of(&p);
    let cum_l = cum_of(&lambda);
    let pick = |cum: &[f64], u: f64| -> usize {
        let target = u * cum.last().unwrap();
        cum.partition_point(|&c| c <= target).min(cum.len() - 1)
    };

    let mut rng = rng_from(seed);
    let mut in_sample = vec![false; pop.size()];
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut rejections: u64 = 0;
    loop {
        chosen.clear();
        in_sample.iter_mut().for_each(|b| *b = false);
        let first = pick(&cum_p, rng.random());
        in_sample[first] = true;
        chosen.push(first);
        let mut ok = true;
        for _ in 1..n {
            let j = pick(&cum_l, rng.random());
            if in_sample[j] {
                ok = false; // duplicate: reject the whole sample
                break;
            }
            in_sample[j] = true;
            chosen.push(j);
        }
        if ok {
            break;
        }
        rejections += 1;
        if rejections >= SAMPFORD_RETRY_BUDGET {
            return Err(Error::InvalidDesign(format!(
                "Rao-Sampford rejective budget ({SAMPFORD_RETRY_BUDGET}) exceeded: N={}, n={n}; \
                 the no-duplicate rate decays like exp(-n^2/2N), use draw_rao_sampford_pps",
                pop.size(),
            )));
        }
    }
    let rows = chosen
        .iter()
        .map(|&i| {
            let u = &pop.units[i];
            SampleRow { unit_id: u.id, z: u.z, pi: pi[i], stratum: u.stratum, cluster: u.cluster }
        })
        .collect();
    Ok(SurveySample {
        rows,
        population_size: pop.size() as f64,
        design: DesignTag::RaoSampfordPps,
        expected_n: n as f64,
    })
}

/// Stratified sampling: independent draws across strata, each by its own
/// inner design; rows keep their stratum tags and the within-stratum
/// inclusion probabilities.
pub fn draw_stratified(
    pop: &FinitePopulation,
    per_stratum: &[(u32, DesignSpec)],
    seed: u64,
) -> Result<SurveySample> {
    if pop.units.iter().any(|u| u.stratum.is_none()) {
        return Err(Error::InvalidDesign("population has no stratum labels".into()));
    }
    let mut rows = Vec::new();
    let mut expected_n = 0.0;
    for (h, (stratum, spec)) in per_stratum.iter().enumerate() {
        let units: Vec<_> = pop
            .units
            .iter()
            .filter(|u| u.stratum == Some(*stratum))
            .cloned()
            .collect();
        if units.is_empty() {
            return Err(Error::InvalidDesign(format!("unknown stratum id {stratum}")));
        }
        let sub_pop = FinitePopulation::new(units)?;
        let sub = draw(&sub_pop, spec, child_seed(seed, h as u64)).map_err(|e| {
            Error::InvalidDesign(format!("stratum {stratum}: {e}"))
        })?;
        expected_n += sub.expected_n;
        rows.extend(sub.rows);
    }
    Ok(SurveySample {
        rows,
        population_size: pop.size() as f64,
        design: DesignTag::Stratified,
        expected_n,
    })
}

/// Self-weighting two-stage cluster sampling: k PSUs by randomized
/// systematic PPS on the cluster sizes M_i, then m units per selected PSU by
/// SRSWOR. The final inclusion probability (k M_i/N)(m/M_i) = km/N is
/// constant over all elements.
pub fn draw_two_stage_cluster(
    pop: &FinitePopulation,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<SurveySample> {
    if pop.units.iter().any(|u| u.cluster.is_none()) {
        return Err(Error::InvalidDesign("population has no cluster labels".into()));
    }
    let mut cluster_ids: Vec<u32> = pop.units.iter().map(|u| u.cluster.unwrap()).collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let sizes: Vec<usize> = cluster_ids
        .iter()
        .map(|&c| pop.units.iter().filter(|u| u.cluster == Some(c)).count())
        .collect();
    if k == 0 || k > cluster_ids.len() {
        return Err(Error::InvalidDesign(format!(
            "PSU count {k} must be in 1..={}",
            cluster_ids.len()
        )));
    }
    let min_size = *sizes.iter().min().unwrap();
    if m == 0 || m > min_size {
        return Err(Error::InvalidDesign(format!(
            "per-PSU take {m} must be in 1..={min_size} (smallest cluster)"
        )));
    }
    let n_total = pop.size() as f64;
    let bad: Vec<u32> = cluster_ids
        .iter()
        .zip(&sizes)
        .filter(|(_, &mi)| k as f64 * mi as f64 / n_total > 1.0)
        .map(|(&c, _)| c)
        .collect();
    if !bad.is_empty() {
        return Err(Error::InvalidDesign(format!(
            "first-stage certainty clusters (k M_i/N > 1): {bad:?}"
        )));
    }

    // first stage: randomized systematic PPS on cluster sizes
    let mut rng = rng_from(child_seed(seed, 0));
    let mut order: Vec<usize> = (0..cluster_ids.len()).collect();
    order.shuffle(&mut rng);
    let start: f64 = rng.random();
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut next = start;
    for &ci in &order {
        let p1 = k as f64 * sizes[ci] as f64 / n_total;
        let hi = cum + p1;
        if next < hi && picked.len() < k {
            picked.push(ci);
            next += 1.0;
        }
        cum = hi;
    }
    if picked.len() < k {
        for &ci in order.iter().rev() {
            if !picked.contains(&ci) {
                picked.push(ci);
                if picked.len() == k {
                    break;
                }
            }
        }
    }

    // second stage: SRSWOR of m elements within each selected PSU
    let pi_final = k as f64 * m as f64 / n_total;
    let mut rows = Vec::with_capacity(k * m);
    for (j, &ci) in picked.iter().enumerate() {
        let cid = cluster_ids[ci];
        let members: Vec<&crate::population::UnitRecord> =
            pop.units.iter().filter(|u| u.cluster == Some(cid)).collect();
        let mut rng2 = rng_from(child_seed(seed, 1 + j as u64));
        let mut idx: Vec<usize> = (0..members.len()).collect();
        for i in 0..m {
            let j2 = rng2.random_range(i..idx.len());
            idx.swap(i, j2);
        }
        for &i in &idx[..m] {
            let u = members[i];
            rows.push(SampleRow {
                unit_id: u.id,
                z: u.z,
                pi: pi_final,
                stratum: u.stratum,
                cluster: u.cluster,
            });
        }
    }
    Ok(SurveySample {
        rows,
        population_size: n_total,
        design: DesignTag::TwoStageCluster,
        expected_n: (k * m) as f64,
    })
}
