//! Stratified simple random sampling without replacement.

use rand::seq::index;

use crate::domain::{SampleSet, UnitRecord};
use crate::error::{Error, Result};
use crate::seed;

/// Per-stratum sample size `max(round(f·N_h), 2)`, capped at `N_h`.
pub fn allocation(population_size: u64, fraction: f64) -> usize {
    let n = (fraction * population_size as f64).round().max(2.0) as u64;
    n.min(population_size) as usize
}

/// Draws an SRSWOR sample from every stratum of a unit-weight population and
/// attaches HT weights `N_h/n_h`. Stratum `h` uses the stream
/// `derive(seed, h)`; sampled records keep population order.
pub fn draw_stratified_sample(population: &SampleSet, fraction: f64, seed: u64) -> Result<SampleSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("sampling fraction must be in (0, 1], got {fraction}")));
    }
    let small: Vec<String> = population
        .strata()
        .iter()
        .filter(|s| s.population_size < 2)
        .map(|s| s.id.clone())
        .collect();
    if !small.is_empty() {
        return Err(Error::InsufficientStratumSample { strata: small });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); population.strata().len()];
    for (i, r) in population.records().iter().enumerate() {
        members[r.stratum].push(i);
    }
    let mut chosen: Vec<(usize, f64)> = Vec::new();
    for (h, units) in members.iter().enumerate() {
        let n_pop = units.len();
        let declared = population.strata()[h].population_size;
        if n_pop as u64 != declared {
            return Err(Error::Invalid(format!(
                "stratum `{}` declares N_h = {declared} but the frame holds {n_pop} units",
                population.strata()[h].id
            )));
        }
        let n = allocation(declared, fraction);
        let weight = declared as f64 / n as f64;
        let mut rng = seed::rng(seed::derive(seed, h as u64));
        let mut picks = index::sample(&mut rng, n_pop, n).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|k| (units[k], weight)));
    }
    chosen.sort_unstable_by_key(|&(i, _)| i);
    let records: Vec<UnitRecord> = chosen
        .into_iter()
        .map(|(i, w)| UnitRecord {
            weight: w,
            ..population.records()[i].clone()
        })
        .collect();
    SampleSet::new(
        records,
        population.strata().to_vec(),
        population.domains().to_vec(),
        population.schema().clone(),
    )
}
