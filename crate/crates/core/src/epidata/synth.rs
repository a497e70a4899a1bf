use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::dataset::{build_dataset, DatasetOptions, EpidemicDataset};
use super::tables::{CaseTable, Flow, MobilityTable};
use super::DataError;

/// Daily fraction of a region's population that travels.
const TRAVEL_RATE: f64 = 0.05;
/// Relative amplitude of the day-to-day mobility noise.
const MOBILITY_NOISE: f64 = 0.1;
const OUT_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    /// Transmission rate per day.
    pub beta: f64,
    /// Recovery probability per day.
    pub gamma: f64,
    pub seed_region: usize,
    /// Mean regional population; each region draws from 0.5x..1.5x of it.
    pub population: u64,
    pub initial_infected: u64,
}

impl Default for SirParams {
    fn default() -> Self {
        Self {
            beta: 0.4,
            gamma: 0.1,
            seed_region: 0,
            population: 20_000,
            initial_infected: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compartments {
    pub susceptible: u64,
    pub infected: u64,
    pub recovered: u64,
}

impl Compartments {
    pub fn total(&self) -> u64 {
        self.susceptible + self.infected + self.recovered
    }
}

#[derive(Debug, Clone)]
pub struct SirSimulation {
    pub cases: CaseTable,
    pub mobility: MobilityTable,
    pub populations: Vec<u64>,
    /// `[day][region]`, state at the end of each day.
    pub compartments: Vec<Vec<Compartments>>,
}

fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date")
}

/// Rounds `x` down or up at random with probability equal to its fractional part.
fn stochastic_round(x: f64, rng: &mut impl Rng) -> u64 {
    let base = x.floor();
    let frac = x - base;
    base as u64 + u64::from(rng.random::<f64>() < frac)
}

/// Discrete-day metapopulation SIR over a random directed mobility graph.
pub fn simulate_sir(n_regions: usize, n_days: usize, params: SirParams, rng_seed: u64) -> Result<SirSimulation, DataError> {
    let invalid = |m: &str| Err(DataError::InvalidSirParams(m.to_owned()));
    if n_regions == 0 || n_days == 0 {
        return invalid("need at least one region and one day");
    }
    if !(params.beta.is_finite() && params.beta >= 0.0) {
        return invalid("beta must be finite and non-negative");
    }
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return invalid("gamma must lie in (0, 1)");
    }
    if params.population == 0 {
        return invalid("population must be positive");
    }
    if params.seed_region >= n_regions {
        return invalid("seed region out of range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let populations: Vec<u64> = (0..n_regions)
        .map(|_| ((params.population as f64) * rng.random_range(0.5..1.5)).round().max(1.0) as u64)
        .collect();
    if params.initial_infected > populations[params.seed_region] {
        return invalid("initial infections exceed the seed region's population");
    }

    // Stationary travel shares: each region sends to a few random neighbours.
    let mut shares = vec![vec![0.0f64; n_regions]; n_regions];
    let degree = OUT_DEGREE.min(n_regions - 1);
    for (i, row) in shares.iter_mut().enumerate() {
        let mut picked = 0;
        while picked < degree {
            let j = rng.random_range(0..n_regions);
            if j != i && row[j] == 0.0 {
                row[j] = rng.random_range(0.5..1.5);
                picked += 1;
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|s| *s /= total);
        }
    }

    let regions: Vec<String> = (0..n_regions).map(|i| format!("R{i:02}")).collect();
    let mut state: Vec<Compartments> = populations
        .iter()
        .map(|&p| Compartments {
            susceptible: p,
            infected: 0,
            recovered: 0,
        })
        .collect();
    let seed = &mut state[params.seed_region];
    seed.susceptible -= params.initial_infected;
    seed.infected = params.initial_infected;

    let mut dates = Vec::with_capacity(n_days);
    let mut counts = Vec::with_capacity(n_days);
    let mut flows_by_day = Vec::with_capacity(n_days);
    let mut compartments = Vec::with_capacity(n_days);
    for t in 0..n_days {
        dates.push(start_date() + chrono::Duration::days(t as i64));
        let mut flow = vec![vec![0u64; n_regions]; n_regions];
        let mut day_flows = Vec::new();
        for i in 0..n_regions {
            for j in 0..n_regions {
                if shares[i][j] > 0.0 {
                    let noise = 1.0 + MOBILITY_NOISE * rng.random_range(-1.0..1.0);
                    let w = (TRAVEL_RATE * populations[i] as f64 * shares[i][j] * noise).round() as u64;
                    flow[i][j] = w;
                    day_flows.push(Flow {
                        src: regions[i].clone(),
                        dst: regions[j].clone(),
                        weight: w as f64,
                    });
                }
            }
        }

        let mut new_cases = vec![0u64; n_regions];
        if t == 0 {
            new_cases[params.seed_region] = params.initial_infected;
        } else {
            let prev = state.clone();
            for (i, st) in state.iter_mut().enumerate() {
                let mut infectious = prev[i].infected as f64;
                let mut present = populations[i] as f64;
                for j in 0..n_regions {
                    if flow[j][i] > 0 {
                        let visitors = flow[j][i] as f64;
                        infectious += visitors * prev[j].infected as f64 / populations[j] as f64;
                        present += visitors;
                    }
                }
                let p_inf = 1.0 - (-params.beta * infectious / present).exp();
                let infections = stochastic_round(prev[i].susceptible as f64 * p_inf, &mut rng).min(prev[i].susceptible);
                let recoveries = stochastic_round(prev[i].infected as f64 * params.gamma, &mut rng).min(prev[i].infected);
                st.susceptible -= infections;
                st.infected = st.infected + infections - recoveries;
                st.recovered += recoveries;
                new_cases[i] = infections;
            }
        }
        counts.push(new_cases);
        flows_by_day.push(day_flows);
        compartments.push(state.clone());
    }

    Ok(SirSimulation {
        cases: CaseTable {
            dates: dates.clone(),
            regions,
            counts,
        },
        mobility: MobilityTable {
            dates,
            flows: flows_by_day,
        },
        populations,
        compartments,
    })
}

pub fn synth_sir<S: Scalar>(
    n_regions: usize,
    n_days: usize,
    params: SirParams,
    rng_seed: u64,
    options: DatasetOptions,
) -> Result<EpidemicDataset<S>, DataError> {
    let sim = simulate_sir(n_regions, n_days, params, rng_seed)?;
    build_dataset(&sim.cases, &sim.mobility, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_transmission_means_no_new_cases_after_seeding() {
        let p = SirParams {
            beta: 0.0,
            ..Default::default()
        };
        let sim = simulate_sir(5, 20, p, 1).unwrap();
        assert_eq!(sim.cases.counts[0][0], p.initial_infected);
        assert!(sim.cases.counts[1..].iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a: EpidemicDataset<f64> = synth_sir(6, 30, SirParams::default(), 9, DatasetOptions::default()).unwrap();
        let b: EpidemicDataset<f64> = synth_sir(6, 30, SirParams::default(), 9, DatasetOptions::default()).unwrap();
        assert_eq!(a, b);
        let c: EpidemicDataset<f64> = synth_sir(6, 30, SirParams::default(), 10, DatasetOptions::default()).unwrap();
        assert_ne!(a.mobility, c.mobility);
    }

    #[test]
    fn shape_for_ten_regions_sixty_days() {
        let ds: EpidemicDataset<f64> = synth_sir(10, 60, SirParams::default(), 3, DatasetOptions::default()).unwrap();
        assert_eq!(ds.features.shape(), &[60, 10, 3]);
        assert!(ds.counts.iter().flatten().sum::<f64>() > 100.0);
    }

    #[test]
    fn population_is_conserved_exactly() {
        let sim = simulate_sir(8, 60, SirParams::default(), 4).unwrap();
        for day in &sim.compartments {
            for (c, &pop) in day.iter().zip(&sim.populations) {
                assert_eq!(c.total(), pop);
            }
        }
        // new cases equal the drop in susceptibles
        for t in 1..60 {
            for i in 0..8 {
                let drop = sim.compartments[t - 1][i].susceptible - sim.compartments[t][i].susceptible;
                assert_eq!(drop, sim.cases.counts[t][i]);
            }
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let bad = |p: SirParams| simulate_sir(4, 10, p, 0).is_err();
        assert!(bad(SirParams { gamma: 0.0, ..Default::default() }));
        assert!(bad(SirParams { gamma: 1.0, ..Default::default() }));
        assert!(bad(SirParams { beta: -0.1, ..Default::default() }));
        assert!(bad(SirParams { population: 0, ..Default::default() }));
        assert!(bad(SirParams { seed_region: 4, ..Default::default() }));
    }
}
