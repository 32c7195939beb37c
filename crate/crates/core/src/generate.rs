//! Seeded random scenarios for property tests, acceptance runs and benches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    Channel, CustomerParams, MarketScenario, QuadraticCoefficients, SmallCloudParams, SupplyChannelParams,
};

/// Ranges for [`random_scenario`].
#[derive(Debug, Clone)]
pub struct RandomScenarioConfig {
    pub scs: (usize, usize),
    pub customers_per_sc: (usize, usize),
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub tau: (f64, f64),
    pub kappa_max: f64,
}

impl Default for RandomScenarioConfig {
    fn default() -> Self {
        Self {
            scs: (1, 5),
            customers_per_sc: (1, 5),
            alpha: (10.0, 200.0),
            beta: (-1.0, -0.01),
            tau: (0.05, 1.0),
            kappa_max: 0.05,
        }
    }
}

/// Each SC gets a random non-empty subset of channels with independently
/// drawn coefficients; about half of the scenarios carry curtailment.
pub fn random_scenario(seed: u64, config: &RandomScenarioConfig) -> MarketScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sc = rng.gen_range(config.scs.0..=config.scs.1);
    let curtailed = rng.gen_bool(0.5);
    let coeffs = |rng: &mut ChaCha8Rng| {
        QuadraticCoefficients::new(
            rng.gen_range(config.alpha.0..=config.alpha.1),
            rng.gen_range(config.beta.0..=config.beta.1),
        )
    };
    let mut scs = Vec::with_capacity(n_sc);
    let mut customers = Vec::new();
    for i in 0..n_sc {
        let id = format!("SC{}", i + 1);
        let n_ch = rng.gen_range(1..=3);
        let mut kinds = Channel::ALL.to_vec();
        kinds.shuffle(&mut rng);
        kinds.truncate(n_ch);
        kinds.sort();
        let channels = kinds
            .into_iter()
            .map(|channel| SupplyChannelParams {
                channel,
                coeffs: coeffs(&mut rng),
                vm_min: 0.0,
                vm_max: rng.gen_range(50.0..500.0),
                tau: rng.gen_range(config.tau.0..=config.tau.1),
                enabled: true,
            })
            .collect();
        scs.push(SmallCloudParams { id: id.clone(), channels, tau_rho: rng.gen_range(config.tau.0..=config.tau.1) });
        for _ in 0..rng.gen_range(config.customers_per_sc.0..=config.customers_per_sc.1) {
            let (kappa1, kappa2) = if curtailed {
                (rng.gen_range(0.0..=config.kappa_max), rng.gen_range(0.0..=config.kappa_max))
            } else {
                (0.0, 0.0)
            };
            customers.push(CustomerParams {
                id: format!("C{}", customers.len() + 1),
                sc_id: id.clone(),
                coeffs_ag: coeffs(&mut rng),
                job_types: None,
                kappa1,
                kappa2,
                tau_ag: rng.gen_range(config.tau.0..=config.tau.1),
                vm_min: 0.0,
                vm_max: rng.gen_range(50.0..500.0),
            });
        }
    }
    MarketScenario { scs, customers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_scenario;

    #[test]
    fn generated_scenarios_are_valid_and_reproducible() {
        let cfg = RandomScenarioConfig::default();
        for seed in 0..50 {
            let s = random_scenario(seed, &cfg);
            assert!(validate_scenario(&s).is_empty(), "seed {seed}");
            assert_eq!(s, random_scenario(seed, &cfg));
            assert!((1..=5).contains(&s.scs.len()));
        }
    }
}
