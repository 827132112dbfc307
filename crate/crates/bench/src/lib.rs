//! Shared fixtures for the criterion benchmarks.

use clg_core::adaptive::AdaptiveConfig;
use clg_core::efficiency::EfficiencyParams;
use clg_core::equilibrium::{mmse_receiver, EquilibriumConfig};
use clg_core::model::{test_support, ReceiverBank};
use clg_core::scenario::{self, Realization, ScenarioSpec};
use clg_core::NetworkState;

/// Random network with MMSE receivers for every user.
pub fn network(n: usize, k: usize, seed: u64) -> (NetworkState, ReceiverBank) {
    let st = test_support::random_state(n, k, seed);
    let mut bank = ReceiverBank::matched(&st);
    for u in 0..k {
        bank.filters.set_column(u, &mmse_receiver(&st, u).unwrap());
    }
    (st, bank)
}

/// Default static scenario realization with index `idx`.
pub fn realization(spec: &ScenarioSpec, idx: usize) -> Realization {
    let mut rng = scenario::realization_rng(spec.seed, idx);
    scenario::build_realization(spec, &mut rng).unwrap()
}

pub fn configs() -> (AdaptiveConfig, EquilibriumConfig, EfficiencyParams) {
    let params = EfficiencyParams::default();
    let cfg = AdaptiveConfig::new(params).unwrap();
    let eq = EquilibriumConfig::new(cfg.gamma_bar);
    (cfg, eq, params)
}
