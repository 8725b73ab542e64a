//! Fixtures shared by the estimation benchmarks.

use metasaem::design::lhs_design;
use metasaem::emulator::{EmulatorBank, EmulatorOptions};
use metasaem::study::{simulate_with, ScenarioPreset};
use metasaem::{Dataset, SaemConfig};

/// The first-order scenario with one simulated dataset and a prefit emulator bank.
pub struct Fixture {
    pub preset: ScenarioPreset,
    pub data: Dataset,
    pub bank: EmulatorBank,
}

impl Fixture {
    pub fn first_order(n_design: usize) -> Self {
        let preset = ScenarioPreset::first_order();
        let design = lhs_design(&preset.bounds, n_design, 7).expect("design");
        let bank = EmulatorBank::fit(&preset.scenario, &preset.scenario.times, &design, &EmulatorOptions::default())
            .expect("emulator bank");
        let data = simulate_with(&preset.scenario, &preset.scenario.times, &preset.truth, preset.n_individuals, 11)
            .expect("simulation")
            .data;
        Self { preset, data, bank }
    }
}

/// A short SAEM schedule so that one benchmark sample stays under a second.
pub fn short_saem() -> SaemConfig {
    SaemConfig { k_iters: 10, burn_in: 5, m_mcmc: 5, fisher_iters: 0, ..SaemConfig::default() }
}
