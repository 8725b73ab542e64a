use metasaem::design::lhs_design;
use metasaem::emulator::{EmulatorBank, EmulatorOptions};
use metasaem::models::LinearToy;
use metasaem::study::{emit_table, parse_table, run_study, simulate_with, ScenarioPreset, StudyConfig, TableFormat, VariantSpec};
use metasaem::{run_saem, FitReport, ModelVariant, PopulationParams, SaemConfig, VariantKind};

fn quick_saem() -> SaemConfig {
    SaemConfig { k_iters: 30, burn_in: 15, m_mcmc: 5, fisher_iters: 5, seed: 3, ..SaemConfig::default() }
}

#[test]
fn first_order_meta_fit_lands_near_the_exact_fit() {
    let preset = ScenarioPreset::first_order();
    let data = simulate_with(&preset.scenario, &preset.scenario.times, &preset.truth, 36, 21).unwrap().data;
    let design = lhs_design(&preset.bounds, 60, 4).unwrap();
    let bank = EmulatorBank::fit(&preset.scenario, &preset.scenario.times, &design, &EmulatorOptions::default()).unwrap();
    assert_eq!(bank.solver_calls(), 60);
    let exact = run_saem(ModelVariant::Exact(&preset.scenario), &data, &quick_saem(), &preset.init).unwrap();
    let simple = run_saem(ModelVariant::Simple(&bank), &data, &quick_saem(), &preset.init).unwrap();
    for k in 0..3 {
        assert!((exact.estimates[k] - simple.estimates[k]).abs() < 0.2, "mu_{}", k + 1);
    }
    let back = FitReport::from_json(&simple.to_json().unwrap()).unwrap();
    assert_eq!(back.estimates, simple.estimates);
    assert_eq!(simple.trajectories.len(), 31);
}

#[test]
fn study_output_is_reproducible() {
    let mut cfg = StudyConfig::from_preset(
        ScenarioPreset::first_order(),
        2,
        vec![VariantSpec::meta(VariantKind::Simple, 30)],
        5,
    );
    cfg.n_individuals = 12;
    cfg.saem = quick_saem();
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let csv = emit_table(&a, TableFormat::Csv);
    assert_eq!(parse_table(&csv).unwrap().len(), a.rows.len());
    assert_eq!(a.records.len(), 2);
}

#[test]
fn linear_toy_standard_errors_cover_the_truth() {
    let truth = PopulationParams::diagonal(vec![1.0], &[0.5], 0.3).unwrap();
    let times = [0.0, 1.0, 2.0, 3.0, 4.0];
    let data = simulate_with(&LinearToy, &times, &truth, 300, 17).unwrap().data;
    let init = PopulationParams::diagonal(vec![0.0], &[1.0], 1.0).unwrap();
    let fit = run_saem(ModelVariant::Exact(&LinearToy), &data, &SaemConfig::default(), &init).unwrap();
    for (k, t) in truth.to_vector().iter().enumerate() {
        let se = fit.std_errors[k].unwrap();
        assert!((fit.estimates[k] - t).abs() < 3.0 * se, "{} = {} (se {se})", fit.parameter_names[k], fit.estimates[k]);
        let (lo, hi) = fit.wald_interval(k).unwrap();
        assert!((hi - lo - 2.0 * 1.959963984540054 * se).abs() < 1e-12);
    }
}
