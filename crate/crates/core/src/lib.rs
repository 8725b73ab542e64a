//! Population maximum-likelihood estimation for nonlinear mixed-effects models whose
//! regression function is an expensive computer model, using SAEM-MCMC together with a
//! Kriging emulator of that function.

pub mod design;
pub mod emulator;
pub mod error;
pub mod likelihood;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod saem;
pub mod study;

pub use design::{covering_distance, lhs_design, Bounds, Design};
pub use emulator::{
    fit_emulator, gaussian_kernel, gp_profile_loglik, Emulator, EmulatorBank, EmulatorOptions,
    EmulatorParams, KernelFamily, KernelSpec, RegressorSpec,
};
pub use error::{Error, Result};
pub use likelihood::{Dataset, Individual, ModelVariant, PopulationParams, VariantKind};
pub use models::{eval_f, PkKind, PkScenario, StructuralModel};
pub use saem::{fisher_information, run_saem, Diagnostics, FisherResult, FitReport, SaemConfig};
pub use study::{
    emit_table, run_study, simulate_dataset, ScenarioPreset, StudyConfig, StudyResult, TableFormat,
    VariantSpec,
};
