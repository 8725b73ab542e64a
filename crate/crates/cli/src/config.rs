//! Declarative run configuration (TOML), validated before any computation.

use std::path::{Path, PathBuf};

use metasaem::emulator::{DEFAULT_NUGGET, DEFAULT_PHI_BOUNDS};
use metasaem::models::PkKind;
use metasaem::study::ScenarioPreset;
use metasaem::{Bounds, EmulatorOptions, KernelFamily, PkScenario, PopulationParams, RegressorSpec, SaemConfig, VariantSpec};
use serde::Deserialize;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub truth: Option<ParamsSection>,
    pub init: Option<ParamsSection>,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub emulator: EmulatorSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub saem: SaemConfig,
    pub study: Option<StudySection>,
    #[serde(default)]
    pub io: IoSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    FirstOrder,
    MichaelisMenten,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub preset: Option<PresetName>,
    pub kind: Option<PkKind>,
    pub dose: Option<f64>,
    pub times: Option<Vec<f64>>,
    pub step: Option<f64>,
    pub log_km: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub mu: Vec<f64>,
    pub omega: Option<Vec<Vec<f64>>>,
    /// Shorthand for a diagonal Ω.
    pub omega_diag: Option<Vec<f64>>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    #[serde(default = "default_n_design")]
    pub n_design: usize,
    /// Explicit design points; replaces the Latin hypercube when given.
    pub points: Option<Vec<Vec<f64>>>,
}

fn default_n_design() -> usize {
    100
}

impl Default for DesignSection {
    fn default() -> Self {
        Self { lower: None, upper: None, n_design: default_n_design(), points: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorSection {
    #[serde(default = "default_regressors")]
    pub regressors: RegressorSpec,
    #[serde(default = "default_family")]
    pub kernel: KernelFamily,
    #[serde(default = "default_phi_bounds")]
    pub phi_bounds: [f64; 2],
    #[serde(default = "default_nugget")]
    pub nugget: f64,
}

fn default_regressors() -> RegressorSpec {
    RegressorSpec::Linear
}
fn default_family() -> KernelFamily {
    KernelFamily::Gaussian
}
fn default_phi_bounds() -> [f64; 2] {
    [DEFAULT_PHI_BOUNDS.0, DEFAULT_PHI_BOUNDS.1]
}
fn default_nugget() -> f64 {
    DEFAULT_NUGGET
}

impl Default for EmulatorSection {
    fn default() -> Self {
        Self {
            regressors: default_regressors(),
            kernel: default_family(),
            phi_bounds: default_phi_bounds(),
            nugget: default_nugget(),
        }
    }
}

impl EmulatorSection {
    pub fn options(&self) -> Result<EmulatorOptions, CliError> {
        let [lo, hi] = self.phi_bounds;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(CliError::config("emulator.phi_bounds", "must satisfy 0 < lower <= upper"));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(CliError::config("emulator.nugget", "must be a nonnegative number"));
        }
        Ok(EmulatorOptions { regressors: self.regressors, family: self.kernel, phi_bounds: (lo, hi), nugget: self.nugget })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n_individuals: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub replications: usize,
    pub variants: Vec<VariantSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

/// Everything a command needs, with presets and overrides merged.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub scenario: PkScenario,
    pub truth: PopulationParams,
    pub init: PopulationParams,
    pub bounds: Bounds,
    pub n_individuals: usize,
    pub n_design: usize,
    pub design_points: Option<Vec<Vec<f64>>>,
    pub emulator: EmulatorOptions,
    pub saem: SaemConfig,
    pub study: Option<StudySection>,
    pub io: IoSection,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "<root>" } else { &path }, e.into_inner().message())
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::config(
            "schema_version",
            &format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
        ));
    }
    Ok(cfg)
}

fn params(section: &ParamsSection, key: &str) -> Result<PopulationParams, CliError> {
    let d = section.mu.len();
    let omega = match (&section.omega, &section.omega_diag) {
        (Some(rows), None) => rows.clone(),
        (None, Some(diag)) => {
            if diag.len() != d {
                return Err(CliError::config(&format!("{key}.omega_diag"), "length must match mu"));
            }
            (0..d).map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect()
        }
        _ => return Err(CliError::config(key, "give exactly one of `omega` and `omega_diag`")),
    };
    let p = PopulationParams { mu: section.mu.clone(), omega, sigma2: section.sigma2 };
    p.validate().map_err(|e| CliError::config(key, &e.to_string()))?;
    Ok(p)
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let preset = self.scenario.preset.map(|p| match p {
            PresetName::FirstOrder => ScenarioPreset::first_order(),
            PresetName::MichaelisMenten => ScenarioPreset::michaelis_menten(),
        });
        let s = &self.scenario;
        let mut scenario = match (&preset, s.kind) {
            (Some(p), None) => p.scenario.clone(),
            (Some(p), Some(k)) if k == p.scenario.kind => p.scenario.clone(),
            (Some(_), Some(_)) => return Err(CliError::config("scenario.kind", "conflicts with the preset")),
            (None, Some(kind)) => {
                let times = s
                    .times
                    .clone()
                    .ok_or_else(|| CliError::config("scenario.times", "required without a preset"))?;
                let dose = s.dose.ok_or_else(|| CliError::config("scenario.dose", "required without a preset"))?;
                let mut sc = match kind {
                    PkKind::FirstOrder => PkScenario::first_order(),
                    PkKind::MichaelisMenten => PkScenario::michaelis_menten(dose),
                };
                sc.times = times;
                sc
            }
            (None, None) => return Err(CliError::config("scenario", "set `preset` or `kind`")),
        };
        if let Some(d) = s.dose {
            scenario.dose = d;
        }
        if let Some(t) = &s.times {
            scenario.times = t.clone();
        }
        if let Some(h) = s.step {
            scenario.step = h;
        }
        if let Some(k) = s.log_km {
            scenario.log_km = k;
        }
        scenario.validate().map_err(|e| CliError::config("scenario", &e.to_string()))?;

        let truth = match (&self.truth, &preset) {
            (Some(t), _) => params(t, "truth")?,
            (None, Some(p)) => p.truth.clone(),
            (None, None) => return Err(CliError::config("truth", "required without a preset")),
        };
        let init = match (&self.init, &preset) {
            (Some(t), _) => params(t, "init")?,
            (None, Some(p)) => p.init.clone(),
            (None, None) => return Err(CliError::config("init", "required without a preset")),
        };
        let bounds = match (&self.design.lower, &self.design.upper, &preset) {
            (Some(l), Some(u), _) => {
                Bounds::new(l.clone(), u.clone()).map_err(|e| CliError::config("design", &e.to_string()))?
            }
            (None, None, Some(p)) => p.bounds.clone(),
            _ => return Err(CliError::config("design", "give both `lower` and `upper`")),
        };
        for (name, dim) in [("truth.mu", truth.dim()), ("init.mu", init.dim()), ("design.lower", bounds.dim())] {
            if dim != 3 {
                return Err(CliError::config(name, "the PK models have 3 parameters"));
            }
        }
        let n_individuals = self
            .simulate
            .n_individuals
            .or_else(|| preset.as_ref().map(|p| p.n_individuals))
            .ok_or_else(|| CliError::config("simulate.n_individuals", "required without a preset"))?;
        if n_individuals == 0 {
            return Err(CliError::config("simulate.n_individuals", "must be at least 1"));
        }
        if self.design.n_design < 2 {
            return Err(CliError::config("design.n_design", "must be at least 2"));
        }
        let mut saem = self.saem.clone();
        saem.seed = self.seed;
        saem.validate(3).map_err(|e| CliError::config("saem", &e.to_string()))?;
        if let Some(st) = &self.study {
            if st.replications == 0 {
                return Err(CliError::config("study.replications", "must be at least 1"));
            }
            if st.variants.is_empty() {
                return Err(CliError::config("study.variants", "list at least one variant"));
            }
        }
        Ok(Resolved {
            seed: self.seed,
            scenario,
            truth,
            init,
            bounds,
            n_individuals,
            n_design: self.design.n_design,
            design_points: self.design.points.clone(),
            emulator: self.emulator.options()?,
            saem,
            study: self.study.clone(),
            io: self.io.clone(),
        })
    }
}
