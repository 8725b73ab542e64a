//! Simulation from the population model and replicated estimation studies with
//! bias / RMSE / coverage summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{lhs_design, Bounds};
use crate::emulator::{EmulatorBank, EmulatorOptions, RegressorSpec};
use crate::error::{Error, Result};
use crate::likelihood::{Dataset, Individual, ModelVariant, PopulationParams, VariantKind};
use crate::models::{PkScenario, StructuralModel};
use crate::rng::{derive_seed, stream, tag};
use crate::saem::{run_saem, FitReport, SaemConfig};

/// Redraws allowed per individual before simulation gives up.
pub const MAX_REDRAWS: usize = 1000;
/// Largest tolerated share of failed fits per variant.
pub const MAX_FAILURE_SHARE: f64 = 0.10;
/// Dose used by the Michaelis–Menten preset.
pub const MM_DOSE: f64 = 50.0;

/// A ready-made simulation scenario: model, truth, emulator box and SAEM starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub scenario: PkScenario,
    pub truth: PopulationParams,
    pub bounds: Bounds,
    pub init: PopulationParams,
    pub n_individuals: usize,
}

impl ScenarioPreset {
    pub fn first_order() -> Self {
        Self {
            scenario: PkScenario::first_order(),
            truth: PopulationParams::diagonal(vec![-2.52, 0.4, -3.22], &[0.01; 3], 0.01).unwrap(),
            bounds: Bounds::new(vec![-4.0, 0.0, -4.5], vec![-1.0, 2.0, 2.0]).unwrap(),
            init: PopulationParams::diagonal(vec![-3.0, 1.0, -3.0], &[0.1; 3], 0.09).unwrap(),
            n_individuals: 36,
        }
    }

    pub fn michaelis_menten() -> Self {
        Self {
            scenario: PkScenario::michaelis_menten(MM_DOSE),
            truth: PopulationParams::diagonal(vec![2.5, 1.0, -0.994], &[0.09; 3], 0.01).unwrap(),
            bounds: Bounds::new(vec![1.6, 0.0, -1.6], vec![3.3, 2.1, -0.3]).unwrap(),
            init: PopulationParams::diagonal(vec![2.0, 0.5, -0.5], &[0.1; 3], 0.09).unwrap(),
            n_individuals: 36,
        }
    }
}

/// Square root `A` with `A Aᵀ = Ω` for a positive semi-definite Ω.
fn psd_sqrt(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(omega.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::domain("omega is not positive semi-definite"));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Simulated data plus the number of redrawn individual parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub data: Dataset,
    pub psi: Vec<Vec<f64>>,
    pub redraws: usize,
}

/// Draw `n` individuals from `truth` through `model` at `times`. Draws the model rejects
/// are redrawn and counted.
pub fn simulate_with(
    model: &dyn StructuralModel,
    times: &[f64],
    truth: &PopulationParams,
    n: usize,
    seed: u64,
) -> Result<Simulation> {
    let d = model.dim();
    if truth.dim() != d {
        return Err(Error::domain(format!("truth has dimension {}, the model {d}", truth.dim())));
    }
    if n == 0 {
        return Err(Error::domain("need at least one individual"));
    }
    if !(truth.sigma2 >= 0.0 && truth.sigma2.is_finite()) {
        return Err(Error::domain("sigma2 must be nonnegative"));
    }
    let root = psd_sqrt(&truth.omega_matrix())?;
    let sigma = truth.sigma2.sqrt();
    let mut individuals = Vec::with_capacity(n);
    let mut all_psi = Vec::with_capacity(n);
    let mut redraws = 0;
    for i in 0..n {
        let mut rng = stream(seed, &[tag::SIMULATE, i as u64]);
        let mut attempt = 0;
        let (psi, f) = loop {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let psi: Vec<f64> = (0..d)
                .map(|a| truth.mu[a] + (0..d).map(|b| root[(a, b)] * z[b]).sum::<f64>())
                .collect();
            match model.eval(times, &psi) {
                Ok(f) if f.iter().all(|v| v.is_finite()) => break (psi, f),
                _ => {
                    attempt += 1;
                    redraws += 1;
                    if attempt >= MAX_REDRAWS {
                        return Err(Error::Study(format!(
                            "individual {i}: model failed for {MAX_REDRAWS} consecutive draws"
                        )));
                    }
                }
            }
        };
        let y = f.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        individuals.push(Individual { id: format!("{}", i + 1), times: times.to_vec(), y });
        all_psi.push(psi);
    }
    Ok(Simulation { data: Dataset::new(individuals)?, psi: all_psi, redraws })
}

pub fn simulate_dataset(truth: &PopulationParams, scenario: &PkScenario, n: usize, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    simulate_with(scenario, &scenario.times, truth, n, seed).map(|s| s.data)
}

/// One estimator in a study; meta variants carry their design size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    #[serde(default)]
    pub n_design: Option<usize>,
}

impl VariantSpec {
    pub fn exact() -> Self {
        Self { kind: VariantKind::Exact, n_design: None }
    }

    pub fn meta(kind: VariantKind, n_design: usize) -> Self {
        Self { kind, n_design: Some(n_design) }
    }

    pub fn label(&self) -> String {
        match self.n_design {
            Some(n) => format!("{} (n_D={n})", self.kind),
            None => self.kind.to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.kind.uses_emulator(), self.n_design) {
            (true, None) => Err(Error::domain(format!("variant {} needs n_design", self.kind))),
            (true, Some(n)) if n < 2 => Err(Error::domain("n_design must be at least 2")),
            (false, Some(_)) => Err(Error::domain("the exact variant takes no n_design")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: PkScenario,
    pub truth: PopulationParams,
    pub init: PopulationParams,
    pub bounds: Bounds,
    pub n_individuals: usize,
    pub replications: usize,
    pub variants: Vec<VariantSpec>,
    pub saem: SaemConfig,
    pub emulator: EmulatorOptions,
    pub seed: u64,
}

impl StudyConfig {
    pub fn from_preset(preset: ScenarioPreset, replications: usize, variants: Vec<VariantSpec>, seed: u64) -> Self {
        Self {
            scenario: preset.scenario,
            truth: preset.truth,
            init: preset.init,
            bounds: preset.bounds,
            n_individuals: preset.n_individuals,
            replications,
            variants,
            saem: SaemConfig::default(),
            emulator: EmulatorOptions { regressors: RegressorSpec::Linear, ..Default::default() },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.truth.validate()?;
        self.init.validate()?;
        self.bounds.validate()?;
        let d = self.scenario.dim();
        if self.truth.dim() != d || self.init.dim() != d || self.bounds.dim() != d {
            return Err(Error::domain("truth, init and bounds must match the model dimension"));
        }
        if self.n_individuals < 2 {
            return Err(Error::domain("a study needs at least two individuals"));
        }
        if self.replications == 0 {
            return Err(Error::domain("replications must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(Error::domain("a study needs at least one variant"));
        }
        for v in &self.variants {
            v.validate()?;
        }
        self.saem.validate(d)
    }

    /// Distinct design sizes, each fitted once and shared by every replication.
    pub fn design_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.variants.iter().filter_map(|v| v.n_design).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    pub fn design_seed(&self, n_design: usize) -> u64 {
        derive_seed(self.seed, &[tag::DESIGN, n_design as u64])
    }

    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &[tag::REPLICATION, r as u64])
    }
}

/// Emulator banks for every design size in `config`.
pub fn prefit_banks(config: &StudyConfig) -> Result<BTreeMap<usize, EmulatorBank>> {
    config
        .design_sizes()
        .into_iter()
        .map(|n| {
            let design = lhs_design(&config.bounds, n, config.design_seed(n))?;
            let bank = EmulatorBank::fit(&config.scenario, &config.scenario.times, &design, &config.emulator)?;
            Ok((n, bank))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub replication: usize,
    pub variant: VariantSpec,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<Option<f64>>,
    pub acceptance_rate: f64,
    /// Timing is kept out of the serialized record so that study output is reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
    #[serde(skip)]
    pub secs_per_iter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub variant: Option<VariantSpec>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub parameter: String,
    pub variant: VariantKind,
    pub n_design: Option<usize>,
    pub bias_pct: f64,
    pub rmse_pct: f64,
    /// `None` when no replication produced an interval.
    pub coverage_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTiming {
    pub variant: VariantSpec,
    pub fits: usize,
    pub mean_wall_secs: f64,
    pub mean_secs_per_iter: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    #[serde(skip)]
    pub timings: Vec<VariantTiming>,
    pub records: Vec<FitRecord>,
    pub failures: Vec<FailureRecord>,
    pub simulation_redraws: usize,
}

impl StudyResult {
    pub fn row(&self, parameter: &str, variant: VariantSpec) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.parameter == parameter && r.variant == variant.kind && r.n_design == variant.n_design)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fits one variant to one dataset.
pub fn fit_variant(
    config: &StudyConfig,
    banks: &BTreeMap<usize, EmulatorBank>,
    spec: VariantSpec,
    data: &Dataset,
    saem: &SaemConfig,
) -> Result<FitReport> {
    let variant = match spec.n_design {
        None => ModelVariant::Exact(&config.scenario),
        Some(n) => {
            let bank = banks.get(&n).ok_or_else(|| Error::domain(format!("no bank for n_D={n}")))?;
            ModelVariant::with_kind(bank, spec.kind)?
        }
    };
    run_saem(variant, data, saem, &config.init)
}

/// Bias, RMSE and coverage of each parameter with a nonzero true value.
pub fn summarize(truth: &PopulationParams, variants: &[VariantSpec], records: &[FitRecord]) -> Vec<StudyRow> {
    let names = PopulationParams::parameter_names(truth.dim());
    let tv = truth.to_vector();
    let mut rows = Vec::new();
    for spec in variants {
        let recs: Vec<&FitRecord> = records.iter().filter(|r| r.variant == *spec).collect();
        if recs.is_empty() {
            continue;
        }
        let n = recs.len() as f64;
        for (k, name) in names.iter().enumerate() {
            let t = tv[k];
            if t == 0.0 {
                continue;
            }
            let err: Vec<f64> = recs.iter().map(|r| r.estimates[k] - t).collect();
            let bias = 100.0 * err.iter().sum::<f64>() / n / t;
            let rmse = 100.0 * (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt() / t.abs();
            let with_ci: Vec<(f64, f64)> = recs
                .iter()
                .filter_map(|r| r.std_errors[k].map(|se| (r.estimates[k], se)))
                .collect();
            let coverage = (!with_ci.is_empty()).then(|| {
                let hits = with_ci.iter().filter(|(e, se)| (e - t).abs() <= 1.959_963_984_540_054 * se).count();
                100.0 * hits as f64 / n
            });
            rows.push(StudyRow {
                parameter: name.clone(),
                variant: spec.kind,
                n_design: spec.n_design,
                bias_pct: bias,
                rmse_pct: rmse,
                coverage_pct: coverage,
            });
        }
    }
    rows
}

fn timings(variants: &[VariantSpec], records: &[FitRecord]) -> Vec<VariantTiming> {
    variants
        .iter()
        .filter_map(|spec| {
            let recs: Vec<&FitRecord> = records.iter().filter(|r| r.variant == *spec).collect();
            let n = recs.len();
            (n > 0).then(|| VariantTiming {
                variant: *spec,
                fits: n,
                mean_wall_secs: recs.iter().map(|r| r.wall_secs).sum::<f64>() / n as f64,
                mean_secs_per_iter: recs.iter().map(|r| r.secs_per_iter).sum::<f64>() / n as f64,
            })
        })
        .collect()
}

/// Runs every replication with prefit banks. Replications run concurrently; records are
/// reduced in replication order.
pub fn run_study_with_banks(config: &StudyConfig, banks: &BTreeMap<usize, EmulatorBank>) -> Result<StudyResult> {
    config.validate()?;
    let per_rep: Vec<(usize, Vec<FitRecord>, Vec<FailureRecord>)> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let seed = config.replication_seed(r);
            let sim = match simulate_with(&config.scenario, &config.scenario.times, &config.truth, config.n_individuals, seed) {
                Ok(s) => s,
                Err(e) => {
                    return (0, Vec::new(), vec![FailureRecord { replication: r, variant: None, error: e.to_string() }])
                }
            };
            let mut ok = Vec::new();
            let mut bad = Vec::new();
            // Every variant reuses the replication's chain seed, so variant comparisons are paired.
            let saem = SaemConfig { seed: derive_seed(seed, &[tag::MCMC]), ..config.saem.clone() };
            for spec in &config.variants {
                match fit_variant(config, banks, *spec, &sim.data, &saem) {
                    Ok(fit) => {
                        let secs = fit.wall_time.as_secs_f64();
                        ok.push(FitRecord {
                            replication: r,
                            variant: *spec,
                            estimates: fit.estimates,
                            std_errors: fit.std_errors,
                            acceptance_rate: fit.diagnostics.acceptance_rate,
                            wall_secs: secs,
                            secs_per_iter: secs / saem.k_iters as f64,
                        })
                    }
                    Err(e) => bad.push(FailureRecord { replication: r, variant: Some(*spec), error: e.to_string() }),
                }
            }
            (sim.redraws, ok, bad)
        })
        .collect();

    let mut result = StudyResult::default();
    for (redraws, ok, bad) in per_rep {
        result.simulation_redraws += redraws;
        result.records.extend(ok);
        result.failures.extend(bad);
    }
    let limit = MAX_FAILURE_SHARE * config.replications as f64;
    for spec in &config.variants {
        let failed = result
            .failures
            .iter()
            .filter(|f| f.variant.map_or(true, |v| v == *spec))
            .count();
        if failed as f64 > limit {
            let first = result.failures.iter().find(|f| f.variant.map_or(true, |v| v == *spec));
            return Err(Error::Study(format!(
                "{failed} of {} replications failed for {}; first error: {}",
                config.replications,
                spec.label(),
                first.map_or("", |f| f.error.as_str())
            )));
        }
    }
    result.rows = summarize(&config.truth, &config.variants, &result.records);
    result.timings = timings(&config.variants, &result.records);
    Ok(result)
}

pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let banks = prefit_banks(config)?;
    run_study_with_banks(config, &banks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Rounds to `digits` decimals, sending exact ties to the even neighbour.
pub fn round_half_even(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    let s = x * scale;
    let r = s.round();
    let out = if (s - s.trunc()).abs() == 0.5 { 2.0 * (s / 2.0).round() } else { r };
    out / scale
}

fn fmt3(x: f64) -> String {
    let v = round_half_even(x, 3);
    // Avoid printing "-0.000".
    format!("{:.3}", if v == 0.0 { 0.0 } else { v })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt3)
}

const TABLE_COLUMNS: [&str; 6] = ["parameter", "variant", "n_design", "bias_pct", "rmse_pct", "coverage_pct"];

/// One row per (parameter, variant); fixed column order.
pub fn emit_table(result: &StudyResult, format: TableFormat) -> String {
    let cells = |r: &StudyRow| {
        [
            r.parameter.clone(),
            r.variant.to_string(),
            r.n_design.map_or_else(|| "NA".into(), |n| n.to_string()),
            fmt3(r.bias_pct),
            fmt3(r.rmse_pct),
            fmt_opt(r.coverage_pct),
        ]
    };
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_COLUMNS.join(","));
            out.push('\n');
            for r in &result.rows {
                out.push_str(&cells(r).join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
            for r in &result.rows {
                let _ = writeln!(out, "| {} |", cells(r).join(" | "));
            }
        }
    }
    out
}

/// Parses the CSV written by [`emit_table`].
pub fn parse_table(csv: &str) -> Result<Vec<StudyRow>> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?;
    if header.split(',').collect::<Vec<_>>() != TABLE_COLUMNS {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse(format!("line {line}: bad number `{s}`")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            let line = k + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != TABLE_COLUMNS.len() {
                return Err(Error::Parse(format!("line {line}: expected 6 fields")));
            }
            let n_design = match f[2] {
                "NA" => None,
                s => Some(s.parse().map_err(|_| Error::Parse(format!("line {line}: bad n_design `{s}`")))?),
            };
            Ok(StudyRow {
                parameter: f[0].to_string(),
                variant: f[1].parse()?,
                n_design,
                bias_pct: num(f[3], line)?,
                rmse_pct: num(f[4], line)?,
                coverage_pct: if f[5] == "NA" { None } else { Some(num(f[5], line)?) },
            })
        })
        .collect()
}

/// Parameters as rows, one column per variant, each cell `bias / RMSE / coverage`.
pub fn emit_wide_markdown(result: &StudyResult) -> String {
    let mut params: Vec<&str> = Vec::new();
    let mut cols: Vec<(VariantKind, Option<usize>)> = Vec::new();
    for r in &result.rows {
        if !params.contains(&r.parameter.as_str()) {
            params.push(&r.parameter);
        }
        if !cols.contains(&(r.variant, r.n_design)) {
            cols.push((r.variant, r.n_design));
        }
    }
    let mut out = String::from("| parameter |");
    for (v, n) in &cols {
        match n {
            Some(n) => {
                let _ = write!(out, " {v} n_D={n} |");
            }
            None => {
                let _ = write!(out, " {v} |");
            }
        }
    }
    out.push('\n');
    out.push_str(&"|---".repeat(cols.len() + 1));
    out.push_str("|\n");
    for p in params {
        let _ = write!(out, "| {p} |");
        for (v, n) in &cols {
            match result.rows.iter().find(|r| r.parameter == p && r.variant == *v && r.n_design == *n) {
                Some(r) => {
                    let _ = write!(out, " {} / {} / {} |", fmt3(r.bias_pct), fmt3(r.rmse_pct), fmt_opt(r.coverage_pct));
                }
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }
    out
}
