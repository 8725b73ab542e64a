use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use metasaem::emulator::BankTimeReport;
use metasaem::rng::{derive_seed, tag};
use metasaem::study::{emit_wide_markdown, prefit_banks, run_study_with_banks, simulate_with, StudyConfig};
use metasaem::{
    covering_distance, emit_table, lhs_design, run_saem, Dataset, Design, EmulatorBank, ModelVariant, TableFormat,
    VariantKind, VariantSpec,
};
use serde::Serialize;

use crate::config::{self, Resolved};
use crate::error::CliError;

/// Grid points per axis for the covering-distance estimate in emulator reports.
const COVERING_RESOLUTION: usize = 30;

#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub dry_run: bool,
    pub out_dir: Option<PathBuf>,
}

pub struct Context {
    pub resolved: Resolved,
    pub out_dir: PathBuf,
    pub dry_run: bool,
}

impl Context {
    pub fn load(g: &Globals) -> Result<Self, CliError> {
        let mut raw = config::load(&g.config)?;
        if let Some(seed) = g.seed {
            raw.seed = seed;
        }
        let resolved = raw.resolve()?;
        let out_dir = g
            .out_dir
            .clone()
            .or_else(|| resolved.io.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { resolved, out_dir, dry_run: g.dry_run })
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    /// Timings and timestamps go to a sidecar log so primary outputs stay reproducible.
    fn write_log(&self, command: &str, started: Instant, lines: &[String]) -> Result<(), CliError> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = format!("command = {command}\nfinished_unix = {stamp}\nwall_secs = {:.3}\n", started.elapsed().as_secs_f64());
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        self.write(&format!("{command}.log"), &text)?;
        Ok(())
    }
}

fn design_for(r: &Resolved) -> Result<Design, CliError> {
    Ok(match &r.design_points {
        Some(points) => Design::from_points(r.bounds.clone(), points.clone(), r.seed)?,
        None => lhs_design(&r.bounds, r.n_design, derive_seed(r.seed, &[tag::DESIGN, r.n_design as u64]))?,
    })
}

pub fn simulate(g: &Globals) -> Result<(), CliError> {
    let started = Instant::now();
    let ctx = Context::load(g)?;
    let r = &ctx.resolved;
    if ctx.dry_run {
        println!(
            "simulate: {:?} scenario, {} individuals x {} times, seed {} -> {}",
            r.scenario.kind,
            r.n_individuals,
            r.scenario.times.len(),
            r.seed,
            ctx.path("data.csv").display()
        );
        return Ok(());
    }
    ctx.prepare_out()?;
    let sim = simulate_with(&r.scenario, &r.scenario.times, &r.truth, r.n_individuals, derive_seed(r.seed, &[tag::SIMULATE]))?;
    let p = ctx.write("data.csv", &sim.data.to_csv())?;
    ctx.write_log("simulate", started, &[format!("redraws = {}", sim.redraws)])?;
    eprintln!("wrote {} ({} observations)", p.display(), sim.data.n_tot());
    Ok(())
}

#[derive(Serialize)]
struct EmulateReport<'a> {
    n_design: usize,
    solver_calls: usize,
    covering_distance: f64,
    times: &'a [BankTimeReport],
}

pub fn emulate(g: &Globals) -> Result<(), CliError> {
    let started = Instant::now();
    let ctx = Context::load(g)?;
    let r = &ctx.resolved;
    if ctx.dry_run {
        let n = r.design_points.as_ref().map_or(r.n_design, Vec::len);
        println!(
            "emulate: {:?} scenario, {n} design points, {} emulators ({:?} regressors) -> {}",
            r.scenario.kind,
            r.scenario.times.len(),
            r.emulator.regressors,
            ctx.path("bank.json").display()
        );
        return Ok(());
    }
    ctx.prepare_out()?;
    let design = design_for(r)?;
    let bank = EmulatorBank::fit(&r.scenario, &r.scenario.times, &design, &r.emulator)?;
    let times = bank.report();
    let cover = covering_distance(&design, COVERING_RESOLUTION)?;
    ctx.write("bank.json", &serde_json::to_string(&bank.to_file()).map_err(metasaem::Error::from)?)?;
    let mut csv = String::from("time,sigma2,phi,loo_rmse,solver_calls\n");
    for t in &times {
        let _ = writeln!(csv, "{},{},{},{},{}", t.time, t.sigma2, t.phi, t.loo_rmse, t.solver_calls);
    }
    ctx.write("emulator_report.csv", &csv)?;
    let report = EmulateReport { n_design: design.len(), solver_calls: bank.solver_calls(), covering_distance: cover, times: &times };
    ctx.write("emulator_report.json", &serde_json::to_string_pretty(&report).map_err(metasaem::Error::from)?)?;
    ctx.write_log("emulate", started, &[])?;
    eprintln!(
        "fitted {} emulators on {} points ({} solver calls per time), covering distance {cover:.4}",
        times.len(),
        design.len(),
        bank.solver_calls()
    );
    Ok(())
}

pub fn fit(g: &Globals, data: Option<PathBuf>, variant: VariantKind, bank: Option<PathBuf>) -> Result<(), CliError> {
    let started = Instant::now();
    let ctx = Context::load(g)?;
    let r = &ctx.resolved;
    let data_path = data.or_else(|| r.io.data.clone()).ok_or_else(|| {
        CliError::Usage("no dataset: pass --data <file.csv> or set io.data (create one with `metasaem simulate`)".into())
    })?;
    let bank_path = bank.or_else(|| r.io.bank.clone());
    if variant.uses_emulator() && bank_path.is_none() {
        return Err(CliError::Usage(format!(
            "variant `{variant}` needs an emulator bank: pass --bank <bank.json> or set io.bank (create one with `metasaem emulate`)"
        )));
    }
    let dataset = read_dataset(&data_path)?;
    if variant == VariantKind::Complete {
        eprintln!(
            "warning: the complete variant works with the joint {n}x{n} emulator covariance of all {} individuals; expect a much slower fit",
            dataset.len(),
            n = dataset.n_tot()
        );
    }
    if ctx.dry_run {
        println!(
            "fit: {variant} variant, {} individuals / {} observations, {} SAEM iterations x {} transitions, seed {}",
            dataset.len(),
            dataset.n_tot(),
            r.saem.k_iters,
            r.saem.m_mcmc,
            r.saem.seed
        );
        return Ok(());
    }
    let bank = match &bank_path {
        Some(p) if variant.uses_emulator() => Some(read_bank(p)?),
        _ => None,
    };
    let model_variant = match &bank {
        Some(b) => ModelVariant::with_kind(b, variant)?,
        None => ModelVariant::Exact(&r.scenario),
    };
    ctx.prepare_out()?;
    let report = run_saem(model_variant, &dataset, &r.saem, &r.init)?;
    ctx.write(&format!("fit_{variant}.json"), &report.to_json()?)?;
    ctx.write(&format!("trajectory_{variant}.csv"), &report.trajectory_csv())?;
    ctx.write_log(
        &format!("fit_{variant}"),
        started,
        &[format!("saem_wall_secs = {:.3}", report.wall_time.as_secs_f64())],
    )?;
    for (k, name) in report.parameter_names.iter().enumerate() {
        let se = report.std_errors[k].map_or_else(|| "NA".to_string(), |s| format!("{s:.4}"));
        println!("{name:>10} = {:>10.4}  (se {se})", report.estimates[k]);
    }
    eprintln!("acceptance rate {:.3}", report.diagnostics.acceptance_rate);
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", path.display())))?;
    Ok(Dataset::from_csv(&text)?)
}

fn read_bank(path: &Path) -> Result<EmulatorBank, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read bank {}: {e}", path.display())))?;
    let file: metasaem::emulator::BankFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not a bank file: {e}", path.display())))?;
    Ok(EmulatorBank::from_file(file)?)
}

/// Parses `kind` or `kind:n_design`.
pub fn parse_variant_spec(s: &str) -> Result<VariantSpec, CliError> {
    let mut parts = s.trim().splitn(2, ':');
    let kind: VariantKind = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|e: metasaem::Error| CliError::Usage(e.to_string()))?;
    match (kind, parts.next()) {
        (VariantKind::Exact, None) => Ok(VariantSpec::exact()),
        (VariantKind::Exact, Some(_)) => Err(CliError::Usage("`exact` takes no design size".into())),
        (k, Some(n)) => n
            .parse()
            .map(|n| VariantSpec::meta(k, n))
            .map_err(|_| CliError::Usage(format!("bad design size in `{s}`"))),
        (k, None) => Err(CliError::Usage(format!("`{k}` needs a design size, e.g. `{k}:100`"))),
    }
}

pub fn bench(g: &Globals, replications: Option<usize>, variants: Option<Vec<VariantSpec>>) -> Result<(), CliError> {
    let started = Instant::now();
    let ctx = Context::load(g)?;
    let r = &ctx.resolved;
    let study = r.study.as_ref();
    let replications = replications.or(study.map(|s| s.replications)).ok_or_else(|| {
        CliError::Usage("no replication count: pass --replications or set study.replications".into())
    })?;
    if replications == 0 {
        return Err(CliError::Usage("--replications must be at least 1".into()));
    }
    let variants = variants.or_else(|| study.map(|s| s.variants.clone())).ok_or_else(|| {
        CliError::Usage("no variants: pass --variants (e.g. exact,simple:100) or set study.variants".into())
    })?;
    let cfg = StudyConfig {
        scenario: r.scenario.clone(),
        truth: r.truth.clone(),
        init: r.init.clone(),
        bounds: r.bounds.clone(),
        n_individuals: r.n_individuals,
        replications,
        variants,
        saem: r.saem.clone(),
        emulator: r.emulator,
        seed: r.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid study: {e}")))?;
    if ctx.dry_run {
        println!("bench plan:");
        println!("  scenario      {:?} (dose {}, {} times)", cfg.scenario.kind, cfg.scenario.dose, cfg.scenario.times.len());
        println!("  individuals   {}", cfg.n_individuals);
        println!("  replications  {}", cfg.replications);
        println!("  saem          {} iterations ({} burn-in), {} transitions each", cfg.saem.k_iters, cfg.saem.burn_in, cfg.saem.m_mcmc);
        println!("  designs       {:?} (prefit once)", cfg.design_sizes());
        for v in &cfg.variants {
            println!("  variant       {}", v.label());
        }
        println!("  fits          {}", cfg.replications * cfg.variants.len());
        println!("  outputs       study.csv, study.md, study.json in {}", ctx.out_dir.display());
        return Ok(());
    }
    ctx.prepare_out()?;
    let banks = prefit_banks(&cfg)?;
    let result = run_study_with_banks(&cfg, &banks)?;
    ctx.write("study.csv", &emit_table(&result, TableFormat::Csv))?;
    let md = format!(
        "{}\nCells: relative bias (%) / relative RMSE (%) / coverage (%).\n\n{}",
        emit_wide_markdown(&result),
        emit_table(&result, TableFormat::Markdown)
    );
    ctx.write("study.md", &md)?;
    ctx.write("study.json", &result.to_json()?)?;
    let mut lines: Vec<String> = result
        .timings
        .iter()
        .map(|t| format!("timing {} fits={} mean_wall_secs={:.3} mean_secs_per_iter={:.5}", t.variant.label(), t.fits, t.mean_wall_secs, t.mean_secs_per_iter))
        .collect();
    lines.push(format!("failures = {}", result.failures.len()));
    ctx.write_log("bench", started, &lines)?;
    print!("{}", emit_wide_markdown(&result));
    if !result.failures.is_empty() {
        eprintln!("{} fits failed and were excluded (see study.json)", result.failures.len());
    }
    Ok(())
}
