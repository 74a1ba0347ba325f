use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pln_core::sim::{run_coverage_experiment, CoverageReport};
use pln_core::{
    fisher_variance, fit_from, generate_scenario, init_params, sample_counts, sandwich_variance, FitConfig, Rho,
    ScenarioConfig, VarianceReport,
};
use serde::Serialize;

use crate::artifact::FitArtifact;
use crate::io::{
    format_table, interval_row, numbered, parse_dataset, read_bytes, CellKind, DatasetFiles, NamedDataset,
};
use crate::manifest::{sidecar_path, RunManifest};
use crate::{CoverageArgs, FitArgs, MethodArg, ScenarioArgs, SimulateArgs, VarianceArgs};

pub enum Status {
    Done,
    NotConverged,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes `contents` to `path` and the manifest to its sidecar.
fn write_with_manifest(path: &Path, contents: &str, manifest: &RunManifest) -> Result<()> {
    write_file(path, contents)?;
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&sidecar_path(path), &json)
}

fn record_dataset(manifest: &mut RunManifest, files: &DatasetFiles) {
    manifest.add_input("counts", &files.counts.0, &files.counts.1);
    manifest.add_input("covariates", &files.covariates.0, &files.covariates.1);
    if let Some((path, bytes)) = &files.offsets {
        manifest.add_input("offsets", path, bytes);
    }
}

#[derive(Serialize)]
struct FitSettings {
    tol: f64,
    max_iters: usize,
    warm_start: bool,
}

pub fn fit(args: FitArgs) -> Result<Status> {
    let started = Instant::now();
    let files = DatasetFiles::read(&args.data.counts, &args.data.covariates, args.data.offsets.as_deref())?;
    let NamedDataset { data, variables, covariates } = parse_dataset(&files)?;
    let defaults = FitConfig::default();
    let cfg = FitConfig {
        outer_tol: args.tol.unwrap_or(defaults.outer_tol),
        max_outer_iters: args.max_iters.unwrap_or(defaults.max_outer_iters),
        ..defaults
    };
    cfg.validate()?;
    let settings =
        FitSettings { tol: cfg.outer_tol, max_iters: cfg.max_outer_iters, warm_start: args.warm_start.is_some() };
    let mut manifest = RunManifest::new("fit", &settings, None);
    record_dataset(&mut manifest, &files);

    let (theta, vpar) = match &args.warm_start {
        None => init_params(&data)?,
        Some(path) => {
            let bytes = read_bytes(path)?;
            manifest.add_input("warm_start", path, &bytes);
            let previous = FitArtifact::read(path)?;
            let theta = previous.model_params()?;
            let vpar = previous.variational_params()?;
            if (theta.m(), theta.p(), vpar.n()) != (data.m(), data.p(), data.n()) {
                bail!(
                    "warm start {} has m={}, p={}, n={} but the data have m={}, p={}, n={}",
                    path.display(),
                    theta.m(),
                    theta.p(),
                    vpar.n(),
                    data.m(),
                    data.p(),
                    data.n()
                );
            }
            (theta, vpar)
        }
    };
    let result = fit_from(&data, &cfg, theta, &vpar)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    let artifact = FitArtifact::new(&result, covariates, variables, manifest.finish(started));
    write_file(&args.out, &artifact.to_json())?;
    eprintln!(
        "fit: n={} p={} m={} iterations={} converged={} elbo={:.10e}",
        data.n(),
        data.p(),
        data.m(),
        result.iterations,
        result.converged,
        result.final_elbo()
    );
    Ok(if result.converged { Status::Done } else { Status::NotConverged })
}

#[derive(Serialize)]
struct VarianceSettings {
    method: &'static str,
    level: f64,
}

/// Resolves the dataset either from explicit paths or from the fit manifest,
/// in which case the files must still match their recorded digests.
fn variance_inputs(args: &VarianceArgs, fitted: &FitArtifact) -> Result<DatasetFiles> {
    if let (Some(counts), Some(covariates)) = (&args.counts, &args.covariates) {
        return Ok(DatasetFiles::read(counts, covariates, args.offsets.as_deref())?);
    }
    let recorded = |role: &str| fitted.manifest.input(role);
    let path_of = |role: &str| -> Result<PathBuf> {
        recorded(role)
            .map(|d| d.path.clone())
            .with_context(|| format!("fit manifest records no {role} file; pass --counts and --covariates"))
    };
    let offsets = recorded("offsets").map(|d| d.path.clone());
    let files = DatasetFiles::read(&path_of("counts")?, &path_of("covariates")?, offsets.as_deref())?;
    let mut check = RunManifest::new("check", &(), None);
    record_dataset(&mut check, &files);
    for digest in &check.inputs {
        if recorded(&digest.role).map(|d| &d.sha256) != Some(&digest.sha256) {
            bail!("{} changed since the fit (digest mismatch)", digest.path.display());
        }
    }
    Ok(files)
}

pub fn variance(args: VarianceArgs) -> Result<Status> {
    let started = Instant::now();
    let fit_bytes = read_bytes(&args.fit)?;
    let fitted = FitArtifact::read(&args.fit)?;
    let files = variance_inputs(&args, &fitted)?;
    let NamedDataset { data, variables, covariates } = parse_dataset(&files)?;
    let theta = fitted.model_params()?;
    let vpar = fitted.variational_params()?;
    if (theta.m(), theta.p(), vpar.n()) != (data.m(), data.p(), data.n()) {
        bail!(
            "fit has m={}, p={}, n={} but the data have m={}, p={}, n={}",
            theta.m(),
            theta.p(),
            vpar.n(),
            data.m(),
            data.p(),
            data.n()
        );
    }
    let methods: &[MethodArg] = match args.method {
        MethodArg::Both => &[MethodArg::Fisher, MethodArg::Sandwich],
        ref one => std::slice::from_ref(one),
    };
    let mut reports: Vec<VarianceReport> = Vec::new();
    for method in methods {
        let report = match method {
            MethodArg::Fisher => fisher_variance(&theta, &vpar, &data, args.level)?,
            _ => sandwich_variance(&theta, &vpar, &data, args.level)?,
        };
        for warning in report.warnings() {
            eprintln!("warning ({}): {warning}", report.method());
        }
        reports.push(report);
    }

    let mut table = String::from("covariate,variable,estimate,se,ci_low,ci_high,method\n");
    for report in &reports {
        let se = report.std_errors();
        for j in 0..data.p() {
            for k in 0..data.m() {
                let values =
                    [report.estimate()[(k, j)], se[(k, j)], report.ci_lower()[(k, j)], report.ci_upper()[(k, j)]];
                let _ = writeln!(
                    table,
                    "{}",
                    interval_row([&covariates[k], &variables[j]], values, report.method().as_str())
                );
            }
        }
    }
    let method = match args.method {
        MethodArg::Fisher => "fisher",
        MethodArg::Sandwich => "sandwich",
        MethodArg::Both => "both",
    };
    let mut manifest = RunManifest::new("variance", &VarianceSettings { method, level: args.level }, None);
    manifest.add_input("fit", &args.fit, &fit_bytes);
    record_dataset(&mut manifest, &files);
    write_with_manifest(&args.out, &table, &manifest.finish(started))?;
    eprintln!(
        "variance: {} intervals at level {} written to {}",
        reports.len() * data.m() * data.p(),
        args.level,
        args.out.display()
    );
    Ok(Status::Done)
}

impl ScenarioArgs {
    fn config(&self) -> ScenarioConfig {
        ScenarioConfig {
            rho: self.rho.map_or(Rho::Random, Rho::Fixed),
            ..ScenarioConfig::new(self.n, self.p, self.m, self.seed)
        }
    }
}

#[derive(Serialize)]
struct SimulateSettings {
    n: usize,
    p: usize,
    m: usize,
    rho: Rho,
}

pub fn simulate(args: SimulateArgs) -> Result<Status> {
    let started = Instant::now();
    let cfg = args.scenario.config();
    let scenario = generate_scenario(&cfg)?;
    let data = sample_counts(&scenario, cfg.seed)?;
    let settings = SimulateSettings { n: cfg.n, p: cfg.p, m: cfg.m, rho: cfg.rho };
    let manifest = RunManifest::new("simulate", &settings, Some(cfg.seed)).finish(started);
    let variables = numbered("y", cfg.p);
    let outputs = [
        ("B_star.csv", format_table(&variables, &scenario.b_star, CellKind::Real)),
        ("Sigma_star.csv", format_table(&variables, &scenario.sigma_star, CellKind::Real)),
        ("X.csv", format_table(&numbered("x", cfg.m), data.covariates(), CellKind::Real)),
        ("Y.csv", format_table(&variables, data.counts(), CellKind::Count)),
    ];
    for (name, contents) in &outputs {
        write_with_manifest(&args.out_dir.join(name), contents, &manifest)?;
    }
    eprintln!("simulate: rho={} files written to {}", scenario.rho, args.out_dir.display());
    Ok(Status::Done)
}

#[derive(Serialize)]
struct CoverageDocument<'a> {
    report: &'a CoverageReport,
    manifest: RunManifest,
}

pub fn coverage(args: CoverageArgs) -> Result<Status> {
    let started = Instant::now();
    let cfg = ScenarioConfig { replicates: args.replicates, level: args.level, ..args.scenario.config() };
    let report = run_coverage_experiment(&cfg)?;
    let manifest = RunManifest::new("coverage", &cfg, Some(cfg.seed)).finish(started);
    let mut json = serde_json::to_string_pretty(&CoverageDocument { report: &report, manifest })?;
    json.push('\n');
    write_file(&args.out, &json)?;
    let show = |c: Option<f64>| c.map_or_else(|| "n/a".to_owned(), |c| format!("{c:.4}"));
    eprintln!(
        "coverage: {} replicates ({} failed), sandwich {} fisher {}",
        report.replicates.len(),
        report.failures,
        show(report.sandwich.coverage),
        show(report.fisher.coverage)
    );
    Ok(Status::Done)
}
