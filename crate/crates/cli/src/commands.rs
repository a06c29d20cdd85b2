use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rcgps_core::pipeline::GridInput;
use rcgps_core::simulation::{oracle_seed, sensitivity_ladder};
use rcgps_core::{
    balance_report, bootstrap_ate, oracle_ate, overlap_summary, read_csv, run_pipeline, run_replicates, Error,
    ExposureSource, GridRegionMap, PipelineConfig, PipelineInputs, PipelineOutput, Role, RoleMap, TabularDataset,
};

use crate::config::{load, resolve, EstimateConfig, GridConfig, Roles, SimulateConfig};
use crate::output::RunDir;

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_table(path: &Path) -> Result<TabularDataset> {
    read_csv(path).with_context(|| format!("reading {}", path.display()))
}

/// Tag the columns of `data` that appear in `wanted`; `required` ones must exist.
fn with_roles(
    data: TabularDataset,
    table: &str,
    wanted: &[(&str, Role, bool)],
) -> Result<TabularDataset> {
    let mut roles = RoleMap::new();
    for &(column, role, required) in wanted {
        if data.has_column(column) {
            roles.assign(column, role);
        } else if required {
            return Err(Error::Schema(format!(
                "{table} has no column '{column}' (needed as {})",
                role_label(role)
            ))
            .into());
        }
    }
    Ok(data.with_roles(roles)?)
}

fn role_label(role: Role) -> &'static str {
    match role {
        Role::Outcome => "outcome",
        Role::TrueExposure => "true exposure",
        Role::ErrorProneExposure => "error-prone exposure",
        Role::CategoricalExposure => "categorical exposure",
        Role::Confounder => "confounder",
        Role::CalibrationCovariate => "calibration covariate",
        Role::Offset => "offset",
        Role::Stratum => "stratum",
        Role::RegionId => "region id",
        Role::Weight => "weight",
    }
}

/// Exposure-bearing columns for a table that supplies the exposure directly.
fn exposure_roles(roles: &Roles, source: ExposureSource) -> Result<Vec<(&str, Role, bool)>> {
    let need = |c: &Option<String>, what: &str| -> Result<String> {
        c.clone()
            .ok_or_else(|| Error::Schema(format!("roles.{what} is required for exposure '{source:?}'")).into())
    };
    let mut out = Vec::new();
    match source {
        ExposureSource::ErrorFree => {
            need(&roles.true_exposure, "true_exposure")?;
            out.push((roles.true_exposure.as_deref().unwrap(), Role::TrueExposure, true));
        }
        _ => {
            need(&roles.error_prone_exposure, "error_prone_exposure")?;
            out.push((roles.error_prone_exposure.as_deref().unwrap(), Role::ErrorProneExposure, true));
        }
    }
    if source == ExposureSource::RcWithCovariates {
        out.extend(roles.calibration_covariates.iter().map(|c| (c.as_str(), Role::CalibrationCovariate, true)));
    }
    Ok(out)
}

struct Inputs {
    main: TabularDataset,
    validation: Option<TabularDataset>,
    grid: Option<(TabularDataset, GridRegionMap)>,
}

fn load_inputs(cfg: &EstimateConfig, base: &Path) -> Result<Inputs> {
    let r = &cfg.roles;
    let main_path = resolve(base, &cfg.main);
    let mut wanted: Vec<(&str, Role, bool)> = vec![(r.outcome.as_str(), Role::Outcome, true)];
    let exposure = exposure_roles(r, cfg.exposure)?;
    match &cfg.grid {
        None => wanted.extend(exposure.iter().copied()),
        Some(_) => {
            let region = r
                .region_id
                .as_deref()
                .ok_or_else(|| Error::Schema("roles.region_id is required with a grid".into()))?;
            wanted.push((region, Role::RegionId, true));
        }
    }
    wanted.extend(r.confounders.iter().map(|c| (c.as_str(), Role::Confounder, true)));
    if let Some(spec) = &cfg.outcome_model {
        if let Some(c) = &spec.offset {
            wanted.push((c.as_str(), Role::Offset, true));
        }
        if let Some(c) = &spec.stratum {
            wanted.push((c.as_str(), Role::Stratum, true));
        }
    }
    let main = with_roles(read_table(&main_path)?, &format!("main study {}", main_path.display()), &wanted)?;

    let calibrated = matches!(cfg.exposure, ExposureSource::RcNoCovariates | ExposureSource::RcWithCovariates);
    let validation = match (&cfg.validation, calibrated) {
        (Some(p), true) => {
            let p = resolve(base, p);
            let mut v: Vec<(&str, Role, bool)> = Vec::new();
            let x = r
                .true_exposure
                .as_deref()
                .ok_or_else(|| Error::Schema("roles.true_exposure is required for calibration".into()))?;
            v.push((x, Role::TrueExposure, true));
            v.extend(exposure.iter().copied());
            Some(with_roles(read_table(&p)?, &format!("validation study {}", p.display()), &v)?)
        }
        (None, true) => {
            return Err(Error::Schema(format!("exposure '{:?}' needs a validation study", cfg.exposure)).into())
        }
        _ => None,
    };

    let grid = match &cfg.grid {
        None => None,
        Some(g) => Some(load_grid(g, base, &exposure)?),
    };
    Ok(Inputs { main, validation, grid })
}

fn load_grid(g: &GridConfig, base: &Path, exposure: &[(&str, Role, bool)]) -> Result<(TabularDataset, GridRegionMap)> {
    let p = resolve(base, &g.path);
    let mut wanted = vec![(g.grid_id.as_str(), Role::RegionId, true)];
    wanted.extend(exposure.iter().copied());
    let grid = with_roles(read_table(&p)?, &format!("grid table {}", p.display()), &wanted)?;
    let mp = resolve(base, &g.map);
    let links = read_table(&mp)?;
    let col = |c: &str| {
        links
            .column(c)
            .with_context(|| format!("grid map {} has no column '{c}'", mp.display()))
    };
    let map = GridRegionMap::from_columns(col(&g.map_region)?, col(&g.map_grid)?, col(&g.map_weight)?)?;
    Ok((grid, map))
}

fn pipeline_config(cfg: &EstimateConfig) -> PipelineConfig {
    PipelineConfig {
        cutoffs: cfg.cutoffs.clone(),
        exposure: cfg.exposure,
        method: cfg.method,
        estimator: cfg.estimator,
        gps: cfg.gps,
        trim: cfg.trim,
        scales: cfg.scales.clone(),
        outcome_model: cfg.outcome_model.clone(),
    }
}

fn write_diagnostics(run: &mut RunDir, cfg: &EstimateConfig, out: &PipelineOutput) -> Result<()> {
    let n = cfg.cutoffs.n_categories();
    let columns: Vec<Vec<f64>> = (0..out.confounders.ncols())
        .map(|j| out.confounders.column(j).iter().copied().collect())
        .collect();
    let covariates: Vec<(&str, &[f64])> = out
        .confounder_names
        .iter()
        .map(String::as_str)
        .zip(columns.iter().map(Vec::as_slice))
        .collect();
    let balance = balance_report(
        &covariates,
        &out.xc,
        n,
        cfg.method,
        &out.estimator.design,
        out.kept_fraction,
        cfg.balance.sd_denominator,
    )?;
    run.write_with("balance.csv", |w| Ok(balance.write_csv(w)?))?;
    run.write_json("balance.json", &balance)?;

    let overlap = overlap_summary(&out.gps_all, &out.xc_all, cfg.balance.histogram_bins)?;
    run.write_with("overlap_histogram.csv", |w| Ok(overlap.write_histogram_csv(w)?))?;
    run.write_with("overlap_ranges.csv", |w| Ok(overlap.write_ranges_csv(w)?))?;
    run.write_json("overlap.json", &overlap)?;

    let mut kept = vec![false; out.xc_all.len()];
    for &j in &out.kept {
        kept[j] = true;
    }
    run.write_with("gps.csv", |w| {
        write!(w, "row,category,kept")?;
        for x in 1..=n {
            write!(w, ",gps_{x}")?;
        }
        writeln!(w)?;
        for (j, &x) in out.xc_all.iter().enumerate() {
            write!(w, "{},{x},{}", j + 1, kept[j] as u8)?;
            for p in out.gps_all.row(j) {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    run.write_json("gps_model.json", &out.gps_model)?;
    if let Some(rc) = &out.rc {
        run.write_json("rc_model.json", rc)?;
    }
    Ok(())
}

/// `estimate` and `diagnose`; the latter skips effect estimation outputs.
pub fn estimate(config: &Path, seed: Option<u64>, diagnose_only: bool) -> Result<PathBuf> {
    let command = if diagnose_only { "diagnose" } else { "estimate" };
    let mut cfg: EstimateConfig = load(config)?;
    if let (Some(s), Some(b)) = (seed, cfg.bootstrap.as_mut()) {
        b.seed = s;
    }
    let base = base_dir(config);
    let data = load_inputs(&cfg, &base)?;
    let pc = pipeline_config(&cfg);
    let inputs = PipelineInputs {
        main: &data.main,
        validation: data.validation.as_ref(),
        grid: data.grid.as_ref().map(|(grid, map)| GridInput { grid, map }),
    };
    let out = run_pipeline(&pc, inputs)?;

    let mut run = RunDir::create(&resolve(&base, &cfg.output_dir), command, &cfg)?;
    write_diagnostics(&mut run, &cfg, &out)?;
    if !diagnose_only {
        let table = match &cfg.bootstrap {
            Some(b) => {
                let res = bootstrap_ate(&pc, inputs, &out.ate, b)?;
                if !res.failures.is_empty() {
                    eprintln!("warning: {} bootstrap replicate(s) failed and were skipped", res.failures.len());
                }
                res.table
            }
            None => out.ate.clone(),
        };
        run.write_with("ate.csv", |w| Ok(table.write_csv(w)?))?;
        run.write_json("ate.json", &table)?;
        run.write_json("potential_outcomes.json", &out.estimator.estimates)?;
        if let Some(m) = &out.outcome {
            run.write_json("outcome_model.json", m)?;
        }
    }
    for w in &out.estimator.estimates.auxiliary.warnings {
        eprintln!("warning: {w}");
    }
    run.finish(command, cfg.bootstrap.as_ref().map(|b| b.seed), &cfg)
}

pub fn simulate(config: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let mut cfg: SimulateConfig = load(config)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    cfg.scenario.validate()?;
    let base = base_dir(config);

    let oracle = oracle_ate(&cfg.scenario, cfg.oracle_n, oracle_seed(cfg.scenario.seed))?;
    let summary = run_replicates(&cfg.scenario, &cfg.study, &oracle)?;
    let ladder = match &cfg.sensitivity {
        Some(s) => Some(sensitivity_ladder(&cfg.scenario, s.method, &s.deltas, &cfg.study)?),
        None => None,
    };

    let mut run = RunDir::create(&resolve(&base, &cfg.output_dir), "simulate", &cfg)?;
    run.write_json("oracle.json", &oracle)?;
    run.write_with("summary.csv", |w| Ok(summary.write_csv(w)?))?;
    run.write_json("summary.json", &summary.rows)?;
    if cfg.archive_replicates {
        run.write_json("replicates.json", &summary.records)?;
    }
    if let Some(rows) = &ladder {
        run.write_with("sensitivity.csv", |w| {
            writeln!(w, "delta,x_prime,x,mean,sd,mc_se,n_ok")?;
            for r in rows {
                writeln!(w, "{},{},{},{},{},{},{}", r.delta, r.x_prime, r.x, r.mean, r.sd, r.mc_se, r.n_ok)?;
            }
            Ok(())
        })?;
    }
    run.finish("simulate", Some(cfg.scenario.seed), &cfg)
}
