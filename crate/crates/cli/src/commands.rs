use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use spatial_bias::bias::{si_bias, si_bias_with_intercept, BiasRecord, Metric};
use spatial_bias::dgp::{DataSet, ModelSpec, Terms};
use spatial_bias::estimate::{Estimator, FitResult, MlOptions, DEFAULT_LEVEL};
use spatial_bias::geo::{distance_matrix, sample_locations, Bounds, DistanceMatrix};
use spatial_bias::linalg::Cholesky;
use spatial_bias::montecarlo::{run_grid, scenario_grid_named};
use spatial_bias::weights::{WeightConfig, WeightMatrix};
use spatial_bias::{Error, Seed};

use crate::application::application_pipeline;
use crate::config::{error_spec, RunConfig};
use crate::emit::{emit_tables, read_report, Format, Report};
use crate::error::{CliError, CliResult};
use crate::ingest::{read_spatial_csv, ColumnMap};

/// What `simulate` records next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub spec: ModelSpec,
    pub seed: u64,
    pub n: usize,
    pub side: f64,
}

fn write_file(path: PathBuf, bytes: &[u8]) -> CliResult<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })?;
    }
    fs::write(&path, bytes).map_err(|source| CliError::File { path: path.clone(), source })?;
    Ok(path)
}

fn distances(data: &DataSet, geodesic: bool) -> CliResult<DistanceMatrix> {
    Ok(if geodesic { DistanceMatrix::haversine(&data.loc)? } else { distance_matrix(&data.loc)? })
}

fn load(cfg: &RunConfig, columns: &ColumnMap) -> CliResult<DataSet> {
    let ingested = read_spatial_csv(cfg.input()?, columns)?;
    log::info!("read {} rows ({} dropped, {} jittered)", ingested.data.n(), ingested.dropped, ingested.jittered);
    Ok(ingested.data)
}

/// `data.csv` and `spec.json` from the `[simulate]` model.
pub fn simulate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let seed = cfg.require_seed("simulate")?;
    let sim = &cfg.simulate;
    let spec = sim.model_spec()?;
    let loc = sample_locations(sim.n, Bounds::square(0.0, sim.side)?, Seed(seed).derive("locations"))?;
    let data = spatial_bias::dgp::generate(&spec, &loc, Seed(seed).derive("data"))?;
    let mut csv = Vec::new();
    data.write_csv(&mut csv)?;
    let record = SimulationRecord { spec, seed, n: sim.n, side: sim.side };
    let dir = cfg.output_dir();
    Ok(vec![
        write_file(dir.join("data.csv"), &csv)?,
        write_file(dir.join("spec.json"), (serde_json::to_string_pretty(&record)? + "\n").as_bytes())?,
    ])
}

/// `weights.csv`: the dense weight grid on the input locations.
pub fn weights(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load(cfg, &cfg.data.column_map())?;
    let scheme: WeightConfig = cfg.weights.scheme.parse()?;
    let w = scheme.build(&distances(&data, cfg.data.geodesic.unwrap_or(false))?)?;
    if !w.isolated().is_empty() {
        log::warn!("{} unit(s) have no neighbours under {scheme}", w.isolated().len());
    }
    let mut buf = Vec::new();
    w.write_csv(&mut buf)?;
    Ok(vec![write_file(cfg.output_dir().join("weights.csv"), &buf)?])
}

/// Interference bias of the treatment slope for the observed treatment.
pub fn bias_record(cfg: &RunConfig, data: &DataSet) -> CliResult<BiasRecord> {
    let b = &cfg.bias;
    let scheme: WeightConfig = b.weights.parse()?;
    let d = distances(data, cfg.data.geodesic.unwrap_or(false))?;
    let psi = scheme.build(&d)?;
    let omega = b.error_range.map(|r| error_spec(Some(r), b.error_variance).matrix(&d)).transpose()?;
    let metric = Metric::from_covariance(omega.as_ref())?;
    let (formula, value) = if b.intercept {
        ("si_bias_with_intercept", si_bias_with_intercept(&data.a, &psi, b.beta_at, &metric)?)
    } else {
        ("si_bias", si_bias(&data.a, &psi, b.beta_at, &metric)?)
    };
    let psi_values: Vec<f64> = psi.matrix().iter().copied().collect();
    let omega_values: Vec<f64> = omega.map(|m| m.iter().copied().collect()).unwrap_or_default();
    Ok(BiasRecord::new(formula, &[&data.a, &psi_values, &omega_values, &[b.beta_at]], value))
}

pub fn bias(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load(cfg, &cfg.data.column_map())?;
    let record = bias_record(cfg, &data)?;
    log::info!("{} = {}", record.formula, record.value);
    Ok(vec![write_file(cfg.output_dir().join("bias.json"), (record.to_json()? + "\n").as_bytes())?])
}

fn with_lags(mut data: DataSet, terms: &Terms, w: &WeightMatrix) -> CliResult<DataSet> {
    if terms.interference {
        data.a_tilde = Some(w.apply(&data.a)?);
    }
    if terms.indirect {
        let u = data.u.as_ref().ok_or_else(|| CliError::config("ISC term needs a confounder column"))?;
        data.u_tilde = Some(w.apply(u)?);
    }
    Ok(data)
}

/// Fit one model to the input data.
pub fn fit_model(cfg: &RunConfig, data: DataSet) -> CliResult<FitResult> {
    let f = &cfg.fit;
    let terms: Terms = f.model.parse()?;
    if terms.needs_confounder() && data.u.is_none() {
        return Err(CliError::config(format!("model {terms} needs a confounder column (--col-confounder)")));
    }
    let d = distances(&data, cfg.data.geodesic.unwrap_or(false))?;
    let w = f.weights.parse::<WeightConfig>()?.build(&d)?;
    let data = with_lags(data, &terms, &w)?;
    let design = data.design_matrix(&terms, false)?;
    Ok(match f.estimator()? {
        Estimator::Ols => design.ols(&data.y, DEFAULT_LEVEL)?,
        Estimator::GlsKnown => {
            let omega = error_spec(f.error_range, f.error_variance).matrix(&d)?;
            design.gls(&data.y, &Cholesky::new(&omega)?, DEFAULT_LEVEL)?
        }
        Estimator::GlsMl => design.ml(&data.y, &d, &MlOptions::default())?,
    })
}

pub fn fit(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = load(cfg, &cfg.data.column_map())?;
    let result = fit_model(cfg, data)?;
    Ok(vec![write_file(cfg.output_dir().join("fit.json"), (result.to_json()? + "\n").as_bytes())?])
}

/// The Monte Carlo report of one table, optionally narrowed by a cell-id filter.
pub fn experiment_report(cfg: &RunConfig) -> CliResult<Report> {
    let seed = cfg.require_seed("experiment")?;
    let e = &cfg.experiment;
    let table = e.table.as_deref().ok_or_else(|| CliError::config("no table (--table or [experiment] table)"))?;
    let mut cells = scenario_grid_named(table, Seed(seed))?;
    if let Some(filter) = &e.filter {
        cells.retain(|c| c.id().contains(filter.as_str()));
        if cells.is_empty() {
            return Err(Error::InvalidArgument(format!("no {table} cell matches {filter:?}")).into());
        }
    }
    let estimator = e.estimator.as_deref().map(str::parse::<Estimator>).transpose()?;
    for cell in &mut cells {
        if let Some(r) = cfg.replicates {
            cell.replicates = r;
        }
        if let Some(est) = estimator {
            cell.estimator = est;
        }
        if let Some(b) = e.redraw_treatment {
            cell.redraw_treatment = b;
        }
        if let Some(b) = e.redraw_locations {
            cell.redraw_locations = b;
        }
        cell.validate()?;
    }
    log::info!("running {} cell(s)", cells.len());
    Ok(Report::Experiment { summaries: run_grid(&cells)? })
}

pub fn experiment(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    emit_tables(&experiment_report(cfg)?, &cfg.output_dir(), &Format::ALL)
}

/// Re-render a saved `results.json`.
pub fn tables(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let report = read_report(cfg.input()?)?;
    emit_tables(&report, &cfg.output_dir(), &[Format::Csv, Format::Markdown])
}

pub fn apply_report(cfg: &RunConfig) -> CliResult<Report> {
    let mut columns = cfg.data.column_map();
    if columns.confounder.is_none() {
        columns.confounder = Some("U".into());
    }
    let data = load(cfg, &columns)?;
    let table =
        application_pipeline(&data, &cfg.apply.schemes()?, cfg.data.geodesic.unwrap_or(false), &MlOptions::default())?;
    Ok(Report::Application(table))
}

pub fn apply(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    emit_tables(&apply_report(cfg)?, &cfg.output_dir(), &Format::ALL)
}
