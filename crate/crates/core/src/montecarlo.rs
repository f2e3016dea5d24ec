//! Seeded replicate studies over scenario grids.
//!
//! For each replicate a cell draws (or reuses) its locations, draws data, fits
//! the configured model and records the treatment estimate, its interval and
//! the closed-form bias evaluated on that replicate's treatment. Replicate `i`
//! of a cell uses the seed `base.derive(data_key).derive_index(i)`, so results
//! do not depend on scheduling, and cells sharing a `data_key` see identical
//! treatments and errors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{
    combined_bias_in, poisson_confounding_bias, si_bias, si_bias_with_intercept, DirectScParams, IndirectScParams,
    Metric,
};
use crate::dgp::{Coefficients, DataSet, Design, ExposureModel, Exposures, Generator, ModelSpec, Terms};
use crate::error::{Error, Result};
use crate::estimate::{Estimator, FitResult, MlOptions, DEFAULT_LEVEL};
use crate::geo::{
    sample_locations, Bounds, CovarianceSpec, FieldKind, GaussianPairSpec, Kernel, LatentField, LinkConstants,
};
use crate::linalg::{gram_cholesky, Cholesky};
use crate::rng::Seed;
use crate::weights::WeightConfig;

/// Largest tolerated share of failed replicates in a cell.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TableId {
    T1,
    T2,
    T3,
    T4,
    B1,
    B2,
}

impl TableId {
    pub const ALL: [TableId; 6] = [TableId::T1, TableId::T2, TableId::T3, TableId::T4, TableId::B1, TableId::B2];
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TableId::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown table id {s:?}; expected one of T1, T2, T3, T4, B1, B2")))
    }
}

/// Relative strength of the direct and interference effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub beta_a: f64,
    pub beta_at: f64,
}

impl Case {
    pub const STRONG_TREATMENT: Case = Case { beta_a: 8.0, beta_at: 2.0 };
    pub const STRONG_INTERFERENCE: Case = Case { beta_a: 3.0, beta_at: 9.0 };
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "βa={},βã={}", self.beta_a, self.beta_at)
    }
}

/// Descriptive coordinates of a cell, used for ids and table layout.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellLabels {
    pub table: String,
    pub setting: Option<String>,
    pub kind: Option<String>,
    pub case: Option<String>,
    pub scenario: Option<u8>,
    pub weights: Option<String>,
    pub model: Option<String>,
}

impl CellLabels {
    pub fn id(&self) -> String {
        let mut parts = vec![self.table.clone()];
        parts.extend(self.setting.clone());
        parts.extend(self.kind.clone());
        parts.extend(self.case.clone());
        parts.extend(self.scenario.map(|s| format!("S{s}")));
        parts.extend(self.weights.clone());
        parts.extend(self.model.clone());
        parts.join("/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub labels: CellLabels,
    pub generator: ModelSpec,
    pub fitted_terms: Terms,
    /// 1: generated with interference, fitted without; 2: with, with;
    /// 3: without, without; 4: without, with.
    pub scenario: Option<u8>,
    pub case: Option<Case>,
    pub weights: Option<WeightConfig>,
    pub n_locations: usize,
    pub bounds: Bounds,
    pub replicates: usize,
    pub base_seed: Seed,
    /// Cells with equal keys draw identical locations, treatments and errors.
    pub data_key: String,
    pub redraw_treatment: bool,
    /// Draw fresh locations for every replicate instead of once per cell.
    pub redraw_locations: bool,
    pub estimator: Estimator,
    pub ml: MlOptions,
    pub level: f64,
}

impl ExperimentConfig {
    pub fn id(&self) -> String {
        self.labels.id()
    }

    pub fn truth(&self) -> f64 {
        self.generator.coefficients.treatment
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid(format!("{}: replicates must be at least 1", self.id())));
        }
        self.generator.validate()?;
        if let Some(s) = self.scenario {
            let generated = self.generator.terms.interference;
            let fitted = self.fitted_terms.interference;
            let expected = match s {
                1 => (true, false),
                2 => (true, true),
                3 => (false, false),
                4 => (false, true),
                _ => return Err(Error::invalid(format!("scenario {s} is not one of 1, 2, 3, 4"))),
            };
            if (generated, fitted) != expected {
                return Err(Error::invalid(format!(
                    "{}: scenario {s} needs interference generated={} fitted={}, got {generated} and {fitted}",
                    self.id(),
                    expected.0,
                    expected.1
                )));
            }
        }
        if self.redraw_locations && !self.redraw_treatment {
            return Err(Error::invalid(format!("{}: a fixed treatment needs fixed locations", self.id())));
        }
        if self.fitted_terms.interference && self.generator.psi.is_none() {
            return Err(Error::invalid(format!("{}: fitting interference needs treatment weights", self.id())));
        }
        Ok(())
    }

    fn cell_seed(&self) -> Seed {
        self.base_seed.derive(&self.data_key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub analytical_bias: Option<f64>,
    /// Estimate after removing the known interference bias.
    pub corrected: Option<f64>,
    pub aic: f64,
    pub failure: Option<String>,
}

impl ReplicateRecord {
    fn failed(index: usize, err: &Error) -> Self {
        ReplicateRecord {
            index,
            estimate: f64::NAN,
            se: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            covered: false,
            analytical_bias: None,
            corrected: None,
            aic: f64::NAN,
            failure: Some(err.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cell: String,
    pub labels: CellLabels,
    pub truth: f64,
    pub replicates: usize,
    pub failed: usize,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    /// Monte Carlo standard error of `mean_bias`.
    pub mc_standard_error: f64,
    pub mean_analytical_bias: Option<f64>,
    /// Standard error of the mean per-replicate gap between empirical and analytical bias.
    pub analytical_gap_se: Option<f64>,
    pub mean_corrected: Option<f64>,
    pub redraw_treatment: bool,
    pub redraw_locations: bool,
    pub estimator: Estimator,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

/// `sqrt(s² + (mean - truth)²)` with the `N - 1` variance divisor.
pub fn rmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::invalid(format!("RMSE needs at least 2 estimates, got {}", estimates.len())));
    }
    let (mean, var) = mean_var(estimates);
    Ok((var + (mean - truth).powi(2)).sqrt())
}

/// Share of closed intervals `[lo, hi]` containing `truth`.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::invalid("coverage needs at least one interval"));
    }
    let hits = intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
    Ok(hits as f64 / intervals.len() as f64)
}

/// Sample mean and `N - 1` variance (zero variance for a single value).
fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// How the closed-form bias of a replicate is obtained.
#[derive(Debug, Clone)]
enum AnalyticPlan {
    Zero,
    Interference {
        beta_at: f64,
        intercept: bool,
    },
    Poisson(f64),
    Combined {
        beta_at: f64,
        direct: Box<DirectScParams>,
        indirect: Box<IndirectScParams>,
    },
    /// Regress the conditional mean of the omitted part on the fitted design.
    Projection(ConditionalMean),
    Unavailable,
}

#[derive(Debug, Clone)]
enum ConditionalMean {
    /// `E(U | A) = μ_u 1 + M (A - μ_a 1)`.
    Linear { m: DMatrix<f64>, mu_a: f64, mu_u: f64 },
    /// `E(U | A) = share · A`.
    Share(f64),
    /// `E(U | A) = E(U)`.
    Constant(f64),
}

impl ConditionalMean {
    fn apply(&self, a: &[f64]) -> Vec<f64> {
        match self {
            ConditionalMean::Linear { m, mu_a, mu_u } => {
                let c = DVector::from_iterator(a.len(), a.iter().map(|v| v - mu_a));
                (m * c).iter().map(|v| v + mu_u).collect()
            }
            ConditionalMean::Share(s) => a.iter().map(|v| v * s).collect(),
            ConditionalMean::Constant(c) => vec![*c; a.len()],
        }
    }
}

fn marginal_mean(kind: FieldKind, latent: &LatentField) -> f64 {
    let var = latent.covariance.total_variance();
    match kind {
        FieldKind::Normal => latent.mean,
        FieldKind::Binary => {
            use statrs::distribution::{ContinuousCDF, Normal};
            if var == 0.0 {
                return if latent.mean > latent.links.binary_threshold { 1.0 } else { 0.0 };
            }
            1.0 - Normal::new(latent.mean, var.sqrt()).expect("positive sd").cdf(latent.links.binary_threshold)
        }
        FieldKind::Poisson => (latent.links.poisson_log_intercept + latent.mean + var / 2.0).exp(),
    }
}

/// A configuration bound to one set of locations and its factorizations.
pub struct PreparedCell {
    cfg: ExperimentConfig,
    generator: Generator,
    fixed: Option<Exposures>,
    error_factor: Option<Cholesky>,
    metric: Metric,
    plan: AnalyticPlan,
}

impl PreparedCell {
    /// Bind `cfg` to the locations drawn from `location_seed`.
    pub fn new(cfg: &ExperimentConfig, location_seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.cell_seed();
        let loc = sample_locations(cfg.n_locations, cfg.bounds, location_seed)?;
        let generator = Generator::new(cfg.generator, loc)?;
        let fixed =
            if cfg.redraw_treatment { None } else { Some(generator.draw_exposures(seed.derive("fixed-exposure"))?) };
        let error_spec = cfg.generator.error;
        let error_factor = if error_spec.is_spatial() || cfg.estimator == Estimator::GlsKnown {
            let cov = error_spec.matrix(generator.distances())?;
            Some(Cholesky::new(&cov).map_err(|_| Error::invalid("error covariance is not positive definite"))?)
        } else {
            None
        };
        let metric = match (&error_factor, cfg.estimator) {
            (Some(f), Estimator::GlsKnown | Estimator::GlsMl) => Metric::Inverse(f.clone()),
            _ => Metric::Identity,
        };
        let plan = Self::plan(cfg, &generator)?;
        Ok(PreparedCell { cfg: cfg.clone(), generator, fixed, error_factor, metric, plan })
    }

    fn plan(cfg: &ExperimentConfig, generator: &Generator) -> Result<AnalyticPlan> {
        let gen = cfg.generator.terms;
        let fit = cfg.fitted_terms;
        let b: Coefficients = cfg.generator.coefficients;
        let omitted = Terms {
            intercept: false,
            interference: gen.interference && !fit.interference && b.interference != 0.0,
            direct: gen.direct && !fit.direct && b.direct != 0.0,
            indirect: gen.indirect && !fit.indirect && b.indirect != 0.0,
        };
        if !omitted.interference && !omitted.direct && !omitted.indirect {
            return Ok(AnalyticPlan::Zero);
        }
        if fit.direct || fit.indirect {
            return Ok(AnalyticPlan::Unavailable);
        }
        if !omitted.needs_confounder() && !fit.interference {
            return Ok(AnalyticPlan::Interference { beta_at: b.interference, intercept: fit.intercept });
        }
        let treatment_only = !fit.interference && fit.intercept;
        match cfg.generator.exposure {
            ExposureModel::PoissonPair(p) if !omitted.interference && !omitted.indirect && treatment_only => {
                Ok(AnalyticPlan::Poisson(poisson_confounding_bias(b.direct, &p)?))
            }
            ExposureModel::PoissonPair(p) => Ok(AnalyticPlan::Projection(ConditionalMean::Share(p.confounder_share()))),
            ExposureModel::Pair {
                pair, treatment_kind: FieldKind::Normal, confounder_kind: FieldKind::Normal, ..
            } => {
                let d = generator.distances();
                if treatment_only {
                    let direct =
                        DirectScParams::from_gaussian_pair(&pair, d, if omitted.direct { b.direct } else { 0.0 })?;
                    let phi = generator.phi().cloned().unwrap_or_else(|| crate::weights::WeightMatrix::zeros(d.n()));
                    let indirect = IndirectScParams::from_gaussian_pair(
                        &pair,
                        d,
                        if omitted.indirect { b.indirect } else { 0.0 },
                        phi,
                    )?;
                    Ok(AnalyticPlan::Combined {
                        beta_at: if omitted.interference { b.interference } else { 0.0 },
                        direct: Box::new(direct),
                        indirect: Box::new(indirect),
                    })
                } else {
                    let phi = generator.phi().cloned().unwrap_or_else(|| crate::weights::WeightMatrix::zeros(d.n()));
                    let m = crate::bias::m_matrix(&IndirectScParams::from_gaussian_pair(&pair, d, 0.0, phi)?)?;
                    Ok(AnalyticPlan::Projection(ConditionalMean::Linear { m, mu_a: pair.mu_a, mu_u: pair.mu_u }))
                }
            }
            ExposureModel::Independent { confounder_kind, confounder, .. } => {
                Ok(AnalyticPlan::Projection(ConditionalMean::Constant(marginal_mean(confounder_kind, &confounder))))
            }
            _ => Ok(AnalyticPlan::Unavailable),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Data for replicate `index`.
    pub fn data(&self, index: usize) -> Result<DataSet> {
        let seed = self.cfg.cell_seed().derive_index(index as u64);
        match &self.fixed {
            None => self.generator.generate(seed),
            Some(exp) => {
                let eps = self.generator.draw_error(seed.derive("error"));
                self.generator.assemble(exp.clone(), eps, None)
            }
        }
    }

    fn fit(&self, design: &Design, y: &[f64]) -> Result<FitResult> {
        match self.cfg.estimator {
            Estimator::Ols => design.ols(y, self.cfg.level),
            Estimator::GlsKnown => {
                let f = self.error_factor.as_ref().expect("factor prepared for gls-known");
                design.gls(y, f, self.cfg.level)
            }
            Estimator::GlsMl => {
                let mut opts = self.cfg.ml.clone();
                opts.level = self.cfg.level;
                design.ml(y, self.generator.distances(), &opts)
            }
        }
    }

    fn analytical(&self, data: &DataSet, design: &Design) -> Result<Option<f64>> {
        let a = &data.a;
        let b = self.cfg.generator.coefficients;
        Ok(match &self.plan {
            AnalyticPlan::Zero => Some(0.0),
            AnalyticPlan::Unavailable => None,
            AnalyticPlan::Poisson(v) => Some(*v),
            AnalyticPlan::Interference { beta_at, intercept } => {
                let psi = self.generator.psi().expect("validated");
                Some(if *intercept {
                    si_bias_with_intercept(a, psi, *beta_at, &self.metric)?
                } else {
                    si_bias(a, psi, *beta_at, &self.metric)?
                })
            }
            AnalyticPlan::Combined { beta_at, direct, indirect } => {
                let psi = match self.generator.psi() {
                    Some(p) => p.clone(),
                    None => crate::weights::WeightMatrix::zeros(a.len()),
                };
                Some(combined_bias_in(a, &psi, *beta_at, direct, indirect, &self.metric)?)
            }
            AnalyticPlan::Projection(cm) => {
                let gen = self.cfg.generator.terms;
                let fit = self.cfg.fitted_terms;
                let n = a.len();
                let mut v = vec![0.0; n];
                if gen.interference && !fit.interference {
                    let pa = self.generator.psi().expect("validated").apply(a)?;
                    v.iter_mut().zip(pa).for_each(|(x, p)| *x += b.interference * p);
                }
                if (gen.direct && !fit.direct) || (gen.indirect && !fit.indirect) {
                    let eu = cm.apply(a);
                    if gen.direct && !fit.direct {
                        v.iter_mut().zip(&eu).for_each(|(x, u)| *x += b.direct * u);
                    }
                    if gen.indirect && !fit.indirect {
                        let peu = self.generator.phi().expect("validated").apply(&eu)?;
                        v.iter_mut().zip(peu).for_each(|(x, u)| *x += b.indirect * u);
                    }
                }
                Some(project(&design.x, &v, design.treatment_column(), &self.metric)?)
            }
        })
    }

    pub fn replicate(&self, index: usize) -> ReplicateRecord {
        self.try_replicate(index).unwrap_or_else(|e| ReplicateRecord::failed(index, &e))
    }

    fn try_replicate(&self, index: usize) -> Result<ReplicateRecord> {
        let data = self.data(index)?;
        let design = data.design_matrix(&self.cfg.fitted_terms, false)?;
        let fit = self.fit(&design, &data.y)?;
        let j = design.treatment_column();
        let truth = self.cfg.truth();
        let analytical_bias = self.analytical(&data, &design)?;
        let corrected = match self.plan {
            AnalyticPlan::Interference { .. } => analytical_bias.map(|bias| fit.coef[j] - bias),
            _ => None,
        };
        Ok(ReplicateRecord {
            index,
            estimate: fit.coef[j],
            se: fit.se[j],
            ci_low: fit.ci_low[j],
            ci_high: fit.ci_high[j],
            covered: fit.covers(j, truth),
            analytical_bias,
            corrected,
            aic: fit.aic,
            failure: None,
        })
    }
}

/// Treatment entry of `(XᵀWX)⁻¹XᵀW v`.
fn project(x: &DMatrix<f64>, v: &[f64], column: usize, metric: &Metric) -> Result<f64> {
    let (xw, vw) = match metric {
        Metric::Identity => (x.clone(), DVector::from_column_slice(v)),
        Metric::Inverse(c) => (c.whiten(x), c.whiten_vec(v)),
    };
    let chol = gram_cholesky(&xw.tr_mul(&xw), 1e-10)
        .map_err(|cols| Error::SingularDesign { columns: cols.iter().map(|c| format!("x{c}")).collect() })?;
    Ok(chol.solve_vec(xw.tr_mul(&vw).as_slice())[column])
}

/// Seed of the locations used by replicate `index`.
pub fn location_seed(cfg: &ExperimentConfig, index: usize) -> Seed {
    let seed = cfg.cell_seed();
    if cfg.redraw_locations {
        seed.derive_index(index as u64).derive("locations")
    } else {
        seed.derive("locations")
    }
}

/// One replicate of a cell, preparing its locations from scratch.
pub fn run_replicate(cfg: &ExperimentConfig, index: usize) -> Result<ReplicateRecord> {
    Ok(PreparedCell::new(cfg, location_seed(cfg, index))?.replicate(index))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsSummary> {
    cfg.validate()?;
    let records: Vec<ReplicateRecord> = if cfg.redraw_locations {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|i| {
                PreparedCell::new(cfg, location_seed(cfg, i))
                    .map(|cell| cell.replicate(i))
                    .unwrap_or_else(|e| ReplicateRecord::failed(i, &e))
            })
            .collect()
    } else {
        let cell = PreparedCell::new(cfg, location_seed(cfg, 0))?;
        (0..cfg.replicates).into_par_iter().map(|i| cell.replicate(i)).collect()
    };
    summarize(cfg, records)
}

/// Aggregate replicate records. The result does not depend on record order.
pub fn summarize(cfg: &ExperimentConfig, mut records: Vec<ReplicateRecord>) -> Result<MetricsSummary> {
    records.sort_by_key(|r| r.index);
    let total = records.len();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| !r.is_failed()).collect();
    let failed = total - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
        if let Some(first) = records.iter().find(|r| r.is_failed()) {
            log::error!("{}: first failure: {}", cfg.id(), first.failure.as_deref().unwrap_or(""));
        }
        return Err(Error::TooManyFailures { cell: cfg.id(), failed, total });
    }
    if failed > 0 {
        log::warn!("{}: {failed} of {total} replicates failed and were excluded", cfg.id());
    }
    let truth = cfg.truth();
    let estimates: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
    let (mean_estimate, var) = mean_var(&estimates);
    let intervals: Vec<(f64, f64)> = ok.iter().map(|r| (r.ci_low, r.ci_high)).collect();
    let rmse = if estimates.len() >= 2 { rmse(&estimates, truth)? } else { (mean_estimate - truth).abs() };

    let analytic: Option<Vec<f64>> = ok.iter().map(|r| r.analytical_bias).collect();
    let (mean_analytical_bias, analytical_gap_se) = match analytic.filter(|v| !v.is_empty()) {
        Some(v) => {
            let gaps: Vec<f64> = ok.iter().zip(&v).map(|(r, b)| r.estimate - truth - b).collect();
            let (_, gvar) = mean_var(&gaps);
            (Some(v.iter().sum::<f64>() / v.len() as f64), Some((gvar / gaps.len() as f64).sqrt()))
        }
        None => (None, None),
    };
    let corrected: Option<Vec<f64>> = ok.iter().map(|r| r.corrected).collect();
    let mean_corrected = corrected.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);

    Ok(MetricsSummary {
        cell: cfg.id(),
        labels: cfg.labels.clone(),
        truth,
        replicates: total,
        failed,
        mean_estimate,
        mean_bias: mean_estimate - truth,
        rmse,
        coverage: coverage(&intervals, truth)?,
        mc_standard_error: (var / estimates.len() as f64).sqrt(),
        mean_analytical_bias,
        analytical_gap_se,
        mean_corrected,
        redraw_treatment: cfg.redraw_treatment,
        redraw_locations: cfg.redraw_locations,
        estimator: cfg.estimator,
        records,
    })
}

/// Run many cells; cells run one after another and replicates in parallel.
pub fn run_grid(cells: &[ExperimentConfig]) -> Result<Vec<MetricsSummary>> {
    cells
        .iter()
        .map(|c| {
            log::info!("running {} ({} replicates)", c.id(), c.replicates);
            run_experiment(c)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario grids

const N_LOCATIONS: usize = 100;
const TREATMENT_RANGE: f64 = 1.0;
const SPATIAL_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Setting {
    NonSpatial,
    Spatial,
}

impl Setting {
    fn label(self) -> &'static str {
        match self {
            Setting::NonSpatial => "non-spatial",
            Setting::Spatial => "spatial",
        }
    }

    fn error(self) -> CovarianceSpec {
        match self {
            Setting::NonSpatial => CovarianceSpec::iid(1.0),
            Setting::Spatial => CovarianceSpec::exponential(SPATIAL_RANGE, 1.0),
        }
    }

    fn estimator(self) -> Estimator {
        match self {
            Setting::NonSpatial => Estimator::Ols,
            Setting::Spatial => Estimator::GlsMl,
        }
    }
}

fn latent(range: f64, variance: f64) -> LatentField {
    LatentField { mean: 0.0, covariance: CovarianceSpec::exponential(range, variance), links: LinkConstants::default() }
}

fn bounds() -> Bounds {
    Bounds::square(0.0, 10.0).expect("valid square")
}

#[allow(clippy::too_many_arguments)]
fn interference_cell(
    table: TableId,
    setting: Setting,
    kind: FieldKind,
    case: Case,
    scenario: u8,
    weights: WeightConfig,
    replicates: usize,
    seed: Seed,
) -> ExperimentConfig {
    let kind_label = match kind {
        FieldKind::Binary => "discrete",
        FieldKind::Normal => "continuous",
        FieldKind::Poisson => "count",
    };
    let generated_interference = scenario <= 2;
    let fitted_interference = scenario == 2 || scenario == 4;
    let coefficients =
        Coefficients::new(case.beta_a, if generated_interference { case.beta_at } else { 0.0 }, 0.0, 0.0);
    let generator = ModelSpec {
        terms: if generated_interference { Terms::M2 } else { Terms::M1 },
        coefficients,
        error: setting.error(),
        exposure: ExposureModel::Field { kind, latent: latent(TREATMENT_RANGE, 1.0) },
        psi: Some(weights),
        phi: None,
    };
    ExperimentConfig {
        labels: CellLabels {
            table: table.to_string(),
            setting: Some(setting.label().into()),
            kind: Some(kind_label.into()),
            case: Some(case.to_string()),
            scenario: Some(scenario),
            weights: Some(weights.to_string()),
            model: None,
        },
        generator,
        fitted_terms: if fitted_interference { Terms::M2 } else { Terms::M1 },
        scenario: Some(scenario),
        case: Some(case),
        weights: Some(weights),
        n_locations: N_LOCATIONS,
        bounds: bounds(),
        replicates,
        base_seed: seed,
        data_key: format!("{table}/{}/{kind_label}/{weights}", setting.label()),
        redraw_treatment: true,
        redraw_locations: true,
        estimator: setting.estimator(),
        ml: MlOptions::default(),
        level: DEFAULT_LEVEL,
    }
}

fn interference_grid(table: TableId, setting: Setting, weights: &[WeightConfig], seed: Seed) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for kind in [FieldKind::Binary, FieldKind::Normal] {
        for case in [Case::STRONG_TREATMENT, Case::STRONG_INTERFERENCE] {
            for scenario in 1..=4 {
                for &w in weights {
                    out.push(interference_cell(table, setting, kind, case, scenario, w, 1000, seed));
                }
            }
        }
    }
    out
}

fn distribution_cell(kind: FieldKind, seed: Seed) -> ExperimentConfig {
    let field = match kind {
        FieldKind::Poisson => latent(SPATIAL_RANGE, 0.25),
        _ => latent(SPATIAL_RANGE, 1.0),
    };
    let generator = ModelSpec {
        terms: Terms::M4,
        coefficients: Coefficients::new(2.0, 0.0, 1.5, 0.0),
        error: CovarianceSpec::exponential(SPATIAL_RANGE, 1.0),
        exposure: ExposureModel::Independent {
            treatment_kind: kind,
            treatment: field,
            confounder_kind: kind,
            confounder: field,
        },
        psi: None,
        phi: None,
    };
    ExperimentConfig {
        labels: CellLabels {
            table: "T3".into(),
            setting: Some("spatial".into()),
            kind: Some(kind.to_string()),
            ..CellLabels::default()
        },
        generator,
        fitted_terms: Terms::M1,
        scenario: None,
        case: None,
        weights: None,
        n_locations: N_LOCATIONS,
        bounds: bounds(),
        replicates: 10_000,
        base_seed: seed,
        data_key: format!("T3/{kind}"),
        redraw_treatment: true,
        redraw_locations: true,
        estimator: Estimator::GlsMl,
        ml: MlOptions::default(),
        level: DEFAULT_LEVEL,
    }
}

/// Generator of the full-model study: `Y = 5A + 3ΨA + 2.5U + 2ΦU + ε` with an
/// independent Gaussian pair on range-2 exponential scales.
pub fn full_model_generator(weights: WeightConfig, rho: f64) -> ModelSpec {
    ModelSpec {
        terms: Terms::M6,
        coefficients: Coefficients::new(5.0, 3.0, 2.5, 2.0),
        error: CovarianceSpec::exponential(SPATIAL_RANGE, 1.0),
        exposure: ExposureModel::Pair {
            pair: GaussianPairSpec {
                rho,
                sigma_a: 1.0,
                sigma_u: 1.0,
                mu_a: 0.0,
                mu_u: 0.0,
                treatment_kernel: Kernel::exponential(SPATIAL_RANGE),
                confounder_kernel: Kernel::exponential(SPATIAL_RANGE),
            },
            treatment_kind: FieldKind::Normal,
            confounder_kind: FieldKind::Normal,
            links: LinkConstants::default(),
        },
        psi: Some(weights),
        phi: Some(weights),
    }
}

fn full_model_cell(model: Terms, weights: WeightConfig, seed: Seed) -> ExperimentConfig {
    ExperimentConfig {
        labels: CellLabels {
            table: "T4".into(),
            setting: Some("spatial".into()),
            weights: Some(weights.to_string()),
            model: Some(model.to_string()),
            ..CellLabels::default()
        },
        generator: full_model_generator(weights, 0.0),
        fitted_terms: model,
        scenario: None,
        case: None,
        weights: Some(weights),
        n_locations: N_LOCATIONS,
        bounds: bounds(),
        replicates: 1000,
        base_seed: seed,
        data_key: format!("T4/{weights}"),
        redraw_treatment: true,
        redraw_locations: true,
        estimator: Estimator::GlsMl,
        ml: MlOptions::default(),
        level: DEFAULT_LEVEL,
    }
}

/// Every cell of a table, in the order the table lists them.
pub fn scenario_grid(table: TableId, seed: Seed) -> Vec<ExperimentConfig> {
    let standard = [WeightConfig::knn(4), WeightConfig::distance(0.95)];
    match table {
        TableId::T1 => interference_grid(table, Setting::NonSpatial, &standard, seed),
        TableId::T2 => interference_grid(table, Setting::Spatial, &standard, seed),
        TableId::T3 => [FieldKind::Normal, FieldKind::Binary, FieldKind::Poisson]
            .into_iter()
            .map(|k| distribution_cell(k, seed))
            .collect(),
        TableId::T4 => standard
            .iter()
            .flat_map(|&w| Terms::APPLICATION_MODELS.into_iter().map(move |m| full_model_cell(m, w, seed)))
            .collect(),
        TableId::B1 | TableId::B2 => {
            let sweep: Vec<WeightConfig> = if table == TableId::B1 {
                [1, 2, 3, 5].into_iter().map(WeightConfig::knn).collect()
            } else {
                [0.90, 0.80, 0.75, 0.50].into_iter().map(WeightConfig::distance).collect()
            };
            let mut out = interference_grid(table, Setting::NonSpatial, &sweep, seed);
            out.extend(interference_grid(table, Setting::Spatial, &sweep, seed));
            out
        }
    }
}

/// Parse a table id and build its grid.
pub fn scenario_grid_named(table: &str, seed: Seed) -> Result<Vec<ExperimentConfig>> {
    Ok(scenario_grid(table.parse()?, seed))
}

// ---------------------------------------------------------------------------
// Output

/// Stable CSV header of [`write_summaries_csv`].
pub const CSV_HEADER: [&str; 13] = [
    "cell",
    "bias",
    "rmse",
    "coverage",
    "mc_se",
    "n_fail",
    "replicates",
    "mean_analytical_bias",
    "analytical_gap_se",
    "mean_corrected",
    "estimator",
    "redraw_treatment",
    "redraw_locations",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_summaries_csv<W: Write>(summaries: &[MetricsSummary], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for s in summaries {
        wtr.write_record([
            s.cell.clone(),
            format!("{:.6}", s.mean_bias),
            format!("{:.6}", s.rmse),
            format!("{:.4}", s.coverage),
            format!("{:.6}", s.mc_standard_error),
            s.failed.to_string(),
            s.replicates.to_string(),
            opt(s.mean_analytical_bias),
            opt(s.analytical_gap_se),
            opt(s.mean_corrected),
            s.estimator.to_string(),
            s.redraw_treatment.to_string(),
            s.redraw_locations.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Markdown tables: one per (table, setting, treatment kind), one row per
/// (case, scenario, model) and a Bias/RMSE/Coverage column group per weight scheme.
pub fn summaries_markdown(summaries: &[MetricsSummary]) -> String {
    type Section = (String, Option<String>, Option<String>);
    type Row = (Option<String>, Option<u8>, Option<String>);
    let mut sections: Vec<Section> = Vec::new();
    let mut rows: BTreeMap<Section, Vec<Row>> = BTreeMap::new();
    let mut columns: BTreeMap<Section, Vec<Option<String>>> = BTreeMap::new();
    let mut cells: BTreeMap<(Section, Row, Option<String>), &MetricsSummary> = BTreeMap::new();
    for s in summaries {
        let l = &s.labels;
        let section = (l.table.clone(), l.setting.clone(), l.kind.clone());
        if !sections.contains(&section) {
            sections.push(section.clone());
        }
        let row = (l.case.clone(), l.scenario, l.model.clone());
        let r = rows.entry(section.clone()).or_default();
        if !r.contains(&row) {
            r.push(row.clone());
        }
        let c = columns.entry(section.clone()).or_default();
        if !c.contains(&l.weights) {
            c.push(l.weights.clone());
        }
        cells.insert((section, row, l.weights.clone()), s);
    }

    let mut md = String::new();
    for section in sections {
        let (table, setting, kind) = &section;
        let mut title = table.clone();
        for part in [setting, kind].into_iter().flatten() {
            title.push_str(", ");
            title.push_str(part);
        }
        md.push_str(&format!("### {title}\n\n"));
        if let Some(first) = summaries
            .iter()
            .find(|s| (&s.labels.table, &s.labels.setting, &s.labels.kind) == (&section.0, &section.1, &section.2))
        {
            let yes_no = |b: bool| if b { "redrawn" } else { "fixed" };
            md.push_str(&format!(
                "Estimator {}; treatment {} per replicate; locations {} per replicate.\n\n",
                first.estimator,
                yes_no(first.redraw_treatment),
                yes_no(first.redraw_locations)
            ));
        }
        let cols = &columns[&section];
        md.push_str("| Case | Scenario | Model |");
        for c in cols {
            let w = c.as_deref().unwrap_or("-");
            md.push_str(&format!(" Bias ({w}) | RMSE ({w}) | Coverage ({w}) |"));
        }
        md.push('\n');
        md.push_str("|---|---|---|");
        for _ in cols {
            md.push_str("---:|---:|---:|");
        }
        md.push('\n');
        for row in &rows[&section] {
            let (case, scenario, model) = row;
            md.push_str(&format!(
                "| {} | {} | {} |",
                case.as_deref().unwrap_or("-"),
                scenario.map(|s| format!("Scenario {s}")).unwrap_or_else(|| "-".into()),
                model.as_deref().unwrap_or("-"),
            ));
            for c in cols {
                match cells.get(&(section.clone(), row.clone(), c.clone())) {
                    Some(s) => md.push_str(&format!(" {:.4} | {:.4} | {:.3} |", s.mean_bias, s.rmse, s.coverage)),
                    None => md.push_str(" | | |"),
                }
            }
            md.push('\n');
        }
        md.push('\n');
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rmse_by_hand() {
        assert_relative_eq!(rmse(&[1.0, 3.0], 2.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(rmse(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert!(rmse(&[1.0], 1.0).is_err());
    }

    #[test]
    fn coverage_by_hand() {
        let iv = [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (-1.0, 0.5)];
        assert_eq!(coverage(&iv, 1.0).unwrap(), 0.5);
        assert_eq!(coverage(&[(0.0, 2.0), (1.0, 1.0)], 1.0).unwrap(), 1.0);
        assert!(coverage(&[], 0.0).is_err());
    }

    #[test]
    fn grid_sizes() {
        let s = Seed(1);
        assert_eq!(scenario_grid(TableId::T1, s).len(), 32);
        assert_eq!(scenario_grid(TableId::T2, s).len(), 32);
        let t3 = scenario_grid(TableId::T3, s);
        assert_eq!(t3.len(), 3);
        assert!(t3.iter().all(|c| c.replicates == 10_000));
        assert_eq!(scenario_grid(TableId::T4, s).len(), 14);
        let b2 = scenario_grid(TableId::B2, s);
        let mut thresholds: Vec<String> = b2.iter().filter_map(|c| c.labels.weights.clone()).collect();
        thresholds.dedup();
        thresholds.sort();
        thresholds.dedup();
        assert_eq!(thresholds, vec!["dist50", "dist75", "dist80", "dist90"]);
        assert!(scenario_grid_named("T9", s).is_err());
        for table in TableId::ALL {
            for cell in scenario_grid(table, s) {
                cell.validate().unwrap();
            }
        }
    }

    #[test]
    fn table_one_order() {
        let cells = scenario_grid(TableId::T1, Seed(1));
        let first: Vec<String> = cells.iter().take(4).map(|c| c.id()).collect();
        assert_eq!(
            first,
            vec![
                "T1/non-spatial/discrete/βa=8,βã=2/S1/knn4",
                "T1/non-spatial/discrete/βa=8,βã=2/S1/dist95",
                "T1/non-spatial/discrete/βa=8,βã=2/S2/knn4",
                "T1/non-spatial/discrete/βa=8,βã=2/S2/dist95",
            ]
        );
    }

    #[test]
    fn scenario_consistency_enforced() {
        let mut cell = scenario_grid(TableId::T1, Seed(1)).remove(0);
        cell.fitted_terms = Terms::M2;
        assert!(cell.validate().is_err());
        cell.fitted_terms = Terms::M1;
        cell.replicates = 0;
        assert!(cell.validate().is_err());
    }
}
