//! Run configuration.
//!
//! A TOML file with a few top-level keys and one table per concern:
//!
//! ```toml
//! seed = 42              # required by simulate and experiment
//! output = "out"         # directory for every file written
//! threads = 4            # worker threads for Monte Carlo cells
//! replicates = 1000      # overrides the per-cell replicate count
//!
//! [data]                 # point CSV read by weights, bias, fit and apply
//! input = "data.csv"
//! x = "x"
//! y = "y"
//! outcome = "Y"
//! treatment = "A"
//! confounder = "U"       # optional
//! geodesic = false       # haversine distances on lon/lat degrees
//!
//! [simulate]
//! n = 100
//! side = 10.0            # locations are uniform on [0, side]²
//! model = "T+I"          # T, T+I, ..., T+I+DSC+ISC or M1..M6
//! intercept = 0.0
//! treatment = 8.0
//! interference = 2.0
//! direct = 0.0
//! indirect = 0.0
//! weights = "knn4"       # knnK, distP (percentile), dist<=D, optional -raw
//! treatment_kind = "normal"
//! confounder_kind = "normal"
//! exposure_range = 1.0
//! rho = 0.0              # latent treatment/confounder correlation
//! error_range = 2.0      # omit for independent errors
//! error_variance = 1.0
//! spec = "spec.json"     # a full model description; replaces the keys above
//!
//! [experiment]
//! table = "T1"           # T1, T2, T3, T4, B1 or B2
//! filter = "S1/knn4"     # keep cells whose id contains this
//! estimator = "ols"      # overrides every cell: ols, gls-known or gls-ml
//! redraw_treatment = true
//! redraw_locations = true
//!
//! [fit]
//! model = "T+I"
//! estimator = "gls-ml"
//! weights = "knn4"
//! error_range = 2.0      # gls-known only
//! error_variance = 1.0
//!
//! [bias]
//! weights = "knn4"
//! beta_at = 2.0
//! error_range = 2.0      # omit for the non-spatial formula
//! intercept = true       # centre the treatment as an intercept fit does
//!
//! [apply]
//! weights = ["knn4", "dist50"]
//!
//! [weights]
//! scheme = "knn4"
//! ```
//!
//! Command-line flags take precedence over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use spatial_bias::dgp::{Coefficients, ExposureModel, ModelSpec, Terms};
use spatial_bias::estimate::Estimator;
use spatial_bias::geo::{CovarianceSpec, FieldKind, GaussianPairSpec, Kernel, LatentField, LinkConstants};
use spatial_bias::weights::WeightConfig;

use crate::error::{CliError, CliResult};
use crate::ingest::ColumnMap;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub replicates: Option<usize>,
    pub data: DataSection,
    pub simulate: SimulateSection,
    pub experiment: ExperimentSection,
    pub fit: FitSection,
    pub bias: BiasSection,
    pub apply: ApplySection,
    pub weights: WeightsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub x: Option<String>,
    pub y: Option<String>,
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub confounder: Option<String>,
    pub geodesic: Option<bool>,
}

impl DataSection {
    pub fn column_map(&self) -> ColumnMap {
        let d = ColumnMap::default();
        ColumnMap {
            x: self.x.clone().unwrap_or(d.x),
            y: self.y.clone().unwrap_or(d.y),
            outcome: self.outcome.clone().unwrap_or(d.outcome),
            treatment: self.treatment.clone().unwrap_or(d.treatment),
            confounder: self.confounder.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub side: f64,
    pub model: String,
    pub intercept: f64,
    pub treatment: f64,
    pub interference: f64,
    pub direct: f64,
    pub indirect: f64,
    pub weights: String,
    pub treatment_kind: String,
    pub confounder_kind: String,
    pub exposure_range: f64,
    pub rho: f64,
    pub error_range: Option<f64>,
    pub error_variance: f64,
    pub spec: Option<PathBuf>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n: 100,
            side: 10.0,
            model: "T+I".into(),
            intercept: 0.0,
            treatment: 8.0,
            interference: 2.0,
            direct: 0.0,
            indirect: 0.0,
            weights: "knn4".into(),
            treatment_kind: "normal".into(),
            confounder_kind: "normal".into(),
            exposure_range: 1.0,
            rho: 0.0,
            error_range: None,
            error_variance: 1.0,
            spec: None,
        }
    }
}

impl SimulateSection {
    /// The generating model, read from `spec` when given.
    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        if let Some(path) = &self.spec {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::File { path: path.clone(), source })?;
            let spec: ModelSpec = serde_json::from_str(&text)?;
            spec.validate()?;
            return Ok(spec);
        }
        let terms: Terms = self.model.parse()?;
        let weights: WeightConfig = self.weights.parse()?;
        let treatment_kind: FieldKind = self.treatment_kind.parse()?;
        let kernel = Kernel::exponential(self.exposure_range);
        let exposure = if terms.needs_confounder() || self.rho != 0.0 {
            ExposureModel::Pair {
                pair: GaussianPairSpec {
                    rho: self.rho,
                    sigma_a: 1.0,
                    sigma_u: 1.0,
                    mu_a: 0.0,
                    mu_u: 0.0,
                    treatment_kernel: kernel,
                    confounder_kernel: kernel,
                },
                treatment_kind,
                confounder_kind: self.confounder_kind.parse()?,
                links: LinkConstants::default(),
            }
        } else {
            ExposureModel::Field {
                kind: treatment_kind,
                latent: LatentField {
                    mean: 0.0,
                    covariance: CovarianceSpec::exponential(self.exposure_range, 1.0),
                    links: LinkConstants::default(),
                },
            }
        };
        let spec = ModelSpec {
            terms,
            coefficients: Coefficients {
                intercept: self.intercept,
                ..Coefficients::new(self.treatment, self.interference, self.direct, self.indirect)
            },
            error: error_spec(self.error_range, self.error_variance),
            phi: exposure.has_confounder().then_some(weights),
            exposure,
            psi: Some(weights),
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn error_spec(range: Option<f64>, variance: f64) -> CovarianceSpec {
    match range {
        Some(r) => CovarianceSpec::exponential(r, variance),
        None => CovarianceSpec::iid(variance),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub table: Option<String>,
    pub filter: Option<String>,
    pub estimator: Option<String>,
    pub redraw_treatment: Option<bool>,
    pub redraw_locations: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub model: String,
    pub estimator: String,
    pub weights: String,
    pub error_range: Option<f64>,
    pub error_variance: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            model: "T".into(),
            estimator: "ols".into(),
            weights: "knn4".into(),
            error_range: None,
            error_variance: 1.0,
        }
    }
}

impl FitSection {
    pub fn estimator(&self) -> CliResult<Estimator> {
        Ok(self.estimator.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    pub weights: String,
    pub beta_at: f64,
    pub error_range: Option<f64>,
    pub error_variance: f64,
    pub intercept: bool,
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection { weights: "knn4".into(), beta_at: 2.0, error_range: None, error_variance: 1.0, intercept: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApplySection {
    pub weights: Vec<String>,
}

impl Default for ApplySection {
    fn default() -> Self {
        ApplySection { weights: vec!["knn4".into(), "dist50".into()] }
    }
}

impl ApplySection {
    pub fn schemes(&self) -> CliResult<Vec<WeightConfig>> {
        self.weights.iter().map(|w| Ok(w.parse()?)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub scheme: String,
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection { scheme: "knn4".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn require_seed(&self, command: &str) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::config(format!("{command} needs a seed (--seed or `seed` in the config file)")))
    }

    pub fn input(&self) -> CliResult<&Path> {
        self.data.input.as_deref().ok_or_else(|| CliError::config("no input file (--input or [data] input)"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
