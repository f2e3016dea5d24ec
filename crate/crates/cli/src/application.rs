//! Seven-model comparison on observed point data.
//!
//! For each weight scheme the treatment and confounder are spatially lagged
//! with weights built from the data's own locations, every model containing
//! the treatment and at least one of interference, direct confounding or
//! indirect confounding is fitted by Gaussian maximum likelihood, and the
//! model with the lowest AIC is flagged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spatial_bias::dgp::{DataSet, Terms};
use spatial_bias::estimate::MlOptions;
use spatial_bias::geo::{distance_matrix, DistanceMatrix, LocationSet};
use spatial_bias::weights::WeightConfig;
use spatial_bias::Error;

use crate::error::{CliError, CliResult};

pub const MIN_ROWS: usize = 10;

pub fn default_schemes() -> Vec<WeightConfig> {
    vec![WeightConfig::knn(4), WeightConfig::distance(0.5)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationRow {
    pub weights: String,
    pub model: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub aic: Option<f64>,
    pub range: Option<f64>,
    pub lowest_aic: bool,
    /// Why the fit failed, if it did.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationTable {
    pub n: usize,
    pub rows: Vec<ApplicationRow>,
}

impl ApplicationTable {
    /// Rows of one weight scheme, in model order.
    pub fn block(&self, weights: &str) -> Vec<&ApplicationRow> {
        self.rows.iter().filter(|r| r.weights == weights).collect()
    }

    /// The lowest-AIC model of a weight scheme.
    pub fn best(&self, weights: &str) -> Option<&ApplicationRow> {
        self.rows.iter().find(|r| r.weights == weights && r.lowest_aic)
    }
}

/// Reorder observations by coordinates so results do not depend on file order.
fn canonical(data: &DataSet) -> CliResult<DataSet> {
    let pts = data.loc.points();
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&i, &j| pts[i].x.total_cmp(&pts[j].x).then(pts[i].y.total_cmp(&pts[j].y)));
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let loc = LocationSet::new(order.iter().map(|&i| pts[i]).collect(), data.loc.bounds())?;
    Ok(DataSet {
        loc,
        y: pick(&data.y),
        a: pick(&data.a),
        a_tilde: None,
        u: data.u.as_deref().map(pick),
        u_tilde: None,
        eps: None,
        provenance: None,
    })
}

/// Fit the seven models under every weight scheme. Fit failures are recorded
/// in their row; the table is still produced.
pub fn application_pipeline(
    data: &DataSet,
    schemes: &[WeightConfig],
    geodesic: bool,
    options: &MlOptions,
) -> CliResult<ApplicationTable> {
    if schemes.is_empty() {
        return Err(CliError::config("at least one weight scheme is required"));
    }
    if data.n() < MIN_ROWS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_ROWS} observations, got {}", data.n())).into());
    }
    if data.u.is_none() {
        return Err(CliError::config("the application needs a confounder column"));
    }
    let data = canonical(data)?;
    let dist = if geodesic { DistanceMatrix::haversine(&data.loc)? } else { distance_matrix(&data.loc)? };

    let mut rows = Vec::new();
    for scheme in schemes {
        let w = scheme.build(&dist)?;
        let lagged = DataSet {
            a_tilde: Some(w.apply(&data.a)?),
            u_tilde: Some(w.apply(data.u.as_ref().expect("checked"))?),
            ..data.clone()
        };
        let mut block: Vec<ApplicationRow> = Terms::APPLICATION_MODELS
            .par_iter()
            .map(|terms| fit_row(&lagged, terms, &dist, options, &scheme.to_string()))
            .collect();
        if let Some(best) =
            block.iter_mut().filter(|r| r.aic.is_some()).min_by(|a, b| a.aic.unwrap().total_cmp(&b.aic.unwrap()))
        {
            best.lowest_aic = true;
        }
        rows.extend(block);
    }
    Ok(ApplicationTable { n: data.n(), rows })
}

fn fit_row(data: &DataSet, terms: &Terms, dist: &DistanceMatrix, options: &MlOptions, weights: &str) -> ApplicationRow {
    let mut row = ApplicationRow {
        weights: weights.to_string(),
        model: terms.to_string(),
        estimate: None,
        se: None,
        ci_low: None,
        ci_high: None,
        aic: None,
        range: None,
        lowest_aic: false,
        error: None,
    };
    let fit = data.design_matrix(terms, false).and_then(|design| {
        let j = design.treatment_column();
        design.ml(&data.y, dist, options).map(|fit| (fit, j))
    });
    match fit {
        Ok((fit, j)) if fit.aic.is_finite() => {
            row.estimate = Some(fit.coef[j]);
            row.se = Some(fit.se[j]);
            row.ci_low = Some(fit.ci_low[j]);
            row.ci_high = Some(fit.ci_high[j]);
            row.aic = Some(fit.aic);
            row.range = fit.fitted_cov.map(|c| c.kernel.range);
        }
        Ok(_) => row.error = Some("non-finite AIC".into()),
        Err(e) => {
            log::warn!("{weights} {}: {e}", row.model);
            row.error = Some(e.to_string());
        }
    }
    row
}
