//! Linear model fits: ordinary least squares, generalized least squares with a
//! known correlation matrix, and Gaussian maximum likelihood with an estimated
//! spatial covariance.
//!
//! All three share one core: whiten the design and response by a Cholesky
//! factor of the error correlation, then solve the normal equations of the
//! whitened problem through another Cholesky factor. No matrix is inverted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dgp::Design;
use crate::error::{Error, Result};
use crate::geo::{CovarianceFamily, CovarianceSpec, DistanceMatrix, Kernel};
use crate::linalg::{gram_cholesky, Cholesky};
use crate::optim::NelderMead;

/// Nominal confidence level used throughout.
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Pivots below this fraction of the column's own squared norm are collinear.
const COLLINEARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Ols,
    GlsKnown,
    GlsMl,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Ols => "ols",
            Estimator::GlsKnown => "gls-known",
            Estimator::GlsMl => "gls-ml",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" => Ok(Estimator::Ols),
            "gls-known" | "gls" => Ok(Estimator::GlsKnown),
            "gls-ml" | "ml" => Ok(Estimator::GlsMl),
            _ => Err(Error::invalid(format!("unknown estimator {s:?}; expected ols, gls-known or gls-ml"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub level: f64,
    pub loglik: f64,
    pub aic: f64,
    /// Number of estimated parameters counted by the AIC.
    pub parameters: usize,
    #[serde(with = "matrix_rows")]
    pub covariance: DMatrix<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fitted_cov: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub evaluations: Option<usize>,
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(serde::de::Error::custom("ragged covariance matrix"));
        }
        Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }
}

impl FitResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Whether the interval for coefficient `j` contains `value` (closed).
    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_low[j] <= value && value <= self.ci_high[j]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf((1.0 + level) / 2.0))
}

/// Wald intervals `β̂_j ± z · se_j`.
pub fn wald_ci(fit: &FitResult, level: f64) -> Result<Vec<(f64, f64)>> {
    let z = normal_quantile(level)?;
    Ok(fit.coef.iter().zip(&fit.se).map(|(b, s)| (b - z * s, b + z * s)).collect())
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn check_shapes(x: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!("design has {} rows but response has {}", x.nrows(), y.len())));
    }
    if names.len() != x.ncols() {
        return Err(Error::invalid("column name count does not match the design"));
    }
    if x.ncols() == 0 || x.nrows() <= x.ncols() {
        return Err(Error::invalid(format!(
            "need more observations ({}) than coefficients ({}) and at least one coefficient",
            x.nrows(),
            x.ncols()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("design or response contains non-finite values"));
    }
    Ok(())
}

/// Least squares on an already whitened problem.
struct Whitened {
    beta: DVector<f64>,
    gram: Cholesky,
    rss: f64,
}

fn whitened_ls(xw: &DMatrix<f64>, yw: &DVector<f64>, names: &[String]) -> Result<Whitened> {
    let gram = xw.tr_mul(xw);
    let chol = gram_cholesky(&gram, COLLINEARITY_TOL)
        .map_err(|cols| Error::SingularDesign { columns: cols.into_iter().map(|j| names[j].clone()).collect() })?;
    let beta = chol.solve_vec(xw.tr_mul(yw).as_slice());
    let resid = yw - xw * &beta;
    Ok(Whitened { beta, gram: chol, rss: resid.norm_squared() })
}

fn assemble(
    names: &[String],
    w: &Whitened,
    sigma2: f64,
    level: f64,
    loglik: f64,
    parameters: usize,
) -> Result<FitResult> {
    let p = w.beta.len();
    let covariance = w.gram.solve(&DMatrix::identity(p, p)) * sigma2;
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    let se: Vec<f64> = (0..p).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    let z = normal_quantile(level)?;
    let coef: Vec<f64> = w.beta.iter().copied().collect();
    Ok(FitResult {
        names: names.to_vec(),
        ci_low: coef.iter().zip(&se).map(|(b, s)| b - z * s).collect(),
        ci_high: coef.iter().zip(&se).map(|(b, s)| b + z * s).collect(),
        coef,
        se,
        level,
        loglik,
        aic: -2.0 * loglik + 2.0 * parameters as f64,
        parameters,
        covariance,
        fitted_cov: None,
        evaluations: None,
    })
}

fn gaussian_loglik(n: usize, rss: f64, log_det: f64) -> f64 {
    let nf = n as f64;
    let s2 = rss / nf;
    -0.5 * nf * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0) - 0.5 * log_det
}

/// Ordinary least squares with residual-variance standard errors.
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64], level: f64) -> Result<FitResult> {
    ols_fit_named(x, &default_names(x.ncols()), y, level)
}

pub fn ols_fit_named(x: &DMatrix<f64>, names: &[String], y: &[f64], level: f64) -> Result<FitResult> {
    check_shapes(x, y, names)?;
    let (n, p) = x.shape();
    let w = whitened_ls(x, &DVector::from_column_slice(y), names)?;
    let loglik = gaussian_loglik(n, w.rss, 0.0);
    assemble(names, &w, w.rss / (n - p) as f64, level, loglik, p + 1)
}

/// Generalized least squares with a known error covariance up to scale.
pub fn gls_fit(x: &DMatrix<f64>, y: &[f64], omega: &DMatrix<f64>, level: f64) -> Result<FitResult> {
    let chol = Cholesky::new(omega).map_err(|_| Error::invalid("error covariance is not positive definite"))?;
    gls_fit_factored(x, &default_names(x.ncols()), y, &chol, level)
}

/// As [`gls_fit`] with a precomputed factor of `Ω`.
pub fn gls_fit_factored(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    omega: &Cholesky,
    level: f64,
) -> Result<FitResult> {
    check_shapes(x, y, names)?;
    if omega.dim() != y.len() {
        return Err(Error::invalid(format!(
            "error covariance is {0}x{0} but response has length {1}",
            omega.dim(),
            y.len()
        )));
    }
    let (n, p) = x.shape();
    let xw = omega.whiten(x);
    let yw = omega.whiten_vec(y);
    let w = whitened_ls(&xw, &yw, names)?;
    let loglik = gaussian_loglik(n, w.rss, omega.log_det());
    assemble(names, &w, w.rss / (n - p) as f64, level, loglik, p + 1)
}

/// Settings of the maximum-likelihood search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlOptions {
    pub family: CovarianceFamily,
    /// Evaluation budget per start.
    pub max_evaluations: usize,
    /// Starting `(range as a fraction of the largest distance, nugget fraction)`.
    pub starts: Vec<(f64, f64)>,
    pub level: f64,
}

impl Default for MlOptions {
    fn default() -> Self {
        MlOptions {
            family: CovarianceFamily::Exponential,
            max_evaluations: 500,
            starts: vec![(0.05, 0.5), (0.2, 0.1), (0.5, 0.01)],
            level: DEFAULT_LEVEL,
        }
    }
}

/// Search box on the transformed parameters.
const LOGIT_BOUND: f64 = 12.0;

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Profile likelihood over `(log range, logit nugget fraction)` with `β` and
/// the total variance concentrated out.
struct Profile<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    names: &'a [String],
    dist: &'a DistanceMatrix,
    family: CovarianceFamily,
    log_range_bounds: (f64, f64),
    corr: DMatrix<f64>,
}

struct ProfilePoint {
    whitened: Whitened,
    loglik: f64,
    range: f64,
    nugget_fraction: f64,
}

impl<'a> Profile<'a> {
    fn clamp(&self, theta: &[f64]) -> (f64, f64) {
        let (lo, hi) = self.log_range_bounds;
        (theta[0].clamp(lo, hi), theta[1].clamp(-LOGIT_BOUND, LOGIT_BOUND))
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<ProfilePoint> {
        let (log_range, logit_eta) = self.clamp(theta);
        let range = log_range.exp();
        let eta = logistic(logit_eta);
        let kernel = Kernel { family: self.family, range };
        let n = self.dist.n();
        let scale = 1.0 - eta;
        for j in 0..n {
            self.corr[(j, j)] = 1.0;
            for i in (j + 1)..n {
                self.corr[(i, j)] = scale * kernel.correlation(self.dist.get(i, j));
            }
        }
        // Only the lower triangle is read by the factorization.
        let mut l = std::mem::replace(&mut self.corr, DMatrix::zeros(0, 0));
        let factored = crate::linalg::factor_in_place(&mut l);
        let chol = match factored {
            Ok(()) => Cholesky::from_factor(l),
            Err(_) => {
                self.corr = DMatrix::zeros(n, n);
                return Err(Error::numerical("correlation matrix not positive definite"));
            }
        };
        let xw = chol.whiten(self.x);
        let yw = chol.whiten_vec(self.y);
        let w = whitened_ls(&xw, &yw, self.names);
        let log_det = chol.log_det();
        self.corr = chol.into_factor();
        let w = w?;
        if !(w.rss > 0.0) {
            return Err(Error::DegenerateFit("zero residual variance".into()));
        }
        let loglik = gaussian_loglik(n, w.rss, log_det);
        Ok(ProfilePoint { whitened: w, loglik, range, nugget_fraction: eta })
    }
}

/// Profile log-likelihood at a given range and nugget fraction, maximized over
/// the coefficients and the total variance.
pub fn profile_loglik(
    x: &DMatrix<f64>,
    y: &[f64],
    dist: &DistanceMatrix,
    family: CovarianceFamily,
    range: f64,
    nugget_fraction: f64,
) -> Result<f64> {
    let names = default_names(x.ncols());
    check_shapes(x, y, &names)?;
    let mut profile = Profile {
        x,
        y,
        names: &names,
        dist,
        family,
        log_range_bounds: (f64::NEG_INFINITY, f64::INFINITY),
        corr: DMatrix::zeros(dist.n(), dist.n()),
    };
    let eta = nugget_fraction.clamp(logistic(-LOGIT_BOUND), logistic(LOGIT_BOUND));
    Ok(profile.evaluate(&[range.ln(), logit(eta)])?.loglik)
}

/// Gaussian maximum likelihood over `(β, σ², ω, τ²)`.
pub fn ml_fit(x: &DMatrix<f64>, y: &[f64], dist: &DistanceMatrix, options: &MlOptions) -> Result<FitResult> {
    ml_fit_named(x, &default_names(x.ncols()), y, dist, options)
}

pub fn ml_fit_named(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    dist: &DistanceMatrix,
    options: &MlOptions,
) -> Result<FitResult> {
    check_shapes(x, y, names)?;
    let (n, p) = x.shape();
    if n < p + 3 + 2 {
        return Err(Error::invalid(format!("maximum likelihood needs at least {} observations, got {n}", p + 5)));
    }
    if options.family == CovarianceFamily::Identity {
        return Err(Error::invalid("maximum likelihood needs a spatial covariance family"));
    }
    if dist.n() != n {
        return Err(Error::invalid("distance matrix does not match the response length"));
    }
    // Exact linear data has no likelihood maximum.
    let ols = whitened_ls(x, &DVector::from_column_slice(y), names)?;
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if ols.rss <= 1e-20 * scale {
        return Err(Error::DegenerateFit("response is an exact linear function of the design".into()));
    }

    let pairs = dist.pairwise();
    let d_min = pairs.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = dist.max();
    let mut profile = Profile {
        x,
        y,
        names,
        dist,
        family: options.family,
        log_range_bounds: ((d_min * 1e-3).ln(), (d_max * 1e2).ln()),
        corr: DMatrix::zeros(n, n),
    };
    let nm = NelderMead { max_evaluations: options.max_evaluations, ..NelderMead::default() };
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut evaluations = 0;
    for &(range_frac, eta) in &options.starts {
        let start = [(range_frac * d_max).ln(), logit(eta.clamp(1e-4, 1.0 - 1e-4))];
        let min = nm.minimize(|t| profile.evaluate(t).map_or(f64::INFINITY, |pt| -pt.loglik), &start);
        evaluations += min.evaluations;
        if best.as_ref().is_none_or(|b| min.value < b.1) {
            best = Some((min.x, min.value, min.converged));
        }
    }
    let (theta, value, converged) = best.ok_or_else(|| Error::invalid("no starting points"))?;
    if !value.is_finite() {
        return Err(Error::numerical("profile likelihood is not finite at any starting point"));
    }
    let theta = {
        let (a, b) = profile.clamp(&theta);
        vec![a, b]
    };
    let pt = profile.evaluate(&theta)?;
    if !converged {
        return Err(Error::Convergence {
            evaluations,
            best_loglik: pt.loglik,
            best_range: pt.range,
            best_nugget_fraction: pt.nugget_fraction,
        });
    }
    let sigma2_total = pt.whitened.rss / n as f64;
    let mut fit = assemble(names, &pt.whitened, sigma2_total, options.level, pt.loglik, p + 3)?;
    fit.fitted_cov = Some(CovarianceSpec {
        kernel: Kernel { family: options.family, range: pt.range },
        variance: (1.0 - pt.nugget_fraction) * sigma2_total,
        nugget: pt.nugget_fraction * sigma2_total,
    });
    fit.evaluations = Some(evaluations);
    Ok(fit)
}

impl Design {
    pub fn ols(&self, y: &[f64], level: f64) -> Result<FitResult> {
        ols_fit_named(&self.x, &self.names, y, level)
    }

    pub fn gls(&self, y: &[f64], omega: &Cholesky, level: f64) -> Result<FitResult> {
        gls_fit_factored(&self.x, &self.names, y, omega, level)
    }

    pub fn ml(&self, y: &[f64], dist: &DistanceMatrix, options: &MlOptions) -> Result<FitResult> {
        ml_fit_named(&self.x, &self.names, y, dist, options)
    }
}
