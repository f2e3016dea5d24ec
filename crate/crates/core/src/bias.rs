//! Closed-form bias of the treatment coefficient when interference or
//! confounding terms are left out of the fitted model, and the interference
//! correction.
//!
//! Each expression has the form `cᵀ W v / cᵀ W A`, where `W` is the identity
//! (ordinary least squares) or `Ω⁻¹` (generalized least squares), `v` is the
//! conditional mean of the omitted part of the outcome given `A`, and `c` is
//! `A` itself for a no-intercept fit or `A` centred in the `W` metric for a fit
//! with an intercept. The `si_bias_*`, [`indirect_sc_bias`] and
//! [`direct_sc_bias`] functions evaluate the published expressions literally on
//! the vector they are given; [`combined_bias`] and the `*_with_intercept`
//! helpers give the exact conditional bias of a fit that includes an intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{DistanceMatrix, GaussianPairSpec, PoissonPairSpec};
use crate::linalg::Cholesky;
use crate::weights::WeightMatrix;

const CONDITION_WARNING: f64 = 1e10;

/// The inner product `⟨x, y⟩_W` used by a fit.
#[derive(Debug, Clone)]
pub enum Metric {
    /// `xᵀy`.
    Identity,
    /// `xᵀ Ω⁻¹ y`.
    Inverse(Cholesky),
}

impl Metric {
    pub fn from_covariance(omega: Option<&DMatrix<f64>>) -> Result<Self> {
        match omega {
            None => Ok(Metric::Identity),
            Some(m) => {
                let chol = Cholesky::new(m).map_err(|_| Error::invalid("covariance Ω is not positive definite"))?;
                if chol.condition_estimate() > CONDITION_WARNING {
                    log::warn!("covariance Ω is ill-conditioned (estimate {:e})", chol.condition_estimate());
                }
                Ok(Metric::Inverse(chol))
            }
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Metric::Identity => None,
            Metric::Inverse(c) => Some(c.dim()),
        }
    }

    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Metric::Identity => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Metric::Inverse(c) => c.quad_form(x, y),
        }
    }

    /// `A - m 1` with `m = ⟨1, A⟩_W / ⟨1, 1⟩_W`, the residual of `A` after
    /// projecting out an intercept.
    pub fn center(&self, a: &[f64]) -> Vec<f64> {
        let ones = vec![1.0; a.len()];
        let m = self.inner(&ones, a) / self.inner(&ones, &ones);
        a.iter().map(|v| v - m).collect()
    }

    /// `⟨c, v⟩_W / ⟨c, A⟩_W`.
    fn ratio(&self, c: &[f64], v: &[f64], a: &[f64]) -> Result<f64> {
        let den = self.inner(c, a);
        if !(den.abs() > 0.0) {
            return Err(Error::invalid("treatment has no variation in the fitted metric"));
        }
        Ok(self.inner(c, v) / den)
    }
}

fn check_dims(a: &[f64], n: usize, what: &str) -> Result<()> {
    if a.len() != n {
        return Err(Error::invalid(format!("treatment has length {} but {what} has dimension {n}", a.len())));
    }
    Ok(())
}

fn check_nonzero(a: &[f64]) -> Result<()> {
    if a.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("treatment vector is identically zero"));
    }
    Ok(())
}

fn check_metric(a: &[f64], metric: &Metric) -> Result<()> {
    if let Some(n) = metric.dim() {
        check_dims(a, n, "Ω")?;
    }
    Ok(())
}

/// `β_ã · AᵀWΨA / AᵀWA` evaluated on `a` as given.
pub fn si_bias(a: &[f64], psi: &WeightMatrix, beta_at: f64, metric: &Metric) -> Result<f64> {
    check_dims(a, psi.n(), "Ψ")?;
    check_metric(a, metric)?;
    check_nonzero(a)?;
    if beta_at == 0.0 {
        return Ok(0.0);
    }
    let pa = psi.apply(a)?;
    Ok(beta_at * metric.ratio(a, &pa, a)?)
}

/// `β_ã · AᵀΨA / AᵀA`.
pub fn si_bias_nonspatial(a: &[f64], psi: &WeightMatrix, beta_at: f64) -> Result<f64> {
    si_bias(a, psi, beta_at, &Metric::Identity)
}

/// `β_ã · AᵀΩ⁻¹ΨA / AᵀΩ⁻¹A`.
pub fn si_bias_spatial(a: &[f64], psi: &WeightMatrix, omega: &DMatrix<f64>, beta_at: f64) -> Result<f64> {
    si_bias(a, psi, beta_at, &Metric::from_covariance(Some(omega))?)
}

/// Interference bias of the treatment slope in a fit with an intercept:
/// `β_ã · A_cᵀWΨA / A_cᵀWA_c` with `A_c` the `W`-centred treatment.
pub fn si_bias_with_intercept(a: &[f64], psi: &WeightMatrix, beta_at: f64, metric: &Metric) -> Result<f64> {
    check_dims(a, psi.n(), "Ψ")?;
    check_metric(a, metric)?;
    if beta_at == 0.0 {
        return Ok(0.0);
    }
    let c = metric.center(a);
    let pa = psi.apply(a)?;
    Ok(beta_at * metric.ratio(&c, &pa, a)?)
}

/// `β_u · δ2 / (δ1 + δ2)`, the same with or without spatial error correlation.
pub fn poisson_confounding_bias(beta_u: f64, spec: &PoissonPairSpec) -> Result<f64> {
    spec.validate()?;
    Ok(beta_u * spec.confounder_share())
}

/// Inputs of the indirect-confounding bias.
#[derive(Debug, Clone, PartialEq)]
pub struct IndirectScParams {
    pub beta_ut: f64,
    pub rho: f64,
    pub sigma_a: f64,
    pub sigma_u: f64,
    pub omega_a: DMatrix<f64>,
    pub omega_u: DMatrix<f64>,
    pub mu_a: f64,
    pub phi: WeightMatrix,
}

impl IndirectScParams {
    pub fn from_gaussian_pair(
        spec: &GaussianPairSpec,
        d: &DistanceMatrix,
        beta_ut: f64,
        phi: WeightMatrix,
    ) -> Result<Self> {
        spec.validate()?;
        let (omega_a, omega_u) = spec.correlations(d)?;
        Ok(IndirectScParams {
            beta_ut,
            rho: spec.rho,
            sigma_a: spec.sigma_a,
            sigma_u: spec.sigma_u,
            omega_a,
            omega_u,
            mu_a: spec.mu_a,
            phi,
        })
    }

    fn n(&self) -> usize {
        self.omega_a.nrows()
    }
}

/// `M = ρ σ_a σ_u Ω_u (σ_a² Ω_a + σ_u² Ω_u)⁻¹`, so that `E(U | A) = μ_u 1 + M (A - μ_a 1)`.
pub fn m_matrix(p: &IndirectScParams) -> Result<DMatrix<f64>> {
    let n = p.n();
    if p.omega_a.shape() != (n, n) || p.omega_u.shape() != (n, n) {
        return Err(Error::invalid("Ω_a and Ω_u must be square matrices of the same size"));
    }
    let numerator = &p.omega_u * (p.rho * p.sigma_a * p.sigma_u);
    if p.rho == 0.0 {
        return Ok(numerator);
    }
    let denominator = &p.omega_a * p.sigma_a.powi(2) + &p.omega_u * p.sigma_u.powi(2);
    let chol =
        Cholesky::new(&denominator).map_err(|_| Error::invalid("σ_a² Ω_a + σ_u² Ω_u is not positive definite"))?;
    if chol.condition_estimate() > CONDITION_WARNING {
        log::warn!("M denominator is ill-conditioned (estimate {:e})", chol.condition_estimate());
    }
    // M D = N with D symmetric, so Mᵀ = D⁻¹ Nᵀ.
    Ok(chol.solve(&numerator.transpose()).transpose())
}

fn indirect_signal(a: &[f64], p: &IndirectScParams) -> Result<Vec<f64>> {
    let m = m_matrix(p)?;
    let centred = DVector::from_iterator(a.len(), a.iter().map(|v| v - p.mu_a));
    p.phi.apply((m * centred).as_slice())
}

fn check_indirect(a: &[f64], p: &IndirectScParams, metric: &Metric) -> Result<()> {
    check_dims(a, p.n(), "Ω_a")?;
    check_dims(a, p.phi.n(), "Φ")?;
    check_metric(a, metric)?;
    check_nonzero(a)
}

/// `β_ũ · AᵀW Φ M (A - μ_a 1) / AᵀWA`, evaluated on `a` as given.
pub fn indirect_sc_bias(a: &[f64], p: &IndirectScParams, omega: Option<&DMatrix<f64>>) -> Result<f64> {
    indirect_sc_bias_in(a, p, &Metric::from_covariance(omega)?)
}

pub fn indirect_sc_bias_in(a: &[f64], p: &IndirectScParams, metric: &Metric) -> Result<f64> {
    check_indirect(a, p, metric)?;
    if p.beta_ut == 0.0 || p.rho == 0.0 || p.phi.is_zero() {
        return Ok(0.0);
    }
    Ok(p.beta_ut * metric.ratio(a, &indirect_signal(a, p)?, a)?)
}

/// How the treatment-share `p_c` is computed from the variances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "convention")]
pub enum PcConvention {
    /// `σ_c² / (σ_c² + σ_u²)`.
    #[default]
    Proportion,
    /// `σ² / (σ_c² + σ_u²)` with a separately supplied numerator `σ²`.
    Literal { sigma2: f64 },
}

/// Inputs of the direct-confounding bias.
///
/// The treatment is modelled as a confounder-driven part on scale `ω_u` plus an
/// independent part with standard deviation `σ_c` on scale `ω_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectScParams {
    pub beta_u: f64,
    pub rho: f64,
    pub sigma_u: f64,
    pub sigma_a: f64,
    pub sigma_c: f64,
    pub mu_a: f64,
    /// `Ω(ω_u)`.
    pub omega_u: DMatrix<f64>,
    /// `Ω(ω_c)`.
    pub omega_c: DMatrix<f64>,
    pub pc_convention: PcConvention,
}

impl DirectScParams {
    /// Parameters under which `ρ (σ_u/σ_a) K` equals the conditional-mean
    /// matrix `M` of the Gaussian pair, so the bias is exact for that law.
    ///
    /// The pair's confounder scale plays the role of `ω_c` with `σ_c = σ_u`,
    /// its treatment scale plays `ω_u` with standard deviation `σ_a`, and the
    /// ratio `σ_u/σ_a` in the prefactor is inverted accordingly.
    pub fn from_gaussian_pair(spec: &GaussianPairSpec, d: &DistanceMatrix, beta_u: f64) -> Result<Self> {
        spec.validate()?;
        let (omega_a, omega_u) = spec.correlations(d)?;
        Ok(DirectScParams {
            beta_u,
            rho: spec.rho,
            sigma_u: spec.sigma_a,
            sigma_a: spec.sigma_u,
            sigma_c: spec.sigma_u,
            mu_a: spec.mu_a,
            omega_u: omega_a,
            omega_c: omega_u,
            pc_convention: PcConvention::Proportion,
        })
    }

    pub fn p_c(&self) -> Result<f64> {
        let denom = self.sigma_c.powi(2) + self.sigma_u.powi(2);
        let p = match self.pc_convention {
            PcConvention::Proportion => self.sigma_c.powi(2) / denom,
            PcConvention::Literal { sigma2 } => sigma2 / denom,
        };
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("p_c = {p} is not in (0, 1)")));
        }
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_u > 0.0 && self.sigma_a > 0.0 && self.sigma_c > 0.0) {
            return Err(Error::invalid("σ_u, σ_a and σ_c must be positive"));
        }
        let n = self.omega_u.nrows();
        if self.omega_u.shape() != (n, n) || self.omega_c.shape() != (n, n) {
            return Err(Error::invalid("Ω(ω_u) and Ω(ω_c) must be square matrices of the same size"));
        }
        Ok(())
    }

    /// `K v = p_c Ω_c (p_c Ω_c + (1 - p_c) Ω_u)⁻¹ v`, which equals
    /// `p_c (p_c I + (1 - p_c) Ω_u Ω_c⁻¹)⁻¹ v`.
    pub fn apply_k(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let pc = self.p_c()?;
        let s = &self.omega_c * pc + &self.omega_u * (1.0 - pc);
        let chol = Cholesky::new(&s)
            .map_err(|_| Error::invalid("K is not computable: p_c Ω_c + (1 - p_c) Ω_u is singular"))?;
        let cond = chol.condition_estimate();
        if cond > CONDITION_WARNING {
            log::warn!("K is ill-conditioned (estimate {cond:e})");
        }
        Ok((&self.omega_c * chol.solve_vec(v) * pc).as_slice().to_vec())
    }

    /// `K` as a dense matrix, for inspection.
    pub fn k_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.omega_u.nrows();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                self.apply_k(&e)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(n, n, |i, j| cols[j][i]))
    }
}

/// `β_u ρ (σ_u/σ_a) [(A*ᵀWA*)⁻¹ A*ᵀW K (A - μ_a 1)]₂` with `A* = [1 A]` on raw `A`.
pub fn direct_sc_bias(a: &[f64], p: &DirectScParams, omega: Option<&DMatrix<f64>>) -> Result<f64> {
    direct_sc_bias_in(a, p, &Metric::from_covariance(omega)?)
}

pub fn direct_sc_bias_in(a: &[f64], p: &DirectScParams, metric: &Metric) -> Result<f64> {
    p.validate()?;
    check_dims(a, p.omega_u.nrows(), "Ω(ω_u)")?;
    check_metric(a, metric)?;
    if p.beta_u == 0.0 || p.rho == 0.0 {
        return Ok(0.0);
    }
    let centred: Vec<f64> = a.iter().map(|v| v - p.mu_a).collect();
    let signal = p.apply_k(&centred)?;
    let slope = augmented_slope(a, &signal, metric)?;
    Ok(p.beta_u * p.rho * (p.sigma_u / p.sigma_a) * slope)
}

/// Second entry of `(A*ᵀWA*)⁻¹ A*ᵀW v` with `A* = [1 A]`.
fn augmented_slope(a: &[f64], v: &[f64], metric: &Metric) -> Result<f64> {
    let ones = vec![1.0; a.len()];
    let g11 = metric.inner(&ones, &ones);
    let g12 = metric.inner(&ones, a);
    let g22 = metric.inner(a, a);
    let det = g11 * g22 - g12 * g12;
    if !(det > 1e-12 * g11 * g22) {
        return Err(Error::invalid("A* = [1 A] is rank deficient"));
    }
    let r1 = metric.inner(&ones, v);
    let r2 = metric.inner(a, v);
    Ok((g11 * r2 - g12 * r1) / det)
}

/// Bias of the treatment slope in a treatment-plus-intercept fit when the
/// outcome also carries interference, direct and indirect confounding:
/// the sum of the three conditional-mean projections on the same design.
pub fn combined_bias(
    a: &[f64],
    psi: &WeightMatrix,
    beta_at: f64,
    direct: &DirectScParams,
    indirect: &IndirectScParams,
    omega: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let metric = Metric::from_covariance(omega)?;
    combined_bias_in(a, psi, beta_at, direct, indirect, &metric)
}

pub fn combined_bias_in(
    a: &[f64],
    psi: &WeightMatrix,
    beta_at: f64,
    direct: &DirectScParams,
    indirect: &IndirectScParams,
    metric: &Metric,
) -> Result<f64> {
    check_indirect(a, indirect, metric)?;
    let si = si_bias_with_intercept(a, psi, beta_at, metric)?;
    let dsc = direct_sc_bias_in(a, direct, metric)?;
    let isc = if indirect.beta_ut == 0.0 || indirect.rho == 0.0 || indirect.phi.is_zero() {
        0.0
    } else {
        let c = metric.center(a);
        indirect.beta_ut * metric.ratio(&c, &indirect_signal(a, indirect)?, a)?
    };
    Ok(si + dsc + isc)
}

/// `β̂_a` minus the interference bias implied by a known `β_ã`.
///
/// With `intercept` the bias of an intercept fit is removed (see
/// [`si_bias_with_intercept`]); otherwise the literal expression on `a` is used.
pub fn correct_for_interference(
    beta_hat: f64,
    beta_at: f64,
    a: &[f64],
    psi: &WeightMatrix,
    metric: &Metric,
    intercept: bool,
) -> Result<f64> {
    let bias =
        if intercept { si_bias_with_intercept(a, psi, beta_at, metric)? } else { si_bias(a, psi, beta_at, metric)? };
    Ok(beta_hat - bias)
}

/// Audit record of one bias evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub formula: String,
    /// SHA-256 over the little-endian bytes of every input, in order.
    pub inputs_digest: String,
    pub value: f64,
}

impl BiasRecord {
    pub fn new(formula: &str, inputs: &[&[f64]], value: f64) -> Self {
        let mut h = Sha256::new();
        for block in inputs {
            h.update((block.len() as u64).to_le_bytes());
            for v in *block {
                h.update(v.to_le_bytes());
            }
        }
        BiasRecord { formula: formula.to_string(), inputs_digest: hex::encode(h.finalize()), value }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
