//! Locations, distances, correlation kernels and spatial random fields.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::{Rng, Seed};

const MAX_RESAMPLE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Bounds { x_min, x_max, y_min, y_max };
        b.validate()?;
        Ok(b)
    }

    /// `[lo, hi] × [lo, hi]`.
    pub fn square(lo: f64, hi: f64) -> Result<Self> {
        Bounds::new(lo, hi, lo, hi)
    }

    /// Smallest rectangle containing every point.
    pub fn enclosing(points: &[Point]) -> Result<Self> {
        let mut b =
            Bounds { x_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_min: f64::INFINITY, y_max: f64::NEG_INFINITY };
        for p in points {
            b.x_min = b.x_min.min(p.x);
            b.x_max = b.x_max.max(p.x);
            b.y_min = b.y_min.min(p.y);
            b.y_max = b.y_max.max(p.y);
        }
        if !(b.x_min.is_finite() && b.y_min.is_finite() && b.x_max.is_finite() && b.y_max.is_finite()) {
            return Err(Error::invalid("cannot bound an empty or non-finite point set"));
        }
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::invalid(format!("degenerate bounds {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// At least two distinct points inside declared bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSet {
    points: Vec<Point>,
    bounds: Bounds,
}

impl LocationSet {
    pub fn new(points: Vec<Point>, bounds: Bounds) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 locations, got {}", points.len())));
        }
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| !bounds.contains(p)) {
            return Err(Error::invalid(format!("location {i} at ({}, {}) lies outside {bounds:?}", p.x, p.y)));
        }
        if let Some((i, j)) = first_coincident(&points) {
            return Err(Error::DegenerateGeometry(format!("locations {i} and {j} coincide")));
        }
        Ok(LocationSet { points, bounds })
    }

    /// Wrap points using their own bounding box.
    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        let mut bounds = Bounds::enclosing(&points)?;
        // Collinear inputs give a zero-width box; widen it so the bounds stay valid.
        if bounds.x_max == bounds.x_min {
            bounds.x_max += 1.0;
        }
        if bounds.y_max == bounds.y_min {
            bounds.y_max += 1.0;
        }
        LocationSet::new(points, bounds)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn distances(&self) -> Result<DistanceMatrix> {
        distance_matrix(self)
    }
}

fn first_coincident(points: &[Point]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(points[a].y.total_cmp(&points[b].y)));
    order.windows(2).find_map(|w| {
        let (a, b) = (points[w[0]], points[w[1]]);
        (a.x == b.x && a.y == b.y).then(|| (w[0].min(w[1]), w[0].max(w[1])))
    })
}

/// `n` points uniform on `bounds`. Coincident draws are replaced, up to 100 attempts.
pub fn sample_locations(n: usize, bounds: Bounds, seed: Seed) -> Result<LocationSet> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 locations, got {n}")));
    }
    bounds.validate()?;
    let mut rng = seed.rng();
    let draw = |rng: &mut Rng| {
        Point::new(rng.random_range(bounds.x_min..=bounds.x_max), rng.random_range(bounds.y_min..=bounds.y_max))
    };
    let mut points: Vec<Point> = (0..n).map(|_| draw(&mut rng)).collect();
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        match first_coincident(&points) {
            None => return LocationSet::new(points, bounds),
            Some((_, j)) => points[j] = draw(&mut rng),
        }
    }
    Err(Error::DegenerateGeometry(format!(
        "could not draw {n} distinct points in {bounds:?} after {MAX_RESAMPLE_ATTEMPTS} resamples"
    )))
}

/// Symmetric pairwise distances with zero diagonal and positive off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    /// Validate an externally computed distance matrix.
    pub fn from_matrix(d: DMatrix<f64>) -> Result<Self> {
        let n = d.nrows();
        if n != d.ncols() || n < 2 {
            return Err(Error::invalid(format!("distance matrix must be square with n >= 2, got {}x{}", n, d.ncols())));
        }
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("distance matrix diagonal entry {i} is {}", d[(i, i)])));
            }
            for j in (i + 1)..n {
                if d[(i, j)] != d[(j, i)] {
                    return Err(Error::invalid(format!("distance matrix not symmetric at ({i}, {j})")));
                }
                if !(d[(i, j)] > 0.0) || !d[(i, j)].is_finite() {
                    return Err(Error::DegenerateGeometry(format!("distance between {i} and {j} is {}", d[(i, j)])));
                }
            }
        }
        Ok(DistanceMatrix { d })
    }

    /// Great-circle distances in kilometres; points are (longitude, latitude) in degrees.
    pub fn haversine(loc: &LocationSet) -> Result<Self> {
        const EARTH_RADIUS_KM: f64 = 6371.0088;
        let p = loc.points();
        let n = p.len();
        let d = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                return 0.0;
            }
            let (lon1, lat1) = (p[i].x.to_radians(), p[i].y.to_radians());
            let (lon2, lat2) = (p[j].x.to_radians(), p[j].y.to_radians());
            let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
        });
        let d = (&d + d.transpose()) * 0.5;
        DistanceMatrix::from_matrix(d)
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Each unordered pair once, row-major over the upper triangle.
    pub fn pairwise(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.d[(i, j)]);
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.d.max()
    }
}

/// Euclidean distances between locations.
pub fn distance_matrix(loc: &LocationSet) -> Result<DistanceMatrix> {
    let p = loc.points();
    let n = p.len();
    let d = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { p[i].distance(&p[j]) });
    DistanceMatrix::from_matrix(d)
}

/// Matérn smoothness values with closed-form correlation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl Smoothness {
    pub fn value(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn from_value(v: f64) -> Result<Self> {
        match v {
            0.5 => Ok(Smoothness::Half),
            1.5 => Ok(Smoothness::ThreeHalves),
            2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(Error::invalid(format!("Matérn smoothness {v} is not one of 0.5, 1.5, 2.5"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CovarianceFamily {
    /// `exp(-d / range)`.
    Exponential,
    /// Matérn with distance scaled as `2 sqrt(v) d / range`. At `v = 0.5` this is
    /// `exp(-sqrt(2) d / range)`, which is not the same as `Exponential`.
    MaternHalfInteger { smoothness: Smoothness },
    /// Independent units.
    Identity,
}

/// A correlation function: family plus range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: CovarianceFamily,
    pub range: f64,
}

impl Kernel {
    pub fn exponential(range: f64) -> Self {
        Kernel { family: CovarianceFamily::Exponential, range }
    }

    pub fn identity() -> Self {
        Kernel { family: CovarianceFamily::Identity, range: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !self.range.is_finite() {
            return Err(Error::invalid(format!("range must be positive, got {}", self.range)));
        }
        Ok(())
    }

    /// Correlation at distance `d` (for `d > 0`; zero distance is always 1).
    pub fn correlation(&self, d: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        match self.family {
            CovarianceFamily::Identity => 0.0,
            CovarianceFamily::Exponential => (-d / self.range).exp(),
            CovarianceFamily::MaternHalfInteger { smoothness } => {
                let r = 2.0 * smoothness.value().sqrt() * d / self.range;
                let poly = match smoothness {
                    Smoothness::Half => 1.0,
                    Smoothness::ThreeHalves => 1.0 + r,
                    Smoothness::FiveHalves => 1.0 + r + r * r / 3.0,
                };
                poly * (-r).exp()
            }
        }
    }

    /// Unit-diagonal correlation matrix over a set of distances.
    pub fn matrix(&self, d: &DistanceMatrix) -> Result<DMatrix<f64>> {
        self.validate()?;
        let n = d.n();
        if self.family == CovarianceFamily::Identity {
            return Ok(DMatrix::identity(n, n));
        }
        let mut out = DMatrix::identity(n, n);
        for j in 0..n {
            for i in (j + 1)..n {
                let c = self.correlation(d.get(i, j));
                out[(i, j)] = c;
                out[(j, i)] = c;
            }
        }
        Ok(out)
    }
}

/// `Σ = variance · Ω(range) + nugget · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    #[serde(flatten)]
    pub kernel: Kernel,
    pub variance: f64,
    #[serde(default)]
    pub nugget: f64,
}

impl CovarianceSpec {
    pub fn new(kernel: Kernel, variance: f64, nugget: f64) -> Result<Self> {
        let spec = CovarianceSpec { kernel, variance, nugget };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exponential(range: f64, variance: f64) -> Self {
        CovarianceSpec { kernel: Kernel::exponential(range), variance, nugget: 0.0 }
    }

    /// `variance · I`.
    pub fn iid(variance: f64) -> Self {
        CovarianceSpec { kernel: Kernel::identity(), variance, nugget: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.variance >= 0.0) || !(self.nugget >= 0.0) {
            return Err(Error::invalid(format!(
                "variance and nugget must be non-negative, got {} and {}",
                self.variance, self.nugget
            )));
        }
        Ok(())
    }

    pub fn is_spatial(&self) -> bool {
        self.kernel.family != CovarianceFamily::Identity && self.variance > 0.0
    }

    pub fn total_variance(&self) -> f64 {
        self.variance + self.nugget
    }

    pub fn matrix(&self, d: &DistanceMatrix) -> Result<DMatrix<f64>> {
        self.validate()?;
        let mut m = self.kernel.matrix(d)? * self.variance;
        for i in 0..d.n() {
            m[(i, i)] += self.nugget;
        }
        Ok(m)
    }
}

/// Correlation matrix `Ω` for the spec's kernel (variance and nugget ignored).
pub fn correlation_matrix(d: &DistanceMatrix, spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    spec.kernel.matrix(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Normal,
    Poisson,
    Binary,
}

impl std::fmt::Display for FieldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FieldKind::Normal => "normal",
            FieldKind::Poisson => "poisson",
            FieldKind::Binary => "binary",
        })
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "continuous" => Ok(FieldKind::Normal),
            "poisson" | "count" => Ok(FieldKind::Poisson),
            "binary" | "discrete" => Ok(FieldKind::Binary),
            other => Err(Error::invalid(format!("unknown field kind {other:?}; expected normal, poisson or binary"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialFieldSample {
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl SpatialFieldSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Maps from a latent Gaussian field to non-Gaussian observations.
///
/// Poisson counts use a log link, `λ(s) = exp(log_intercept + Z(s))`. Binary
/// values are `1{Z(s) > threshold}` with a strict inequality, so a constant
/// latent field sitting exactly on the threshold yields all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConstants {
    pub poisson_log_intercept: f64,
    pub binary_threshold: f64,
}

impl Default for LinkConstants {
    fn default() -> Self {
        LinkConstants { poisson_log_intercept: 0.0, binary_threshold: 0.0 }
    }
}

impl FieldKind {
    /// Observation from a latent draw. Only the Poisson map consumes randomness.
    pub fn transform(self, latent: &[f64], links: &LinkConstants, rng: &mut Rng) -> Result<Vec<f64>> {
        match self {
            FieldKind::Normal => Ok(latent.to_vec()),
            FieldKind::Binary => {
                Ok(latent.iter().map(|&z| if z > links.binary_threshold { 1.0 } else { 0.0 }).collect())
            }
            FieldKind::Poisson => {
                latent.iter().map(|&z| poisson_draw((links.poisson_log_intercept + z).exp(), rng)).collect()
            }
        }
    }
}

pub(crate) fn poisson_draw(rate: f64, rng: &mut Rng) -> Result<f64> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(rate).map_err(|e| Error::invalid(format!("Poisson rate {rate}: {e}")))?;
    Ok(dist.sample(rng))
}

/// Draws `mean + L z` for a fixed covariance; the factor is computed once.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: Cholesky,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0, f64::max);
        let factor = Cholesky::with_jitter(cov, scale)?;
        Ok(GaussianSampler { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn draw(&self, rng: &mut Rng) -> DVector<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.factor.color(&z) + &self.mean
    }
}

/// One Gaussian field draw with the given mean and covariance.
pub fn sample_gp(mean: &[f64], cov: &DMatrix<f64>, seed: Seed) -> Result<SpatialFieldSample> {
    let sampler = GaussianSampler::new(DVector::from_column_slice(mean), cov)?;
    let values = sampler.draw(&mut seed.rng());
    Ok(SpatialFieldSample { values: values.as_slice().to_vec(), kind: FieldKind::Normal })
}

/// Parameters of the latent Gaussian field behind a normal, Poisson or binary sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentField {
    pub mean: f64,
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub links: LinkConstants,
}

impl LatentField {
    pub fn sampler(&self, d: &DistanceMatrix) -> Result<GaussianSampler> {
        let cov = self.covariance.matrix(d)?;
        GaussianSampler::new(DVector::from_element(d.n(), self.mean), &cov)
    }
}

/// Normal, Poisson or binary field sharing one latent Gaussian draw.
pub fn sample_field(
    kind: FieldKind,
    latent: &LatentField,
    d: &DistanceMatrix,
    seed: Seed,
) -> Result<SpatialFieldSample> {
    let sampler = latent.sampler(d)?;
    let mut rng = seed.rng();
    let z = sampler.draw(&mut rng);
    let values = kind.transform(z.as_slice(), &latent.links, &mut rng)?;
    Ok(SpatialFieldSample { values, kind })
}

/// Jointly Gaussian treatment `A` and confounder `U`.
///
/// `U ~ N(μ_u 1, σ_u² Ω_u)` and `A = A_a + A_u` where `A_a ~ N(μ_a 1, σ_a² Ω_a)`
/// is independent of `U` and `A_u` has the law of `U` shifted to mean zero but
/// is only partially aligned with it, so that
///
/// ```text
/// Var(A)    = σ_a² Ω_a + σ_u² Ω_u
/// Cov(A, U) = ρ σ_a σ_u Ω_u
/// ```
///
/// Under this law `E(U | A) = μ_u 1 + M (A - μ_a 1)` with
/// `M = ρ σ_a σ_u Ω_u (σ_a² Ω_a + σ_u² Ω_u)⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPairSpec {
    pub rho: f64,
    pub sigma_a: f64,
    pub sigma_u: f64,
    pub mu_a: f64,
    pub mu_u: f64,
    pub treatment_kernel: Kernel,
    pub confounder_kernel: Kernel,
}

impl GaussianPairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("correlation {} outside [-1, 1]", self.rho)));
        }
        if !(self.sigma_a > 0.0) || !(self.sigma_u > 0.0) {
            return Err(Error::invalid(format!(
                "standard deviations must be positive, got sigma_a={} sigma_u={}",
                self.sigma_a, self.sigma_u
            )));
        }
        self.treatment_kernel.validate()?;
        self.confounder_kernel.validate()
    }

    /// `(Ω_a, Ω_u)` on the given distances.
    pub fn correlations(&self, d: &DistanceMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.treatment_kernel.matrix(d)?, self.confounder_kernel.matrix(d)?))
    }

    /// The three blocks `(Var(A), Cov(A, U), Var(U))`.
    pub fn blocks(&self, d: &DistanceMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.validate()?;
        let (omega_a, omega_u) = self.correlations(d)?;
        let var_u = &omega_u * self.sigma_u.powi(2);
        let var_a = &omega_a * self.sigma_a.powi(2) + &var_u;
        let cov_au = &omega_u * (self.rho * self.sigma_a * self.sigma_u);
        Ok((var_a, cov_au, var_u))
    }

    /// Sampler for `U | A = a`: mean `μ_u 1 + C Var(A)⁻¹ (a - μ_a 1)` and
    /// covariance `Var(U) - C Var(A)⁻¹ C` with `C = ρ σ_a σ_u Ω_u`.
    pub fn conditional_confounder(&self, d: &DistanceMatrix, a: &[f64]) -> Result<GaussianSampler> {
        if a.len() != d.n() {
            return Err(Error::invalid(format!("treatment has length {} but there are {} locations", a.len(), d.n())));
        }
        let (var_a, cov_au, var_u) = self.blocks(d)?;
        let chol = Cholesky::with_jitter(&var_a, var_a.diagonal().max())?;
        let centred: Vec<f64> = a.iter().map(|v| v - self.mu_a).collect();
        let mean = &cov_au * chol.solve_vec(&centred) + DVector::from_element(d.n(), self.mu_u);
        let cond = &var_u - &cov_au * chol.solve(&cov_au);
        let cond = (&cond + cond.transpose()) * 0.5;
        GaussianSampler::new(mean, &cond)
    }
}

/// Cached factor of the stacked `2n × 2n` covariance of `(A, U)`.
#[derive(Debug, Clone)]
pub struct GaussianPairSampler {
    spec: GaussianPairSpec,
    joint: GaussianSampler,
}

impl GaussianPairSampler {
    pub fn new(spec: GaussianPairSpec, d: &DistanceMatrix) -> Result<Self> {
        let (var_a, cov_au, var_u) = spec.blocks(d)?;
        let n = d.n();
        let block_ok = |m: &DMatrix<f64>| Cholesky::with_jitter(m, m.diagonal().max()).is_ok();
        if !block_ok(&var_u) {
            return Err(Error::invalid("confounder block σ_u² Ω_u is not positive semidefinite"));
        }
        if !block_ok(&var_a) {
            return Err(Error::invalid("treatment block σ_a² Ω_a + σ_u² Ω_u is not positive semidefinite"));
        }
        let mut joint = DMatrix::zeros(2 * n, 2 * n);
        joint.view_mut((0, 0), (n, n)).copy_from(&var_a);
        joint.view_mut((n, n), (n, n)).copy_from(&var_u);
        joint.view_mut((n, 0), (n, n)).copy_from(&cov_au);
        joint.view_mut((0, n), (n, n)).copy_from(&cov_au.transpose());
        let mut mean = DVector::from_element(2 * n, spec.mu_a);
        mean.rows_mut(n, n).fill(spec.mu_u);
        let joint = GaussianSampler::new(mean, &joint).map_err(|_| {
            Error::invalid(format!(
                "cross-covariance block ρ σ_a σ_u Ω_u (ρ = {}) makes the joint covariance indefinite",
                spec.rho
            ))
        })?;
        Ok(GaussianPairSampler { spec, joint })
    }

    pub fn spec(&self) -> &GaussianPairSpec {
        &self.spec
    }

    /// Latent `(A, U)` draw.
    pub fn draw(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let x = self.joint.draw(rng);
        let n = x.len() / 2;
        (x.as_slice()[..n].to_vec(), x.as_slice()[n..].to_vec())
    }
}

pub fn sample_gaussian_pair(
    spec: &GaussianPairSpec,
    d: &DistanceMatrix,
    seed: Seed,
) -> Result<(SpatialFieldSample, SpatialFieldSample)> {
    let sampler = GaussianPairSampler::new(*spec, d)?;
    let (a, u) = sampler.draw(&mut seed.rng());
    Ok((
        SpatialFieldSample { values: a, kind: FieldKind::Normal },
        SpatialFieldSample { values: u, kind: FieldKind::Normal },
    ))
}

/// Independent Poisson components with constant rates: `A_a ~ Poisson(δ1)`,
/// `U ~ Poisson(δ2)`, and `A = A_a + U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonPairSpec {
    pub delta1: f64,
    pub delta2: f64,
}

impl PoissonPairSpec {
    pub fn new(delta1: f64, delta2: f64) -> Result<Self> {
        let spec = PoissonPairSpec { delta1, delta2 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta1 > 0.0 && self.delta1.is_finite()) || !(self.delta2 > 0.0 && self.delta2.is_finite()) {
            return Err(Error::invalid(format!(
                "Poisson rates must be positive, got delta1={} delta2={}",
                self.delta1, self.delta2
            )));
        }
        Ok(())
    }

    /// `δ2 / (δ1 + δ2)`, the success probability of `U | A`.
    pub fn confounder_share(&self) -> f64 {
        self.delta2 / (self.delta1 + self.delta2)
    }

    pub fn draw(&self, n: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let own = Poisson::new(self.delta1).map_err(|e| Error::invalid(e.to_string()))?;
        let shared = Poisson::new(self.delta2).map_err(|e| Error::invalid(e.to_string()))?;
        let mut a = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for _ in 0..n {
            let aa: f64 = own.sample(rng);
            let uu: f64 = shared.sample(rng);
            a.push(aa + uu);
            u.push(uu);
        }
        Ok((a, u))
    }
}

pub fn sample_poisson_pair(
    spec: &PoissonPairSpec,
    n: usize,
    seed: Seed,
) -> Result<(SpatialFieldSample, SpatialFieldSample)> {
    let (a, u) = spec.draw(n, &mut seed.rng())?;
    Ok((
        SpatialFieldSample { values: a, kind: FieldKind::Poisson },
        SpatialFieldSample { values: u, kind: FieldKind::Poisson },
    ))
}
