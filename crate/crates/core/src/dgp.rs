//! Outcome models with interference and confounding terms.
//!
//! The general model is
//!
//! ```text
//! Y = β0 + βa A + βã ΨA + βu U + βũ ΦU + ε
//! ```
//!
//! and the six named models keep subsets of those terms:
//!
//! | model | terms        |
//! |-------|--------------|
//! | M1    | T            |
//! | M2    | T+I          |
//! | M3    | T+I+DSC      |
//! | M4    | T+DSC        |
//! | M5    | T+DSC+ISC    |
//! | M6    | T+I+DSC+ISC  |
//!
//! where T is the treatment, I the interference term `ΨA`, DSC the direct
//! confounder `U` and ISC the indirect confounder `ΦU`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    distance_matrix, CovarianceSpec, DistanceMatrix, FieldKind, GaussianPairSampler, GaussianPairSpec, GaussianSampler,
    LatentField, LinkConstants, LocationSet, PoissonPairSpec,
};
use crate::rng::Seed;
use crate::weights::{WeightConfig, WeightMatrix};

/// Regressors besides the treatment, which is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Terms {
    pub intercept: bool,
    pub interference: bool,
    pub direct: bool,
    pub indirect: bool,
}

impl Terms {
    pub const fn new(interference: bool, direct: bool, indirect: bool) -> Self {
        Terms { intercept: true, interference, direct, indirect }
    }

    pub const M1: Terms = Terms::new(false, false, false);
    pub const M2: Terms = Terms::new(true, false, false);
    pub const M3: Terms = Terms::new(true, true, false);
    pub const M4: Terms = Terms::new(false, true, false);
    pub const M5: Terms = Terms::new(false, true, true);
    pub const M6: Terms = Terms::new(true, true, true);

    /// The seven fitted models of the application comparison, in table order.
    pub const APPLICATION_MODELS: [Terms; 7] = [
        Terms::new(true, false, false),
        Terms::new(false, true, false),
        Terms::new(false, false, true),
        Terms::new(true, true, false),
        Terms::new(true, false, true),
        Terms::new(false, true, true),
        Terms::new(true, true, true),
    ];

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn needs_confounder(&self) -> bool {
        self.direct || self.indirect
    }

    /// Whether every term in `other` is also in `self`.
    pub fn contains(&self, other: &Terms) -> bool {
        (!other.interference || self.interference)
            && (!other.direct || self.direct)
            && (!other.indirect || self.indirect)
            && (!other.intercept || self.intercept)
    }

    /// Number of regression columns.
    pub fn columns(&self) -> usize {
        1 + [self.intercept, self.interference, self.direct, self.indirect].iter().filter(|&&b| b).count()
    }

    /// Position of the treatment column in the design.
    pub fn treatment_column(&self) -> usize {
        usize::from(self.intercept)
    }
}

impl fmt::Display for Terms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("T")?;
        for (on, label) in [(self.interference, "+I"), (self.direct, "+DSC"), (self.indirect, "+ISC")] {
            if on {
                f.write_str(label)?;
            }
        }
        Ok(())
    }
}

impl FromStr for Terms {
    type Err = Error;

    /// Parses `T`, `T+I`, `T+DSC+ISC`, ... or `M1` to `M6`.
    fn from_str(s: &str) -> Result<Self> {
        let named = [
            ("M1", Terms::M1),
            ("M2", Terms::M2),
            ("M3", Terms::M3),
            ("M4", Terms::M4),
            ("M5", Terms::M5),
            ("M6", Terms::M6),
        ];
        if let Some((_, t)) = named.iter().find(|(n, _)| n.eq_ignore_ascii_case(s.trim())) {
            return Ok(*t);
        }
        let mut terms = Terms::new(false, false, false);
        let mut saw_treatment = false;
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_uppercase().as_str() {
                "T" => saw_treatment = true,
                "I" => terms.interference = true,
                "DSC" => terms.direct = true,
                "ISC" => terms.indirect = true,
                _ => return Err(Error::invalid(format!("unknown model term {part:?} in {s:?}"))),
            }
        }
        if !saw_treatment {
            return Err(Error::invalid(format!("model {s:?} must include the treatment term T")));
        }
        Ok(terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coefficients {
    pub intercept: f64,
    pub treatment: f64,
    #[serde(default)]
    pub interference: f64,
    #[serde(default)]
    pub direct: f64,
    #[serde(default)]
    pub indirect: f64,
}

impl Coefficients {
    pub fn new(treatment: f64, interference: f64, direct: f64, indirect: f64) -> Self {
        Coefficients { intercept: 0.0, treatment, interference, direct, indirect }
    }

    fn all(&self) -> [f64; 5] {
        [self.intercept, self.treatment, self.interference, self.direct, self.indirect]
    }

    /// Coefficients of the columns that `terms` would put in a design, in order.
    pub fn for_terms(&self, terms: &Terms) -> Vec<f64> {
        let mut out = Vec::with_capacity(terms.columns());
        if terms.intercept {
            out.push(self.intercept);
        }
        out.push(self.treatment);
        for (on, v) in
            [(terms.interference, self.interference), (terms.direct, self.direct), (terms.indirect, self.indirect)]
        {
            if on {
                out.push(v);
            }
        }
        out
    }
}

/// How the treatment `A` and, when present, the confounder `U` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "model")]
pub enum ExposureModel {
    /// Treatment only, from a latent field.
    Field { kind: FieldKind, latent: LatentField },
    /// Latent Gaussian pair, each component mapped through its own kind.
    Pair {
        pair: GaussianPairSpec,
        treatment_kind: FieldKind,
        confounder_kind: FieldKind,
        #[serde(default)]
        links: LinkConstants,
    },
    /// Treatment and confounder from independent latent fields.
    Independent {
        treatment_kind: FieldKind,
        treatment: LatentField,
        confounder_kind: FieldKind,
        confounder: LatentField,
    },
    /// Poisson sum construction with constant rates.
    PoissonPair(PoissonPairSpec),
}

impl ExposureModel {
    pub fn has_confounder(&self) -> bool {
        !matches!(self, ExposureModel::Field { .. })
    }

    pub fn treatment_kind(&self) -> FieldKind {
        match self {
            ExposureModel::Field { kind, .. } => *kind,
            ExposureModel::Pair { treatment_kind, .. } | ExposureModel::Independent { treatment_kind, .. } => {
                *treatment_kind
            }
            ExposureModel::PoissonPair(_) => FieldKind::Poisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Terms,
    pub coefficients: Coefficients,
    pub error: CovarianceSpec,
    pub exposure: ExposureModel,
    /// Weights on the treatment. When set, `ΨA` is stored in generated data
    /// even if the outcome does not use it, so that over-specified fits can
    /// include it.
    pub psi: Option<WeightConfig>,
    /// Weights on the confounder.
    pub phi: Option<WeightConfig>,
}

impl ModelSpec {
    /// Check the dependencies between terms, weights and exposures.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.coefficients.all().iter().any(|c| !c.is_finite()) {
            problems.push("coefficients must be finite".to_string());
        }
        if self.terms.interference && self.psi.is_none() {
            problems.push("interference term requires treatment weights (psi)".to_string());
        }
        if self.terms.indirect && self.phi.is_none() {
            problems.push("indirect-confounder term requires confounder weights (phi)".to_string());
        }
        if self.terms.needs_confounder() && !self.exposure.has_confounder() {
            problems.push("confounder terms require an exposure model that draws a confounder".to_string());
        }
        if let Err(e) = self.error.validate() {
            problems.push(format!("error covariance: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent model: {}", problems.join("; "))))
        }
    }
}

/// Realized treatment and confounder.
#[derive(Debug, Clone, PartialEq)]
pub struct Exposures {
    pub a: Vec<f64>,
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: ModelSpec,
    pub seed: Seed,
}

/// Aligned fields on a set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub loc: LocationSet,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub a_tilde: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub u_tilde: Option<Vec<f64>>,
    pub eps: Option<Vec<f64>>,
    pub provenance: Option<Provenance>,
}

/// Regression design with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub terms: Terms,
}

impl Design {
    pub fn treatment_column(&self) -> usize {
        self.terms.treatment_column()
    }
}

impl DataSet {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Check that every present field has one value per location.
    pub fn validate(&self) -> Result<()> {
        let n = self.loc.len();
        let fields: [(&str, Option<&Vec<f64>>); 6] = [
            ("Y", Some(&self.y)),
            ("A", Some(&self.a)),
            ("Atilde", self.a_tilde.as_ref()),
            ("U", self.u.as_ref()),
            ("Utilde", self.u_tilde.as_ref()),
            ("eps", self.eps.as_ref()),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::invalid(format!(
                        "field {name} has length {} but there are {n} locations",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Terms whose columns are available.
    pub fn available_terms(&self) -> Terms {
        Terms {
            intercept: true,
            interference: self.a_tilde.is_some(),
            direct: self.u.is_some(),
            indirect: self.u_tilde.is_some(),
        }
    }

    /// Columns in the order (intercept?, A, Ã?, U?, Ũ?). With `center`, every
    /// column other than the intercept has its mean subtracted.
    pub fn design_matrix(&self, fitted: &Terms, center: bool) -> Result<Design> {
        let available = self.available_terms();
        let mut missing = Vec::new();
        for (wanted, have, name) in [
            (fitted.interference, available.interference, "Atilde"),
            (fitted.direct, available.direct, "U"),
            (fitted.indirect, available.indirect, "Utilde"),
        ] {
            if wanted && !have {
                missing.push(name);
            }
        }
        if !missing.is_empty() {
            return Err(Error::invalid(format!("requested terms were never generated: {}", missing.join(", "))));
        }
        let n = self.n();
        let mut cols: Vec<(&str, Vec<f64>)> = Vec::with_capacity(fitted.columns());
        if fitted.intercept {
            cols.push(("intercept", vec![1.0; n]));
        }
        cols.push(("A", self.a.clone()));
        let optional = [
            (fitted.interference, "Atilde", &self.a_tilde),
            (fitted.direct, "U", &self.u),
            (fitted.indirect, "Utilde", &self.u_tilde),
        ];
        for (on, name, v) in optional {
            if on {
                cols.push((name, v.clone().expect("checked above")));
            }
        }
        if center {
            for (name, v) in cols.iter_mut() {
                if *name != "intercept" {
                    let m = v.iter().sum::<f64>() / n as f64;
                    v.iter_mut().for_each(|x| *x -= m);
                }
            }
        }
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].1[i]);
        Ok(Design { x, names: cols.iter().map(|(s, _)| s.to_string()).collect(), terms: *fitted })
    }

    /// Comma-separated with header `x,y,Y,A[,Atilde][,U][,Utilde]`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["x", "y", "Y", "A"];
        let extra: Vec<(&str, &Vec<f64>)> = [("Atilde", &self.a_tilde), ("U", &self.u), ("Utilde", &self.u_tilde)]
            .into_iter()
            .filter_map(|(n, v)| v.as_ref().map(|v| (n, v)))
            .collect();
        header.extend(extra.iter().map(|(n, _)| *n));
        wtr.write_record(&header)?;
        for (i, p) in self.loc.points().iter().enumerate() {
            let mut row = vec![
                format!("{:?}", p.x),
                format!("{:?}", p.y),
                format!("{:?}", self.y[i]),
                format!("{:?}", self.a[i]),
            ];
            row.extend(extra.iter().map(|(_, v)| format!("{:?}", v[i])));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A model bound to a location set, with every matrix factorization done once.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: ModelSpec,
    loc: LocationSet,
    dist: DistanceMatrix,
    psi: Option<WeightMatrix>,
    phi: Option<WeightMatrix>,
    exposure: ExposureSampler,
    error: GaussianSampler,
}

#[derive(Debug, Clone)]
enum ExposureSampler {
    Field(FieldKind, LinkConstants, GaussianSampler),
    Pair(FieldKind, FieldKind, LinkConstants, GaussianPairSampler),
    Independent((FieldKind, LinkConstants, GaussianSampler), (FieldKind, LinkConstants, GaussianSampler)),
    Poisson(PoissonPairSpec),
}

impl Generator {
    pub fn new(spec: ModelSpec, loc: LocationSet) -> Result<Self> {
        spec.validate()?;
        let dist = distance_matrix(&loc)?;
        Self::with_distances(spec, loc, dist)
    }

    /// Use precomputed distances, for example great-circle distances.
    pub fn with_distances(spec: ModelSpec, loc: LocationSet, dist: DistanceMatrix) -> Result<Self> {
        spec.validate()?;
        if dist.n() != loc.len() {
            return Err(Error::invalid("distance matrix does not match the location set"));
        }
        let psi = spec.psi.map(|w| w.build(&dist)).transpose()?;
        let phi = spec.phi.map(|w| w.build(&dist)).transpose()?;
        let exposure = match spec.exposure {
            ExposureModel::Field { kind, latent } => ExposureSampler::Field(kind, latent.links, latent.sampler(&dist)?),
            ExposureModel::Pair { pair, treatment_kind, confounder_kind, links } => {
                ExposureSampler::Pair(treatment_kind, confounder_kind, links, GaussianPairSampler::new(pair, &dist)?)
            }
            ExposureModel::Independent { treatment_kind, treatment, confounder_kind, confounder } => {
                ExposureSampler::Independent(
                    (treatment_kind, treatment.links, treatment.sampler(&dist)?),
                    (confounder_kind, confounder.links, confounder.sampler(&dist)?),
                )
            }
            ExposureModel::PoissonPair(p) => {
                p.validate()?;
                ExposureSampler::Poisson(p)
            }
        };
        let error =
            LatentField { mean: 0.0, covariance: spec.error, links: LinkConstants::default() }.sampler(&dist)?;
        Ok(Generator { spec, loc, dist, psi, phi, exposure, error })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn locations(&self) -> &LocationSet {
        &self.loc
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.dist
    }

    pub fn psi(&self) -> Option<&WeightMatrix> {
        self.psi.as_ref()
    }

    pub fn phi(&self) -> Option<&WeightMatrix> {
        self.phi.as_ref()
    }

    /// Draw `A` and, when the exposure model has one, `U`.
    pub fn draw_exposures(&self, seed: Seed) -> Result<Exposures> {
        let mut rng = seed.rng();
        Ok(match &self.exposure {
            ExposureSampler::Field(kind, links, s) => {
                let z = s.draw(&mut rng);
                Exposures { a: kind.transform(z.as_slice(), links, &mut rng)?, u: None }
            }
            ExposureSampler::Pair(ka, ku, links, s) => {
                let (za, zu) = s.draw(&mut rng);
                let a = ka.transform(&za, links, &mut rng)?;
                let u = ku.transform(&zu, links, &mut rng)?;
                Exposures { a, u: Some(u) }
            }
            ExposureSampler::Independent((ka, la, sa), (ku, lu, su)) => {
                let za = sa.draw(&mut rng);
                let zu = su.draw(&mut rng);
                let a = ka.transform(za.as_slice(), la, &mut rng)?;
                let u = ku.transform(zu.as_slice(), lu, &mut rng)?;
                Exposures { a, u: Some(u) }
            }
            ExposureSampler::Poisson(p) => {
                let (a, u) = p.draw(self.loc.len(), &mut rng)?;
                Exposures { a, u: Some(u) }
            }
        })
    }

    /// Draw the error field.
    pub fn draw_error(&self, seed: Seed) -> Vec<f64> {
        self.error.draw(&mut seed.rng()).as_slice().to_vec()
    }

    /// Assemble the outcome from given exposures and error.
    pub fn assemble(&self, exposures: Exposures, eps: Vec<f64>, provenance: Option<Provenance>) -> Result<DataSet> {
        let n = self.loc.len();
        if exposures.a.len() != n || eps.len() != n || exposures.u.as_ref().is_some_and(|u| u.len() != n) {
            return Err(Error::invalid("exposure or error length does not match the location set"));
        }
        let a_tilde = self.psi.as_ref().map(|w| w.apply(&exposures.a)).transpose()?;
        let u_tilde = match (&self.phi, &exposures.u) {
            (Some(w), Some(u)) => Some(w.apply(u)?),
            _ => None,
        };
        let t = self.spec.terms;
        let b = self.spec.coefficients;
        let y = (0..n)
            .map(|i| {
                let mut v = b.intercept + b.treatment * exposures.a[i];
                if t.interference {
                    v += b.interference * a_tilde.as_ref().expect("validated")[i];
                }
                if t.direct {
                    v += b.direct * exposures.u.as_ref().expect("validated")[i];
                }
                if t.indirect {
                    v += b.indirect * u_tilde.as_ref().expect("validated")[i];
                }
                v + eps[i]
            })
            .collect();
        Ok(DataSet {
            loc: self.loc.clone(),
            y,
            a: exposures.a,
            a_tilde,
            u: exposures.u,
            u_tilde,
            eps: Some(eps),
            provenance,
        })
    }

    /// Exposures from `seed.derive("exposure")`, error from `seed.derive("error")`.
    pub fn generate(&self, seed: Seed) -> Result<DataSet> {
        let exposures = self.draw_exposures(seed.derive("exposure"))?;
        let eps = self.draw_error(seed.derive("error"));
        self.assemble(exposures, eps, Some(Provenance { spec: self.spec, seed }))
    }
}

/// Draw one data set from `spec` on `loc`.
pub fn generate(spec: &ModelSpec, loc: &LocationSet, seed: Seed) -> Result<DataSet> {
    Generator::new(*spec, loc.clone())?.generate(seed)
}
