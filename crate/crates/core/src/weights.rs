//! Interference weight matrices `Ψ` (on the treatment) and `Φ` (on the confounder).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{DistanceMatrix, SpatialFieldSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum WeightScheme {
    /// `1/k` on each unit's `k` nearest neighbours.
    Knn { k: usize },
    /// `1/d` on pairs no farther apart than the given quantile of all pairwise distances.
    Distance { percentile: f64 },
    /// `1/d` on pairs no farther apart than an absolute distance.
    DistanceAbsolute { threshold: f64 },
    /// Loaded from a file or built by hand.
    Custom,
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::Knn { k } => write!(f, "knn{k}"),
            WeightScheme::Distance { percentile } => write!(f, "dist{}", (percentile * 100.0).round()),
            WeightScheme::DistanceAbsolute { threshold } => write!(f, "dist<={threshold}"),
            WeightScheme::Custom => f.write_str("custom"),
        }
    }
}

/// Nonnegative, zero-diagonal `n × n` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    scheme: WeightScheme,
    standardized: bool,
    /// Rows with no neighbour at all.
    isolated: Vec<usize>,
}

impl WeightMatrix {
    /// Validate a user-supplied matrix.
    pub fn from_matrix(w: DMatrix<f64>, scheme: WeightScheme) -> Result<Self> {
        let n = w.nrows();
        if n != w.ncols() || n == 0 {
            return Err(Error::invalid(format!("weight matrix must be square, got {}x{}", n, w.ncols())));
        }
        for i in 0..n {
            if w[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("weight matrix diagonal entry {i} is {}", w[(i, i)])));
            }
        }
        if let Some(v) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("weight matrix has entry {v}; weights must be finite and nonnegative")));
        }
        let standardized = (0..n).all(|i| {
            let s = w.row(i).sum();
            s == 0.0 || (s - 1.0).abs() <= 1e-12
        });
        Ok(Self::assemble(w, scheme, standardized))
    }

    fn assemble(w: DMatrix<f64>, scheme: WeightScheme, standardized: bool) -> Self {
        let isolated = (0..w.nrows()).filter(|&i| w.row(i).iter().all(|&v| v == 0.0)).collect();
        WeightMatrix { w, scheme, standardized, isolated }
    }

    /// The all-zero matrix: no interference.
    pub fn zeros(n: usize) -> Self {
        Self::assemble(DMatrix::zeros(n, n), WeightScheme::Custom, false)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Indices of rows without any neighbour.
    pub fn isolated(&self) -> &[usize] {
        &self.isolated
    }

    /// True when no pair received a weight (for example a threshold below the
    /// smallest pairwise distance).
    pub fn is_zero(&self) -> bool {
        self.isolated.len() == self.n()
    }

    pub fn nonzeros_in_row(&self, i: usize) -> usize {
        self.w.row(i).iter().filter(|&&v| v != 0.0).count()
    }

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::invalid(format!(
                "weight matrix is {}x{} but field has length {}",
                self.n(),
                self.n(),
                x.len()
            )));
        }
        Ok((&self.w * DVector::from_column_slice(x)).as_slice().to_vec())
    }

    /// Dense grid with no header, one matrix row per line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for i in 0..self.n() {
            wtr.write_record(self.w.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("weight row {}: cannot parse {s:?}: {e}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(format!("weight grid with {n} rows is not square")));
        }
        let w = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        WeightMatrix::from_matrix(w, WeightScheme::Custom)
    }
}

/// `1/k` on each unit's `k` nearest neighbours. Equidistant candidates are
/// ranked by smaller index first.
pub fn knn_weights(d: &DistanceMatrix, k: usize) -> Result<WeightMatrix> {
    let n = d.n();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", n - 1)));
    }
    let mut w = DMatrix::zeros(n, n);
    let share = 1.0 / k as f64;
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
        for &j in &order[..k] {
            w[(i, j)] = share;
        }
    }
    Ok(WeightMatrix::assemble(w, WeightScheme::Knn { k }, true))
}

/// Linear-interpolation (type 7) quantile of a sorted sample.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The distance at the given quantile of all unordered pairwise distances.
pub fn distance_threshold(d: &DistanceMatrix, percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::invalid(format!("percentile {percentile} outside (0, 1]")));
    }
    let mut pairs = d.pairwise();
    pairs.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&pairs, percentile))
}

/// Reciprocal-distance weights on pairs within the `percentile` quantile of
/// pairwise distances. Not row-standardized.
pub fn distance_weights(d: &DistanceMatrix, percentile: f64) -> Result<WeightMatrix> {
    let threshold = distance_threshold(d, percentile)?;
    let mut w = reciprocal_within(d, threshold);
    w.scheme = WeightScheme::Distance { percentile };
    Ok(w)
}

/// Reciprocal-distance weights on pairs at distance `<= threshold`.
/// A threshold below every pairwise distance yields the zero matrix.
pub fn distance_weights_at(d: &DistanceMatrix, threshold: f64) -> Result<WeightMatrix> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!("distance threshold {threshold} must be nonnegative")));
    }
    Ok(reciprocal_within(d, threshold))
}

fn reciprocal_within(d: &DistanceMatrix, threshold: f64) -> WeightMatrix {
    let n = d.n();
    let w = DMatrix::from_fn(n, n, |i, j| {
        let dij = d.get(i, j);
        if i != j && dij <= threshold {
            1.0 / dij
        } else {
            0.0
        }
    });
    let out = WeightMatrix::assemble(w, WeightScheme::DistanceAbsolute { threshold }, false);
    if out.is_zero() {
        log::warn!("distance threshold {threshold} is below every pairwise distance; weights are all zero");
    }
    out
}

/// Divide each nonzero row by its sum. Zero rows stay zero and are reported by
/// [`WeightMatrix::isolated`].
pub fn row_standardize(w: &WeightMatrix) -> WeightMatrix {
    let mut m = w.w.clone();
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    let out = WeightMatrix::assemble(m, w.scheme, true);
    if !out.isolated.is_empty() {
        log::debug!("{} isolated units after row standardization", out.isolated.len());
    }
    out
}

/// `w · field`.
pub fn apply_weights(w: &WeightMatrix, field: &SpatialFieldSample) -> Result<Vec<f64>> {
    w.apply(&field.values)
}

/// A weight scheme plus the standardization choice, resolved against a
/// particular set of distances by [`WeightConfig::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    #[serde(flatten)]
    pub scheme: WeightScheme,
    #[serde(default = "default_standardize")]
    pub standardize: bool,
}

fn default_standardize() -> bool {
    true
}

impl WeightConfig {
    pub fn knn(k: usize) -> Self {
        WeightConfig { scheme: WeightScheme::Knn { k }, standardize: true }
    }

    pub fn distance(percentile: f64) -> Self {
        WeightConfig { scheme: WeightScheme::Distance { percentile }, standardize: true }
    }

    pub fn build(&self, d: &DistanceMatrix) -> Result<WeightMatrix> {
        let w = match self.scheme {
            WeightScheme::Knn { k } => knn_weights(d, k)?,
            WeightScheme::Distance { percentile } => distance_weights(d, percentile)?,
            WeightScheme::DistanceAbsolute { threshold } => distance_weights_at(d, threshold)?,
            WeightScheme::Custom => {
                return Err(Error::invalid("a custom weight scheme cannot be rebuilt from distances"))
            }
        };
        Ok(if self.standardize { row_standardize(&w) } else { w })
    }
}

impl std::fmt::Display for WeightConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.scheme)?;
        if !self.standardize && !matches!(self.scheme, WeightScheme::Knn { .. }) {
            f.write_str("-raw")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for WeightConfig {
    type Err = Error;

    /// Parses the [`Display`](std::fmt::Display) form: `knn4`, `dist95`,
    /// `dist50-raw` or `dist<=2.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, standardize) = match s.strip_suffix("-raw") {
            Some(b) => (b, false),
            None => (s, true),
        };
        let bad = || {
            Error::invalid(format!("unknown weight scheme {s:?}; expected e.g. knn4, dist95, dist50-raw or dist<=2.5"))
        };
        let scheme = if let Some(k) = body.strip_prefix("knn") {
            WeightScheme::Knn { k: k.parse().map_err(|_| bad())? }
        } else if let Some(t) = body.strip_prefix("dist<=") {
            WeightScheme::DistanceAbsolute { threshold: t.parse().map_err(|_| bad())? }
        } else if let Some(p) = body.strip_prefix("dist") {
            let p: f64 = p.parse().map_err(|_| bad())?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(bad());
            }
            WeightScheme::Distance { percentile: p / 100.0 }
        } else {
            return Err(bad());
        };
        Ok(WeightConfig { scheme, standardize })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{distance_matrix, LocationSet, Point};
    use approx::assert_relative_eq;

    fn collinear() -> DistanceMatrix {
        let pts = [0.0, 1.0, 3.0].iter().map(|&x| Point::new(x, 0.0)).collect();
        distance_matrix(&LocationSet::from_points(pts).unwrap()).unwrap()
    }

    #[test]
    fn scheme_names_round_trip() {
        for name in ["knn4", "knn1", "dist95", "dist50", "dist75-raw", "dist<=2.5-raw"] {
            let w: WeightConfig = name.parse().unwrap();
            assert_eq!(w.to_string(), name);
        }
        assert_eq!("dist95".parse::<WeightConfig>().unwrap(), WeightConfig::distance(0.95));
        for bad in ["knn", "dist0", "dist150", "queen"] {
            assert!(bad.parse::<WeightConfig>().is_err(), "{bad}");
        }
    }

    #[test]
    fn nearest_neighbour_by_hand() {
        let w = knn_weights(&collinear(), 1).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(w.matrix(), &expected);
        assert!(w.is_standardized());
    }

    #[test]
    fn all_neighbours() {
        let w = knn_weights(&collinear(), 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.matrix()[(i, j)], if i == j { 0.0 } else { 0.5 });
            }
        }
        assert!(knn_weights(&collinear(), 3).is_err());
        assert!(knn_weights(&collinear(), 0).is_err());
    }

    #[test]
    fn ties_prefer_smaller_index() {
        // Point 1 is equidistant from 0 and 2.
        let pts = [0.0, 1.0, 2.0].iter().map(|&x| Point::new(x, 0.0)).collect();
        let d = distance_matrix(&LocationSet::from_points(pts).unwrap()).unwrap();
        let w = knn_weights(&d, 1).unwrap();
        assert_eq!(w.matrix()[(1, 0)], 1.0);
        assert_eq!(w.matrix()[(1, 2)], 0.0);
    }

    #[test]
    fn reciprocal_distance_by_hand() {
        let w = distance_weights(&collinear(), 1.0).unwrap();
        let m = w.matrix();
        assert_relative_eq!(m[(0, 1)], 1.0);
        assert_relative_eq!(m[(0, 2)], 1.0 / 3.0);
        assert_relative_eq!(m[(1, 2)], 0.5);
        assert_eq!(m, &m.transpose());
        assert!((0..3).all(|i| m[(i, i)] == 0.0));
        assert!(!w.is_standardized());
    }

    #[test]
    fn threshold_below_every_distance_gives_zero_matrix() {
        let w = distance_weights_at(&collinear(), 0.5).unwrap();
        assert!(w.is_zero());
        assert_eq!(w.isolated(), &[0, 1, 2]);
        assert!(distance_weights(&collinear(), 0.0).is_err());
    }

    #[test]
    fn standardize_row_by_hand() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[0.0, 1.0, 1.0 / 3.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        );
        let w = row_standardize(&WeightMatrix::from_matrix(m, WeightScheme::Custom).unwrap());
        let r = w.matrix().row(0);
        assert_relative_eq!(r[1], 6.0 / 11.0, epsilon = 1e-15);
        assert_relative_eq!(r[2], 2.0 / 11.0, epsilon = 1e-15);
        assert_relative_eq!(r[3], 3.0 / 11.0, epsilon = 1e-15);
        assert_eq!(w.isolated(), &[2]);
        assert!(w.is_standardized());
    }

    #[test]
    fn standardizing_knn_is_identity() {
        let w = knn_weights(&collinear(), 1).unwrap();
        assert_eq!(row_standardize(&w).matrix(), w.matrix());
    }

    #[test]
    fn apply_by_hand() {
        let w =
            WeightMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]), WeightScheme::Custom).unwrap();
        assert_eq!(w.apply(&[1.0, 2.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(WeightMatrix::zeros(2).apply(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(w.apply(&[1.0]).is_err());
    }

    #[test]
    fn invalid_matrices_rejected() {
        let diag = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        assert!(WeightMatrix::from_matrix(diag, WeightScheme::Custom).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0., -1., 0., 0.]);
        assert!(WeightMatrix::from_matrix(neg, WeightScheme::Custom).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let w = row_standardize(&distance_weights(&collinear(), 1.0).unwrap());
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let back = WeightMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.matrix(), w.matrix());
        assert!(back.is_standardized());
    }
}
