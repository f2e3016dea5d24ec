//! Point data from CSV files.
//!
//! Any comma-separated file with a header row works. Five roles are mapped to
//! column names: the two coordinates, the outcome, the treatment and an
//! optional confounder. Rows with a missing value (empty, `NA`, `NaN` or
//! `null`) in a mapped column are dropped and counted. Repeated coordinates
//! are moved apart by [`DUPLICATE_JITTER`] along `x`, since distance weights
//! divide by the distance.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spatial_bias::dgp::DataSet;
use spatial_bias::geo::{LocationSet, Point};

use crate::error::{CliError, CliResult};

/// Offset added to the `x` coordinate of a repeated location.
pub const DUPLICATE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub x: String,
    pub y: String,
    pub outcome: String,
    pub treatment: String,
    pub confounder: Option<String>,
}

impl Default for ColumnMap {
    /// The header written by the simulator: `x, y, Y, A` and no confounder.
    fn default() -> Self {
        ColumnMap { x: "x".into(), y: "y".into(), outcome: "Y".into(), treatment: "A".into(), confounder: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: DataSet,
    /// Rows dropped for a missing value.
    pub dropped: usize,
    /// Rows whose coordinates were jittered.
    pub jittered: usize,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || ["na", "nan", "null"].contains(&t.to_ascii_lowercase().as_str())
}

pub fn read_spatial_csv(path: &Path, columns: &ColumnMap) -> CliResult<Ingested> {
    let file = File::open(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })?;
    parse_spatial_csv(file, columns)
}

pub fn parse_spatial_csv<R: Read>(input: R, columns: &ColumnMap) -> CliResult<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let mut roles =
        vec![("x", &columns.x), ("y", &columns.y), ("outcome", &columns.outcome), ("treatment", &columns.treatment)];
    if let Some(c) = &columns.confounder {
        roles.push(("confounder", c));
    }
    let index: Vec<usize> = roles
        .iter()
        .map(|(role, name)| {
            header.iter().position(|h| h == name.as_str()).ok_or_else(|| CliError::Schema {
                role: role.to_string(),
                column: name.to_string(),
                available: header.iter().collect::<Vec<_>>().join(", "),
            })
        })
        .collect::<CliResult<_>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); roles.len()];
    let mut dropped = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cells: Vec<&str> = index.iter().map(|&i| record.get(i).unwrap_or("")).collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        for (k, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| CliError::Parse {
                row: row + 1,
                column: roles[k].1.clone(),
                value: cell.to_string(),
            })?;
            values[k].push(v);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} row(s) with missing values");
    }

    let mut seen = HashSet::new();
    let mut jittered = 0;
    let mut points = Vec::with_capacity(values[0].len());
    for (&x, &y) in values[0].iter().zip(&values[1]) {
        let mut p = Point::new(x, y);
        if !seen.insert((p.x.to_bits(), p.y.to_bits())) {
            jittered += 1;
            let mut k = 1.0;
            while !seen.insert((p.x.to_bits(), p.y.to_bits())) {
                p = Point::new(x + k * DUPLICATE_JITTER, y);
                k += 1.0;
            }
        }
        points.push(p);
    }
    if jittered > 0 {
        log::warn!("moved {jittered} repeated location(s) by {DUPLICATE_JITTER} along x");
    }
    let loc = LocationSet::from_points(points)?;
    let mut values = values.into_iter().skip(2);
    let y = values.next().expect("outcome column");
    let a = values.next().expect("treatment column");
    let u = values.next();
    Ok(Ingested {
        data: DataSet { loc, y, a, a_tilde: None, u, u_tilde: None, eps: None, provenance: None },
        dropped,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, columns: &ColumnMap) -> CliResult<Ingested> {
        parse_spatial_csv(text.as_bytes(), columns)
    }

    #[test]
    fn three_rows() {
        let got = parse("x,y,Y,A\n0,0,1,2\n1,0,3,4\n0,1,5,6\n", &ColumnMap::default()).unwrap();
        assert_eq!(got.data.n(), 3);
        assert_eq!(got.data.y, vec![1.0, 3.0, 5.0]);
        assert_eq!(got.data.a, vec![2.0, 4.0, 6.0]);
        assert_eq!(got.data.u, None);
        assert_eq!((got.dropped, got.jittered), (0, 0));
    }

    #[test]
    fn missing_outcome_column_is_named() {
        let err = parse("x,y,A\n0,0,1\n1,1,2\n", &ColumnMap::default()).unwrap_err();
        assert!(matches!(&err, CliError::Schema { role, .. } if role == "outcome"), "{err}");
        assert!(err.to_string().contains("outcome"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn repeated_location_is_jittered_once() {
        let got = parse("x,y,Y,A\n0,0,1,2\n1,0,3,4\n0,0,5,6\n", &ColumnMap::default()).unwrap();
        assert_eq!(got.data.n(), 3);
        assert_eq!(got.jittered, 1);
        assert_eq!(got.data.loc.points()[2], Point::new(DUPLICATE_JITTER, 0.0));
    }

    #[test]
    fn missing_values_drop_rows() {
        let columns = ColumnMap { confounder: Some("U".into()), ..ColumnMap::default() };
        let got = parse("x,y,Y,A,U,extra\n0,0,1,2,NA,\n1,0,3,4,1,\n0,1,5,,1,\n2,2,1,1,0,z\n", &columns).unwrap();
        assert_eq!(got.data.n(), 2);
        assert_eq!(got.dropped, 2);
        assert_eq!(got.data.u, Some(vec![1.0, 0.0]));
    }

    #[test]
    fn bad_number_reports_row() {
        let err = parse("x,y,Y,A\n0,0,1,2\n1,0,abc,4\n", &ColumnMap::default()).unwrap_err();
        assert!(matches!(&err, CliError::Parse { row: 2, column, value } if column == "Y" && value == "abc"), "{err}");
    }

    #[test]
    fn custom_column_names() {
        let columns = ColumnMap {
            x: "lon".into(),
            y: "lat".into(),
            outcome: "lst".into(),
            treatment: "air".into(),
            confounder: Some("precip".into()),
        };
        let got = parse("precip,air,lst,lat,lon\n1,2,3,4,5\n6,7,8,9,10\n", &columns).unwrap();
        assert_eq!(got.data.loc.points()[1], Point::new(10.0, 9.0));
        assert_eq!(got.data.u, Some(vec![1.0, 6.0]));
    }
}
