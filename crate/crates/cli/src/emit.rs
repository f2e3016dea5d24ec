//! `results.csv`, `results.json` and `tables.md`.
//!
//! Output bytes depend only on the report, so reruns with the same seed
//! produce identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_bias::montecarlo::{summaries_markdown, write_summaries_csv, MetricsSummary};
use spatial_bias::Error;

use crate::application::ApplicationTable;
use crate::error::{CliError, CliResult};

pub const APPLICATION_HEADER: [&str; 10] =
    ["weights", "model", "estimate", "se", "ci_low", "ci_high", "aic", "range", "lowest_aic", "error"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Report {
    Experiment { summaries: Vec<MetricsSummary> },
    Application(ApplicationTable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Json, Format::Markdown];

    pub fn file_name(self) -> &'static str {
        match self {
            Format::Csv => "results.csv",
            Format::Json => "results.json",
            Format::Markdown => "tables.md",
        }
    }
}

impl Report {
    fn is_empty(&self) -> bool {
        match self {
            Report::Experiment { summaries } => summaries.is_empty(),
            Report::Application(t) => t.rows.is_empty(),
        }
    }
}

/// Render a report in one format.
pub fn render(report: &Report, format: Format) -> CliResult<Vec<u8>> {
    if report.is_empty() {
        return Err(Error::InvalidArgument("nothing to emit: the report is empty".into()).into());
    }
    let mut out = Vec::new();
    match (format, report) {
        (Format::Json, _) => {
            serde_json::to_writer_pretty(&mut out, report)?;
            out.push(b'\n');
        }
        (Format::Csv, Report::Experiment { summaries }) => write_summaries_csv(summaries, &mut out)?,
        (Format::Csv, Report::Application(table)) => application_csv(table, &mut out)?,
        (Format::Markdown, Report::Experiment { summaries }) => out.extend(summaries_markdown(summaries).bytes()),
        (Format::Markdown, Report::Application(table)) => out.extend(application_markdown(table).bytes()),
    }
    Ok(out)
}

/// Write the report in every format under `dir`, returning the paths written.
pub fn emit_tables(report: &Report, dir: &Path, formats: &[Format]) -> CliResult<Vec<PathBuf>> {
    let rendered = formats.iter().map(|&f| Ok((f, render(report, f)?))).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for (format, bytes) in rendered {
        let path = dir.join(format.file_name());
        fs::write(&path, bytes).map_err(|source| CliError::File { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> CliResult<Report> {
    let text = fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn num(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

fn application_csv<W: Write>(table: &ApplicationTable, out: W) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(APPLICATION_HEADER)?;
    for r in &table.rows {
        wtr.write_record([
            r.weights.clone(),
            r.model.clone(),
            num(r.estimate, 6),
            num(r.se, 6),
            num(r.ci_low, 6),
            num(r.ci_high, 6),
            num(r.aic, 4),
            num(r.range, 4),
            r.lowest_aic.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn application_markdown(table: &ApplicationTable) -> String {
    let mut schemes: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !schemes.contains(&r.weights.as_str()) {
            schemes.push(&r.weights);
        }
    }
    let mut md = format!("### Treatment effect estimates (n = {})\n\n", table.n);
    for scheme in schemes {
        md.push_str(&format!("#### Weights {scheme}\n\n| Model | Estimate | 95% CI | AIC |\n|---|---:|---|---:|\n"));
        for r in table.block(scheme) {
            let mark = if r.lowest_aic { " *" } else { "" };
            match (r.estimate, r.ci_low, r.ci_high, r.aic) {
                (Some(e), Some(lo), Some(hi), Some(aic)) => {
                    md.push_str(&format!("| {}{mark} | {e:.4} | ({lo:.4}, {hi:.4}) | {aic:.2} |\n", r.model))
                }
                _ => md.push_str(&format!(
                    "| {} | failed | {} | |\n",
                    r.model,
                    r.error.as_deref().unwrap_or("").replace('|', "/")
                )),
            }
        }
        md.push('\n');
    }
    md.push_str("`*` marks the lowest AIC within a weight scheme.\n");
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_reports_are_rejected() {
        let err = render(&Report::Experiment { summaries: vec![] }, Format::Csv).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = render(&Report::Application(ApplicationTable { n: 0, rows: vec![] }), Format::Markdown).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}
