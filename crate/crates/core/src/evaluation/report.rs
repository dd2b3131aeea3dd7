use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::sweep::SweepResult;
use crate::error::{Error, Result};

pub const SWEEP_CSV_HEADER: &str = "value,precision,recall,auc,f1,n_seeds,status";
pub const METRICS_CSV_HEADER: &str = "precision,recall,auc,f1,tp,fp,tn,fn,threshold,n_samples";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown format `{other}` (csv, json)"
            ))),
        }
    }
}

/// Values are emitted with six decimals.
fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap_or(v)
}

/// One emitted sweep row; metrics are absent when every seed failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTableRow {
    pub value: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub n_seeds: usize,
    pub status: String,
}

/// The published form of a sweep: parameter, seeds and one row per value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepTableRow>,
}

impl SweepTable {
    pub fn from_result(result: &SweepResult) -> Result<Self> {
        if result.rows.is_empty() {
            return Err(Error::Contract("sweep result has no rows".into()));
        }
        let rows = result
            .rows
            .iter()
            .map(|r| {
                let m = |v: f64| (r.succeeded() && v.is_finite()).then(|| round6(v));
                SweepTableRow {
                    value: r.value.clone(),
                    precision: m(r.precision),
                    recall: m(r.recall),
                    auc: m(r.auc),
                    f1: m(r.f1),
                    n_seeds: r.n_seeds,
                    status: r.status.clone(),
                }
            })
            .collect();
        Ok(SweepTable {
            parameter: result.parameter.clone(),
            seeds: result.seeds.clone(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let status = r.status.replace(['\n', '\r'], " ").replace('"', "'");
            let status = if status.contains(',') {
                format!("\"{status}\"")
            } else {
                status
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.value,
                cell(r.precision),
                cell(r.recall),
                cell(r.auc),
                cell(r.f1),
                r.n_seeds,
                status
            );
        }
        out
    }

    /// Parses the CSV form. Parameter name and seeds are not part of it.
    pub fn parse_csv(text: &str) -> Result<Vec<SweepTableRow>> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>().join(",") != SWEEP_CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must be `{SWEEP_CSV_HEADER}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            let num = |k: usize| -> Result<Option<f64>> {
                let f = &rec[k];
                if f.is_empty() {
                    return Ok(None);
                }
                f.parse().map(Some).map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number `{f}`"),
                })
            };
            rows.push(SweepTableRow {
                value: rec[0].to_string(),
                precision: num(1)?,
                recall: num(2)?,
                auc: num(3)?,
                f1: num(4)?,
                n_seeds: rec[5].parse().map_err(|_| Error::Parse {
                    line,
                    msg: "bad n_seeds".into(),
                })?,
                status: rec[6].to_string(),
            });
        }
        Ok(rows)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => serde_json::to_string_pretty(self)? + "\n",
        })
    }
}

/// Renders a sweep result as a report document.
pub fn emit_sweep_report(result: &SweepResult, format: ReportFormat) -> Result<String> {
    SweepTable::from_result(result)?.render(format)
}

/// Renders a single metrics report, rounded to six decimals.
pub fn emit_metrics_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    let values = [
        report.precision,
        report.recall,
        report.auc,
        report.f1,
        report.threshold,
    ];
    if values.iter().any(|v| !v.is_finite()) || report.n_samples == 0 {
        return Err(Error::Contract(
            "metrics report is empty or not finite".into(),
        ));
    }
    let c = &report.confusion;
    Ok(match format {
        ReportFormat::Csv => format!(
            "{METRICS_CSV_HEADER}\n{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.6},{}\n",
            report.precision,
            report.recall,
            report.auc,
            report.f1,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            report.threshold,
            report.n_samples
        ),
        ReportFormat::Json => {
            let rounded = MetricsReport {
                precision: round6(report.precision),
                recall: round6(report.recall),
                auc: round6(report.auc),
                f1: round6(report.f1),
                threshold: round6(report.threshold),
                ..report.clone()
            };
            serde_json::to_string_pretty(&rounded)? + "\n"
        }
    })
}

/// Parses either rendering of a metrics report.
pub fn parse_metrics_report(text: &str, format: ReportFormat) -> Result<MetricsReport> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_str(text)?),
        ReportFormat::Csv => {
            let mut lines = text.lines();
            if lines.next() != Some(METRICS_CSV_HEADER) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("header must be `{METRICS_CSV_HEADER}`"),
                });
            }
            let row = lines.next().ok_or(Error::Parse {
                line: 2,
                msg: "missing values row".into(),
            })?;
            let f: Vec<&str> = row.split(',').collect();
            let bad = || Error::Parse {
                line: 2,
                msg: "malformed metrics row".into(),
            };
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let count = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            Ok(MetricsReport {
                precision: num(0)?,
                recall: num(1)?,
                auc: num(2)?,
                f1: num(3)?,
                confusion: super::metrics::Confusion {
                    tp: count(4)?,
                    fp: count(5)?,
                    tn: count(6)?,
                    fn_: count(7)?,
                },
                threshold: num(8)?,
                n_samples: count(9)?,
            })
        }
    }
}
