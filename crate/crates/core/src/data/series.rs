use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the label column in telemetry CSV files.
pub const LABEL_COLUMN: &str = "label";

/// A labelled multivariate series, row-major `[N × d_in]`, with missing
/// cells represented as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub feature_names: Vec<String>,
    pub values: Vec<Option<f64>>,
    pub labels: Vec<u8>,
    /// Seconds between samples; informational only.
    pub sample_interval: Option<f64>,
}

impl RawSeries {
    pub fn new(
        feature_names: Vec<String>,
        values: Vec<Option<f64>>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(Error::Data(
                "series needs at least one feature column".into(),
            ));
        }
        if values.len() != labels.len() * feature_names.len() {
            return Err(Error::Data(format!(
                "{} cells do not fill {} rows of {} features",
                values.len(),
                labels.len(),
                feature_names.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("series contains non-finite values".into()));
        }
        Ok(RawSeries {
            feature_names,
            values,
            labels,
            sample_interval: None,
        })
    }

    /// Fully observed series from a dense row-major buffer.
    pub fn from_dense(
        feature_names: Vec<String>,
        values: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        Self::new(
            feature_names,
            values.into_iter().map(Some).collect(),
            labels,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.feature_dim() + col]
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Dense copy of the values; fails while cells are still missing.
    pub fn dense(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    let d = self.feature_dim();
                    Error::Data(format!(
                        "missing value at row {}, column `{}`; impute first",
                        i / d,
                        self.feature_names[i % d]
                    ))
                })
            })
            .collect()
    }

    /// Fraction of time steps labelled anomalous.
    pub fn anomaly_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.labels.len() as f64
    }
}

/// Parses telemetry CSV: a header row, one `label` column of {0, 1}, numeric
/// feature columns, empty fields meaning missing.
pub fn read_csv<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == LABEL_COLUMN)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("no `{LABEL_COLUMN}` column in header"),
        })?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i == label_col {
                let label = match field {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    other => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("label must be 0 or 1, found `{other}`"),
                        })
                    }
                };
                labels.push(label);
            } else if field.is_empty() {
                values.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric cell `{field}` in column `{}`", &header[i]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("non-finite cell `{field}`"),
                    });
                }
                values.push(Some(v));
            }
        }
    }
    RawSeries::new(feature_names, values, labels)
}

pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

/// Writes features followed by the label column; missing cells stay empty.
/// Values use shortest round-trip formatting.
pub fn write_csv<W: Write>(series: &RawSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header: Vec<&str> = series.feature_names.iter().map(String::as_str).collect();
    header.push(LABEL_COLUMN);
    w.write_record(&header).map_err(csv_err)?;
    let d = series.feature_dim();
    for (r, label) in series.labels.iter().enumerate() {
        let mut rec: Vec<String> = series.values[r * d..(r + 1) * d]
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
            .collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn save_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, std::io::BufWriter::new(file))
}

/// Fills gaps by linear interpolation within each column; leading and
/// trailing gaps take the nearest observed value.
pub fn impute_missing(series: &RawSeries) -> Result<RawSeries> {
    let (n, d) = (series.len(), series.feature_dim());
    let mut out = series.clone();
    if series.missing_count() == 0 {
        return Ok(out);
    }
    for c in 0..d {
        let observed: Vec<usize> = (0..n).filter(|&r| series.get(r, c).is_some()).collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(Error::Data(format!(
                "column `{}` has no observed values",
                series.feature_names[c]
            )));
        };
        let at = |r: usize| series.get(r, c).unwrap();
        for r in 0..first {
            out.values[r * d + c] = Some(at(first));
        }
        for r in last + 1..n {
            out.values[r * d + c] = Some(at(last));
        }
        for pair in observed.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (a, b) = (at(lo), at(hi));
            for r in lo + 1..hi {
                let w = (r - lo) as f64 / (hi - lo) as f64;
                out.values[r * d + c] = Some(a + (b - a) * w);
            }
        }
    }
    Ok(out)
}

/// Which rows per-feature statistics were estimated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    /// Every row of the series passed in.
    FullSeries,
    /// Only rows covered by training windows.
    TrainSplit,
}

/// Per-feature mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: StatsSource,
}

/// Columns whose spread falls below this are mapped to zero.
pub const MIN_STD: f64 = 1e-12;

impl NormStats {
    /// Estimates statistics from the given rows of a fully observed series.
    pub fn fit(series: &RawSeries, rows: &[usize], source: StatsSource) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot fit normalization on zero rows".into()));
        }
        let d = series.feature_dim();
        let dense = series.dense()?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for c in 0..d {
                mean[c] += dense[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for c in 0..d {
                let diff = dense[r * d + c] - mean[c];
                var[c] += diff * diff;
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(NormStats { mean, std, source })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x − μ) / σ`, or `0` for a degenerate column.
    pub fn apply(&self, col: usize, x: f64) -> f64 {
        if self.std[col] < MIN_STD {
            0.0
        } else {
            (x - self.mean[col]) / self.std[col]
        }
    }

    /// Normalizes a flat row-major buffer whose rows have `feature_dim` cells.
    pub fn apply_rows(&self, values: &mut [f64]) {
        let d = self.feature_dim();
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.apply(i % d, *v);
        }
    }
}

/// Z-scores every column. With `stats == None` the statistics are fitted on
/// the whole series (pass a training series); otherwise the given ones are
/// reused, e.g. training statistics applied to test data.
pub fn z_normalize(
    series: &RawSeries,
    stats: Option<&NormStats>,
) -> Result<(RawSeries, NormStats)> {
    let stats = match stats {
        Some(s) => {
            if s.feature_dim() != series.feature_dim() {
                return Err(Error::shape(
                    "z_normalize",
                    &[s.feature_dim()],
                    &[series.feature_dim()],
                ));
            }
            s.clone()
        }
        None => {
            let rows: Vec<usize> = (0..series.len()).collect();
            NormStats::fit(series, &rows, StatsSource::FullSeries)?
        }
    };
    for (c, &s) in stats.std.iter().enumerate() {
        if s < MIN_STD {
            log::warn!(
                "column `{}` is constant (std {s:e}); normalized to zeros",
                series.feature_names[c]
            );
        }
    }
    let mut values = series.dense()?;
    stats.apply_rows(&mut values);
    let mut out = series.clone();
    out.values = values.into_iter().map(Some).collect();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawSeries> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn parses_well_formed_file() {
        let s = parse("cpu,mem,label\n1.0,2.0,0\n3,,1\n5,6,0\n").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.feature_names, vec!["cpu", "mem"]);
        assert_eq!(s.get(1, 1), None);
        assert_eq!(s.labels, vec![0, 1, 0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(
            parse("cpu,mem\n1,2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse("cpu,label\n1,0\nabc,1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse("cpu,mem,label\n1,2,0\n1,1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse("cpu,label\n1,2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let values = vec![
            Some(0.1),
            None,
            Some(-3.25e-7),
            Some(1.0 / 3.0),
            Some(2.0),
            Some(7.5),
        ];
        let s = RawSeries::new(vec!["a".into(), "b".into()], values, vec![0, 1, 0]).unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels, s.labels);
        for (x, y) in back.values.iter().zip(&s.values) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => panic!("missing-cell mismatch"),
            }
        }
    }

    #[test]
    fn imputation_rules() {
        let s = RawSeries::new(
            vec!["a".into(), "b".into()],
            vec![Some(1.0), None, None, Some(5.0), Some(3.0), Some(5.0)],
            vec![0, 0, 0],
        )
        .unwrap();
        let out = impute_missing(&s).unwrap();
        let a: Vec<f64> = (0..3).map(|r| out.get(r, 0).unwrap()).collect();
        let b: Vec<f64> = (0..3).map(|r| out.get(r, 1).unwrap()).collect();
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
        assert_eq!(b, vec![5.0, 5.0, 5.0]);

        let full = RawSeries::from_dense(vec!["a".into()], vec![1.5, -2.0], vec![0, 1]).unwrap();
        assert_eq!(impute_missing(&full).unwrap(), full);

        let empty = RawSeries::new(vec!["a".into()], vec![None, None], vec![0, 0]).unwrap();
        assert!(matches!(impute_missing(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn normalization_statistics() {
        let vals: Vec<f64> = (0..50).flat_map(|i| [i as f64 * 0.7 - 3.0, 4.0]).collect();
        let s = RawSeries::from_dense(vec!["x".into(), "flat".into()], vals, vec![0; 50]).unwrap();
        let (n, stats) = z_normalize(&s, None).unwrap();
        assert_eq!(stats.source, StatsSource::FullSeries);
        let col: Vec<f64> = (0..50).map(|r| n.get(r, 0).unwrap()).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
        assert!((0..50).all(|r| n.get(r, 1) == Some(0.0)));

        // reuse on held-out data equals the manual formula
        let test = RawSeries::from_dense(vec!["x".into(), "flat".into()], vec![10.0, 4.0], vec![0])
            .unwrap();
        let (t, _) = z_normalize(&test, Some(&stats)).unwrap();
        let expect = (10.0 - stats.mean[0]) / stats.std[0];
        assert_eq!(t.get(0, 0), Some(expect));
    }
}
