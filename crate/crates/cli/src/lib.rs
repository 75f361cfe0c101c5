//! File formats, report serialization and command implementations behind the
//! `semscale` binary.

pub mod commands;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use semscale::imbalance::{DatasetKind, SemanticScaleReport};
use semscale::LabeledFeatureSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Core(#[from] semscale::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 success, 2 usage or validation, 1 runtime failure.
    pub fn exit_code(&self) -> u8 {
        use semscale::Error as E;
        match self {
            CliError::Parse { .. } | CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Core(
                E::CapacityExceeded { .. }
                | E::PoolUnderflow { .. }
                | E::MissingClass(_)
                | E::DegenerateVector(_),
            ) => 1,
            CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Json(_) => 1,
        }
    }
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let io_err = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, contents: &str) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, contents.as_bytes()),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

pub fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Parses a feature CSV: header `label,f0,...,f{d-1}`, then one sample per row.
pub fn parse_feature_csv(text: &str, path: &str) -> CliResult<LabeledFeatureSet> {
    let parse_err = |line: u64, message: String| CliError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "label" {
        return Err(parse_err(1, "header must be `label,f0,f1,...`".into()));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(
                1,
                format!("expected column `f{i}`, found `{name}`"),
            ));
        }
    }
    let dim = header.len() - 1;

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        let label: usize = record[0].parse().map_err(|_| {
            parse_err(
                line,
                format!("label `{}` is not a non-negative integer", &record[0]),
            )
        })?;
        labels.push(label);
        for (i, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    parse_err(line, format!("f{i} value `{field}` is not a finite number"))
                })?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let matrix = nalgebra::DMatrix::from_column_slice(dim, labels.len(), &values);
    Ok(LabeledFeatureSet::new(matrix, labels)?)
}

pub fn read_feature_file(path: &Path) -> CliResult<(LabeledFeatureSet, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    Ok((parse_feature_csv(text, &path.display().to_string())?, bytes))
}

/// Serializes a feature set in the feature CSV format with round-trip floats.
pub fn feature_csv(data: &LabeledFeatureSet) -> String {
    let mut out = String::from("label");
    for i in 0..data.dim() {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (col, label) in data.values().column_iter().zip(data.labels()) {
        let _ = write!(out, "{label}");
        for v in col.iter() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Converts a whitespace-separated matrix (one sample per line) to feature
/// CSV. With `label` set every row gets that label; otherwise the first
/// column of each line is the label. Blank lines and `#` comments are skipped.
pub fn convert_whitespace(text: &str, path: &str, label: Option<usize>) -> CliResult<String> {
    let parse_err = |line: usize, message: String| CliError::Parse {
        path: path.to_string(),
        line: line as u64,
        message,
    };
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let y = match label {
            Some(l) => l,
            None => {
                let f = fields.next().unwrap_or_default();
                f.parse().map_err(|_| {
                    parse_err(line, format!("label `{f}` is not a non-negative integer"))
                })?
            }
        };
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("`{f}` is not a finite number")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if let Some(first) = samples.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} values, found {}", first.len(), row.len()),
                ));
            }
        } else if row.is_empty() {
            return Err(parse_err(line, "row has no feature values".into()));
        }
        samples.push(row);
        labels.push(y);
    }
    if samples.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(feature_csv(&LabeledFeatureSet::from_samples(
        &samples, labels,
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ReportParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub dataset_kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ReportClass {
    pub id: usize,
    pub count: usize,
    pub raw_scale: f64,
    pub interference_weight: f64,
    pub smoothed_weight: f64,
    pub combined_scale: f64,
    pub loss_weight: f64,
    pub degenerate: bool,
}

/// JSON form of a semantic-scale report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub params: ReportParams,
    pub classes: Vec<ReportClass>,
    pub checksum: String,
}

impl ReportFile {
    pub fn new(report: &SemanticScaleReport, checksum: String) -> Self {
        let mut classes: Vec<ReportClass> = report
            .classes
            .iter()
            .map(|c| ReportClass {
                id: c.class_id,
                count: c.sample_count,
                raw_scale: c.raw_scale,
                interference_weight: c.interference_weight,
                smoothed_weight: c.smoothed_weight,
                combined_scale: c.combined_scale,
                loss_weight: c.loss_weight,
                degenerate: c.degenerate,
            })
            .collect();
        classes.sort_by_key(|c| c.id);
        Self {
            params: ReportParams {
                epsilon: report.epsilon,
                alpha: report.alpha,
                dataset_kind: report.dataset_kind,
            },
            classes,
            checksum,
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn loss_weights(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.loss_weight).collect()
    }
}

/// Reads a list of reals separated by commas, whitespace or newlines.
pub fn parse_number_list(text: &str, path: &str) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let body = line.split('#').next().unwrap_or_default();
        for field in body
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
        {
            let v: f64 = field.parse().map_err(|_| CliError::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("`{field}` is not a number"),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_feature_csv("label,f0,f1\n0,1,2\n1,3,x\n", "t.csv").unwrap_err();
        match err {
            CliError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let err = parse_feature_csv("label,f0,f1\n0,1,2\n1,3\n", "t.csv").unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }));
        assert!(matches!(
            parse_feature_csv("label,a\n0,1\n", "t.csv"),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_feature_csv("label,f0\n", "t.csv"),
            Err(CliError::Parse { .. })
        ));
        assert!(matches!(
            parse_feature_csv("label,f0\n-1,2\n", "t.csv"),
            Err(CliError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_feature_csv("label,f0\n0,nan\n", "t.csv"),
            Err(CliError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn feature_csv_round_trips() {
        let text = "label,f0,f1\n0,1.5,-2e-7\n3,0.1,12345.678\n";
        let data = parse_feature_csv(text, "t").unwrap();
        assert_eq!(data.labels(), &[0, 3]);
        assert_eq!(data.values()[(1, 0)], -2e-7);
        let again = parse_feature_csv(&feature_csv(&data), "t").unwrap();
        assert_eq!(again.values(), data.values());
    }

    #[test]
    fn whitespace_conversion() {
        let csv = convert_whitespace("# comment\n1 0.5 2\n\n0  1e3\t4\n", "m.txt", None).unwrap();
        assert_eq!(csv, "label,f0,f1\n1,0.5,2.0\n0,1000.0,4.0\n");
        let fixed = convert_whitespace("1 2\n3 4\n", "m.txt", Some(7)).unwrap();
        assert_eq!(fixed, "label,f0,f1\n7,1.0,2.0\n7,3.0,4.0\n");
        assert!(matches!(
            convert_whitespace("0 1 2\n0 1\n", "m.txt", None),
            Err(CliError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn number_lists() {
        assert_eq!(
            parse_number_list("10, 18\n19 19.05 # done\n", "h").unwrap(),
            vec![10.0, 18.0, 19.0, 19.05]
        );
        assert!(matches!(
            parse_number_list("1\nabc\n", "h"),
            Err(CliError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Core(semscale::Error::InvalidConfig("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::Core(semscale::Error::MissingClass(1)).exit_code(),
            1
        );
    }
}
