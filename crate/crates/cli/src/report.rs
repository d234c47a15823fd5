//! Experiment reports and their canonical serialisation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::CliError;

pub const TOOL_VERSION: &str = concat!("folirec ", env!("CARGO_PKG_VERSION"));

/// Fields are declared in alphabetical order so the struct serialises with
/// sorted keys, like the maps inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_echo: Value,
    pub errors: BTreeMap<String, String>,
    #[serde(serialize_with = "nullable_map", deserialize_with = "nan_map")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(serialize_with = "nullable_series", deserialize_with = "nan_series")]
    pub series: BTreeMap<String, Vec<f64>>,
    pub tool_version: String,
    pub verdicts: BTreeMap<String, bool>,
}

impl Report {
    pub fn new(config_echo: Value) -> Self {
        Report {
            config_echo,
            errors: BTreeMap::new(),
            metrics: BTreeMap::new(),
            series: BTreeMap::new(),
            tool_version: TOOL_VERSION.to_string(),
            verdicts: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn series(&mut self, name: &str, values: Vec<f64>) {
        self.series.insert(name.to_string(), values);
    }

    pub fn verdict(&mut self, name: &str, value: bool) {
        self.verdicts.insert(name.to_string(), value);
    }

    pub fn error(&mut self, stage: &str, message: impl ToString) {
        self.errors.insert(stage.to_string(), message.to_string());
    }

    /// Canonical JSON bytes: sorted keys, shortest round-trip floats,
    /// non-finite numbers as `null`, trailing newline.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report values always serialise");
        out.push(b'\n');
        out
    }

    /// `series` as CSV, columns in key order; shorter columns are padded
    /// with empty cells.
    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let names: Vec<&String> = self.series.keys().collect();
        if names.is_empty() {
            let mut out = w.into_inner().map_err(|e| CliError::Csv(e.to_string()))?;
            out.push(b'\n');
            return Ok(out);
        }
        w.write_record(&names).map_err(|e| CliError::Csv(e.to_string()))?;
        let rows = self.series.values().map(Vec::len).max().unwrap_or(0);
        for r in 0..rows {
            let row: Vec<String> = self
                .series
                .values()
                .map(|col| col.get(r).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            w.write_record(&row).map_err(|e| CliError::Csv(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Csv(e.to_string()))
    }
}

fn finite_or_null(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn nullable_map<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    let v: BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, finite_or_null(*v))).collect();
    v.serialize(s)
}

fn nullable_series<S: Serializer>(m: &BTreeMap<String, Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
    let v: BTreeMap<&String, Vec<Value>> = m
        .iter()
        .map(|(k, col)| (k, col.iter().map(|x| finite_or_null(*x)).collect()))
        .collect();
    v.serialize(s)
}

fn nan_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
    let m: BTreeMap<String, Option<f64>> = BTreeMap::deserialize(d)?;
    Ok(m.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NAN))).collect())
}

fn nan_series<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Vec<f64>>, D::Error> {
    let m: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::deserialize(d)?;
    Ok(m.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Path of the CSV written next to a JSON report.
pub fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Writes the JSON report to `path` and/or the series CSV beside it
/// ([`csv_path`]). Each file is written to a temporary and renamed.
pub fn emit_report(report: &Report, path: &Path, formats: &[Format]) -> Result<(), CliError> {
    if formats.contains(&Format::Json) {
        write_atomic(path, &report.to_canonical_json())?;
    }
    if formats.contains(&Format::Csv) {
        write_atomic(&csv_path(path), &report.to_csv()?)?;
    }
    Ok(())
}
