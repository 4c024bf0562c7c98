//! CSV datasets with a schema sidecar, and headerless 0/1 benchmark files.
//!
//! A schema file has one `name,type,role` line per column, e.g.
//! `y1,binary,Y` or `x0,categorical(4),X`. Blank lines and lines starting
//! with `#` are skipped. A CSV file may start with a header row equal to the
//! schema names; data rows are numbered from 1 after it.

use std::fs::File;
use std::path::{Path, PathBuf};

use cspn_core::data::{Column, ColumnType, DataError, Dataset, EvidenceMask, Role, Schema};

#[derive(Debug, thiserror::Error)]
pub enum TabularError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
}

impl TabularError {
    fn format(path: &Path, message: impl Into<String>) -> Self {
        TabularError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

pub fn parse_schema(text: &str) -> Result<Schema, String> {
    let mut columns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        // The type may contain a comma-free parenthesis, so split from both ends.
        let (name, rest) = line.split_once(',').ok_or(format!("line {}: expected name,type,role", i + 1))?;
        let (ty, role) = rest.rsplit_once(',').ok_or(format!("line {}: expected name,type,role", i + 1))?;
        let ty = ColumnType::parse(ty).ok_or(format!("line {}: unknown column type '{}'", i + 1, ty.trim()))?;
        let role = Role::parse(role).ok_or(format!("line {}: role must be Y or X, got '{}'", i + 1, role.trim()))?;
        columns.push(Column::new(name.trim(), ty, role));
    }
    if columns.is_empty() {
        return Err("schema lists no columns".into());
    }
    Ok(Schema::new(columns))
}

pub fn schema_text(schema: &Schema) -> String {
    schema.columns.iter().map(|c| format!("{},{},{}\n", c.name, c.ty, c.role)).collect()
}

pub fn load_schema(path: &Path) -> Result<Schema, TabularError> {
    let text = std::fs::read_to_string(path).map_err(|source| TabularError::Io { path: path.to_path_buf(), source })?;
    parse_schema(&text).map_err(|m| TabularError::format(path, m))
}

fn read_rows(path: &Path, width: usize, header: Option<&[String]>) -> Result<Vec<f64>, TabularError> {
    let file = File::open(path).map_err(|source| TabularError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut values = Vec::new();
    let mut row = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| TabularError::format(path, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 {
            if let Some(names) = header {
                if rec.iter().eq(names.iter().map(String::as_str)) {
                    continue;
                }
            }
        }
        row += 1;
        if rec.len() != width {
            return Err(TabularError::format(path, format!("row {row}: {} fields, expected {width}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| TabularError::format(path, format!("row {row}, column {}: '{field}' is not a number", j + 1)))?;
            values.push(v);
        }
    }
    Ok(values)
}

pub fn load_csv(path: &Path, schema_path: &Path) -> Result<Dataset, TabularError> {
    let schema = load_schema(schema_path)?;
    load_csv_with(path, schema)
}

pub fn load_csv_with(path: &Path, schema: Schema) -> Result<Dataset, TabularError> {
    let names: Vec<String> = schema.columns.iter().map(|c| c.name.clone()).collect();
    let values = read_rows(path, schema.len(), Some(&names))?;
    Dataset::new(schema, &values).map_err(|source| TabularError::Data { path: path.to_path_buf(), source })
}

/// Writes the dataset in schema column order with a header row. `f64`
/// display is the shortest exact representation, so reloading is lossless.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<(), TabularError> {
    let io = |source: std::io::Error| TabularError::Io { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(|e| TabularError::format(path, e.to_string()))?;
    let names: Vec<&str> = data.schema().columns.iter().map(|c| c.name.as_str()).collect();
    w.write_record(&names).map_err(|e| TabularError::format(path, e.to_string()))?;
    for r in 0..data.n_rows() {
        w.write_record(data.row(r).iter().map(|v| v.to_string())).map_err(|e| TabularError::format(path, e.to_string()))?;
    }
    w.flush().map_err(io)
}

/// Headerless comma-separated 0/1 file; every column binary and a target.
pub fn load_benchmark(path: &Path) -> Result<Dataset, TabularError> {
    let file = File::open(path).map_err(|source| TabularError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let width = match reader.records().next() {
        Some(rec) => rec.map_err(|e| TabularError::format(path, e.to_string()))?.len(),
        None => return Err(TabularError::format(path, "empty benchmark file")),
    };
    let values = read_rows(path, width, None)?;
    Dataset::new(Schema::all_binary(width), &values).map_err(|source| TabularError::Data { path: path.to_path_buf(), source })
}

/// Benchmark file with a seeded evidence split applied.
pub fn load_benchmark_masked(path: &Path, mask: &EvidenceMask) -> Result<Dataset, TabularError> {
    let data = load_benchmark(path)?;
    mask.apply(&data).map_err(|source| TabularError::Data { path: path.to_path_buf(), source })
}

/// The `{name}.ts.data`, `{name}.valid.data` and `{name}.test.data` files
/// of a benchmark directory, sharing one evidence split.
pub fn load_benchmark_splits(dir: &Path, name: &str, mask: &EvidenceMask) -> Result<[Dataset; 3], TabularError> {
    let load = |suffix: &str| load_benchmark_masked(&dir.join(format!("{name}.{suffix}.data")), mask);
    Ok([load("ts")?, load("valid")?, load("test")?])
}
