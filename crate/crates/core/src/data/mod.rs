//! Tabular datasets of `(y, x)` pairs with per-column type metadata.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::rng;

pub mod synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Binary,
    Count,
    Continuous,
    /// Categorical with the given number of classes, coded `0..C`.
    Categorical(usize),
}

impl ColumnType {
    pub fn accepts(&self, v: f64) -> bool {
        match *self {
            ColumnType::Binary => v == 0.0 || v == 1.0,
            ColumnType::Count => v >= 0.0 && v.is_finite() && libm::floor(v) == v,
            ColumnType::Continuous => v.is_finite(),
            ColumnType::Categorical(c) => {
                v >= 0.0 && libm::floor(v) == v && (v as usize) < c
            }
        }
    }

    pub fn parse(s: &str) -> Option<ColumnType> {
        let s = s.trim();
        match s {
            "binary" => Some(ColumnType::Binary),
            "count" => Some(ColumnType::Count),
            "continuous" => Some(ColumnType::Continuous),
            _ => {
                let inner = s.strip_prefix("categorical(")?.strip_suffix(')')?;
                inner.trim().parse().ok().filter(|&c| c >= 2).map(ColumnType::Categorical)
            }
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnType::Binary => f.write_str("binary"),
            ColumnType::Count => f.write_str("count"),
            ColumnType::Continuous => f.write_str("continuous"),
            ColumnType::Categorical(c) => write!(f, "categorical({c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Target variable.
    Y,
    /// Conditioning feature (evidence).
    X,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.trim() {
            "Y" | "y" => Some(Role::Y),
            "X" | "x" => Some(Role::X),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Y => "Y",
            Role::X => "X",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
    pub role: Role,
}

impl Column {
    pub fn new(name: impl Into<String>, ty: ColumnType, role: Role) -> Self {
        Column { name: name.into(), ty, role }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schema {
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Self {
        Schema { columns }
    }

    /// `d` binary columns named `v0..v{d-1}`, all targets.
    pub fn all_binary(d: usize) -> Self {
        Schema {
            columns: (0..d)
                .map(|j| Column::new(format!("v{j}"), ColumnType::Binary, Role::Y))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn positions(&self, role: Role) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == role)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    /// Rows are numbered from 1.
    #[error("row {row}, col \"{column}\": value {value} is not a valid {ty}")]
    TypeViolation { row: usize, column: String, value: f64, ty: ColumnType },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount { row: usize, expected: usize, found: usize },
    #[error("dataset has no rows")]
    Empty,
    #[error("invalid evidence mask: {0}")]
    Mask(String),
    #[error("{0}")]
    Invalid(String),
}

/// An immutable table of `n` rows split into target block `Y` and feature
/// block `X`, both stored densely row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    n: usize,
    y_pos: Vec<usize>,
    x_pos: Vec<usize>,
    y: Vec<f64>,
    x: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    /// Builds a dataset from row-major values in schema column order,
    /// validating every value against its declared type.
    pub fn new(schema: Schema, values: &[f64]) -> Result<Self, DataError> {
        let d = schema.len();
        if d == 0 {
            return Err(DataError::Invalid("schema has no columns".into()));
        }
        if !values.len().is_multiple_of(d) {
            return Err(DataError::ColumnCount {
                row: values.len() / d + 1,
                expected: d,
                found: values.len() % d,
            });
        }
        let n = values.len() / d;
        let y_pos = schema.positions(Role::Y);
        let x_pos = schema.positions(Role::X);
        let mut y = Vec::with_capacity(n * y_pos.len());
        let mut x = Vec::with_capacity(n * x_pos.len());
        for (r, row) in values.chunks_exact(d).enumerate() {
            for (c, col) in schema.columns.iter().enumerate() {
                if !col.ty.accepts(row[c]) {
                    return Err(DataError::TypeViolation {
                        row: r + 1,
                        column: col.name.clone(),
                        value: row[c],
                        ty: col.ty,
                    });
                }
            }
            y.extend(y_pos.iter().map(|&p| row[p]));
            x.extend(x_pos.iter().map(|&p| row[p]));
        }
        Ok(Dataset { schema, n, y_pos, x_pos, y, x, metadata: BTreeMap::new() })
    }

    /// Builds a dataset from separate target and feature blocks; the schema
    /// lists targets first (`y0..`) then features (`x0..`).
    pub fn from_blocks(
        y_types: &[ColumnType],
        y: Vec<f64>,
        x_types: &[ColumnType],
        x: Vec<f64>,
    ) -> Result<Self, DataError> {
        let ny = y_types.len();
        let nx = x_types.len();
        if ny == 0 {
            return Err(DataError::Invalid("no target columns".into()));
        }
        let n = y.len() / ny;
        if y.len() != n * ny || x.len() != n * nx {
            return Err(DataError::Invalid("block sizes disagree".into()));
        }
        let mut columns = Vec::with_capacity(ny + nx);
        columns.extend(y_types.iter().enumerate().map(|(j, &t)| Column::new(format!("y{j}"), t, Role::Y)));
        columns.extend(x_types.iter().enumerate().map(|(j, &t)| Column::new(format!("x{j}"), t, Role::X)));
        let schema = Schema::new(columns);
        for r in 0..n {
            for j in 0..ny {
                let v = y[r * ny + j];
                if !y_types[j].accepts(v) {
                    return Err(DataError::TypeViolation {
                        row: r + 1,
                        column: schema.columns[j].name.clone(),
                        value: v,
                        ty: y_types[j],
                    });
                }
            }
            for j in 0..nx {
                let v = x[r * nx + j];
                if !x_types[j].accepts(v) {
                    return Err(DataError::TypeViolation {
                        row: r + 1,
                        column: schema.columns[ny + j].name.clone(),
                        value: v,
                        ty: x_types[j],
                    });
                }
            }
        }
        Ok(Dataset {
            schema,
            n,
            y_pos: (0..ny).collect(),
            x_pos: (ny..ny + nx).collect(),
            y,
            x,
            metadata: BTreeMap::new(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn num_y(&self) -> usize {
        self.y_pos.len()
    }

    pub fn num_x(&self) -> usize {
        self.x_pos.len()
    }

    #[inline]
    pub fn y(&self, row: usize, j: usize) -> f64 {
        self.y[row * self.num_y() + j]
    }

    #[inline]
    pub fn y_row(&self, row: usize) -> &[f64] {
        let ny = self.num_y();
        &self.y[row * ny..(row + 1) * ny]
    }

    #[inline]
    pub fn x_row(&self, row: usize) -> &[f64] {
        let nx = self.num_x();
        &self.x[row * nx..(row + 1) * nx]
    }

    pub fn y_type(&self, j: usize) -> ColumnType {
        self.schema.columns[self.y_pos[j]].ty
    }

    pub fn x_type(&self, j: usize) -> ColumnType {
        self.schema.columns[self.x_pos[j]].ty
    }

    pub fn y_name(&self, j: usize) -> &str {
        &self.schema.columns[self.y_pos[j]].name
    }

    pub fn y_column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.y(r, j)).collect()
    }

    /// Row `r` in schema column order.
    /// The feature block, row-major.
    pub fn x_block(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.schema.len()];
        for (j, &p) in self.y_pos.iter().enumerate() {
            out[p] = self.y(r, j);
        }
        for (j, &p) in self.x_pos.iter().enumerate() {
            out[p] = self.x_row(r)[j];
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let ny = self.num_y();
        let nx = self.num_x();
        let mut y = Vec::with_capacity(rows.len() * ny);
        let mut x = Vec::with_capacity(rows.len() * nx);
        for &r in rows {
            y.extend_from_slice(self.y_row(r));
            x.extend_from_slice(self.x_row(r));
        }
        Dataset {
            schema: self.schema.clone(),
            n: rows.len(),
            y_pos: self.y_pos.clone(),
            x_pos: self.x_pos.clone(),
            y,
            x,
            metadata: self.metadata.clone(),
        }
    }

    /// Concatenates the rows of two datasets sharing a schema.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.schema != other.schema {
            return Err(DataError::Invalid("cannot concatenate datasets with different schemas".into()));
        }
        let mut out = self.clone();
        out.n += other.n;
        out.y.extend_from_slice(&other.y);
        out.x.extend_from_slice(&other.x);
        Ok(out)
    }

    /// Reassigns roles with a new schema over the same columns.
    pub fn with_roles(&self, roles: &[Role]) -> Result<Dataset, DataError> {
        if roles.len() != self.schema.len() {
            return Err(DataError::Invalid("role count does not match column count".into()));
        }
        let mut schema = self.schema.clone();
        for (c, &r) in schema.columns.iter_mut().zip(roles) {
            c.role = r;
        }
        let values: Vec<f64> = (0..self.n).flat_map(|r| self.row(r)).collect();
        let mut ds = Dataset::new(schema, &values)?;
        ds.metadata = self.metadata.clone();
        Ok(ds)
    }

    /// Splits into `(first, rest)` at `at` rows.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.n);
        let a: Vec<usize> = (0..at).collect();
        let b: Vec<usize> = (at..self.n).collect();
        (self.select_rows(&a), self.select_rows(&b))
    }
}

/// Uniform index in `0..bound` from one 64-bit draw by widening multiply.
#[inline]
pub(crate) fn uniform_index(rng: &mut impl RngCore, bound: usize) -> usize {
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// Fisher-Yates shuffle, drawing `j` for position `i` (from the top) with
/// [`uniform_index`] on the crate RNG. The algorithm is fixed so that
/// shuffles are identical across platforms and dependency upgrades.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Selects which columns act as evidence `X` for benchmark evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvidenceMask {
    /// The first `ceil(fraction * d)` columns of a seeded permutation of
    /// `0..d` become evidence.
    Fraction { fraction: f64, seed: u64 },
    Columns(Vec<usize>),
}

impl EvidenceMask {
    /// Evidence column indices, ascending.
    pub fn evidence_columns(&self, d: usize) -> Result<Vec<usize>, DataError> {
        let mut cols = match self {
            EvidenceMask::Fraction { fraction, seed } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(DataError::Mask(format!("fraction {fraction} outside (0, 1)")));
                }
                let k = libm::ceil(fraction * d as f64 - 1e-9) as usize;
                let mut perm: Vec<usize> = (0..d).collect();
                shuffle(&mut perm, &mut rng::seeded(*seed));
                perm.truncate(k);
                perm
            }
            EvidenceMask::Columns(c) => {
                if let Some(bad) = c.iter().find(|&&j| j >= d) {
                    return Err(DataError::Mask(format!("column {bad} out of range for {d} columns")));
                }
                c.clone()
            }
        };
        cols.sort_unstable();
        cols.dedup();
        if cols.len() >= d {
            return Err(DataError::Mask("mask leaves no target columns".into()));
        }
        Ok(cols)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset, DataError> {
        let d = data.schema().len();
        let ev = self.evidence_columns(d)?;
        let roles: Vec<Role> = (0..d)
            .map(|j| if ev.binary_search(&j).is_ok() { Role::X } else { Role::Y })
            .collect();
        data.with_roles(&roles)
    }
}

/// Turns an `n x d` count series into `n - 1` rows predicting row `t + 1`
/// (targets) from row `t` (features).
pub fn next_step_pairs(series: &[f64], d: usize) -> Result<Dataset, DataError> {
    if d == 0 || !series.len().is_multiple_of(d) {
        return Err(DataError::Invalid("series length is not a multiple of d".into()));
    }
    let n = series.len() / d;
    if n < 2 {
        return Err(DataError::Invalid("series needs at least two rows".into()));
    }
    let y = series[d..].to_vec();
    let x = series[..(n - 1) * d].to_vec();
    let types = vec![ColumnType::Count; d];
    let mut ds = Dataset::from_blocks(&types, y, &types, x)?;
    ds.metadata.insert("generator".to_string(), "next_step_pairs".to_string());
    Ok(ds)
}
