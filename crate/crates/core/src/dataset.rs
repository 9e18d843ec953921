//! In-memory typed relations, CSV loading, and partitioning rows into strata.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value used for empty categorical cells.
pub const NULL_CATEGORY: &str = "⟨null⟩";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` is missing from the input")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{column}` as a number")]
    TypeParseError { row: usize, column: String },
    #[error("input has a header but no data rows")]
    EmptyFile,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{0}` is not categorical")]
    NotCategorical(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("attributes {target:?} are not a subset of {source_attrs:?}")]
    NotASubset {
        target: Vec<String>,
        source_attrs: Vec<String>,
    },
    #[error("duplicate column name `{0}` in schema")]
    DuplicateColumn(String),
    #[error("row {row} has {found} cells, schema has {expected} columns")]
    RowArity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: cell for column `{column}` has the wrong type")]
    CellType { row: usize, column: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSchema {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
        }
    }

    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }
}

/// An ordered list of uniquely named columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ColumnSchema>", into = "Vec<ColumnSchema>")]
pub struct Schema {
    columns: Vec<ColumnSchema>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>) -> Result<Self, DatasetError> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|p| p.name == c.name) {
                return Err(DatasetError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Index of a categorical column usable as a group-by attribute.
    pub fn categorical_index(&self, name: &str) -> Result<usize, DatasetError> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| DatasetError::UnknownAttribute(name.to_string()))?;
        match self.columns[idx].kind {
            ColumnKind::Categorical => Ok(idx),
            ColumnKind::Numeric => Err(DatasetError::NotCategorical(name.to_string())),
        }
    }

    /// Index of a numeric column usable as an aggregation column.
    pub fn numeric_index(&self, name: &str) -> Result<usize, DatasetError> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
        match self.columns[idx].kind {
            ColumnKind::Numeric => Ok(idx),
            ColumnKind::Categorical => Err(DatasetError::NotNumeric(name.to_string())),
        }
    }
}

impl TryFrom<Vec<ColumnSchema>> for Schema {
    type Error = DatasetError;

    fn try_from(columns: Vec<ColumnSchema>) -> Result<Self, Self::Error> {
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<ColumnSchema> {
    fn from(s: Schema) -> Self {
        s.columns
    }
}

/// A single cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Num(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v:?}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

pub type Row = Vec<Value>;

/// An immutable table. Row ids are the positions `0..N` in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    schema: Schema,
    rows: Vec<Row>,
}

impl Relation {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, DatasetError> {
        for (i, row) in rows.iter().enumerate() {
            check_row(&schema, row, i)?;
        }
        Ok(Self { schema, rows })
    }

    /// Loads a comma-separated file whose header names every schema column.
    pub fn load_csv(path: impl AsRef<Path>, schema: Schema) -> Result<Self, DatasetError> {
        let file = File::open(path)?;
        Self::from_csv_reader(file, schema)
    }

    pub fn from_csv_reader<R: Read>(reader: R, schema: Schema) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::None)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut positions = Vec::with_capacity(schema.len());
        for col in schema.columns() {
            let pos = headers
                .iter()
                .position(|h| h.trim() == col.name)
                .ok_or_else(|| DatasetError::MissingColumn(col.name.clone()))?;
            positions.push(pos);
        }

        let mut rows = Vec::new();
        for (row_id, record) in rdr.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(schema.len());
            for (col, &pos) in schema.columns().iter().zip(&positions) {
                let raw = record.get(pos).unwrap_or("").trim();
                row.push(parse_cell(col, raw, row_id)?);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(DatasetError::EmptyFile);
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, row_id: usize) -> &Row {
        &self.rows[row_id]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Builds the group key of one row under the given categorical column indices.
    pub fn key_of(&self, row_id: usize, attrs: &[String], idx: &[usize]) -> GroupKey {
        key_of_row(&self.rows[row_id], attrs, idx)
    }

    /// Splits the rows into strata by the distinct combinations of `attrs`.
    ///
    /// Strata are ordered by first occurrence and each holds its row ids in
    /// ascending order.
    pub fn partition(&self, attrs: &[String]) -> Result<Partition, DatasetError> {
        let idx = attrs
            .iter()
            .map(|a| self.schema.categorical_index(a))
            .collect::<Result<Vec<_>, _>>()?;
        let mut groups: IndexMap<GroupKey, Vec<usize>> = IndexMap::new();
        for (row_id, row) in self.rows.iter().enumerate() {
            groups
                .entry(key_of_row(row, attrs, &idx))
                .or_default()
                .push(row_id);
        }
        Ok(Partition {
            attrs: attrs.to_vec(),
            groups,
        })
    }
}

pub(crate) fn key_of_row(row: &Row, attrs: &[String], idx: &[usize]) -> GroupKey {
    GroupKey {
        attrs: attrs.to_vec(),
        values: idx
            .iter()
            .map(|&i| match &row[i] {
                Value::Cat(s) => s.clone(),
                Value::Num(v) => format!("{v:?}"),
            })
            .collect(),
    }
}

pub(crate) fn check_row(schema: &Schema, row: &Row, row_id: usize) -> Result<(), DatasetError> {
    if row.len() != schema.len() {
        return Err(DatasetError::RowArity {
            row: row_id,
            expected: schema.len(),
            found: row.len(),
        });
    }
    for (cell, col) in row.iter().zip(schema.columns()) {
        let ok = match (cell, col.kind) {
            (Value::Num(v), ColumnKind::Numeric) => v.is_finite(),
            (Value::Cat(_), ColumnKind::Categorical) => true,
            _ => false,
        };
        if !ok {
            return Err(DatasetError::CellType {
                row: row_id,
                column: col.name.clone(),
            });
        }
    }
    Ok(())
}

/// Parses one trimmed CSV cell according to its column kind.
pub(crate) fn parse_cell(
    col: &ColumnSchema,
    raw: &str,
    row_id: usize,
) -> Result<Value, DatasetError> {
    match col.kind {
        ColumnKind::Categorical => Ok(Value::Cat(if raw.is_empty() {
            NULL_CATEGORY.to_string()
        } else {
            raw.to_string()
        })),
        ColumnKind::Numeric => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::Num)
            .ok_or_else(|| DatasetError::TypeParseError {
                row: row_id,
                column: col.name.clone(),
            }),
    }
}

/// An assignment of values to an ordered list of group-by attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub attrs: Vec<String>,
    pub values: Vec<String>,
}

impl GroupKey {
    pub fn new(attrs: Vec<String>, values: Vec<String>) -> Self {
        assert_eq!(attrs.len(), values.len(), "group key arity mismatch");
        Self { attrs, values }
    }

    /// The key of the single group of a query without a group-by clause.
    pub fn empty() -> Self {
        Self {
            attrs: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn get(&self, attr: &str) -> Option<&str> {
        self.attrs
            .iter()
            .position(|a| a == attr)
            .map(|i| self.values[i].as_str())
    }

    /// Restricts this key to `target` attributes, in the order given by `target`.
    pub fn project(&self, target: &[String]) -> Result<GroupKey, DatasetError> {
        let mut values = Vec::with_capacity(target.len());
        for t in target {
            match self.get(t) {
                Some(v) => values.push(v.to_string()),
                None => {
                    return Err(DatasetError::NotASubset {
                        target: target.to_vec(),
                        source_attrs: self.attrs.clone(),
                    })
                }
            }
        }
        Ok(GroupKey {
            attrs: target.to_vec(),
            values,
        })
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.attrs.is_empty() {
            return f.write_str("*");
        }
        for (i, (a, v)) in self.attrs.iter().zip(&self.values).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}={v}")?;
        }
        Ok(())
    }
}

/// Free-function form of [`GroupKey::project`].
pub fn project_key(c: &GroupKey, target: &[String]) -> Result<GroupKey, DatasetError> {
    c.project(target)
}

/// Strata of a relation: each occurring key with its ascending row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub attrs: Vec<String>,
    pub groups: IndexMap<GroupKey, Vec<usize>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }
}

/// Union of attribute lists in first-occurrence order.
pub fn union_attrs<'a, I>(sets: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut out: Vec<String> = Vec::new();
    for set in sets {
        for a in set {
            if !out.contains(a) {
                out.push(a.clone());
            }
        }
    }
    out
}
