//! One-pass, mergeable per-stratum statistics.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{key_of_row, DatasetError, GroupKey, Relation, Row};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown or non-numeric column `{0}`")]
    UnknownColumn(String),
    #[error("catalog is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Dataset(DatasetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DatasetError> for StatsError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::UnknownAttribute(a) | DatasetError::NotCategorical(a) => {
                StatsError::UnknownAttribute(a)
            }
            DatasetError::MissingColumn(c) | DatasetError::NotNumeric(c) => {
                StatsError::UnknownColumn(c)
            }
            other => StatsError::Dataset(other),
        }
    }
}

/// Count, mean and sum of squared deviations, updated with Welford's
/// recurrence and merged with Chan's pairwise formula.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningMoments {
    pub const EMPTY: RunningMoments = RunningMoments {
        count: 0,
        mean: 0.0,
        m2: 0.0,
    };

    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        values.into_iter().fold(Self::EMPTY, Self::accumulate)
    }

    /// Rebuilds moments from a count, mean and (n−1)-divisor standard deviation.
    pub fn from_summary(count: u64, mean: f64, stddev: f64) -> Self {
        if count == 0 {
            return Self::EMPTY;
        }
        Self {
            count,
            mean,
            m2: stddev * stddev * (count - 1) as f64,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }

    pub fn accumulate(mut self, x: f64) -> Self {
        self.push(x);
        self
    }

    pub fn merge(&self, other: &RunningMoments) -> RunningMoments {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let count = self.count + other.count;
        let n = count as f64;
        let delta = other.mean - self.mean;
        let mean = if self.count >= other.count {
            self.mean + delta * nb / n
        } else {
            other.mean - delta * na / n
        };
        let m2 = (self.m2 + other.m2 + delta * delta * na * nb / n).max(0.0);
        RunningMoments { count, mean, m2 }
    }

    /// Variance with divisor `n − 1`; zero when fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stddev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// σ/μ, or `None` when the mean is zero.
    pub fn cv(&self) -> Option<f64> {
        (self.mean != 0.0).then(|| self.stddev() / self.mean)
    }
}

/// Summary of one stratum: its size and the moments of every aggregation column.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumStats {
    pub key: GroupKey,
    pub n: u64,
    /// Aligned with [`StatsCatalog::agg_columns`].
    pub columns: Vec<RunningMoments>,
}

impl StratumStats {
    pub fn mean(&self, col: usize) -> f64 {
        self.columns[col].mean
    }

    pub fn stddev(&self, col: usize) -> f64 {
        self.columns[col].stddev()
    }

    pub fn cv(&self, col: usize) -> Option<f64> {
        self.columns[col].cv()
    }
}

/// Output of the statistics pass: one entry per occurring group key.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsCatalog {
    pub group_attrs: Vec<String>,
    pub agg_columns: Vec<String>,
    pub entries: IndexMap<GroupKey, StratumStats>,
    pub total_n: u64,
}

impl StatsCatalog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn strata(&self) -> impl Iterator<Item = &StratumStats> {
        self.entries.values()
    }

    pub fn get(&self, key: &GroupKey) -> Option<&StratumStats> {
        self.entries.get(key)
    }

    pub fn column_index(&self, col: &str) -> Result<usize, StatsError> {
        self.agg_columns
            .iter()
            .position(|c| c == col)
            .ok_or_else(|| StatsError::UnknownColumn(col.to_string()))
    }

    /// Pools strata up to a coarser grouping `target ⊆ group_attrs`.
    pub fn rollup(&self, target: &[String]) -> Result<StatsCatalog, StatsError> {
        let mut entries: IndexMap<GroupKey, StratumStats> = IndexMap::new();
        for s in self.entries.values() {
            let coarse = s.key.project(target).map_err(|_| {
                let bad = target
                    .iter()
                    .find(|t| !self.group_attrs.contains(t))
                    .cloned()
                    .unwrap_or_default();
                StatsError::UnknownAttribute(bad)
            })?;
            match entries.get_mut(&coarse) {
                Some(acc) => {
                    acc.n += s.n;
                    for (a, b) in acc.columns.iter_mut().zip(&s.columns) {
                        *a = a.merge(b);
                    }
                }
                None => {
                    entries.insert(
                        coarse.clone(),
                        StratumStats {
                            key: coarse,
                            n: s.n,
                            columns: s.columns.clone(),
                        },
                    );
                }
            }
        }
        Ok(StatsCatalog {
            group_attrs: target.to_vec(),
            agg_columns: self.agg_columns.clone(),
            entries,
            total_n: self.total_n,
        })
    }

    pub fn to_json(&self) -> Result<String, StatsError> {
        Ok(crate::json::to_string(&CatalogDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let doc: CatalogDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StatsError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StatsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Incremental catalog construction over any subset of rows; partial
/// builders over disjoint row ranges combine with [`CatalogBuilder::merge`].
#[derive(Debug, Clone)]
pub struct CatalogBuilder {
    group_attrs: Vec<String>,
    agg_columns: Vec<String>,
    group_idx: Vec<usize>,
    col_idx: Vec<usize>,
    entries: IndexMap<GroupKey, StratumStats>,
    total_n: u64,
}

impl CatalogBuilder {
    pub fn new(
        rel: &Relation,
        group_attrs: &[String],
        agg_columns: &[String],
    ) -> Result<Self, StatsError> {
        let schema = rel.schema();
        let group_idx = group_attrs
            .iter()
            .map(|a| schema.categorical_index(a))
            .collect::<Result<Vec<_>, _>>()?;
        let col_idx = agg_columns
            .iter()
            .map(|c| schema.numeric_index(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            group_attrs: group_attrs.to_vec(),
            agg_columns: agg_columns.to_vec(),
            group_idx,
            col_idx,
            entries: IndexMap::new(),
            total_n: 0,
        })
    }

    pub fn add_row(&mut self, row: &Row) {
        let key = key_of_row(row, &self.group_attrs, &self.group_idx);
        let ncols = self.col_idx.len();
        let entry = self
            .entries
            .entry(key)
            .or_insert_with_key(|k| StratumStats {
                key: k.clone(),
                n: 0,
                columns: vec![RunningMoments::EMPTY; ncols],
            });
        entry.n += 1;
        for (m, &ci) in entry.columns.iter_mut().zip(&self.col_idx) {
            m.push(row[ci].as_f64().expect("schema-checked numeric cell"));
        }
        self.total_n += 1;
    }

    /// Absorbs a builder that saw a later, disjoint range of rows.
    pub fn merge(mut self, other: CatalogBuilder) -> CatalogBuilder {
        for (key, s) in other.entries {
            match self.entries.get_mut(&key) {
                Some(acc) => {
                    acc.n += s.n;
                    for (a, b) in acc.columns.iter_mut().zip(&s.columns) {
                        *a = a.merge(b);
                    }
                }
                None => {
                    self.entries.insert(key, s);
                }
            }
        }
        self.total_n += other.total_n;
        self
    }

    pub fn finish(self) -> StatsCatalog {
        StatsCatalog {
            group_attrs: self.group_attrs,
            agg_columns: self.agg_columns,
            entries: self.entries,
            total_n: self.total_n,
        }
    }
}

/// Computes per-stratum count, mean and standard deviation for `agg_columns`.
pub fn compute_catalog(
    rel: &Relation,
    group_attrs: &[String],
    agg_columns: &[String],
) -> Result<StatsCatalog, StatsError> {
    let mut b = CatalogBuilder::new(rel, group_attrs, agg_columns)?;
    for row in rel.rows() {
        b.add_row(row);
    }
    Ok(b.finish())
}

/// Same as [`compute_catalog`] but splits the rows into `workers` contiguous
/// ranges accumulated on separate threads and merged in row order.
pub fn compute_catalog_parallel(
    rel: &Relation,
    group_attrs: &[String],
    agg_columns: &[String],
    workers: usize,
) -> Result<StatsCatalog, StatsError> {
    let proto = CatalogBuilder::new(rel, group_attrs, agg_columns)?;
    let workers = workers.max(1);
    let chunk = rel.len().div_ceil(workers).max(1);
    let parts: Vec<CatalogBuilder> = std::thread::scope(|scope| {
        let handles: Vec<_> = rel
            .rows()
            .chunks(chunk)
            .map(|rows| {
                let mut b = proto.clone();
                scope.spawn(move || {
                    for row in rows {
                        b.add_row(row);
                    }
                    b
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("statistics worker panicked"))
            .collect()
    });
    Ok(parts
        .into_iter()
        .fold(proto, CatalogBuilder::merge)
        .finish())
}

#[derive(Serialize, Deserialize)]
struct ColumnDoc {
    mean: f64,
    stddev: f64,
}

#[derive(Serialize, Deserialize)]
struct StratumDoc {
    key: Vec<String>,
    n: u64,
    columns: Vec<ColumnDoc>,
}

#[derive(Serialize, Deserialize)]
struct CatalogDoc {
    group_attrs: Vec<String>,
    agg_columns: Vec<String>,
    total_n: u64,
    strata: Vec<StratumDoc>,
}

impl From<&StatsCatalog> for CatalogDoc {
    fn from(c: &StatsCatalog) -> Self {
        CatalogDoc {
            group_attrs: c.group_attrs.clone(),
            agg_columns: c.agg_columns.clone(),
            total_n: c.total_n,
            strata: c
                .strata()
                .map(|s| StratumDoc {
                    key: s.key.values.clone(),
                    n: s.n,
                    columns: s
                        .columns
                        .iter()
                        .map(|m| ColumnDoc {
                            mean: m.mean,
                            stddev: m.stddev(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<CatalogDoc> for StatsCatalog {
    type Error = StatsError;

    fn try_from(doc: CatalogDoc) -> Result<Self, Self::Error> {
        let mut entries = IndexMap::new();
        let mut sum = 0;
        for s in doc.strata {
            if s.key.len() != doc.group_attrs.len() || s.columns.len() != doc.agg_columns.len() {
                return Err(StatsError::Corrupt("stratum arity mismatch".into()));
            }
            if s.n == 0 {
                return Err(StatsError::Corrupt("empty stratum".into()));
            }
            sum += s.n;
            let key = GroupKey::new(doc.group_attrs.clone(), s.key);
            let columns = s
                .columns
                .iter()
                .map(|c| RunningMoments::from_summary(s.n, c.mean, c.stddev))
                .collect();
            entries.insert(
                key.clone(),
                StratumStats {
                    key,
                    n: s.n,
                    columns,
                },
            );
        }
        if sum != doc.total_n {
            return Err(StatsError::Corrupt(format!(
                "strata sum to {sum}, total_n is {}",
                doc.total_n
            )));
        }
        Ok(StatsCatalog {
            group_attrs: doc.group_attrs,
            agg_columns: doc.agg_columns,
            entries,
            total_n: doc.total_n,
        })
    }
}
