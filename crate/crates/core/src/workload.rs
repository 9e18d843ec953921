//! Turning a query workload into per-result weights.
//!
//! Each query with `repeats = k` splits every aggregation column into
//! aggregation groups, one per occurring group (under the query's
//! predicate). An aggregation group is identified by its column, its group
//! key and the set of rows it covers, so the same rows reached through
//! different queries count as one entity and their repeats add up.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{AllocError, AllocationProblem, GroupQuery, WeightSpec, ALPHA_FLOOR};
use crate::dataset::{key_of_row, union_attrs, DatasetError, GroupKey, Relation};
use crate::query::{Predicate, QueryError};
use crate::stats::RunningMoments;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("query {0} has repeats 0")]
    ZeroRepeats(usize),
    #[error("query {0} has no aggregation column")]
    NoAggregates(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// One workload entry. JSON: `{group_by, aggregates, predicate?, repeats}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub group_by: Vec<String>,
    pub aggregates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
    #[serde(default = "one")]
    pub repeats: u64,
}

fn one() -> u64 {
    1
}

impl QuerySpec {
    pub fn new(group_by: &[&str], aggregates: &[&str], repeats: u64) -> Self {
        Self {
            group_by: group_by.iter().map(|s| s.to_string()).collect(),
            aggregates: aggregates.iter().map(|s| s.to_string()).collect(),
            predicate: None,
            repeats,
        }
    }

    pub fn with_predicate(mut self, p: Predicate) -> Self {
        self.predicate = Some(p);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AggregationGroup {
    pub column: String,
    pub group: GroupKey,
    /// Ascending row ids.
    pub member_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub entity: AggregationGroup,
    pub frequency: u64,
}

/// Distinct aggregation groups in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrequencyTable {
    entries: IndexMap<AggregationGroup, u64>,
}

impl FrequencyTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AggregationGroup, u64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Frequency of the entity with this column and group key, if exactly
    /// one such entity exists.
    pub fn frequency_of(&self, column: &str, group: &GroupKey) -> Option<u64> {
        let mut hits = self
            .entries
            .iter()
            .filter(|(e, _)| e.column == column && &e.group == group);
        let first = hits.next()?;
        hits.next().is_none().then_some(*first.1)
    }

    pub fn entries(&self) -> Vec<FrequencyEntry> {
        self.iter()
            .map(|(e, f)| FrequencyEntry {
                entity: e.clone(),
                frequency: f,
            })
            .collect()
    }
}

/// Collects every aggregation group induced by the workload with its
/// accumulated repeat count.
pub fn derive_aggregation_groups(
    rel: &Relation,
    workload: &[QuerySpec],
) -> Result<FrequencyTable, WorkloadError> {
    if workload.is_empty() {
        return Err(WorkloadError::EmptyWorkload);
    }
    let schema = rel.schema();
    let mut table = FrequencyTable::default();
    for (qi, q) in workload.iter().enumerate() {
        if q.repeats == 0 {
            return Err(WorkloadError::ZeroRepeats(qi));
        }
        if q.aggregates.is_empty() {
            return Err(WorkloadError::NoAggregates(qi));
        }
        for c in &q.aggregates {
            schema.numeric_index(c)?;
        }
        let gidx = q
            .group_by
            .iter()
            .map(|a| schema.categorical_index(a))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = match &q.predicate {
            Some(p) => Some(p.bind(schema)?),
            None => None,
        };
        let mut groups: IndexMap<GroupKey, Vec<usize>> = IndexMap::new();
        for (row_id, row) in rel.rows().iter().enumerate() {
            if pred.as_ref().is_none_or(|p| p.matches(row)) {
                groups
                    .entry(key_of_row(row, &q.group_by, &gidx))
                    .or_default()
                    .push(row_id);
            }
        }
        for c in &q.aggregates {
            for (key, rows) in &groups {
                let entity = AggregationGroup {
                    column: c.clone(),
                    group: key.clone(),
                    member_rows: rows.clone(),
                };
                *table.entries.entry(entity).or_insert(0) += q.repeats;
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightTransform {
    #[default]
    Identity,
    Sqrt,
}

/// Aggregation groups with the weight each contributes to the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityWeights {
    pub entities: Vec<(AggregationGroup, f64)>,
}

pub fn weights_from_frequencies(ft: &FrequencyTable, transform: WeightTransform) -> EntityWeights {
    EntityWeights {
        entities: ft
            .iter()
            .map(|(e, f)| {
                let f = f as f64;
                let w = match transform {
                    WeightTransform::Identity => f,
                    WeightTransform::Sqrt => f.sqrt(),
                };
                (e.clone(), w)
            })
            .collect(),
    }
}

impl EntityWeights {
    /// The same weights keyed by (query, group, column) for use with
    /// [`crate::alloc::beta_multi_groupby`]. Query `q` of the result is the
    /// `q`-th distinct grouping among the entities; entities restricted by a
    /// predicate have no counterpart there and are skipped.
    pub fn to_weight_spec(
        &self,
        rel: &Relation,
    ) -> Result<(Vec<GroupQuery>, WeightSpec), WorkloadError> {
        let mut queries: IndexMap<Vec<String>, BTreeSet<String>> = IndexMap::new();
        for (e, _) in &self.entities {
            queries
                .entry(e.group.attrs.clone())
                .or_default()
                .insert(e.column.clone());
        }
        let mut spec = WeightSpec::uniform();
        for (e, w) in &self.entities {
            let q = queries
                .get_index_of(&e.group.attrs)
                .expect("inserted above");
            let full = rel.partition(&e.group.attrs)?;
            if full.groups.get(&e.group) == Some(&e.member_rows) {
                spec.set(q, e.group.clone(), e.column.clone(), *w)?;
            }
        }
        let queries = queries
            .into_iter()
            .map(|(attrs, cols)| GroupQuery {
                attrs,
                columns: cols.into_iter().collect(),
            })
            .collect();
        Ok((queries, spec))
    }
}

/// Allocation coefficients over the finest stratification of the workload's
/// groupings.
///
/// Entity `e` (column ℓ, rows E, weight w) adds
/// `w · n_c · n_{c∩E} · σ²_{c∩E,ℓ} / (n_E² μ_{E,ℓ}²)` to stratum `c`. When E is
/// a union of strata this is `w · n_c² σ²_{c,ℓ} / (n_E² μ_{E,ℓ}²)`, the usual
/// multi-grouping coefficient.
pub fn workload_problem(
    rel: &Relation,
    weights: &EntityWeights,
    budget: u64,
) -> Result<AllocationProblem, WorkloadError> {
    if weights.entities.is_empty() {
        return Err(WorkloadError::EmptyWorkload);
    }
    let schema = rel.schema();
    let attrs = union_attrs(
        weights
            .entities
            .iter()
            .map(|(e, _)| e.group.attrs.as_slice()),
    );
    let part = rel.partition(&attrs)?;
    let mut stratum_of = vec![0usize; rel.len()];
    for (i, rows) in part.groups.values().enumerate() {
        for &r in rows {
            stratum_of[r] = i;
        }
    }
    let n_c: Vec<f64> = part.groups.values().map(|r| r.len() as f64).collect();
    let mut beta = vec![0.0; part.len()];
    for (e, w) in &weights.entities {
        let col = schema.numeric_index(&e.column)?;
        let value = |r: usize| rel.row(r)[col].as_f64().expect("numeric column");
        let whole = RunningMoments::from_values(e.member_rows.iter().map(|&r| value(r)));
        if whole.mean == 0.0 {
            return Err(AllocError::ZeroMeanCoarseGroup {
                query: 0,
                key: e.group.clone(),
                column: e.column.clone(),
            }
            .into());
        }
        let mut parts: IndexMap<usize, RunningMoments> = IndexMap::new();
        for &r in &e.member_rows {
            parts.entry(stratum_of[r]).or_default().push(value(r));
        }
        let n_e = e.member_rows.len() as f64;
        let denom = n_e * n_e * whole.mean * whole.mean;
        for (c, m) in parts {
            beta[c] += w * n_c[c] * m.count as f64 * m.variance() / denom;
        }
    }
    Ok(AllocationProblem {
        strata: part.groups.keys().cloned().collect(),
        alpha: beta
            .into_iter()
            .map(|b| if b > 0.0 { b } else { ALPHA_FLOOR })
            .collect(),
        caps: n_c.iter().map(|&n| n as u64).collect(),
        budget,
    })
}
