//! Group-by AVG/SUM/COUNT over samples and over the full relation.

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::cv_norms;
use crate::dataset::{
    key_of_row, ColumnKind, DatasetError, GroupKey, Relation, Row, Schema, Value,
};
use crate::sampler::{PoissonSample, Sample, StratifiedSample};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("grouping {query:?} is not a union of the sample strata {sample:?}")]
    IncompatibleGrouping {
        query: Vec<String>,
        sample: Vec<String>,
    },
    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),
    #[error("{0} needs an aggregation column")]
    MissingColumn(AggFn),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=", alias = "<>", alias = "≠")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=", alias = "≤")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
    #[serde(rename = "between")]
    Between,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Between => "between",
        })
    }
}

/// `column op value`, or `column between value and high`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub column: String,
    pub op: CmpOp,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<Value>,
}

impl Atom {
    pub fn new(column: impl Into<String>, op: CmpOp, value: Value) -> Self {
        Self {
            column: column.into(),
            op,
            value,
            high: None,
        }
    }

    pub fn between(column: impl Into<String>, low: Value, high: Value) -> Self {
        Self {
            column: column.into(),
            op: CmpOp::Between,
            value: low,
            high: Some(high),
        }
    }
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Num(x) => format!("{x}"),
        Value::Cat(s) => format!("'{}'", s.replace('\'', "''")),
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.op, &self.high) {
            (CmpOp::Between, Some(h)) => write!(
                f,
                "{} between {} and {}",
                self.column,
                fmt_value(&self.value),
                fmt_value(h)
            ),
            _ => write!(f, "{} {} {}", self.column, self.op, fmt_value(&self.value)),
        }
    }
}

/// Conjunction of atoms. Serialized as a JSON array of atoms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

impl Predicate {
    pub fn new(atoms: Vec<Atom>) -> Self {
        Self { atoms }
    }

    pub fn is_trivial(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Sorted, deduplicated textual form: equal for conjunctions that differ
    /// only in atom order.
    pub fn canonical(&self) -> String {
        let mut parts: Vec<String> = self.atoms.iter().map(|a| a.to_string()).collect();
        parts.sort();
        parts.dedup();
        parts.join(" AND ")
    }

    pub fn bind(&self, schema: &Schema) -> Result<BoundPredicate, QueryError> {
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for a in &self.atoms {
            let idx = schema
                .index_of(&a.column)
                .ok_or_else(|| QueryError::UnknownColumn(a.column.clone()))?;
            let kind = schema.columns()[idx].kind;
            let fits = |v: &Value| {
                matches!(
                    (kind, v),
                    (ColumnKind::Numeric, Value::Num(_)) | (ColumnKind::Categorical, Value::Cat(_))
                )
            };
            if !fits(&a.value) || a.high.as_ref().is_some_and(|h| !fits(h)) {
                return Err(QueryError::InvalidPredicate(format!(
                    "constant type does not match column `{}`",
                    a.column
                )));
            }
            match (a.op, &a.high) {
                (CmpOp::Between, None) => {
                    return Err(QueryError::InvalidPredicate(format!(
                        "between on `{}` needs a high bound",
                        a.column
                    )))
                }
                (CmpOp::Between, Some(h)) => {
                    if compare(&a.value, h) == Some(Ordering::Greater) {
                        return Err(QueryError::InvalidPredicate(format!(
                            "between on `{}` has low > high",
                            a.column
                        )));
                    }
                }
                (_, Some(_)) => {
                    return Err(QueryError::InvalidPredicate(format!(
                        "only between takes a high bound (`{}`)",
                        a.column
                    )))
                }
                _ => {}
            }
            atoms.push((idx, a.clone()));
        }
        Ok(BoundPredicate { atoms })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Num(x), Value::Num(y)) => x.partial_cmp(y),
        (Value::Cat(x), Value::Cat(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// A predicate resolved against a schema.
#[derive(Debug, Clone)]
pub struct BoundPredicate {
    atoms: Vec<(usize, Atom)>,
}

impl BoundPredicate {
    pub fn always() -> Self {
        Self { atoms: Vec::new() }
    }

    pub fn matches(&self, row: &Row) -> bool {
        self.atoms.iter().all(|(i, a)| {
            let Some(ord) = compare(&row[*i], &a.value) else {
                return false;
            };
            match a.op {
                CmpOp::Eq => ord == Ordering::Equal,
                CmpOp::Ne => ord != Ordering::Equal,
                CmpOp::Lt => ord == Ordering::Less,
                CmpOp::Le => ord != Ordering::Greater,
                CmpOp::Gt => ord == Ordering::Greater,
                CmpOp::Ge => ord != Ordering::Less,
                CmpOp::Between => {
                    ord != Ordering::Less
                        && a.high
                            .as_ref()
                            .and_then(|h| compare(&row[*i], h))
                            .is_some_and(|o| o != Ordering::Greater)
                }
            }
        })
    }
}

fn bind_opt(p: Option<&Predicate>, schema: &Schema) -> Result<BoundPredicate, QueryError> {
    p.map_or(Ok(BoundPredicate::always()), |p| p.bind(schema))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Avg,
    Sum,
    Count,
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggFn::Avg => "AVG",
            AggFn::Sum => "SUM",
            AggFn::Count => "COUNT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "fn")]
    pub func: AggFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
}

impl Aggregate {
    pub fn avg(column: impl Into<String>) -> Self {
        Self {
            func: AggFn::Avg,
            column: Some(column.into()),
        }
    }

    pub fn sum(column: impl Into<String>) -> Self {
        Self {
            func: AggFn::Sum,
            column: Some(column.into()),
        }
    }

    pub fn count() -> Self {
        Self {
            func: AggFn::Count,
            column: None,
        }
    }
}

/// One group-by query: `SELECT fn(column) ... WHERE predicate GROUP BY group_by`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub group_by: Vec<String>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
}

impl Query {
    pub fn new(group_by: Vec<String>, aggregate: Aggregate) -> Self {
        Self {
            group_by,
            aggregate,
            predicate: None,
        }
    }

    pub fn with_predicate(mut self, p: Predicate) -> Self {
        self.predicate = Some(p);
        self
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({})",
            self.aggregate.func,
            self.aggregate.column.as_deref().unwrap_or("*")
        )?;
        if let Some(p) = self.predicate.as_ref().filter(|p| !p.is_trivial()) {
            write!(f, " WHERE {p}")?;
        }
        if !self.group_by.is_empty() {
            write!(f, " GROUP BY {}", self.group_by.join(", "))?;
        }
        Ok(())
    }
}

/// Estimated answer for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub group: GroupKey,
    pub value: Option<f64>,
    pub predicted_cv: Option<f64>,
    /// Sampled rows that contributed.
    pub support: usize,
    pub missing: bool,
}

fn numeric_column(schema: &Schema, agg: &Aggregate) -> Result<Option<usize>, QueryError> {
    match (&agg.column, agg.func) {
        (None, AggFn::Count) => Ok(None),
        (None, f) => Err(QueryError::MissingColumn(f)),
        (Some(c), _) => {
            let i = schema
                .index_of(c)
                .ok_or_else(|| QueryError::UnknownColumn(c.clone()))?;
            if schema.columns()[i].kind != ColumnKind::Numeric {
                return Err(QueryError::NotNumeric(c.clone()));
            }
            Ok(Some(i))
        }
    }
}

fn group_indices(schema: &Schema, attrs: &[String]) -> Result<Vec<usize>, QueryError> {
    Ok(attrs
        .iter()
        .map(|a| schema.categorical_index(a))
        .collect::<Result<Vec<_>, _>>()?)
}

fn value_of(row: &Row, col: Option<usize>) -> f64 {
    col.map_or(1.0, |i| row[i].as_f64().expect("numeric column"))
}

/// Weighted sum and count accumulated in row order.
#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    sum: f64,
    count: f64,
    support: usize,
}

impl Totals {
    fn add(&mut self, weight: f64, v: f64) {
        self.sum += weight * v;
        self.count += weight;
        self.support += 1;
    }

    fn answer(&self, func: AggFn) -> Option<f64> {
        if self.support == 0 {
            return None;
        }
        Some(match func {
            AggFn::Avg => self.sum / self.count,
            AggFn::Sum => self.sum,
            AggFn::Count => self.count,
        })
    }
}

/// Exact per-group answers; groups without matching rows are absent.
pub fn exact_answer(rel: &Relation, query: &Query) -> Result<Vec<(GroupKey, f64)>, QueryError> {
    let schema = rel.schema();
    let col = numeric_column(schema, &query.aggregate)?;
    let gidx = group_indices(schema, &query.group_by)?;
    let pred = bind_opt(query.predicate.as_ref(), schema)?;
    let mut groups: IndexMap<GroupKey, Totals> = IndexMap::new();
    for row in rel.rows() {
        if pred.matches(row) {
            groups
                .entry(key_of_row(row, &query.group_by, &gidx))
                .or_default()
                .add(1.0, value_of(row, col));
        }
    }
    Ok(groups
        .into_iter()
        .filter_map(|(k, t)| t.answer(query.aggregate.func).map(|v| (k, v)))
        .collect())
}

/// Stratified estimates: every sampled row of stratum `c` stands for
/// `n_c / s_c` rows; AVG is the ratio of the expanded SUM and COUNT.
pub fn estimate_stratified(
    sample: &StratifiedSample,
    query: &Query,
) -> Result<Vec<Estimate>, QueryError> {
    if !query
        .group_by
        .iter()
        .all(|a| sample.group_attrs.contains(a))
    {
        return Err(QueryError::IncompatibleGrouping {
            query: query.group_by.clone(),
            sample: sample.group_attrs.clone(),
        });
    }
    let schema = &sample.schema;
    let col = numeric_column(schema, &query.aggregate)?;
    let pred = bind_opt(query.predicate.as_ref(), schema)?;

    // coarse group -> strata indices
    let mut coarse: IndexMap<GroupKey, Vec<usize>> = IndexMap::new();
    for (i, st) in sample.strata.iter().enumerate() {
        coarse
            .entry(st.key.project(&query.group_by)?)
            .or_default()
            .push(i);
    }

    let mut out = Vec::with_capacity(coarse.len());
    for (group, strata) in coarse {
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for &i in &strata {
            let st = &sample.strata[i];
            if st.s == 0 {
                continue;
            }
            let w = st.n as f64 / st.s as f64;
            for r in &st.rows {
                if pred.matches(&r.values) {
                    rows.push((r.row_id, w, value_of(&r.values, col)));
                }
            }
        }
        rows.sort_by_key(|r| r.0);
        let mut t = Totals::default();
        for &(_, w, v) in &rows {
            t.add(w, v);
        }
        let value = t.answer(query.aggregate.func);
        let predicted_cv = match (&value, &query.predicate) {
            (Some(v), p) if p.as_ref().is_none_or(|p| p.is_trivial()) => {
                stratified_cv(sample, &strata, col, query.aggregate.func, *v)
            }
            _ => None,
        };
        out.push(Estimate {
            group,
            value,
            predicted_cv,
            support: t.support,
            missing: value.is_none(),
        });
    }
    Ok(out)
}

/// CV of a stratified estimator from within-stratum sample variances.
fn stratified_cv(
    sample: &StratifiedSample,
    strata: &[usize],
    col: Option<usize>,
    func: AggFn,
    value: f64,
) -> Option<f64> {
    if func == AggFn::Count {
        return Some(0.0);
    }
    let col = col?;
    let n_group: f64 = strata.iter().map(|&i| sample.strata[i].n as f64).sum();
    let mut var = 0.0;
    for &i in strata {
        let st = &sample.strata[i];
        if st.s >= st.n {
            continue;
        }
        if st.s < 2 {
            return None;
        }
        let m = crate::stats::RunningMoments::from_values(
            st.rows.iter().map(|r| value_of(&r.values, Some(col))),
        );
        let (n, s) = (st.n as f64, st.s as f64);
        let scale = if func == AggFn::Avg { n / n_group } else { n };
        var += scale * scale * (1.0 - s / n) * m.variance() / s;
    }
    (value != 0.0).then(|| var.sqrt() / value.abs())
}

/// Horvitz–Thompson estimates: each sampled row stands for `1 / p_r` rows.
pub fn estimate_poisson(
    sample: &PoissonSample,
    query: &Query,
) -> Result<Vec<Estimate>, QueryError> {
    let schema = &sample.schema;
    let col = numeric_column(schema, &query.aggregate)?;
    let gidx = group_indices(schema, &query.group_by)?;
    let pred = bind_opt(query.predicate.as_ref(), schema)?;
    let mut groups: IndexMap<GroupKey, Totals> = IndexMap::new();
    let mut rows: Vec<&crate::sampler::PoissonRow> = sample.rows.iter().collect();
    rows.sort_by_key(|r| r.row_id);
    for r in rows {
        if pred.matches(&r.values) {
            groups
                .entry(key_of_row(&r.values, &query.group_by, &gidx))
                .or_default()
                .add(r.weight(), value_of(&r.values, col));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, t)| {
            let value = t.answer(query.aggregate.func);
            Estimate {
                group,
                value,
                predicted_cv: None,
                support: t.support,
                missing: value.is_none(),
            }
        })
        .collect())
}

pub fn estimate(sample: &Sample, query: &Query) -> Result<Vec<Estimate>, QueryError> {
    match sample {
        Sample::Stratified(s) => estimate_stratified(s, query),
        Sample::Poisson(p) => estimate_poisson(p, query),
    }
}

/// AVG estimates for one column.
pub fn estimate_avg(
    sample: &StratifiedSample,
    group_attrs: &[String],
    col: &str,
    predicate: Option<&Predicate>,
) -> Result<Vec<Estimate>, QueryError> {
    let mut q = Query::new(group_attrs.to_vec(), Aggregate::avg(col));
    q.predicate = predicate.cloned();
    estimate_stratified(sample, &q)
}

/// SUM estimates for `Some(col)`, COUNT for `None`.
pub fn estimate_sum_count(
    sample: &StratifiedSample,
    group_attrs: &[String],
    col: Option<&str>,
    predicate: Option<&Predicate>,
) -> Result<Vec<Estimate>, QueryError> {
    let agg = col.map_or_else(Aggregate::count, Aggregate::sum);
    let mut q = Query::new(group_attrs.to_vec(), agg);
    q.predicate = predicate.cloned();
    estimate_stratified(sample, &q)
}

/// How groups absent from the sample enter the error summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Score a fixed relative error.
    Score(f64),
    Exclude,
}

impl Default for MissingPolicy {
    fn default() -> Self {
        MissingPolicy::Score(1.0)
    }
}

impl MissingPolicy {
    fn score(self) -> Option<f64> {
        match self {
            MissingPolicy::Score(e) => Some(e),
            MissingPolicy::Exclude => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: GroupKey,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub relative_error: Option<f64>,
    pub predicted_cv: Option<f64>,
    pub missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: *v.last().unwrap(),
            p50: percentile(&v, 0.50),
            p90: percentile(&v, 0.90),
            p99: percentile(&v, 0.99),
        }
    }
}

/// Linear interpolation between closest ranks of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CvNorms {
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub query: String,
    pub groups: Vec<GroupError>,
    pub summary: ErrorSummary,
    pub cv_norms: CvNorms,
    pub missing_groups: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        crate::json::to_string(self)
    }

    /// One line per group: key, truth, estimate, relative error, predicted CV, missing.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            "group",
            "truth",
            "estimate",
            "relative_error",
            "predicted_cv",
            "missing",
        ])
        .expect("in-memory write");
        for g in &self.groups {
            w.write_record([
                g.group.to_string(),
                g.truth.to_string(),
                opt(g.estimate),
                opt(g.relative_error),
                opt(g.predicted_cv),
                g.missing.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

/// Compares estimates against exact answers, group by group.
pub fn evaluate_estimates(
    query: &Query,
    truth: &[(GroupKey, f64)],
    estimates: &[Estimate],
    missing: MissingPolicy,
) -> EvaluationReport {
    let by_key: IndexMap<&GroupKey, &Estimate> = estimates.iter().map(|e| (&e.group, e)).collect();
    let mut groups = Vec::with_capacity(truth.len());
    let mut errors = Vec::new();
    let mut cvs = Vec::new();
    let mut warnings = Vec::new();
    let mut missing_groups = 0;
    for (key, x) in truth {
        let est = by_key.get(key).copied();
        let value = est.and_then(|e| e.value);
        let predicted_cv = est.and_then(|e| e.predicted_cv);
        if let Some(c) = predicted_cv {
            cvs.push(c);
        }
        if *x == 0.0 {
            warnings.push(format!(
                "ZeroTruth: group `{key}` excluded from relative errors"
            ));
            groups.push(GroupError {
                group: key.clone(),
                truth: *x,
                estimate: value,
                relative_error: None,
                predicted_cv,
                missing: value.is_none(),
            });
            continue;
        }
        let relative_error = match value {
            Some(y) => Some((y - x).abs() / x.abs()),
            None => {
                missing_groups += 1;
                missing.score()
            }
        };
        if let Some(e) = relative_error {
            errors.push(e);
        }
        groups.push(GroupError {
            group: key.clone(),
            truth: *x,
            estimate: value,
            relative_error,
            predicted_cv,
            missing: value.is_none(),
        });
    }
    let (l2, linf) = cv_norms(&cvs);
    EvaluationReport {
        query: query.to_string(),
        groups,
        summary: ErrorSummary::of(&errors),
        cv_norms: CvNorms { l2, linf },
        missing_groups,
        warnings,
    }
}

/// Runs `query` exactly and on `sample`, and reports per-group relative errors.
pub fn evaluate(
    rel: &Relation,
    sample: &Sample,
    query: &Query,
    missing: MissingPolicy,
) -> Result<EvaluationReport, QueryError> {
    let truth = exact_answer(rel, query)?;
    let est = estimate(sample, query)?;
    Ok(evaluate_estimates(query, &truth, &est, missing))
}
