//! Drawing and storing samples.
//!
//! Sample file layout: the first line is a JSON header, the rest is CSV.
//!
//! ```text
//! {"kind":"stratified","schema":[...],"method":"l2","seed":7,"group_attrs":["major"],
//!  "strata":[{"key":["CS"],"n":2,"s":1}, ...]}
//! __stratum,__row_id,id,age,...
//! 0,1,2,22,...
//! ```
//!
//! `__stratum` is the ordinal of the row's stratum in the header. Poisson
//! samples use `"kind":"poisson"`, carry `population` and `rows` instead of
//! `strata`, and replace `__stratum` with the inclusion probability `__p`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{AllocationPlan, Method};
use crate::dataset::{ColumnKind, DatasetError, GroupKey, Relation, Row, Schema, Value};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("plan does not match the relation: {0}")]
    PlanMismatch(String),
    #[error("inclusion probability {value} of row {row} is outside [0, 1]")]
    RateOutOfRange { row: usize, value: f64 },
    #[error("corrupt sample file: {0}")]
    CorruptSampleFile(String),
    #[error("sample schema does not match the relation schema")]
    SchemaMismatch,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> SampleError {
    SampleError::CorruptSampleFile(msg.into())
}

/// Generator for stratum `index`: one independent stream per stratum.
pub fn stratum_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Uniform `s`-subset of `items` by reservoir sampling (Algorithm R).
/// The result keeps the input order.
pub fn reservoir<T: Copy + Ord, R: Rng>(items: &[T], s: usize, rng: &mut R) -> Vec<T> {
    if s == 0 {
        return Vec::new();
    }
    let mut res: Vec<T> = items.iter().take(s).copied().collect();
    for (t, &item) in items.iter().enumerate().skip(s) {
        let j = rng.random_range(0..=t);
        if j < s {
            res[j] = item;
        }
    }
    res.sort();
    res
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRow {
    pub row_id: usize,
    pub values: Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledStratum {
    pub key: GroupKey,
    pub n: u64,
    pub s: u64,
    pub rows: Vec<SampledRow>,
}

impl SampledStratum {
    pub fn is_missing(&self) -> bool {
        self.s == 0 && self.n > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedSample {
    pub schema: Schema,
    pub method: Method,
    pub seed: u64,
    pub group_attrs: Vec<String>,
    pub strata: Vec<SampledStratum>,
}

impl StratifiedSample {
    pub fn len(&self) -> usize {
        self.strata.iter().map(|s| s.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Strata that were allotted no rows.
    pub fn missing(&self) -> Vec<&GroupKey> {
        self.strata
            .iter()
            .filter(|s| s.is_missing())
            .map(|s| &s.key)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonRow {
    pub row_id: usize,
    pub p: f64,
    pub values: Row,
}

impl PoissonRow {
    pub fn weight(&self) -> f64 {
        1.0 / self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSample {
    pub schema: Schema,
    pub seed: u64,
    pub population: u64,
    pub rows: Vec<PoissonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Stratified(StratifiedSample),
    Poisson(PoissonSample),
}

/// Draws `s_i` rows uniformly without replacement from every stratum of the
/// plan's grouping.
pub fn draw_stratified(
    rel: &Relation,
    plan: &AllocationPlan,
    seed: u64,
) -> Result<StratifiedSample, SampleError> {
    let mut part = rel.partition(&plan.group_attrs)?;
    if part.len() != plan.strata.len() {
        return Err(SampleError::PlanMismatch(format!(
            "relation has {} strata, plan has {}",
            part.len(),
            plan.strata.len()
        )));
    }
    let mut strata = Vec::with_capacity(plan.strata.len());
    for (i, ps) in plan.strata.iter().enumerate() {
        let key = plan.key(i);
        let members = part
            .groups
            .swap_remove(&key)
            .ok_or_else(|| SampleError::PlanMismatch(format!("stratum `{key}` not in relation")))?;
        if members.len() as u64 != ps.n || ps.integral > ps.n {
            return Err(SampleError::PlanMismatch(format!(
                "stratum `{key}`: relation has {} rows, plan says n={} s={}",
                members.len(),
                ps.n,
                ps.integral
            )));
        }
        let chosen = reservoir(&members, ps.integral as usize, &mut stratum_rng(seed, i));
        strata.push(SampledStratum {
            key,
            n: ps.n,
            s: ps.integral,
            rows: chosen
                .into_iter()
                .map(|row_id| SampledRow {
                    row_id,
                    values: rel.row(row_id).clone(),
                })
                .collect(),
        });
    }
    Ok(StratifiedSample {
        schema: rel.schema().clone(),
        method: plan.method,
        seed,
        group_attrs: plan.group_attrs.clone(),
        strata,
    })
}

/// Includes row `r` independently with probability `p[r]`.
pub fn draw_poisson(rel: &Relation, p: &[f64], seed: u64) -> Result<PoissonSample, SampleError> {
    if p.len() != rel.len() {
        return Err(SampleError::PlanMismatch(format!(
            "{} probabilities for {} rows",
            p.len(),
            rel.len()
        )));
    }
    if let Some((row, &value)) = p
        .iter()
        .enumerate()
        .find(|(_, x)| !(0.0..=1.0).contains(*x))
    {
        return Err(SampleError::RateOutOfRange { row, value });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (row_id, &pr) in p.iter().enumerate() {
        // One draw per row keeps the stream aligned regardless of p.
        let u: f64 = rng.random();
        if u < pr {
            rows.push(PoissonRow {
                row_id,
                p: pr,
                values: rel.row(row_id).clone(),
            });
        }
    }
    Ok(PoissonSample {
        schema: rel.schema().clone(),
        seed,
        population: rel.len() as u64,
        rows,
    })
}

#[derive(Serialize, Deserialize)]
struct StratumHeader {
    key: Vec<String>,
    n: u64,
    s: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Header {
    Stratified {
        schema: Schema,
        method: Method,
        seed: u64,
        group_attrs: Vec<String>,
        strata: Vec<StratumHeader>,
    },
    Poisson {
        schema: Schema,
        seed: u64,
        population: u64,
        rows: u64,
    },
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Num(x) => x.to_string(),
        Value::Cat(s) => s.clone(),
    }
}

fn csv_header(schema: &Schema, tag: &str) -> Vec<String> {
    let mut h = vec![tag.to_string(), "__row_id".to_string()];
    h.extend(schema.columns().iter().map(|c| c.name.clone()));
    h
}

pub fn write_sample<W: Write>(sample: &Sample, out: W) -> Result<(), SampleError> {
    let mut out = BufWriter::new(out);
    let (header, tag, schema) = match sample {
        Sample::Stratified(s) => (
            Header::Stratified {
                schema: s.schema.clone(),
                method: s.method,
                seed: s.seed,
                group_attrs: s.group_attrs.clone(),
                strata: s
                    .strata
                    .iter()
                    .map(|st| StratumHeader {
                        key: st.key.values.clone(),
                        n: st.n,
                        s: st.s,
                    })
                    .collect(),
            },
            "__stratum",
            &s.schema,
        ),
        Sample::Poisson(p) => (
            Header::Poisson {
                schema: p.schema.clone(),
                seed: p.seed,
                population: p.population,
                rows: p.rows.len() as u64,
            },
            "__p",
            &p.schema,
        ),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| SampleError::Io(e.into());
    w.write_record(csv_header(schema, tag)).map_err(io)?;
    match sample {
        Sample::Stratified(s) => {
            for (i, st) in s.strata.iter().enumerate() {
                for r in &st.rows {
                    let mut rec = vec![i.to_string(), r.row_id.to_string()];
                    rec.extend(r.values.iter().map(format_value));
                    w.write_record(rec).map_err(io)?;
                }
            }
        }
        Sample::Poisson(p) => {
            for r in &p.rows {
                let mut rec = vec![r.p.to_string(), r.row_id.to_string()];
                rec.extend(r.values.iter().map(format_value));
                w.write_record(rec).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_sample(sample: &Sample, path: impl AsRef<Path>) -> Result<(), SampleError> {
    write_sample(sample, File::create(path)?)
}

/// Loads a sample; with `expected` set, its schema must match exactly.
pub fn load_sample(
    path: impl AsRef<Path>,
    expected: Option<&Schema>,
) -> Result<Sample, SampleError> {
    read_sample(File::open(path)?, expected)
}

fn parse_value(kind: ColumnKind, raw: &str) -> Option<Value> {
    match kind {
        ColumnKind::Categorical => Some(Value::Cat(raw.to_string())),
        ColumnKind::Numeric => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::Num),
    }
}

pub fn read_sample<R: Read>(input: R, expected: Option<&Schema>) -> Result<Sample, SampleError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim().is_empty() {
        return Err(corrupt("missing header line"));
    }
    let header: Header =
        serde_json::from_str(first.trim_end()).map_err(|e| corrupt(format!("header: {e}")))?;
    let schema = match &header {
        Header::Stratified { schema, .. } | Header::Poisson { schema, .. } => schema.clone(),
    };
    if expected.is_some_and(|e| *e != schema) {
        return Err(SampleError::SchemaMismatch);
    }
    let tag = match header {
        Header::Stratified { .. } => "__stratum",
        Header::Poisson { .. } => "__p",
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let cols = rdr
        .headers()
        .map_err(|e| corrupt(format!("column header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if cols != csv_header(&schema, tag) {
        return Err(corrupt("column header does not match the schema"));
    }

    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| corrupt(format!("record {line}: {e}")))?;
        if rec.len() != schema.len() + 2 {
            return Err(corrupt(format!("record {line} has {} fields", rec.len())));
        }
        let row_id: usize = rec[1]
            .parse()
            .map_err(|_| corrupt(format!("record {line}: bad row id")))?;
        let values = schema
            .columns()
            .iter()
            .zip(rec.iter().skip(2))
            .map(|(c, raw)| parse_value(c.kind, raw))
            .collect::<Option<Row>>()
            .ok_or_else(|| corrupt(format!("record {line}: bad value")))?;
        records.push((rec[0].to_string(), row_id, values));
    }

    match header {
        Header::Stratified {
            schema,
            method,
            seed,
            group_attrs,
            strata,
        } => {
            let mut out: Vec<SampledStratum> = strata
                .into_iter()
                .map(|h| SampledStratum {
                    key: GroupKey::new(group_attrs.clone(), h.key),
                    n: h.n,
                    s: h.s,
                    rows: Vec::new(),
                })
                .collect();
            for (tag, row_id, values) in records {
                let i: usize = tag.parse().map_err(|_| corrupt("bad stratum ordinal"))?;
                let st = out
                    .get_mut(i)
                    .ok_or_else(|| corrupt(format!("stratum ordinal {i} out of range")))?;
                st.rows.push(SampledRow { row_id, values });
            }
            for st in &out {
                if st.rows.len() as u64 != st.s.min(st.n) {
                    return Err(corrupt(format!(
                        "stratum `{}` declares {} rows, file has {}",
                        st.key,
                        st.s,
                        st.rows.len()
                    )));
                }
            }
            Ok(Sample::Stratified(StratifiedSample {
                schema,
                method,
                seed,
                group_attrs,
                strata: out,
            }))
        }
        Header::Poisson {
            schema,
            seed,
            population,
            rows,
        } => {
            if records.len() as u64 != rows {
                return Err(corrupt(format!(
                    "header declares {rows} rows, file has {}",
                    records.len()
                )));
            }
            let rows = records
                .into_iter()
                .map(|(tag, row_id, values)| {
                    let p: f64 = tag.parse().map_err(|_| corrupt("bad probability"))?;
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(corrupt(format!("probability {p} out of range")));
                    }
                    Ok(PoissonRow { row_id, p, values })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Sample::Poisson(PoissonSample {
                schema,
                seed,
                population,
                rows,
            }))
        }
    }
}
