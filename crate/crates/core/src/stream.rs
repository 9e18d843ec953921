//! Bounded-memory stratified sampling over an append-only stream.
//!
//! Every arriving row draws a uniform key. A stratum keeps the rows with the
//! smallest keys seen so far; `d` is the smallest key it ever discarded and
//! new rows are admitted only when their key is at most `d`, so the retained
//! set is always a uniform sample of the stratum.
//!
//! After each mini-batch the total is brought back to the budget `M` by
//! evicting from strata whose current size exceeds their target
//! `M_i = M f(i) / Σ f`, where `f(i)² = Σ_ℓ w γ_{i,ℓ}²` comes from the online
//! statistics. Strata under their target are set aside with their current
//! sizes and the rest is re-solved on the remaining budget.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{alpha_masg, solve_plan, AllocError, WeightSpec, ZeroMeanPolicy, ALPHA_FLOOR};
use crate::dataset::{check_row, key_of_row, DatasetError, GroupKey, Relation, Row, Schema};
use crate::sampler::{draw_stratified, SampleError, SampledRow, SampledStratum, StratifiedSample};
use crate::stats::{compute_catalog, RunningMoments, StatsError};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("row {row} does not match the stream schema: {source}")]
    SchemaMismatch {
        row: u64,
        #[source]
        source: DatasetError,
    },
    #[error("key {0} is outside [0, 1)")]
    KeyOutOfRange(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

type SortKey = (OrderedFloat<f64>, u64);

/// One stratum's retained rows, ordered by key.
#[derive(Debug, Clone)]
pub struct KeyedStratumSample {
    pub key: GroupKey,
    retained: BTreeMap<SortKey, Row>,
    /// Smallest key ever discarded; 1.0 until the first eviction.
    pub d: f64,
    pub moments: Vec<RunningMoments>,
    pub n_seen: u64,
}

impl KeyedStratumSample {
    fn new(key: GroupKey, columns: usize) -> Self {
        Self {
            key,
            retained: BTreeMap::new(),
            d: 1.0,
            moments: vec![RunningMoments::EMPTY; columns],
            n_seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// `(key, arrival sequence number)` of every retained row, ascending.
    pub fn keys(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.retained.keys().map(|(k, seq)| (k.0, *seq))
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &Row)> + '_ {
        self.retained.iter().map(|((_, seq), r)| (*seq, r))
    }

    /// Drops the `t` rows with the largest keys.
    fn evict(&mut self, t: usize) {
        for _ in 0..t {
            let Some(((k, _), _)) = self.retained.pop_last() else {
                break;
            };
            self.d = self.d.min(k.0);
        }
    }
}

/// Result of one settle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettleOutcome {
    pub evicted: Vec<u64>,
    pub f_before: f64,
    pub f_after: f64,
}

/// Per-batch log line of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch: u64,
    pub rows_seen: u64,
    pub total: u64,
    pub objective: f64,
    pub evicted: u64,
    pub strata: Vec<StratumMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub key: Vec<String>,
    pub n_seen: u64,
    pub s: u64,
    pub d: f64,
}

/// `F = Σ f_i² / s_i`; infinite when a stratum with `f > 0` has no rows.
pub fn objective(f: &[f64], sizes: &[u64]) -> f64 {
    f.iter()
        .zip(sizes)
        .map(|(&f, &s)| {
            if s > 0 {
                f * f / s as f64
            } else if f > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum()
}

/// New sizes after bringing `Σ current` down to `budget`.
///
/// Strata whose size does not exceed their share `budget · f_i / Σ f` keep
/// it and leave the problem along with their rows; the rest is solved again
/// on what remains. When every remaining stratum is over its share, rows are
/// removed one at a time where `f²/(s−1) − f²/s` is smallest, which is the
/// best integer allocation within that set. If that set cannot keep one row
/// per stratum, the same removal runs over all strata.
pub fn evict_plan(f: &[f64], current: &[u64], budget: u64) -> Vec<u64> {
    assert_eq!(f.len(), current.len());
    let mut sizes = current.to_vec();
    if current.iter().sum::<u64>() <= budget {
        return sizes;
    }
    let mut active: Vec<usize> = (0..f.len()).collect();
    let mut room = budget;
    loop {
        let fsum: f64 = active.iter().map(|&i| f[i]).sum();
        let share = |i: usize| room as f64 * f[i] / fsum;
        let (over, under): (Vec<usize>, Vec<usize>) =
            active.iter().partition(|&&i| current[i] as f64 > share(i));
        if under.is_empty() {
            break;
        }
        room -= under.iter().map(|&i| current[i]).sum::<u64>();
        active = over;
    }
    if room < active.len() as u64 && budget >= f.len() as u64 {
        // The oversized strata cannot keep a row each; remove across all
        // strata instead so that none is emptied.
        active = (0..f.len()).collect();
        room = budget;
    }
    let mut excess = active.iter().map(|&i| sizes[i]).sum::<u64>() - room;
    while excess > 0 {
        let cost = |i: usize| {
            let s = sizes[i] as f64;
            if sizes[i] <= 1 {
                f64::INFINITY
            } else {
                f[i] * f[i] / (s * (s - 1.0))
            }
        };
        let &pick = active
            .iter()
            .min_by(|&&a, &&b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)))
            .expect("active set is never empty");
        sizes[pick] -= 1;
        excess -= 1;
    }
    sizes
}

/// Stream state: strata in order of first arrival.
#[derive(Debug, Clone)]
pub struct StreamSampler {
    schema: Schema,
    group_attrs: Vec<String>,
    group_idx: Vec<usize>,
    agg_columns: Vec<String>,
    agg_idx: Vec<usize>,
    weights: WeightSpec,
    budget: u64,
    strata: IndexMap<GroupKey, KeyedStratumSample>,
    rng: ChaCha8Rng,
    seq: u64,
    batches: u64,
}

impl StreamSampler {
    pub fn new(
        schema: Schema,
        group_attrs: &[String],
        agg_columns: &[String],
        weights: WeightSpec,
        budget: u64,
        seed: u64,
    ) -> Result<Self, StreamError> {
        if budget == 0 {
            return Err(AllocError::InvalidBudget.into());
        }
        let group_idx = group_attrs
            .iter()
            .map(|a| schema.categorical_index(a))
            .collect::<Result<Vec<_>, _>>()?;
        let agg_idx = agg_columns
            .iter()
            .map(|c| schema.numeric_index(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            schema,
            group_attrs: group_attrs.to_vec(),
            group_idx,
            agg_columns: agg_columns.to_vec(),
            agg_idx,
            weights,
            budget,
            strata: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq: 0,
            batches: 0,
        })
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn strata(&self) -> impl Iterator<Item = &KeyedStratumSample> {
        self.strata.values()
    }

    pub fn stratum(&self, key: &GroupKey) -> Option<&KeyedStratumSample> {
        self.strata.get(key)
    }

    pub fn total(&self) -> u64 {
        self.strata.values().map(|s| s.len() as u64).sum()
    }

    pub fn rows_seen(&self) -> u64 {
        self.seq
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.strata.values().map(|s| s.len() as u64).collect()
    }

    /// `f(i) = √(Σ_ℓ w γ²)` from the online statistics, floored so every
    /// stratum keeps a positive share.
    pub fn f_values(&self) -> Vec<f64> {
        self.strata
            .values()
            .map(|s| {
                let a: f64 = s
                    .moments
                    .iter()
                    .zip(&self.agg_columns)
                    .filter_map(|(m, c)| m.cv().map(|g| self.weights.get(0, &s.key, c) * g * g))
                    .sum();
                a.max(ALPHA_FLOOR).sqrt()
            })
            .collect()
    }

    pub fn objective(&self) -> f64 {
        objective(&self.f_values(), &self.sizes())
    }

    /// Draws keys for `batch`, admits rows and settles the budget.
    pub fn ingest_batch(&mut self, batch: Vec<Row>) -> Result<BatchMetrics, StreamError> {
        let keyed = batch
            .into_iter()
            .map(|r| (self.rng.random::<f64>(), r))
            .collect();
        self.ingest_keyed(keyed)
    }

    /// [`ingest_batch`](Self::ingest_batch) with caller-supplied keys in `[0, 1)`.
    pub fn ingest_keyed(&mut self, batch: Vec<(f64, Row)>) -> Result<BatchMetrics, StreamError> {
        for (i, (key, row)) in batch.iter().enumerate() {
            if !(0.0..1.0).contains(key) {
                return Err(StreamError::KeyOutOfRange(*key));
            }
            check_row(&self.schema, row, i).map_err(|source| StreamError::SchemaMismatch {
                row: self.seq + i as u64,
                source,
            })?;
        }
        for (key, row) in batch {
            let gk = key_of_row(&row, &self.group_attrs, &self.group_idx);
            let cols = self.agg_idx.len();
            let st = self
                .strata
                .entry(gk.clone())
                .or_insert_with(|| KeyedStratumSample::new(gk, cols));
            for (m, &ci) in st.moments.iter_mut().zip(&self.agg_idx) {
                m.push(row[ci].as_f64().expect("checked numeric"));
            }
            st.n_seen += 1;
            if key <= st.d {
                st.retained.insert((OrderedFloat(key), self.seq), row);
            }
            self.seq += 1;
        }
        let outcome = self.settle_budget();
        self.batches += 1;
        Ok(self.metrics(outcome.evicted.iter().sum()))
    }

    /// Evicts down to the budget; a no-op when already within it.
    pub fn settle_budget(&mut self) -> SettleOutcome {
        let f = self.f_values();
        let current = self.sizes();
        let target = evict_plan(&f, &current, self.budget);
        let evicted: Vec<u64> = current.iter().zip(&target).map(|(c, t)| c - t).collect();
        for (st, &t) in self.strata.values_mut().zip(&evicted) {
            st.evict(t as usize);
        }
        SettleOutcome {
            evicted,
            f_before: objective(&f, &current),
            f_after: objective(&f, &target),
        }
    }

    fn metrics(&self, evicted: u64) -> BatchMetrics {
        BatchMetrics {
            batch: self.batches,
            rows_seen: self.seq,
            total: self.total(),
            objective: self.objective(),
            evicted,
            strata: self
                .strata
                .values()
                .map(|s| StratumMetrics {
                    key: s.key.values.clone(),
                    n_seen: s.n_seen,
                    s: s.len() as u64,
                    d: s.d,
                })
                .collect(),
        }
    }

    /// Current contents as a stratified sample; row ids are arrival numbers.
    pub fn snapshot(&self, seed: u64) -> StratifiedSample {
        StratifiedSample {
            schema: self.schema.clone(),
            method: crate::alloc::Method::L2,
            seed,
            group_attrs: self.group_attrs.clone(),
            strata: self
                .strata
                .values()
                .map(|s| {
                    let mut rows: Vec<SampledRow> = s
                        .rows()
                        .map(|(seq, r)| SampledRow {
                            row_id: seq as usize,
                            values: r.clone(),
                        })
                        .collect();
                    rows.sort_by_key(|r| r.row_id);
                    SampledStratum {
                        key: s.key.clone(),
                        n: s.n_seen,
                        s: rows.len() as u64,
                        rows,
                    }
                })
                .collect(),
        }
    }
}

/// Two passes over a materialised stream: statistics, allocation, then a
/// stratified draw.
pub fn two_pass_reference(
    stream: &Relation,
    group_attrs: &[String],
    agg_columns: &[String],
    weights: &WeightSpec,
    budget: u64,
    seed: u64,
) -> Result<StratifiedSample, StreamError> {
    let stats = compute_catalog(stream, group_attrs, agg_columns)?;
    let problem =
        alpha_masg(&stats, agg_columns, weights, ZeroMeanPolicy::Exclude)?.with_budget(budget);
    let plan = solve_plan(&problem)?;
    Ok(draw_stratified(stream, &plan, seed)?)
}
