//! Sample-size allocation.
//!
//! Every ℓ2 variant reduces to minimising `Σ α_i / s_i` subject to
//! `Σ s_i = M`, whose optimum is `s_i = M √α_i / Σ √α_j`. The variants only
//! differ in how the coefficients `α_i` are built from per-stratum statistics
//! and weights:
//!
//! * one aggregate, one grouping: `α_i = w_i σ_i² / μ_i²`
//! * several aggregates, one grouping: `α_i = Σ_ℓ w_{i,ℓ} σ_{i,ℓ}² / μ_{i,ℓ}²`
//! * several groupings over the finest stratification `C = ∪ A_q`:
//!   `β_c = n_c² Σ_q n_{Π(c,A_q)}⁻² Σ_ℓ w σ_{c,ℓ}² / μ_{Π(c,A_q),ℓ}²`
//!
//! The ℓ∞ allocation equalises the predicted CVs instead; see [`alloc_linf`].

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GroupKey, Relation};
use crate::stats::{StatsCatalog, StatsError};

/// Coefficient given to strata whose values are constant (σ = 0), or whose
/// zero mean was excluded from optimisation. It is small enough that the
/// stratum's fractional share is below one row, so rounding pins it at one.
pub const ALPHA_FLOOR: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("allocation problem has no strata")]
    EmptyProblem,
    #[error("coefficient {value} of stratum {index} is not positive")]
    NonPositiveAlpha { index: usize, value: f64 },
    #[error("budget must be at least 1")]
    InvalidBudget,
    #[error("stratum `{key}` has zero mean in column `{column}`")]
    ZeroMeanStratum { key: GroupKey, column: String },
    #[error("group `{key}` of query {query} has zero mean in column `{column}`")]
    ZeroMeanCoarseGroup {
        query: usize,
        key: GroupKey,
        column: String,
    },
    #[error("every stratum has zero standard deviation")]
    AllStrataConstant,
    #[error("sample size {s} is invalid for a stratum of {n} rows")]
    InvalidSampleSize { n: f64, s: f64 },
    #[error("inclusion rate {0} is outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("weight {0} is not positive")]
    NonPositiveWeight(f64),
    #[error("mismatched input lengths: {0}")]
    LengthMismatch(String),
    #[error("query grouping {0:?} is not contained in the stratification")]
    GroupingNotContained(Vec<String>),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// What to do with strata whose aggregation column has mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroMeanPolicy {
    #[default]
    Error,
    /// Drop the stratum from optimisation; it keeps a single row.
    Exclude,
}

/// Method tag written into serialized plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    L2,
    Linf,
    Individual,
    Uniform,
    Senate,
    Congress,
}

/// Minimise `Σ alpha_i / s_i` subject to `Σ s_i = budget` and `s_i ≤ caps_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub strata: Vec<GroupKey>,
    pub alpha: Vec<f64>,
    pub caps: Vec<u64>,
    pub budget: u64,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<(), AllocError> {
        if self.strata.is_empty() {
            return Err(AllocError::EmptyProblem);
        }
        if self.alpha.len() != self.strata.len() || self.caps.len() != self.strata.len() {
            return Err(AllocError::LengthMismatch(format!(
                "{} strata, {} coefficients, {} caps",
                self.strata.len(),
                self.alpha.len(),
                self.caps.len()
            )));
        }
        if self.budget == 0 {
            return Err(AllocError::InvalidBudget);
        }
        if let Some((index, &value)) = self
            .alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(AllocError::NonPositiveAlpha { index, value });
        }
        Ok(())
    }
}

/// Closed-form minimiser of `Σ α_i / s_i` with `Σ s_i = budget`.
pub(crate) fn sqrt_proportional(alpha: &[f64], budget: f64) -> Vec<f64> {
    let roots: Vec<f64> = alpha.iter().map(|a| a.sqrt()).collect();
    let total: f64 = roots.iter().sum();
    roots.iter().map(|r| budget * r / total).collect()
}

/// Uncapped real-valued optimum `s_i = M √α_i / Σ √α_j`.
pub fn solve_fractional(p: &AllocationProblem) -> Result<Vec<f64>, AllocError> {
    p.validate()?;
    Ok(sqrt_proportional(&p.alpha, p.budget as f64))
}

/// `Σ α_i / s_i`, infinite if a stratum with positive α gets nothing.
pub fn l2_objective<S: Copy + Into<f64>>(alpha: &[f64], sizes: &[S]) -> f64 {
    alpha
        .iter()
        .zip(sizes)
        .map(|(&a, &s)| {
            let s: f64 = s.into();
            if s > 0.0 {
                a / s
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Integer sizes produced by [`round_allocation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rounding {
    pub sizes: Vec<u64>,
    /// Indices of strata with a positive cap that received no rows.
    pub missing: Vec<usize>,
}

/// Largest-remainder rounding of `fractional` to integers summing to
/// `min(budget, Σ caps)`, never exceeding `caps`. When the budget covers
/// every stratum each one gets at least a row.
pub fn round_allocation(fractional: &[f64], caps: &[u64], budget: u64) -> Rounding {
    round_allocation_with(fractional, caps, budget, true)
}

/// [`round_allocation`] with the one-row minimum optional.
pub fn round_allocation_with(
    fractional: &[f64],
    caps: &[u64],
    budget: u64,
    min_one: bool,
) -> Rounding {
    let r = fractional.len();
    assert_eq!(r, caps.len(), "fractional and caps lengths differ");
    let target = budget.min(caps.iter().sum());
    let eligible = caps.iter().filter(|&&c| c > 0).count() as u64;

    if min_one && target < eligible {
        // Not enough rows for everyone: the largest shares get one each.
        let mut order: Vec<usize> = (0..r).filter(|&i| caps[i] > 0).collect();
        order.sort_by(|&a, &b| fractional[b].total_cmp(&fractional[a]).then(a.cmp(&b)));
        let mut sizes = vec![0; r];
        for &i in order.iter().take(target as usize) {
            sizes[i] = 1;
        }
        return finish_rounding(sizes, caps);
    }

    let lower: Vec<u64> = caps.iter().map(|&c| u64::from(min_one && c > 0)).collect();
    let weights: Vec<f64> = fractional.iter().map(|f| f.max(0.0)).collect();

    // Fit real shares into [lower, cap] by freezing violators and rescaling.
    let mut frozen: Vec<Option<u64>> = vec![None; r];
    let mut shares = vec![0.0; r];
    loop {
        let free: Vec<usize> = (0..r).filter(|&i| frozen[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let fixed: u64 = frozen.iter().flatten().sum();
        let room = target.saturating_sub(fixed) as f64;
        let wsum: f64 = free.iter().map(|&i| weights[i]).sum();
        for &i in &free {
            shares[i] = if wsum > 0.0 {
                weights[i] * room / wsum
            } else {
                room / free.len() as f64
            };
        }
        let over: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&i| shares[i] > caps[i] as f64)
            .collect();
        if !over.is_empty() {
            for i in over {
                frozen[i] = Some(caps[i]);
            }
            continue;
        }
        let under: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&i| shares[i] < lower[i] as f64)
            .collect();
        if !under.is_empty() {
            for i in under {
                frozen[i] = Some(lower[i]);
            }
            continue;
        }
        break;
    }

    let mut sizes = vec![0u64; r];
    let mut rem = vec![f64::NEG_INFINITY; r];
    for i in 0..r {
        match frozen[i] {
            Some(v) => sizes[i] = v,
            None => {
                let fl = shares[i].floor();
                sizes[i] = (fl as u64).clamp(lower[i], caps[i]);
                rem[i] = shares[i] - fl;
            }
        }
    }
    settle_total(&mut sizes, &rem, caps, &lower, target);
    finish_rounding(sizes, caps)
}

/// Moves `sizes` to sum exactly to `target`: adds to the largest remainders
/// first, removes from the smallest, ties broken by index.
fn settle_total(sizes: &mut [u64], rem: &[f64], caps: &[u64], lower: &[u64], target: u64) {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    loop {
        let total: u64 = sizes.iter().sum();
        if total == target {
            return;
        }
        let mut moved = false;
        if total < target {
            let mut need = target - total;
            for &i in &order {
                if need == 0 {
                    break;
                }
                if sizes[i] < caps[i] {
                    sizes[i] += 1;
                    need -= 1;
                    moved = true;
                }
            }
        } else {
            let mut excess = total - target;
            for &i in order.iter().rev() {
                if excess == 0 {
                    break;
                }
                if sizes[i] > lower[i] {
                    sizes[i] -= 1;
                    excess -= 1;
                    moved = true;
                }
            }
        }
        if !moved {
            return;
        }
    }
}

fn finish_rounding(sizes: Vec<u64>, caps: &[u64]) -> Rounding {
    let missing = sizes
        .iter()
        .zip(caps)
        .enumerate()
        .filter(|(_, (&s, &c))| s == 0 && c > 0)
        .map(|(i, _)| i)
        .collect();
    Rounding { sizes, missing }
}

/// One stratum of an [`AllocationPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStratum {
    pub key: Vec<String>,
    pub n: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub fractional: f64,
    pub integral: u64,
    #[serde(default)]
    pub capped: bool,
}

/// Per-stratum sample sizes with their real-valued optimum and objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub method: Method,
    pub group_attrs: Vec<String>,
    pub budget: u64,
    pub strata: Vec<PlanStratum>,
    /// `Σ α_i / s_i*` over the real-valued sizes.
    pub objective_fractional: Option<f64>,
    /// `Σ α_i / s_i` over the integer sizes.
    pub objective_integral: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linf_q: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_predicted_cv: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AllocationPlan {
    pub fn key(&self, i: usize) -> GroupKey {
        GroupKey::new(self.group_attrs.clone(), self.strata[i].key.clone())
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.strata.iter().map(|s| s.integral).collect()
    }

    pub fn fractional(&self) -> Vec<f64> {
        self.strata.iter().map(|s| s.fractional).collect()
    }

    pub fn total(&self) -> u64 {
        self.strata.iter().map(|s| s.integral).sum()
    }

    pub fn size_of(&self, key: &GroupKey) -> Option<u64> {
        self.strata
            .iter()
            .find(|s| s.key == key.values)
            .map(|s| s.integral)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        crate::json::to_string(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Capped optimum: strata whose share exceeds their population are fully
/// included and the rest is re-solved on the remaining budget until no
/// stratum is over its cap. Returns the sizes and the frozen set.
pub(crate) fn capped_fractional(alpha: &[f64], caps: &[u64], budget: u64) -> (Vec<f64>, Vec<bool>) {
    let r = alpha.len();
    let mut sizes = vec![0.0; r];
    let mut frozen = vec![false; r];
    let total_cap: u64 = caps.iter().sum();
    if budget >= total_cap {
        for i in 0..r {
            sizes[i] = caps[i] as f64;
            frozen[i] = true;
        }
        return (sizes, frozen);
    }
    let mut remaining = budget as f64;
    loop {
        let active: Vec<usize> = (0..r).filter(|&i| !frozen[i]).collect();
        if active.is_empty() {
            break;
        }
        let a: Vec<f64> = active.iter().map(|&i| alpha[i]).collect();
        let s = sqrt_proportional(&a, remaining);
        let mut any = false;
        for (&i, &si) in active.iter().zip(&s) {
            sizes[i] = si;
            if si > caps[i] as f64 {
                frozen[i] = true;
                sizes[i] = caps[i] as f64;
                remaining -= caps[i] as f64;
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    (sizes, frozen)
}

/// Repairs an uncapped solution for strata smaller than their share, then
/// rounds. `fractional` is the uncapped optimum of `problem`; it is only
/// used to short-cut when nothing exceeds its cap.
pub fn repair_bounded(
    problem: &AllocationProblem,
    fractional: &[f64],
) -> Result<AllocationPlan, AllocError> {
    problem.validate()?;
    if fractional.len() != problem.strata.len() {
        return Err(AllocError::LengthMismatch("fractional vs strata".into()));
    }
    let fits = fractional
        .iter()
        .zip(&problem.caps)
        .all(|(&s, &c)| s <= c as f64);
    let (sizes, frozen) = if fits {
        (fractional.to_vec(), vec![false; fractional.len()])
    } else {
        capped_fractional(&problem.alpha, &problem.caps, problem.budget)
    };
    Ok(assemble_plan(Method::L2, problem, sizes, frozen))
}

/// Capped ℓ2 optimum of `problem`, rounded to integers.
pub fn solve_plan(problem: &AllocationProblem) -> Result<AllocationPlan, AllocError> {
    let fractional = solve_fractional(problem)?;
    repair_bounded(problem, &fractional)
}

fn assemble_plan(
    method: Method,
    problem: &AllocationProblem,
    fractional: Vec<f64>,
    capped: Vec<bool>,
) -> AllocationPlan {
    let rounding = round_allocation(&fractional, &problem.caps, problem.budget);
    let group_attrs = problem
        .strata
        .first()
        .map(|k| k.attrs.clone())
        .unwrap_or_default();
    let mut warnings = Vec::new();
    if !rounding.missing.is_empty() {
        warnings.push(format!(
            "MissingGroups: budget {} leaves {} strata without rows",
            problem.budget,
            rounding.missing.len()
        ));
    }
    let strata = (0..problem.strata.len())
        .map(|i| PlanStratum {
            key: problem.strata[i].values.clone(),
            n: problem.caps[i],
            alpha: Some(problem.alpha[i]),
            fractional: fractional[i],
            integral: rounding.sizes[i],
            capped: capped[i],
        })
        .collect();
    AllocationPlan {
        method,
        group_attrs,
        budget: problem.budget,
        strata,
        objective_fractional: finite(l2_objective(&problem.alpha, &fractional)),
        objective_integral: finite(l2_objective(&problem.alpha, &rounding.sizes_f64())),
        linf_q: None,
        max_predicted_cv: None,
        warnings,
    }
}

impl Rounding {
    fn sizes_f64(&self) -> Vec<f64> {
        self.sizes.iter().map(|&s| s as f64).collect()
    }
}

/// Per-result weights keyed by (query index, group key, aggregation column).
/// Absent entries weigh 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSpec {
    entries: HashMap<(usize, GroupKey, String), f64>,
}

/// Serialized form of one weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    #[serde(default)]
    pub query: usize,
    pub group: GroupKey,
    pub column: String,
    pub weight: f64,
}

impl WeightSpec {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn set(
        &mut self,
        query: usize,
        group: GroupKey,
        column: impl Into<String>,
        weight: f64,
    ) -> Result<(), AllocError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(AllocError::NonPositiveWeight(weight));
        }
        self.entries.insert((query, group, column.into()), weight);
        Ok(())
    }

    pub fn get(&self, query: usize, group: &GroupKey, column: &str) -> f64 {
        // Avoid cloning on the hot path for the common all-default case.
        if self.entries.is_empty() {
            return 1.0;
        }
        self.entries
            .get(&(query, group.clone(), column.to_string()))
            .copied()
            .unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multiplies every explicit weight by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, w)| (k.clone(), w * c))
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<WeightEntry>) -> Result<Self, AllocError> {
        let mut w = Self::default();
        for e in entries {
            w.set(e.query, e.group, e.column, e.weight)?;
        }
        Ok(w)
    }

    pub fn entries(&self) -> Vec<WeightEntry> {
        let mut out: Vec<WeightEntry> = self
            .entries
            .iter()
            .map(|((query, group, column), &weight)| WeightEntry {
                query: *query,
                group: group.clone(),
                column: column.clone(),
                weight,
            })
            .collect();
        out.sort_by(|a, b| (a.query, &a.group, &a.column).cmp(&(b.query, &b.group, &b.column)));
        out
    }
}

fn squared_cv(catalog: &StatsCatalog, stratum: usize, col: usize) -> Option<f64> {
    let s = &catalog.entries[stratum];
    let m = &s.columns[col];
    (m.mean != 0.0).then(|| m.variance() / (m.mean * m.mean))
}

/// `α_i = w_i γ_i²` for one aggregation column.
pub fn alpha_sasg(
    stats: &StatsCatalog,
    col: &str,
    w: &WeightSpec,
    policy: ZeroMeanPolicy,
) -> Result<AllocationProblem, AllocError> {
    alpha_masg(stats, &[col.to_string()], w, policy)
}

/// `α_i = Σ_j w_{i,j} γ_{i,j}²` over several aggregation columns.
pub fn alpha_masg(
    stats: &StatsCatalog,
    cols: &[String],
    w: &WeightSpec,
    policy: ZeroMeanPolicy,
) -> Result<AllocationProblem, AllocError> {
    if stats.is_empty() {
        return Err(AllocError::EmptyProblem);
    }
    let col_idx = cols
        .iter()
        .map(|c| stats.column_index(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut alpha = Vec::with_capacity(stats.len());
    for (i, s) in stats.strata().enumerate() {
        let mut a = 0.0;
        let mut excluded = false;
        for (&ci, name) in col_idx.iter().zip(cols) {
            match squared_cv(stats, i, ci) {
                Some(g2) => a += w.get(0, &s.key, name) * g2,
                None => match policy {
                    ZeroMeanPolicy::Error => {
                        return Err(AllocError::ZeroMeanStratum {
                            key: s.key.clone(),
                            column: name.clone(),
                        })
                    }
                    ZeroMeanPolicy::Exclude => excluded = true,
                },
            }
        }
        alpha.push(if excluded || a <= 0.0 { ALPHA_FLOOR } else { a });
    }
    Ok(AllocationProblem {
        strata: stats.entries.keys().cloned().collect(),
        alpha,
        caps: stats.strata().map(|s| s.n).collect(),
        budget: 1,
    })
}

impl AllocationProblem {
    /// The coefficient builders leave the budget at 1; set the real one here.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }
}

/// One group-by query of a multi-grouping workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupQuery {
    pub attrs: Vec<String>,
    pub columns: Vec<String>,
}

/// Every subset of `attrs` (largest first, down to the empty grouping), each
/// aggregating `columns`.
pub fn cube_queries(attrs: &[String], columns: &[String]) -> Vec<GroupQuery> {
    let k = attrs.len();
    assert!(k < 32, "cube over too many attributes");
    let mut masks: Vec<u32> = (0..(1u32 << k)).collect();
    masks.sort_by(|a, b| b.count_ones().cmp(&a.count_ones()).then(b.cmp(a)));
    masks
        .into_iter()
        .map(|m| GroupQuery {
            attrs: (0..k)
                .filter(|i| m & (1 << (k - 1 - i)) != 0)
                .map(|i| attrs[i].clone())
                .collect(),
            columns: columns.to_vec(),
        })
        .collect()
}

/// Statistics over `C = ∪ A_q` plus, for every query, the projection of each
/// finest stratum onto its coarse group and the pooled coarse statistics.
#[derive(Debug, Clone)]
pub struct FinestStratification {
    pub union_attrs: Vec<String>,
    pub finest: StatsCatalog,
    /// `projections[q][c]` is the index of `Π(c, A_q)` in `coarse[q]`.
    pub projections: Vec<Vec<usize>>,
    pub coarse: Vec<StatsCatalog>,
}

impl FinestStratification {
    /// `finest` must be grouped by a superset of every query's attributes.
    pub fn new(finest: StatsCatalog, query_attrs: &[Vec<String>]) -> Result<Self, AllocError> {
        let mut projections = Vec::with_capacity(query_attrs.len());
        let mut coarse = Vec::with_capacity(query_attrs.len());
        for attrs in query_attrs {
            if !attrs.iter().all(|a| finest.group_attrs.contains(a)) {
                return Err(AllocError::GroupingNotContained(attrs.clone()));
            }
            let rolled = finest.rollup(attrs)?;
            let proj = finest
                .strata()
                .map(|s| {
                    let k = s.key.project(attrs).expect("attrs checked above");
                    rolled.entries.get_index_of(&k).expect("rollup covers key")
                })
                .collect();
            projections.push(proj);
            coarse.push(rolled);
        }
        Ok(Self {
            union_attrs: finest.group_attrs.clone(),
            finest,
            projections,
            coarse,
        })
    }

    /// Builds the finest stratification of `rel` for `queries`.
    pub fn build(rel: &Relation, queries: &[GroupQuery]) -> Result<Self, AllocError> {
        let attrs = crate::dataset::union_attrs(queries.iter().map(|q| q.attrs.as_slice()));
        let cols = crate::dataset::union_attrs(queries.iter().map(|q| q.columns.as_slice()));
        let finest = crate::stats::compute_catalog(rel, &attrs, &cols)?;
        let query_attrs: Vec<Vec<String>> = queries.iter().map(|q| q.attrs.clone()).collect();
        Self::new(finest, &query_attrs)
    }
}

/// `β_c` coefficients over the finest strata for several group-by queries,
/// each with its own set of aggregation columns.
pub fn beta_multi_groupby(
    fs: &FinestStratification,
    queries: &[GroupQuery],
    w: &WeightSpec,
) -> Result<AllocationProblem, AllocError> {
    if queries.len() != fs.coarse.len() {
        return Err(AllocError::LengthMismatch(format!(
            "{} queries, stratification built for {}",
            queries.len(),
            fs.coarse.len()
        )));
    }
    if fs.finest.is_empty() {
        return Err(AllocError::EmptyProblem);
    }
    let mut beta = vec![0.0; fs.finest.len()];
    for (q, query) in queries.iter().enumerate() {
        let coarse = &fs.coarse[q];
        let cols = query
            .columns
            .iter()
            .map(|c| Ok((fs.finest.column_index(c)?, coarse.column_index(c)?)))
            .collect::<Result<Vec<_>, AllocError>>()?;
        for (c, s) in fs.finest.strata().enumerate() {
            let a = &coarse.entries[fs.projections[q][c]];
            let na = a.n as f64;
            let mut inner = 0.0;
            for ((fi, ci), name) in cols.iter().zip(&query.columns) {
                let mu_a = a.columns[*ci].mean;
                if mu_a == 0.0 {
                    return Err(AllocError::ZeroMeanCoarseGroup {
                        query: q,
                        key: a.key.clone(),
                        column: name.clone(),
                    });
                }
                let var_c = s.columns[*fi].variance();
                inner += w.get(q, &a.key, name) * var_c / (mu_a * mu_a);
            }
            let nc = s.n as f64;
            beta[c] += nc * nc * inner / (na * na);
        }
    }
    let alpha = beta
        .into_iter()
        .map(|b| if b > 0.0 { b } else { ALPHA_FLOOR })
        .collect();
    Ok(AllocationProblem {
        strata: fs.finest.entries.keys().cloned().collect(),
        alpha,
        caps: fs.finest.strata().map(|s| s.n).collect(),
        budget: 1,
    })
}

/// Standard deviation of the sample mean relative to the true mean, for a
/// uniform sample of `s` out of `n` rows: `(σ/μ) √((n−s)/(n s))`.
pub fn predicted_cv(n: f64, s: f64, mu: f64, sigma: f64) -> Result<f64, AllocError> {
    if !(s > 0.0 && s <= n) {
        return Err(AllocError::InvalidSampleSize { n, s });
    }
    if mu == 0.0 {
        return Err(AllocError::InvalidSampleSize { n, s });
    }
    Ok((sigma / mu).abs() * ((n - s) / (n * s)).max(0.0).sqrt())
}

/// ℓ2 and ℓ∞ norms of a CV vector.
pub fn cv_norms(cvs: &[f64]) -> (f64, f64) {
    let l2 = cvs.iter().map(|c| c * c).sum::<f64>().sqrt();
    let linf = cvs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    (l2, linf)
}

/// Per-stratum inputs of the ℓ∞ search.
#[derive(Debug, Clone)]
pub struct LinfInputs {
    /// `d_i = (σ_i/μ_i)² / n_i`
    pub d: Vec<f64>,
    pub n: Vec<f64>,
    d_total: f64,
}

impl LinfInputs {
    pub fn new(d: Vec<f64>, n: Vec<f64>) -> Self {
        let d_total = d.iter().sum();
        Self { d, n, d_total }
    }

    /// `x_i(q) = (q d_i/D) / (1 + q d_i/D) · n_i`
    pub fn sizes_at(&self, q: f64) -> Vec<f64> {
        self.d
            .iter()
            .zip(&self.n)
            .map(|(&d, &n)| {
                let t = q * d / self.d_total;
                t / (1.0 + t) * n
            })
            .collect()
    }

    pub fn total_at(&self, q: f64) -> f64 {
        self.sizes_at(q).iter().sum()
    }

    /// Largest integer `q ∈ [0, q_max]` with `Σ x_i(q) ≤ budget`.
    pub fn search_q(&self, budget: f64, q_max: u64) -> u64 {
        let (mut lo, mut hi) = (0u64, q_max);
        if self.total_at(hi as f64) <= budget {
            return hi;
        }
        // invariant: total(lo) ≤ budget < total(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.total_at(mid as f64) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Real `q*` with `Σ x_i(q*) = budget`, by bisection; `None` when the
    /// budget reaches the population.
    pub fn continuous_q(&self, budget: f64) -> Option<f64> {
        let pop: f64 = self.n.iter().sum();
        if budget >= pop {
            return None;
        }
        let mut hi = 1.0;
        while self.total_at(hi) < budget {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.total_at(mid) < budget {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

struct LinfSetup {
    active: Vec<usize>,
    inputs: LinfInputs,
    reserved: u64,
    budget_active: u64,
    warnings: Vec<String>,
}

/// Squared predicted CV of a stratum with `γ² = (σ/μ)²`, population `n`
/// and `s` sampled rows.
fn cv2(gamma2: f64, n: u64, s: u64) -> f64 {
    if s == 0 {
        f64::INFINITY
    } else {
        gamma2 * (1.0 / s as f64 - 1.0 / n as f64)
    }
}

/// Moves single rows into the stratum with the largest predicted CV while
/// the donor's CV after the move stays below it. The rounded ceiling
/// allocation can leave the largest CV above the integer optimum when `q`
/// is small; at the fixed point no integer allocation with the same bounds
/// has a smaller maximum.
fn polish_minimax(sizes: &mut [u64], gamma2: &[f64], caps: &[u64], lower: &[u64]) {
    let r = sizes.len();
    loop {
        let Some(i) = (0..r).filter(|&i| sizes[i] < caps[i]).max_by(|&a, &b| {
            cv2(gamma2[a], caps[a], sizes[a]).total_cmp(&cv2(gamma2[b], caps[b], sizes[b]))
        }) else {
            return;
        };
        let top = (0..r)
            .map(|k| cv2(gamma2[k], caps[k], sizes[k]))
            .fold(0.0, f64::max);
        if cv2(gamma2[i], caps[i], sizes[i]) < top {
            // The maximum sits on a stratum that is already complete.
            return;
        }
        let donor = (0..r)
            .filter(|&j| j != i && sizes[j] > lower[j])
            .map(|j| (j, cv2(gamma2[j], caps[j], sizes[j] - 1)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match donor {
            Some((j, after)) if after < top => {
                sizes[j] -= 1;
                sizes[i] += 1;
            }
            _ => return,
        }
    }
}

fn linf_setup(
    stats: &StatsCatalog,
    ci: usize,
    col: &str,
    budget: u64,
    policy: ZeroMeanPolicy,
) -> Result<LinfSetup, AllocError> {
    let mut active = Vec::new();
    let mut d = Vec::new();
    let mut n = Vec::new();
    for (i, s) in stats.strata().enumerate() {
        let m = &s.columns[ci];
        if m.mean == 0.0 {
            if policy == ZeroMeanPolicy::Error {
                return Err(AllocError::ZeroMeanStratum {
                    key: s.key.clone(),
                    column: col.to_string(),
                });
            }
            continue;
        }
        if m.variance() == 0.0 {
            continue;
        }
        active.push(i);
        d.push(m.variance() / (m.mean * m.mean) / s.n as f64);
        n.push(s.n as f64);
    }
    if active.is_empty() {
        return Err(AllocError::AllStrataConstant);
    }
    let passive = (stats.len() - active.len()) as u64;
    let mut warnings = Vec::new();
    let reserved = if budget >= stats.len() as u64 {
        passive
    } else {
        if passive > 0 {
            warnings.push(format!(
                "MissingGroups: budget {budget} below {} strata; constant strata get no rows",
                stats.len()
            ));
        }
        0
    };
    Ok(LinfSetup {
        active,
        inputs: LinfInputs::new(d, n),
        reserved,
        budget_active: budget - reserved,
        warnings,
    })
}

/// Real-valued ℓ∞ optimum for the strata with positive σ; the returned
/// vector is aligned with the catalog (constant strata get 0).
pub fn linf_fractional(
    stats: &StatsCatalog,
    col: &str,
    budget: u64,
    policy: ZeroMeanPolicy,
) -> Result<(Option<f64>, Vec<f64>), AllocError> {
    let ci = stats.column_index(col)?;
    let setup = linf_setup(stats, ci, col, budget, policy)?;
    let q = setup.inputs.continuous_q(setup.budget_active as f64);
    let x = match q {
        Some(q) => setup.inputs.sizes_at(q),
        None => setup.inputs.n.clone(),
    };
    let mut out = vec![0.0; stats.len()];
    for (&i, xi) in setup.active.iter().zip(x) {
        out[i] = xi;
    }
    Ok((q, out))
}

/// Minimises the largest predicted CV.
///
/// Binary-searches the largest integer `q ∈ [0, N]` with `Σ x_i(q) ≤ M`,
/// sets `s_i = ⌈x_i / Σ x_j · M⌉`, then trims the ceiling overshoot from the
/// strata with the smallest fractional remainders. Strata with σ = 0 are
/// left out of the search and keep one row each.
pub fn alloc_linf(
    stats: &StatsCatalog,
    col: &str,
    budget: u64,
    policy: ZeroMeanPolicy,
) -> Result<AllocationPlan, AllocError> {
    if stats.is_empty() {
        return Err(AllocError::EmptyProblem);
    }
    if budget == 0 {
        return Err(AllocError::InvalidBudget);
    }
    let ci = stats.column_index(col)?;
    let setup = linf_setup(stats, ci, col, budget, policy)?;
    let inputs = &setup.inputs;
    let m_active = setup.budget_active as f64;

    let mut q = inputs.search_q(m_active, stats.total_n);
    if q == 0 {
        q = 1;
    }
    let x = inputs.sizes_at(q as f64);
    let sx: f64 = x.iter().sum();
    let targets: Vec<f64> = x.iter().map(|xi| xi / sx * m_active).collect();
    let caps: Vec<u64> = inputs.n.iter().map(|&n| n as u64).collect();
    let mut sizes: Vec<u64> = targets
        .iter()
        .zip(&caps)
        .map(|(t, &c)| (t.ceil() as u64).min(c))
        .collect();
    let rem: Vec<f64> = targets.iter().map(|t| t - t.floor()).collect();
    let floor_one = setup.budget_active >= setup.active.len() as u64;
    let lower: Vec<u64> = caps.iter().map(|_| u64::from(floor_one)).collect();
    let target_total = setup.budget_active.min(caps.iter().sum());
    settle_total(&mut sizes, &rem, &caps, &lower, target_total);
    let gamma2: Vec<f64> = inputs.d.iter().zip(&inputs.n).map(|(d, n)| d * n).collect();
    polish_minimax(&mut sizes, &gamma2, &caps, &lower);

    let mut fractional = vec![0.0; stats.len()];
    let mut integral = vec![0u64; stats.len()];
    let reserve_one = setup.reserved > 0;
    if reserve_one {
        fractional.fill(1.0);
        integral.fill(1);
    }
    for (k, &i) in setup.active.iter().enumerate() {
        fractional[i] = targets[k];
        integral[i] = sizes[k];
    }

    let alpha: Vec<f64> = stats
        .strata()
        .map(|s| {
            let m = &s.columns[ci];
            if m.mean == 0.0 || m.variance() == 0.0 {
                ALPHA_FLOOR
            } else {
                m.variance() / (m.mean * m.mean)
            }
        })
        .collect();
    let mut max_cv: f64 = 0.0;
    for (i, s) in stats.strata().enumerate() {
        let m = &s.columns[ci];
        if m.mean != 0.0 && integral[i] > 0 {
            let cv = predicted_cv(s.n as f64, integral[i] as f64, m.mean, m.stddev())?;
            max_cv = max_cv.max(cv);
        } else if m.variance() > 0.0 {
            max_cv = f64::INFINITY;
        }
    }
    let mut warnings = setup.warnings;
    let missing = integral.iter().filter(|&&s| s == 0).count();
    if missing > 0 && warnings.is_empty() {
        warnings.push(format!("MissingGroups: {missing} strata without rows"));
    }
    let integral_f: Vec<f64> = integral.iter().map(|&s| s as f64).collect();
    Ok(AllocationPlan {
        method: Method::Linf,
        group_attrs: stats.group_attrs.clone(),
        budget,
        strata: stats
            .strata()
            .enumerate()
            .map(|(i, s)| PlanStratum {
                key: s.key.values.clone(),
                n: s.n,
                alpha: Some(alpha[i]),
                fractional: fractional[i],
                integral: integral[i],
                capped: integral[i] == s.n,
            })
            .collect(),
        objective_fractional: finite(l2_objective(&alpha, &fractional)),
        objective_integral: finite(l2_objective(&alpha, &integral_f)),
        linf_q: Some(q),
        max_predicted_cv: finite(max_cv),
        warnings,
    })
}

/// Per-query statistics for individual stratification.
#[derive(Debug, Clone, Copy)]
pub struct IndividualQuery<'a> {
    pub catalog: &'a StatsCatalog,
    pub columns: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualQueryPlan {
    pub group_attrs: Vec<String>,
    pub columns: Vec<String>,
    pub strata: Vec<PlanStratum>,
}

/// Sizes `s_{i,g}` for every group of every query under one shared budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualPlan {
    pub method: Method,
    pub budget: u64,
    pub queries: Vec<IndividualQueryPlan>,
    pub objective_fractional: Option<f64>,
    pub objective_integral: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl IndividualPlan {
    pub fn to_json(&self) -> serde_json::Result<String> {
        crate::json::to_string(self)
    }

    pub fn total(&self) -> u64 {
        self.queries
            .iter()
            .flat_map(|q| q.strata.iter())
            .map(|s| s.integral)
            .sum()
    }
}

/// Individual stratification: each query's groups are strata of their own,
/// `s_{i,g} ∝ √(Σ_ℓ w_{i,g,ℓ} γ_{i,g,ℓ}²)` under a single budget.
pub fn alloc_individual(
    queries: &[IndividualQuery<'_>],
    w: &WeightSpec,
    budget: u64,
    policy: ZeroMeanPolicy,
) -> Result<IndividualPlan, AllocError> {
    let mut keys = Vec::new();
    let mut alpha = Vec::new();
    let mut caps = Vec::new();
    let mut spans = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let start = keys.len();
        let col_idx = q
            .columns
            .iter()
            .map(|c| q.catalog.column_index(c))
            .collect::<Result<Vec<_>, _>>()?;
        for (g, s) in q.catalog.strata().enumerate() {
            let mut a = 0.0;
            let mut excluded = false;
            for (&ci, name) in col_idx.iter().zip(q.columns) {
                match squared_cv(q.catalog, g, ci) {
                    Some(g2) => a += w.get(qi, &s.key, name) * g2,
                    None if policy == ZeroMeanPolicy::Exclude => excluded = true,
                    None => {
                        return Err(AllocError::ZeroMeanStratum {
                            key: s.key.clone(),
                            column: name.clone(),
                        })
                    }
                }
            }
            keys.push(s.key.clone());
            alpha.push(if excluded || a <= 0.0 { ALPHA_FLOOR } else { a });
            caps.push(s.n);
        }
        spans.push(start..keys.len());
    }
    let problem = AllocationProblem {
        strata: keys,
        alpha,
        caps,
        budget,
    };
    let plan = solve_plan(&problem)?;
    let query_plans = queries
        .iter()
        .zip(spans)
        .map(|(q, span)| IndividualQueryPlan {
            group_attrs: q.catalog.group_attrs.clone(),
            columns: q.columns.to_vec(),
            strata: plan.strata[span].to_vec(),
        })
        .collect();
    Ok(IndividualPlan {
        method: Method::Individual,
        budget,
        queries: query_plans,
        objective_fractional: plan.objective_fractional,
        objective_integral: plan.objective_integral,
        warnings: plan.warnings,
    })
}

/// `1 − Π_i (1 − p_i)`: probability that at least one per-query draw picks the row.
pub fn combine_rates(rates: &[f64]) -> Result<f64, AllocError> {
    let mut keep = 1.0;
    for &p in rates {
        if !(0.0..=1.0).contains(&p) {
            return Err(AllocError::RateOutOfRange(p));
        }
        keep *= 1.0 - p;
    }
    Ok(1.0 - keep)
}

/// Row inclusion probabilities of the unified sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionProbabilities {
    pub p: Vec<f64>,
    pub expected_size: f64,
}

/// Computes `p_r` for every row from the per-query rates
/// `p_{r,i} = min(1, s_{i,g(r)} / n_{i,g(r)})`.
pub fn poisson_probabilities(
    rel: &Relation,
    plan: &IndividualPlan,
) -> Result<InclusionProbabilities, AllocError> {
    let mut per_row: Vec<Vec<f64>> = vec![Vec::with_capacity(plan.queries.len()); rel.len()];
    for q in &plan.queries {
        let part = rel.partition(&q.group_attrs).map_err(StatsError::from)?;
        let rates: IndexMap<&[String], f64> = q
            .strata
            .iter()
            .map(|s| (s.key.as_slice(), (s.integral as f64 / s.n as f64).min(1.0)))
            .collect();
        for (key, rows) in &part.groups {
            let rate = rates.get(key.values.as_slice()).copied().unwrap_or(0.0);
            for &r in rows {
                per_row[r].push(rate);
            }
        }
    }
    let p = per_row
        .iter()
        .map(|rates| combine_rates(rates))
        .collect::<Result<Vec<_>, _>>()?;
    let expected_size = p.iter().sum();
    Ok(InclusionProbabilities { p, expected_size })
}
