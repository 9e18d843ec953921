//! Comparison allocators: proportional ("house"), equal ("senate") and their
//! max-hybrid ("congress").
//!
//! Plans report their objective against unit-weight coefficients `α_i = γ_i²`
//! of the first aggregation column so they can be compared with the
//! optimised plans.

use crate::alloc::{
    l2_objective, round_allocation_with, AllocError, AllocationPlan, Method, PlanStratum,
    ALPHA_FLOOR,
};
use crate::stats::StatsCatalog;

fn unit_alpha(stats: &StatsCatalog) -> Vec<f64> {
    stats
        .strata()
        .map(|s| match s.columns.first().and_then(|m| m.cv()) {
            Some(g) if g > 0.0 => g * g,
            _ => ALPHA_FLOOR,
        })
        .collect()
}

fn baseline_plan(
    method: Method,
    stats: &StatsCatalog,
    budget: u64,
    shares: Vec<f64>,
    min_one: bool,
) -> Result<AllocationPlan, AllocError> {
    if stats.is_empty() {
        return Err(AllocError::EmptyProblem);
    }
    if budget == 0 {
        return Err(AllocError::InvalidBudget);
    }
    let caps: Vec<u64> = stats.strata().map(|s| s.n).collect();
    let rounding = round_allocation_with(&shares, &caps, budget, min_one);
    let alpha = unit_alpha(stats);
    let integral: Vec<f64> = rounding.sizes.iter().map(|&s| s as f64).collect();
    let mut warnings = Vec::new();
    if !rounding.missing.is_empty() {
        warnings.push(format!(
            "MissingGroups: {} strata without rows",
            rounding.missing.len()
        ));
    }
    let finite = |x: f64| x.is_finite().then_some(x);
    Ok(AllocationPlan {
        method,
        group_attrs: stats.group_attrs.clone(),
        budget,
        strata: stats
            .strata()
            .enumerate()
            .map(|(i, s)| PlanStratum {
                key: s.key.values.clone(),
                n: s.n,
                alpha: Some(alpha[i]),
                fractional: shares[i],
                integral: rounding.sizes[i],
                capped: shares[i] > s.n as f64,
            })
            .collect(),
        objective_fractional: finite(l2_objective(&alpha, &shares)),
        objective_integral: finite(l2_objective(&alpha, &integral)),
        linf_q: None,
        max_predicted_cv: None,
        warnings,
    })
}

fn house_shares(stats: &StatsCatalog, budget: u64) -> Vec<f64> {
    let total = stats.total_n as f64;
    stats
        .strata()
        .map(|s| budget as f64 * s.n as f64 / total)
        .collect()
}

fn senate_shares(stats: &StatsCatalog, budget: u64) -> Vec<f64> {
    vec![budget as f64 / stats.len() as f64; stats.len()]
}

/// `s_i ∝ n_i`; small groups may round to zero.
pub fn alloc_uniform(stats: &StatsCatalog, budget: u64) -> Result<AllocationPlan, AllocError> {
    let shares = house_shares(stats, budget);
    baseline_plan(Method::Uniform, stats, budget, shares, false)
}

/// `s_i = M / r`, with the surplus of small strata spread over the rest.
pub fn alloc_senate(stats: &StatsCatalog, budget: u64) -> Result<AllocationPlan, AllocError> {
    let shares = senate_shares(stats, budget);
    baseline_plan(Method::Senate, stats, budget, shares, true)
}

/// `s_i ∝ max(M n_i / N, M / r)`, rescaled to sum to `M`.
pub fn alloc_congress(stats: &StatsCatalog, budget: u64) -> Result<AllocationPlan, AllocError> {
    if stats.is_empty() {
        return Err(AllocError::EmptyProblem);
    }
    let hybrid: Vec<f64> = house_shares(stats, budget)
        .into_iter()
        .zip(senate_shares(stats, budget))
        .map(|(h, s)| h.max(s))
        .collect();
    let total: f64 = hybrid.iter().sum();
    let shares = hybrid.iter().map(|c| c * budget as f64 / total).collect();
    baseline_plan(Method::Congress, stats, budget, shares, true)
}
