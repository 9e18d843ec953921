//! Sample-size allocation for stratified samples that keep the coefficient
//! of variation of group-by aggregates small.

pub mod alloc;
pub mod baselines;
pub mod dataset;
pub mod json;
pub mod query;
pub mod sampler;
pub mod stats;
pub mod stream;
pub mod workload;
