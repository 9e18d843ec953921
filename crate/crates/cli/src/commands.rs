use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cvopt_core::alloc::{
    alloc_individual, alloc_linf, alpha_masg, beta_multi_groupby, poisson_probabilities,
    solve_plan, AllocationPlan, FinestStratification, GroupQuery, IndividualPlan, IndividualQuery,
    WeightEntry, WeightSpec,
};
use cvopt_core::baselines::{alloc_congress, alloc_senate, alloc_uniform};
use cvopt_core::dataset::Relation;
use cvopt_core::query::{self, Aggregate, Estimate, EvaluationReport, Query};
use cvopt_core::sampler::{self, draw_poisson, draw_stratified, Sample};
use cvopt_core::stats::{compute_catalog_parallel, StatsCatalog};
use cvopt_core::stream::{objective, two_pass_reference, StreamSampler};
use cvopt_core::workload::{
    derive_aggregation_groups, weights_from_frequencies, workload_problem, QuerySpec,
};
use serde::{Deserialize, Serialize};

use crate::config::{budget_from_rate, MethodName, RunConfig};

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = cvopt_core::json::to_string(value).context("serializing output")?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid {what} {}", path.display()))
}

fn load_relation(cfg: &RunConfig) -> Result<Relation> {
    let path = cfg.data_path()?;
    Relation::load_csv(&path, cfg.schema())
        .with_context(|| format!("cannot load data {}", path.display()))
}

fn load_workload(cfg: &RunConfig) -> Result<Option<Vec<QuerySpec>>> {
    cfg.workload_path()
        .map(|p| read_json(&p, "workload"))
        .transpose()
}

fn load_weights(cfg: &RunConfig) -> Result<WeightSpec> {
    match cfg.weights_path() {
        Some(p) => {
            let entries: Vec<WeightEntry> = read_json(&p, "weights")?;
            Ok(WeightSpec::from_entries(entries)?)
        }
        None => Ok(WeightSpec::uniform()),
    }
}

fn workload_attrs(wl: &Option<Vec<QuerySpec>>) -> Vec<Vec<String>> {
    wl.iter().flatten().map(|q| q.group_by.clone()).collect()
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let rel = load_relation(cfg)?;
    let wl = load_workload(cfg)?;
    let attrs = cfg.strat_attrs(&workload_attrs(&wl));
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let catalog = compute_catalog_parallel(&rel, &attrs, &cfg.aggregates, workers)?;
    let path = cfg.stats_file();
    write_text(&path, &catalog.to_json()?)?;
    println!(
        "stats: {} rows, {} strata over {:?} -> {}",
        catalog.total_n,
        catalog.len(),
        attrs,
        path.display()
    );
    Ok(())
}

/// A plan file holds either per-stratum sizes or per-query sizes.
#[derive(Debug, Clone)]
pub enum PlanDoc {
    Allocation(AllocationPlan),
    Individual(IndividualPlan),
}

impl PlanDoc {
    fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path, "plan")?;
        let doc = if value.get("queries").is_some() {
            PlanDoc::Individual(serde_json::from_value(value)?)
        } else {
            PlanDoc::Allocation(serde_json::from_value(value)?)
        };
        Ok(doc)
    }

    fn save(&self, path: &Path) -> Result<()> {
        match self {
            PlanDoc::Allocation(p) => write_json(path, p),
            PlanDoc::Individual(p) => write_json(path, p),
        }
    }

    fn warnings(&self) -> &[String] {
        match self {
            PlanDoc::Allocation(p) => &p.warnings,
            PlanDoc::Individual(p) => &p.warnings,
        }
    }

    fn objective(&self) -> Option<f64> {
        match self {
            PlanDoc::Allocation(p) => p.objective_integral,
            PlanDoc::Individual(p) => p.objective_integral,
        }
    }
}

fn load_catalog(cfg: &RunConfig) -> Result<StatsCatalog> {
    let path = cfg.stats_file();
    if !path.exists() {
        bail!(
            "statistics {} not found; run `cvopt stats` first",
            path.display()
        );
    }
    StatsCatalog::load(&path).with_context(|| format!("cannot load statistics {}", path.display()))
}

fn resolve_budget(cfg: &RunConfig, catalog: &StatsCatalog) -> Result<u64> {
    match (cfg.budget, cfg.rate) {
        (Some(m), _) => Ok(m),
        (None, Some(r)) => {
            let (m, w) = budget_from_rate(r, catalog.total_n, catalog.len());
            if let Some(w) = w {
                warn(&w);
            }
            Ok(m)
        }
        (None, None) => bail!("no sample size given (config `budget`/`rate` or --budget/--rate)"),
    }
}

/// Builds the plan for `method` from the finest catalog.
pub fn build_plan(
    cfg: &RunConfig,
    method: MethodName,
    catalog: &StatsCatalog,
    rel: Option<&Relation>,
    budget: u64,
) -> Result<PlanDoc> {
    let weights = load_weights(cfg)?;
    let sets = cfg.grouping_sets();
    let single_column = || -> Result<&str> {
        match cfg.aggregates.as_slice() {
            [c] => Ok(c.as_str()),
            _ => bail!("{} takes exactly one aggregate column", method.as_str()),
        }
    };
    let plan = match method {
        MethodName::CvoptL2 => {
            let problem = if let Some(wl) = load_workload(cfg)? {
                let rel = rel.context("a workload needs the data file")?;
                let ft = derive_aggregation_groups(rel, &wl)?;
                let ew = weights_from_frequencies(&ft, cfg.workload_transform);
                workload_problem(rel, &ew, budget)?
            } else if !sets.is_empty() {
                let fs = FinestStratification::new(catalog.clone(), &sets)?;
                let queries: Vec<GroupQuery> = sets
                    .iter()
                    .map(|a| GroupQuery {
                        attrs: a.clone(),
                        columns: cfg.aggregates.clone(),
                    })
                    .collect();
                beta_multi_groupby(&fs, &queries, &weights)?.with_budget(budget)
            } else {
                alpha_masg(catalog, &cfg.aggregates, &weights, cfg.zero_mean)?.with_budget(budget)
            };
            PlanDoc::Allocation(solve_plan(&problem)?)
        }
        MethodName::CvoptLinf => PlanDoc::Allocation(alloc_linf(
            catalog,
            single_column()?,
            budget,
            cfg.zero_mean,
        )?),
        MethodName::CvoptIndividual => {
            let sets = if sets.is_empty() {
                vec![cfg.group_by.clone()]
            } else {
                sets
            };
            let catalogs = sets
                .iter()
                .map(|a| catalog.rollup(a))
                .collect::<Result<Vec<_>, _>>()?;
            let queries: Vec<IndividualQuery> = catalogs
                .iter()
                .map(|c| IndividualQuery {
                    catalog: c,
                    columns: &cfg.aggregates,
                })
                .collect();
            PlanDoc::Individual(alloc_individual(&queries, &weights, budget, cfg.zero_mean)?)
        }
        MethodName::Uniform => PlanDoc::Allocation(alloc_uniform(catalog, budget)?),
        MethodName::Senate => PlanDoc::Allocation(alloc_senate(catalog, budget)?),
        MethodName::Congress => PlanDoc::Allocation(alloc_congress(catalog, budget)?),
    };
    Ok(plan)
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<()> {
    let catalog = load_catalog(cfg)?;
    let budget = resolve_budget(cfg, &catalog)?;
    let rel = match cfg.workload {
        Some(_) => Some(load_relation(cfg)?),
        None => None,
    };
    let plan = build_plan(cfg, cfg.method, &catalog, rel.as_ref(), budget)?;
    for w in plan.warnings() {
        warn(w);
    }
    let path = cfg.plan_file();
    plan.save(&path)?;
    println!(
        "plan: {} with M={budget} -> {}",
        cfg.method.as_str(),
        path.display()
    );
    Ok(())
}

fn draw(rel: &Relation, plan: &PlanDoc, seed: u64) -> Result<Sample> {
    Ok(match plan {
        PlanDoc::Allocation(p) => Sample::Stratified(draw_stratified(rel, p, seed)?),
        PlanDoc::Individual(p) => {
            let probs = poisson_probabilities(rel, p)?;
            Sample::Poisson(draw_poisson(rel, &probs.p, seed)?)
        }
    })
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let rel = load_relation(cfg)?;
    let plan_path = cfg.plan_file();
    let plan = PlanDoc::load(&plan_path)?;
    let sample = draw(&rel, &plan, seed)?;
    let path = cfg.sample_file();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    sampler::save_sample(&sample, &path)?;
    let rows = match &sample {
        Sample::Stratified(s) => s.len(),
        Sample::Poisson(p) => p.rows.len(),
    };
    println!("sample: {rows} rows (seed {seed}) -> {}", path.display());
    Ok(())
}

fn load_sample(cfg: &RunConfig) -> Result<Sample> {
    let path = cfg.sample_file();
    sampler::load_sample(&path, Some(&cfg.schema()))
        .with_context(|| format!("cannot load sample {}", path.display()))
}

/// Configured queries, or AVG of every aggregate by `group_by`.
fn queries(cfg: &RunConfig) -> Vec<Query> {
    if !cfg.queries.is_empty() {
        return cfg.queries.clone();
    }
    cfg.aggregates
        .iter()
        .map(|c| Query::new(cfg.group_by.clone(), Aggregate::avg(c.clone())))
        .collect()
}

#[derive(Serialize)]
struct QueryEstimates {
    query: Query,
    text: String,
    estimates: Vec<Estimate>,
}

pub fn cmd_query(cfg: &RunConfig) -> Result<()> {
    let sample = load_sample(cfg)?;
    let out: Vec<QueryEstimates> = queries(cfg)
        .into_iter()
        .map(|q| {
            let estimates = query::estimate(&sample, &q)?;
            Ok(QueryEstimates {
                text: q.to_string(),
                query: q,
                estimates,
            })
        })
        .collect::<Result<_>>()?;
    let path = cfg.out_file("estimates.json");
    write_json(&path, &out)?;
    println!("query: {} queries -> {}", out.len(), path.display());
    Ok(())
}

fn evaluate_all(cfg: &RunConfig, rel: &Relation, sample: &Sample) -> Result<Vec<EvaluationReport>> {
    queries(cfg)
        .iter()
        .map(|q| Ok(query::evaluate(rel, sample, q, cfg.missing)?))
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let rel = load_relation(cfg)?;
    let sample = load_sample(cfg)?;
    let reports = evaluate_all(cfg, &rel, &sample)?;
    write_json(&cfg.out_file("evaluation.json"), &reports)?;
    for (i, r) in reports.iter().enumerate() {
        write_text(&cfg.out_file(&format!("evaluation_{i}.csv")), &r.to_csv())?;
        for w in &r.warnings {
            warn(w);
        }
        println!(
            "{}: mean error {:.4}, max {:.4}, missing {}",
            r.query, r.summary.mean, r.summary.max, r.missing_groups
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    method: String,
    query: String,
    avg_error_pct: f64,
    max_error_pct: f64,
    p90_error_pct: f64,
    missing_groups: f64,
    plan_objective: Option<f64>,
}

#[derive(Serialize)]
struct CompareReport {
    budget: u64,
    seeds: Vec<u64>,
    rows: Vec<CompareRow>,
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let rel = load_relation(cfg)?;
    let catalog = load_catalog(cfg)?;
    let budget = resolve_budget(cfg, &catalog)?;
    let methods = if cfg.compare_methods.is_empty() {
        let mut m = vec![
            MethodName::Uniform,
            MethodName::Senate,
            MethodName::Congress,
            MethodName::CvoptL2,
        ];
        if cfg.aggregates.len() == 1 {
            m.push(MethodName::CvoptLinf);
        }
        m
    } else {
        cfg.compare_methods.clone()
    };
    let seeds: Vec<u64> = (0..cfg.compare_runs)
        .map(|i| seed.wrapping_add(i))
        .collect();
    let qs = queries(cfg);
    let runs = seeds.len() as f64;
    let mut rows = Vec::new();
    for &method in &methods {
        let plan = build_plan(cfg, method, &catalog, Some(&rel), budget)?;
        let mut acc = vec![[0.0; 4]; qs.len()];
        for &s in &seeds {
            let sample = draw(&rel, &plan, s)?;
            for (qi, q) in qs.iter().enumerate() {
                let r = query::evaluate(&rel, &sample, q, cfg.missing)?;
                acc[qi][0] += r.summary.mean;
                acc[qi][1] += r.summary.max;
                acc[qi][2] += r.summary.p90;
                acc[qi][3] += r.missing_groups as f64;
            }
        }
        for (q, a) in qs.iter().zip(&acc) {
            rows.push(CompareRow {
                method: method.as_str().to_string(),
                query: q.to_string(),
                avg_error_pct: 100.0 * a[0] / runs,
                max_error_pct: 100.0 * a[1] / runs,
                p90_error_pct: 100.0 * a[2] / runs,
                missing_groups: a[3] / runs,
                plan_objective: plan.objective(),
            });
        }
    }
    let mut csv = String::from(
        "method,query,avg_error_pct,max_error_pct,p90_error_pct,missing_groups,plan_objective\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},\"{}\",{},{},{},{},{}\n",
            r.method,
            r.query.replace('"', "\"\""),
            r.avg_error_pct,
            r.max_error_pct,
            r.p90_error_pct,
            r.missing_groups,
            r.plan_objective.map(|o| o.to_string()).unwrap_or_default()
        ));
    }
    write_json(
        &cfg.out_file("compare.json"),
        &CompareReport {
            budget,
            seeds,
            rows: rows.clone(),
        },
    )?;
    write_text(&cfg.out_file("compare.csv"), &csv)?;
    for r in &rows {
        println!(
            "{:<17} {:<40} avg {:>8.3}%  max {:>8.3}%",
            r.method, r.query, r.avg_error_pct, r.max_error_pct
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct StreamSummary {
    rows: u64,
    budget: u64,
    total: u64,
    objective: f64,
    /// Objective of the two-pass sample under the final online statistics.
    reference_objective: f64,
}

pub fn cmd_stream(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let rel = load_relation(cfg)?;
    let attrs = cfg.strat_attrs(&[]);
    let budget = match (cfg.budget, cfg.rate) {
        (Some(m), _) => m,
        (None, Some(r)) => budget_from_rate(r, rel.len() as u64, 1).0,
        (None, None) => bail!("no sample size given (config `budget`/`rate` or --budget/--rate)"),
    };
    let weights = load_weights(cfg)?;
    let mut sampler = StreamSampler::new(
        rel.schema().clone(),
        &attrs,
        &cfg.aggregates,
        weights.clone(),
        budget,
        seed,
    )?;
    let metrics_path = cfg.out_file("stream_metrics.jsonl");
    if let Some(dir) = metrics_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(
        fs::File::create(&metrics_path)
            .with_context(|| format!("cannot write {}", metrics_path.display()))?,
    );
    for chunk in rel.rows().chunks(cfg.batch_size) {
        let m = sampler.ingest_batch(chunk.to_vec())?;
        serde_json::to_writer(&mut out, &m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let snapshot = sampler.snapshot(seed);
    sampler::save_sample(
        &Sample::Stratified(snapshot),
        cfg.out_file("stream_sample.txt"),
    )?;
    let reference = two_pass_reference(&rel, &attrs, &cfg.aggregates, &weights, budget, seed)?;
    let f = sampler.f_values();
    let ref_sizes: Vec<u64> = sampler
        .strata()
        .map(|s| {
            reference
                .strata
                .iter()
                .find(|r| r.key == s.key)
                .map_or(0, |r| r.s)
        })
        .collect();
    let summary = StreamSummary {
        rows: sampler.rows_seen(),
        budget,
        total: sampler.total(),
        objective: sampler.objective(),
        reference_objective: objective(&f, &ref_sizes),
    };
    write_json(&cfg.out_file("stream_summary.json"), &summary)?;
    println!(
        "stream: {} rows, kept {} of budget {}, F = {:.6} (two-pass {:.6}) -> {}",
        summary.rows,
        summary.total,
        budget,
        summary.objective,
        summary.reference_objective,
        metrics_path.display()
    );
    Ok(())
}
