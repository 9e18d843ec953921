//! Acceptance checks. Runs without the libtest harness so that every check
//! prints one PASS/FAIL line; exits non-zero if any check fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use common::*;
use cvopt_core::alloc::*;
use cvopt_core::baselines::{alloc_congress, alloc_senate, alloc_uniform};
use cvopt_core::dataset::{ColumnSchema, GroupKey, Relation, Schema, Value};
use cvopt_core::query::{estimate, evaluate, exact_answer, Aggregate, MissingPolicy, Query};
use cvopt_core::sampler::{draw_poisson, draw_stratified, Sample};
use cvopt_core::stats::{compute_catalog, RunningMoments, StatsCatalog, StratumStats};
use cvopt_core::stream::{evict_plan, objective, StreamSampler};
use cvopt_core::workload::{derive_aggregation_groups, QuerySpec};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

type Check = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let checks: Vec<Check> = vec![
        (
            "closed-form optimality",
            Some(Duration::from_secs(10)),
            closed_form_optimality,
        ),
        (
            "integer near-optimality",
            Some(Duration::from_secs(60)),
            integer_near_optimality,
        ),
        (
            "cv calibration",
            Some(Duration::from_secs(120)),
            cv_calibration,
        ),
        ("linf behavior", None, linf_behavior),
        (
            "multi-grouping coefficients",
            None,
            multi_grouping_coefficients,
        ),
        ("workload derivation", None, workload_derivation),
        (
            "eviction optimality",
            Some(Duration::from_secs(30)),
            eviction_optimality,
        ),
        (
            "streaming/offline agreement",
            None,
            streaming_offline_agreement,
        ),
        (
            "method comparison",
            Some(Duration::from_secs(300)),
            method_comparison,
        ),
        ("poisson unified sample", None, poisson_unified_sample),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let mut out = check();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > limit {
                out.ok = false;
                out.detail.push_str(&format!("; over time limit {limit:?}"));
            }
        }
        if !out.ok {
            failed += 1;
        }
        println!(
            "acceptance {:>2} {:<30} {} ({:.2?}) {}",
            i + 1,
            name,
            if out.ok { "PASS" } else { "FAIL" },
            took,
            out.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn objective_of(alpha: &[f64], s: &[f64]) -> f64 {
    alpha.iter().zip(s).map(|(a, x)| a / x).sum()
}

/// Pairwise-exchange search on `Σ s = m`, halving the step until it stalls.
fn simplex_search(alpha: &[f64], m: f64) -> f64 {
    let r = alpha.len();
    let mut s = vec![m / r as f64; r];
    let mut best = objective_of(alpha, &s);
    let mut step = m / 4.0;
    while step > 1e-13 * m {
        let mut improved = false;
        for i in 0..r {
            for j in 0..r {
                if i == j || s[j] - step <= 0.0 {
                    continue;
                }
                s[i] += step;
                s[j] -= step;
                let f = objective_of(alpha, &s);
                if f < best {
                    best = f;
                    improved = true;
                } else {
                    s[i] -= step;
                    s[j] += step;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    best
}

/// Lagrange multiplier by bisection on `Σ √(α_i/λ) = m`.
fn bisection_objective(alpha: &[f64], m: f64) -> f64 {
    let total = |lam: f64| alpha.iter().map(|a| (a / lam).sqrt()).sum::<f64>();
    let (mut lo, mut hi) = (1e-300_f64, 1e300_f64);
    for _ in 0..4000 {
        let mid = (lo * hi).sqrt();
        if total(mid) > m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s: Vec<f64> = alpha.iter().map(|a| (a / hi).sqrt()).collect();
    let scale = m / s.iter().sum::<f64>();
    objective_of(alpha, &s.iter().map(|x| x * scale).collect::<Vec<_>>())
}

fn closed_form_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_obj: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for _ in 0..100 {
        let r = rng.random_range(1..=6usize);
        let alpha: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..=100.0)).collect();
        let m = rng.random_range(r as u64..=1000);
        let problem = AllocationProblem {
            strata: (0..r).map(|i| key(&["g"], &[&i.to_string()])).collect(),
            alpha: alpha.clone(),
            caps: vec![u64::MAX / 4; r],
            budget: m,
        };
        let s = solve_fractional(&problem).unwrap();
        let ours = objective_of(&alpha, &s);
        let oracle = simplex_search(&alpha, m as f64).min(bisection_objective(&alpha, m as f64));
        worst_obj = worst_obj.max((ours - oracle).abs() / oracle);
        let lam: Vec<f64> = alpha.iter().zip(&s).map(|(a, x)| a / (x * x)).collect();
        for l in &lam {
            worst_kkt = worst_kkt.max((l - lam[0]).abs() / lam[0]);
        }
    }
    outcome(
        worst_obj <= 1e-6 && worst_kkt <= 1e-9,
        format!("max objective gap {worst_obj:.2e}, max stationarity gap {worst_kkt:.2e}"),
    )
}

fn integer_near_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut below_bound = 0;
    let mut cases = 0;
    for _ in 0..400 {
        let r = rng.random_range(1..=4usize);
        let m = rng.random_range(r as u64..=25);
        let alpha: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..=100.0)).collect();
        let caps: Vec<u64> = (0..r).map(|_| rng.random_range(1..=15)).collect();
        let problem = AllocationProblem {
            strata: (0..r).map(|i| key(&["g"], &[&i.to_string()])).collect(),
            alpha: alpha.clone(),
            caps: caps.clone(),
            budget: m,
        };
        let plan = solve_plan(&problem).unwrap();
        let target = m.min(caps.iter().sum());
        let best = compositions(target, &vec![1; r], &caps)
            .iter()
            .map(|s| alpha.iter().zip(s).map(|(a, &x)| a / x as f64).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let ours = plan.objective_integral.unwrap();
        if ours < plan.objective_fractional.unwrap() * (1.0 - 1e-12) {
            below_bound += 1;
        }
        worst = worst.max(ours / best);
        cases += 1;
    }
    outcome(
        worst <= 1.05 && below_bound == 0,
        format!("{cases} instances, worst ratio to integer optimum {worst:.4}, {below_bound} below fractional bound"),
    )
}

fn cv_calibration() -> Outcome {
    let groups: Vec<GroupSpec> = vec![
        (s("a"), 1000, 10.0, 1.0),
        (s("b"), 1000, 20.0, 8.0),
        (s("c"), 1000, 5.0, 4.0),
    ];
    let rel = synthetic(&groups, 3);
    let cat = compute_catalog(&rel, &strings(&["g"]), &strings(&["x"])).unwrap();
    let plan = fixed_plan(&rel, &["g"], &[40, 90, 150]);
    let q = Query::new(strings(&["g"]), Aggregate::avg("x"));
    let runs = 2000;
    let mut ys: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(runs)).collect();
    for seed in 0..runs as u64 {
        let sample = Sample::Stratified(draw_stratified(&rel, &plan, seed).unwrap());
        for (i, e) in estimate(&sample, &q).unwrap().iter().enumerate() {
            ys[i].push(e.value.unwrap());
        }
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, st) in cat.strata().enumerate() {
        let (mean, var) = mean_var(&ys[i]);
        let (mu, sigma) = (st.mean(0), st.stddev(0));
        let s_i = plan.strata[i].integral as f64;
        let predicted = predicted_cv(st.n as f64, s_i, mu, sigma).unwrap() * mu;
        let std_err = (var.sqrt() - predicted).abs() / predicted;
        let z = (mean - mu).abs() / (predicted / (runs as f64).sqrt());
        ok &= std_err <= 0.05 && z <= 3.0;
        detail.push(format!(
            "{}: std off {:.1}%, mean {z:.2} SE",
            st.key,
            100.0 * std_err
        ));
    }
    outcome(ok, detail.join("; "))
}

fn catalog(strata: &[(u64, f64, f64)]) -> StatsCatalog {
    let entries: IndexMap<GroupKey, StratumStats> = strata
        .iter()
        .enumerate()
        .map(|(i, &(n, mu, sd))| {
            let k = key(&["g"], &[&format!("s{i}")]);
            let st = StratumStats {
                key: k.clone(),
                n,
                columns: vec![RunningMoments::from_summary(n, mu, sd)],
            };
            (k, st)
        })
        .collect();
    StatsCatalog {
        group_attrs: strings(&["g"]),
        agg_columns: strings(&["x"]),
        total_n: strata.iter().map(|s| s.0).sum(),
        entries,
    }
}

fn linf_behavior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fixtures: Vec<(StatsCatalog, u64)> = vec![
        (
            catalog(&[(100, 10.0, 2.0), (100, 10.0, 1.0), (100, 10.0, 0.5)]),
            30,
        ),
        (catalog(&[(1000, 1000.0, 100.0), (1000, 100.0, 100.0)]), 50),
        (
            catalog(&[(50, 5.0, 5.0), (5000, 5.0, 0.5), (400, 20.0, 30.0)]),
            100,
        ),
    ];
    for _ in 0..300 {
        let r = rng.random_range(2..=8);
        let strata: Vec<(u64, f64, f64)> = (0..r)
            .map(|_| {
                (
                    rng.random_range(20..=2000),
                    rng.random_range(1.0..50.0),
                    rng.random_range(0.1..20.0),
                )
            })
            .collect();
        let c = catalog(&strata);
        let rate = [0.01, 0.05, 0.1, 0.3][rng.random_range(0..4)];
        let m = ((c.total_n as f64 * rate) as u64).max(r as u64);
        fixtures.push((c, m));
    }
    let max_cv = |c: &StatsCatalog, sizes: &[f64]| {
        c.strata()
            .zip(sizes)
            .map(|(s, &x)| predicted_cv(s.n as f64, x, s.mean(0), s.stddev(0)).unwrap())
            .collect::<Vec<f64>>()
    };
    let mut dominated = 0;
    let mut worst_spread: f64 = 0.0;
    for (c, m) in &fixtures {
        let w = WeightSpec::uniform();
        let linf = alloc_linf(c, "x", *m, ZeroMeanPolicy::Error).unwrap();
        let l2 = solve_plan(
            &alpha_sasg(c, "x", &w, ZeroMeanPolicy::Error)
                .unwrap()
                .with_budget(*m),
        )
        .unwrap();
        let to_f = |v: Vec<u64>| v.into_iter().map(|x| x as f64).collect::<Vec<_>>();
        let a = max_cv(c, &to_f(linf.sizes()))
            .into_iter()
            .fold(0.0, f64::max);
        let b = max_cv(c, &to_f(l2.sizes())).into_iter().fold(0.0, f64::max);
        if a <= b * (1.0 + 1e-12) {
            dominated += 1;
        }
        let (_, x) = linf_fractional(c, "x", *m, ZeroMeanPolicy::Error).unwrap();
        let cvs = max_cv(c, &x);
        let hi = cvs.iter().cloned().fold(0.0, f64::max);
        let lo = cvs.iter().cloned().fold(f64::INFINITY, f64::min);
        worst_spread = worst_spread.max((hi - lo) / hi);
    }
    outcome(
        dominated == fixtures.len() && worst_spread <= 1e-6,
        format!(
            "max CV not above l2 on {dominated}/{} fixtures, fractional CV spread {worst_spread:.1e}",
            fixtures.len()
        ),
    )
}

/// major, year, college, gpa
type YearRow = (String, String, String, f64);

/// Student with a crossed `year` attribute: `upper` for age ≥ 24.
fn student_with_year() -> (Relation, Vec<YearRow>) {
    let raw: Vec<YearRow> = student_rows()
        .iter()
        .map(|r| {
            let year = if r.age >= 24.0 { "upper" } else { "lower" };
            (
                r.major.to_string(),
                year.to_string(),
                r.college.to_string(),
                r.gpa,
            )
        })
        .collect();
    let schema = Schema::new(vec![
        ColumnSchema::categorical("major"),
        ColumnSchema::categorical("year"),
        ColumnSchema::categorical("college"),
        ColumnSchema::numeric("gpa"),
    ])
    .unwrap();
    let rows = raw
        .iter()
        .map(|(m, y, c, g)| {
            vec![
                Value::Cat(m.clone()),
                Value::Cat(y.clone()),
                Value::Cat(c.clone()),
                Value::Num(*g),
            ]
        })
        .collect();
    (Relation::new(schema, rows).unwrap(), raw)
}

fn multi_grouping_coefficients() -> Outcome {
    let (rel, raw) = student_with_year();
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    // Pair (major), (year): β = n² σ² [1/(n_m² μ_m²) + 1/(n_y² μ_y²)].
    let pair = vec![
        GroupQuery {
            attrs: strings(&["major"]),
            columns: strings(&["gpa"]),
        },
        GroupQuery {
            attrs: strings(&["year"]),
            columns: strings(&["gpa"]),
        },
    ];
    let fs = FinestStratification::build(&rel, &pair).unwrap();
    let p = beta_multi_groupby(&fs, &pair, &WeightSpec::uniform()).unwrap();
    let select = |f: &dyn Fn(&YearRow) -> bool| -> Vec<f64> {
        raw.iter().filter(|r| f(r)).map(|r| r.3).collect()
    };
    for (k, b) in p.strata.iter().zip(&p.alpha) {
        let (m, y) = (k.get("major").unwrap(), k.get("year").unwrap());
        let cell = select(&|r| r.0 == m && r.1 == y);
        let by_m = select(&|r| r.0 == m);
        let by_y = select(&|r| r.1 == y);
        let n = cell.len() as f64;
        let (_, var) = mean_var(&cell);
        let (mu_m, _) = mean_var(&by_m);
        let (mu_y, _) = mean_var(&by_y);
        let nm = by_m.len() as f64;
        let ny = by_y.len() as f64;
        let oracle = n * n * var * (1.0 / (nm * nm * mu_m * mu_m) + 1.0 / (ny * ny * mu_y * mu_y));
        worst = worst.max(rel_gap(*b, oracle));
        checked += 1;
    }

    // Every grouping set of the cubes over (major, year) and (major, college).
    let attr_of = |r: &YearRow, a: &str| -> String {
        match a {
            "major" => r.0.clone(),
            "year" => r.1.clone(),
            _ => r.2.clone(),
        }
    };
    for dims in [["major", "year"], ["major", "college"]] {
        let cube = cube_queries(&strings(&dims), &strings(&["gpa"]));
        let fs = FinestStratification::build(&rel, &cube).unwrap();
        let p = beta_multi_groupby(&fs, &cube, &WeightSpec::uniform()).unwrap();
        for (k, b) in p.strata.iter().zip(&p.alpha) {
            let in_cell = |r: &YearRow| {
                k.attrs
                    .iter()
                    .zip(&k.values)
                    .all(|(a, v)| &attr_of(r, a) == v)
            };
            let cell = select(&in_cell);
            let n = cell.len() as f64;
            let (_, var) = mean_var(&cell);
            let mut oracle = 0.0;
            for q in &cube {
                let coarse =
                    select(&|r| q.attrs.iter().all(|a| attr_of(r, a) == k.get(a).unwrap()));
                let (mu, _) = mean_var(&coarse);
                let na = coarse.len() as f64;
                oracle += n * n * var / (na * na * mu * mu);
            }
            worst = worst.max(rel_gap(*b, oracle));
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-12,
        format!("{checked} coefficients, worst relative gap {worst:.1e}"),
    )
}

/// Relative gap; a zero oracle value must come back as the positive floor.
fn rel_gap(ours: f64, oracle: f64) -> f64 {
    if oracle == 0.0 {
        if ours == ALPHA_FLOOR {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (ours - oracle).abs() / oracle
    }
}

fn workload_derivation() -> Outcome {
    let rel = student();
    let science = cvopt_core::query::Predicate::new(vec![cvopt_core::query::Atom::new(
        "college",
        cvopt_core::query::CmpOp::Eq,
        Value::Cat(s("Science")),
    )]);
    let workload = vec![
        QuerySpec::new(&["major"], &["age", "gpa"], 20),
        QuerySpec::new(&["college"], &["age", "sat"], 10),
        QuerySpec::new(&["major"], &["gpa"], 15).with_predicate(science),
    ];
    let ft = derive_aggregation_groups(&rel, &workload).unwrap();
    let major = |m: &str| key(&["major"], &[m]);
    let cs = ft.frequency_of("gpa", &major("CS"));
    let math = ft.frequency_of("gpa", &major("Math"));

    // Brute force: (column, member rows) → Σ repeats.
    let rows = student_rows();
    let mut oracle: BTreeMap<(String, Vec<usize>), u64> = BTreeMap::new();
    let specs: [(&str, &[&str], u64, bool); 3] = [
        ("major", &["age", "gpa"], 20, false),
        ("college", &["age", "sat"], 10, false),
        ("major", &["gpa"], 15, true),
    ];
    for (attr, cols, repeats, science_only) in specs {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            if science_only && r.college != "Science" {
                continue;
            }
            let g = if attr == "major" { r.major } else { r.college };
            groups.entry(g).or_default().push(i);
        }
        for c in cols {
            for members in groups.values() {
                *oracle.entry((c.to_string(), members.clone())).or_default() += repeats;
            }
        }
    }
    let ours: BTreeMap<(String, Vec<usize>), u64> = ft
        .iter()
        .map(|(e, f)| ((e.column.clone(), e.member_rows.clone()), f))
        .collect();
    let age_cs = ft.frequency_of("age", &major("CS")).unwrap_or(0);
    outcome(
        cs == Some(35) && math == Some(35) && ours == oracle,
        format!(
            "(gpa, CS) = {cs:?}, (gpa, Math) = {math:?}, {} entities match brute force: {}; (age, major) = {age_cs} by direct derivation",
            ours.len(),
            ours == oracle
        ),
    )
}

fn eviction_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatched = Vec::new();
    let mut touched = Vec::new();
    let states = 200;
    for case in 0..states {
        let k = rng.random_range(1..=4usize);
        let f: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..10.0)).collect();
        let (cur, beta) = loop {
            let cur: Vec<u64> = (0..k).map(|_| rng.random_range(1..=10)).collect();
            let beta = rng.random_range(1..=5u64);
            if cur.iter().sum::<u64>() >= beta + k as u64 {
                break (cur, beta);
            }
        };
        let total: u64 = cur.iter().sum();
        let budget = total - beta;
        let out = evict_plan(&f, &cur, budget);
        let fsum: f64 = f.iter().sum();
        for i in 0..k {
            if cur[i] as f64 <= budget as f64 * f[i] / fsum && out[i] != cur[i] {
                touched.push(format!("case {case}: f={f:?} s={cur:?} β={beta} got {out:?}, stratum {i} not oversized"));
            }
        }
        let before = objective(&f, &cur);
        let ours = objective(&f, &out) - before;
        let zeros = vec![0; k];
        let best = compositions(budget, &zeros, &cur)
            .iter()
            .map(|s| objective(&f, s) - before)
            .fold(f64::INFINITY, f64::min);
        if (ours - best).abs() > 1e-12 * best.abs().max(1e-300) && ours > best {
            mismatched.push(format!(
                "case {case}: f={f:?} s={cur:?} β={beta} got {out:?}"
            ));
        }
    }
    outcome(
        mismatched.is_empty() && touched.is_empty(),
        format!(
            "{}/{states} states at the exhaustive minimum, {} non-oversized strata changed{}",
            states - mismatched.len(),
            touched.len(),
            mismatched
                .iter()
                .chain(&touched)
                .map(|m| format!("; {m}"))
                .collect::<String>()
        ),
    )
}

fn stream_table(seed: u64) -> Relation {
    let groups: Vec<GroupSpec> = vec![
        (s("a"), 20_000, 100.0, 10.0),
        (s("b"), 12_000, 50.0, 25.0),
        (s("c"), 8_000, 10.0, 9.0),
        (s("d"), 5_000, 30.0, 3.0),
        (s("e"), 3_000, 20.0, 15.0),
        (s("f"), 1_900, 5.0, 4.0),
        (s("g"), 100, 8.0, 12.0),
    ];
    synthetic(&groups, seed)
}

fn streaming_offline_agreement() -> Outcome {
    let budget = 2_000;
    let cols = strings(&["x"]);
    let attrs = strings(&["g"]);
    let rel = stream_table(8);
    let w = WeightSpec::uniform();

    let mut single =
        StreamSampler::new(rel.schema().clone(), &attrs, &cols, w.clone(), budget, 8).unwrap();
    single.ingest_batch(rel.rows().to_vec()).unwrap();
    let cat = compute_catalog(&rel, &attrs, &cols).unwrap();
    let plan = solve_plan(
        &alpha_masg(&cat, &cols, &w, ZeroMeanPolicy::Error)
            .unwrap()
            .with_budget(budget),
    )
    .unwrap();
    let mut worst_gap = 0i64;
    for st in single.strata() {
        let offline = plan.size_of(&st.key).unwrap() as i64;
        worst_gap = worst_gap.max((st.len() as i64 - offline).abs());
    }

    let mut over_budget = 0;
    let mut broken = 0;
    for seed in 0..5u64 {
        let rel = stream_table(100 + seed);
        let mut smp =
            StreamSampler::new(rel.schema().clone(), &attrs, &cols, w.clone(), budget, seed)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen: HashMap<GroupKey, Vec<(f64, u64)>> = HashMap::new();
        let gi = rel.schema().index_of("g").unwrap();
        for (seq, row) in rel.rows().iter().enumerate() {
            let k: f64 = rng.random();
            seen.entry(key(&["g"], &[row[gi].as_str().unwrap()]))
                .or_default()
                .push((k, seq as u64));
            let m = smp.ingest_keyed(vec![(k, row.clone())]).unwrap();
            if m.total > budget {
                over_budget += 1;
            }
            if (seq + 1) % 10_000 == 0 || seq + 1 == rel.len() {
                broken += bottom_k_violations(&smp, &mut seen);
            }
        }
    }
    outcome(
        worst_gap <= 1 && over_budget == 0 && broken == 0,
        format!(
            "single batch: largest gap to offline plan {worst_gap}; batch size 1 over 5 seeds: {over_budget} settles above budget, {broken} bottom-k violations"
        ),
    )
}

fn bottom_k_violations(
    smp: &StreamSampler,
    seen: &mut HashMap<GroupKey, Vec<(f64, u64)>>,
) -> usize {
    let mut bad = 0;
    for st in smp.strata() {
        let all = seen.get_mut(&st.key).unwrap();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kept: Vec<(f64, u64)> = st.keys().collect();
        if kept[..] != all[..kept.len()] {
            bad += 1;
        }
        let dropped = all[kept.len()..].iter().map(|k| k.0).fold(1.0, f64::min);
        if st.d != dropped {
            bad += 1;
        }
    }
    bad
}

fn comparison_table() -> Relation {
    let r = 20;
    let mut groups: Vec<GroupSpec> = Vec::new();
    for i in 0..r {
        // Sizes from 50 000 down to 200; γ from 0.05 up to 1.0 with the
        // largest γ on the smallest groups.
        let t = i as f64 / (r - 1) as f64;
        let n = (50_000.0 * (200.0f64 / 50_000.0).powf(t)).round() as usize;
        let gamma = 0.05 + 0.95 * ((i * 7) % r) as f64 / (r - 1) as f64;
        let mu = 10.0 + i as f64;
        groups.push((format!("g{i:02}"), n, mu, gamma * mu));
    }
    synthetic(&groups, 9)
}

fn method_comparison() -> Outcome {
    let rel = comparison_table();
    let attrs = strings(&["g"]);
    let cat = compute_catalog(&rel, &attrs, &strings(&["x"])).unwrap();
    let budget = (rel.len() as f64 * 0.01).floor() as u64;
    let w = WeightSpec::uniform();
    let cvopt = solve_plan(
        &alpha_sasg(&cat, "x", &w, ZeroMeanPolicy::Error)
            .unwrap()
            .with_budget(budget),
    )
    .unwrap();
    let senate = alloc_senate(&cat, budget).unwrap();
    let uniform = alloc_uniform(&cat, budget).unwrap();
    let congress = alloc_congress(&cat, budget).unwrap();

    let gamma2: Vec<f64> = cat.strata().map(|s| s.cv(0).unwrap().powi(2)).collect();
    let f = |p: &AllocationPlan| {
        gamma2
            .iter()
            .zip(p.sizes())
            .map(|(g, s)| if s == 0 { f64::INFINITY } else { g / s as f64 })
            .sum::<f64>()
    };
    let (fc, fs, fu, fg) = (f(&cvopt), f(&senate), f(&uniform), f(&congress));
    let dominates = fc < fs && fc < fu && fc < fg;

    let q = Query::new(attrs.clone(), Aggregate::avg("x"));
    let runs = 20;
    let mut mean_max = [0.0; 3];
    for seed in 0..runs {
        for (j, plan) in [&cvopt, &senate, &uniform].iter().enumerate() {
            let sample = Sample::Stratified(draw_stratified(&rel, plan, seed).unwrap());
            let report = evaluate(&rel, &sample, &q, MissingPolicy::default()).unwrap();
            mean_max[j] += report.summary.max / runs as f64;
        }
    }
    let ordered = mean_max[0] < mean_max[1] && mean_max[1] < mean_max[2];
    outcome(
        ordered && dominates,
        format!(
            "mean max error cvopt {:.4} senate {:.4} uniform {:.4}; objective cvopt {fc:.4} senate {fs:.4} uniform {fu:.4} congress {fg:.4}",
            mean_max[0], mean_max[1], mean_max[2]
        ),
    )
}

fn poisson_unified_sample() -> Outcome {
    let groups: Vec<GroupSpec> = vec![
        (s("a"), 5_000, 10.0, 2.0),
        (s("b"), 3_000, 20.0, 10.0),
        (s("c"), 1_500, 5.0, 4.0),
        (s("d"), 500, 8.0, 1.0),
    ];
    let rel = synthetic_two_attrs(&groups, &["u", "v", "w"], 10);
    let cols = strings(&["x"]);
    let cg = compute_catalog(&rel, &strings(&["g"]), &cols).unwrap();
    let ch = compute_catalog(&rel, &strings(&["h"]), &cols).unwrap();
    let plan = alloc_individual(
        &[
            IndividualQuery {
                catalog: &cg,
                columns: &cols,
            },
            IndividualQuery {
                catalog: &ch,
                columns: &cols,
            },
        ],
        &WeightSpec::uniform(),
        600,
        ZeroMeanPolicy::Error,
    )
    .unwrap();
    let incl = poisson_probabilities(&rel, &plan).unwrap();
    let sum_p: f64 = incl.p.iter().sum();
    let size_sd = incl.p.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();

    let runs = 50;
    let queries = [
        Query::new(strings(&["g"]), Aggregate::count()),
        Query::new(strings(&["h"]), Aggregate::count()),
    ];
    let truths: Vec<Vec<(GroupKey, f64)>> = queries
        .iter()
        .map(|q| exact_answer(&rel, q).unwrap())
        .collect();
    // Standard error of the HT count of each group.
    let ses: Vec<Vec<f64>> = queries
        .iter()
        .zip(&truths)
        .map(|(q, t)| {
            let gi = rel.schema().index_of(&q.group_by[0]).unwrap();
            t.iter()
                .map(|(k, _)| {
                    (0..rel.len())
                        .filter(|&r| rel.row(r)[gi].as_str() == Some(&k.values[0]))
                        .map(|r| (1.0 - incl.p[r]) / incl.p[r])
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let mut mean_size = 0.0;
    let mut mean_counts: Vec<Vec<f64>> = truths.iter().map(|t| vec![0.0; t.len()]).collect();
    for seed in 0..runs {
        let sample = draw_poisson(&rel, &incl.p, seed).unwrap();
        mean_size += sample.rows.len() as f64 / runs as f64;
        let sample = Sample::Poisson(sample);
        for (qi, q) in queries.iter().enumerate() {
            let est = estimate(&sample, q).unwrap();
            for (gi, (k, _)) in truths[qi].iter().enumerate() {
                let v = est
                    .iter()
                    .find(|e| &e.group == k)
                    .and_then(|e| e.value)
                    .unwrap_or(0.0);
                mean_counts[qi][gi] += v / runs as f64;
            }
        }
    }
    let size_z = (mean_size - sum_p).abs() / (size_sd / (runs as f64).sqrt());
    let mut worst_z: f64 = 0.0;
    for qi in 0..queries.len() {
        for (gi, (_, t)) in truths[qi].iter().enumerate() {
            let z = (mean_counts[qi][gi] - t).abs() / (ses[qi][gi] / (runs as f64).sqrt());
            worst_z = worst_z.max(z);
        }
    }
    let expected_ok = (incl.expected_size - sum_p).abs() <= 1e-9 * sum_p;
    outcome(
        size_z <= 3.0 && worst_z <= 3.0 && expected_ok,
        format!(
            "expected size {sum_p:.1}, mean drawn {mean_size:.1} ({size_z:.2} SD of the mean); worst group count {worst_z:.2} SE of the mean"
        ),
    )
}
