mod common;

use std::collections::BTreeMap;

use common::*;
use cvopt_core::alloc::{beta_multi_groupby, solve_fractional, FinestStratification, WeightSpec};
use cvopt_core::dataset::{Relation, Value};
use cvopt_core::query::{Atom, CmpOp, Predicate};
use cvopt_core::workload::*;

fn science() -> Predicate {
    Predicate::new(vec![Atom::new(
        "college",
        CmpOp::Eq,
        Value::Cat(s("Science")),
    )])
}

/// Student workload: A = AVG(age), AVG(gpa) by major ×20; B = AVG(age),
/// AVG(sat) by college ×10; C = AVG(gpa) by major where college=Science ×15.
fn student_workload() -> Vec<QuerySpec> {
    vec![
        QuerySpec::new(&["major"], &["age", "gpa"], 20),
        QuerySpec::new(&["college"], &["age", "sat"], 10),
        QuerySpec::new(&["major"], &["gpa"], 15).with_predicate(science()),
    ]
}

/// (column, member rows) → frequency, derived straight from the raw rows.
fn brute_force(rel: &Relation, workload: &[QuerySpec]) -> BTreeMap<(String, Vec<usize>), u64> {
    let mut out = BTreeMap::new();
    for q in workload {
        let pred = q.predicate.as_ref().map(|p| p.bind(rel.schema()).unwrap());
        let idx: Vec<usize> = q
            .group_by
            .iter()
            .map(|a| rel.schema().index_of(a).unwrap())
            .collect();
        let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for r in 0..rel.len() {
            let row = rel.row(r);
            if pred.as_ref().is_some_and(|p| !p.matches(row)) {
                continue;
            }
            let k = idx
                .iter()
                .map(|&i| row[i].as_str().unwrap().to_string())
                .collect();
            groups.entry(k).or_default().push(r);
        }
        for col in &q.aggregates {
            for rows in groups.values() {
                *out.entry((col.clone(), rows.clone())).or_default() += q.repeats;
            }
        }
    }
    out
}

#[test]
fn student_workload_frequencies() {
    let rel = student();
    let ft = derive_aggregation_groups(&rel, &student_workload()).unwrap();
    let major = |m: &str| key(&["major"], &[m]);
    assert_eq!(ft.frequency_of("gpa", &major("CS")), Some(35));
    assert_eq!(ft.frequency_of("gpa", &major("Math")), Some(35));
    assert_eq!(ft.frequency_of("gpa", &major("EE")), Some(20));
    assert_eq!(ft.frequency_of("gpa", &major("ME")), Some(20));
    for m in ["CS", "Math", "EE", "ME"] {
        // Only the first query touches these entities.
        assert_eq!(ft.frequency_of("age", &major(m)), Some(20));
    }
    for c in ["Science", "Engineering"] {
        assert_eq!(ft.frequency_of("age", &key(&["college"], &[c])), Some(10));
        assert_eq!(ft.frequency_of("sat", &key(&["college"], &[c])), Some(10));
    }
    assert_eq!(ft.len(), 12);
    assert_eq!(ft.total(), 230);
}

#[test]
fn student_workload_matches_brute_force() {
    let rel = student();
    let ft = derive_aggregation_groups(&rel, &student_workload()).unwrap();
    let ours: BTreeMap<(String, Vec<usize>), u64> = ft
        .iter()
        .map(|(e, f)| ((e.column.clone(), e.member_rows.clone()), f))
        .collect();
    assert_eq!(ours, brute_force(&rel, &student_workload()));
}

#[test]
fn conservation_and_predicate_subsets() {
    let groups: Vec<GroupSpec> = vec![(s("a"), 40, 5.0, 1.0), (s("b"), 60, 9.0, 4.0)];
    let rel = synthetic_two_attrs(&groups, &["u", "v", "w"], 2);
    let high = Predicate::new(vec![Atom::new("x", CmpOp::Gt, Value::Num(6.0))]);
    let workload = vec![
        QuerySpec::new(&["g"], &["x"], 3),
        QuerySpec::new(&["h"], &["x"], 2),
        QuerySpec::new(&["g", "h"], &["x"], 5).with_predicate(high.clone()),
        QuerySpec::new(&["g"], &["x"], 4).with_predicate(high),
    ];
    let ft = derive_aggregation_groups(&rel, &workload).unwrap();
    let oracle = brute_force(&rel, &workload);
    let ours: BTreeMap<(String, Vec<usize>), u64> = ft
        .iter()
        .map(|(e, f)| ((e.column.clone(), e.member_rows.clone()), f))
        .collect();
    assert_eq!(ours, oracle);

    let expected: u64 = oracle.len() as u64;
    assert_eq!(ft.len() as u64, expected);
    let induced: u64 = workload
        .iter()
        .map(|q| {
            let one = brute_force(&rel, std::slice::from_ref(q));
            q.repeats * one.len() as u64
        })
        .sum();
    assert_eq!(ft.total(), induced);

    for (e, _) in ft.iter() {
        let all = rel.partition(&e.group.attrs).unwrap();
        let full = &all.groups[&e.group];
        assert!(e.member_rows.iter().all(|r| full.contains(r)));
    }
}

#[test]
fn unrestricted_workload_matches_multi_groupby() {
    let rel = student();
    let workload = &student_workload()[..2];
    let ft = derive_aggregation_groups(&rel, workload).unwrap();
    let weights = weights_from_frequencies(&ft, WeightTransform::Identity);
    let problem = workload_problem(&rel, &weights, 6).unwrap();

    let (queries, spec) = weights.to_weight_spec(&rel).unwrap();
    let fs = FinestStratification::build(&rel, &queries).unwrap();
    let beta = beta_multi_groupby(&fs, &queries, &spec).unwrap();
    assert_eq!(problem.strata.len(), beta.strata.len());
    for (k, a) in problem.strata.iter().zip(&problem.alpha) {
        let j = beta.strata.iter().position(|b| b == k).unwrap();
        assert!((a - beta.alpha[j]).abs() <= 1e-12 * a, "{k}");
    }
}

#[test]
fn equal_frequencies_give_unweighted_allocation() {
    let rel = student();
    let q = QuerySpec::new(&["major"], &["age", "gpa"], 9);
    let ft = derive_aggregation_groups(&rel, &[q]).unwrap();
    let weights = weights_from_frequencies(&ft, WeightTransform::Identity);
    let weighted = solve_fractional(&workload_problem(&rel, &weights, 6).unwrap()).unwrap();

    let queries = vec![cvopt_core::alloc::GroupQuery {
        attrs: strings(&["major"]),
        columns: strings(&["age", "gpa"]),
    }];
    let fs = FinestStratification::build(&rel, &queries).unwrap();
    let plain = solve_fractional(
        &beta_multi_groupby(&fs, &queries, &WeightSpec::uniform())
            .unwrap()
            .with_budget(6),
    )
    .unwrap();
    for (a, b) in weighted.iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sqrt_transform_of_student_workload() {
    let rel = student();
    let ft = derive_aggregation_groups(&rel, &student_workload()).unwrap();
    let w = weights_from_frequencies(&ft, WeightTransform::Sqrt);
    for (e, wt) in &w.entities {
        let f = ft.frequency_of(&e.column, &e.group).unwrap();
        assert_eq!(*wt, (f as f64).sqrt());
    }
    let cs = w
        .entities
        .iter()
        .find(|(e, _)| e.column == "gpa" && e.group == key(&["major"], &["CS"]))
        .unwrap();
    assert_eq!(cs.1, 35f64.sqrt());
}

#[test]
fn workload_file_format() {
    let text = r#"[
        {"group_by": ["major"], "aggregates": ["age", "gpa"], "repeats": 20},
        {"group_by": ["major"], "aggregates": ["gpa"],
         "predicate": [{"column": "college", "op": "=", "value": "Science"}], "repeats": 15},
        {"group_by": ["college"], "aggregates": ["sat"]}
    ]"#;
    let w: Vec<QuerySpec> = serde_json::from_str(text).unwrap();
    assert_eq!(w[1].predicate, Some(science()));
    assert_eq!(w[2].repeats, 1);
}
