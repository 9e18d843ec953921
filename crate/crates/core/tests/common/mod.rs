#![allow(dead_code)]

use cvopt_core::dataset::{ColumnSchema, GroupKey, Relation, Schema, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn s(v: &str) -> String {
    v.to_string()
}

pub fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

pub fn key(attrs: &[&str], values: &[&str]) -> GroupKey {
    GroupKey::new(strings(attrs), strings(values))
}

pub fn student_schema() -> Schema {
    Schema::new(vec![
        ColumnSchema::numeric("id"),
        ColumnSchema::numeric("age"),
        ColumnSchema::numeric("gpa"),
        ColumnSchema::numeric("sat"),
        ColumnSchema::categorical("major"),
        ColumnSchema::categorical("college"),
    ])
    .unwrap()
}

pub const STUDENT_CSV: &str = "id,age,gpa,sat,major,college
1,25,3.4,1250,CS,Science
2,22,3.1,1280,CS,Science
3,24,3.8,1230,Math,Science
4,28,3.6,1270,Math,Science
5,21,3.5,1210,EE,Engineering
6,23,3.2,1260,EE,Engineering
7,27,3.7,1220,ME,Engineering
8,26,3.3,1230,ME,Engineering
";

pub fn student() -> Relation {
    Relation::from_csv_reader(STUDENT_CSV.as_bytes(), student_schema()).unwrap()
}

/// Raw Student columns for oracles that must not go through the library.
pub struct StudentRow {
    pub age: f64,
    pub gpa: f64,
    pub sat: f64,
    pub major: &'static str,
    pub college: &'static str,
}

pub fn student_rows() -> Vec<StudentRow> {
    let ages = [25.0, 22.0, 24.0, 28.0, 21.0, 23.0, 27.0, 26.0];
    let gpas = [3.4, 3.1, 3.8, 3.6, 3.5, 3.2, 3.7, 3.3];
    let sats = [
        1250.0, 1280.0, 1230.0, 1270.0, 1210.0, 1260.0, 1220.0, 1230.0,
    ];
    let majors = ["CS", "CS", "Math", "Math", "EE", "EE", "ME", "ME"];
    (0..8)
        .map(|i| StudentRow {
            age: ages[i],
            gpa: gpas[i],
            sat: sats[i],
            major: majors[i],
            college: if i < 4 { "Science" } else { "Engineering" },
        })
        .collect()
}

/// Two-pass mean and (n−1) variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    };
    (m, v)
}

/// One stratum of a synthetic table: name, size, mean, standard deviation.
pub type GroupSpec = (String, usize, f64, f64);

/// Table with categorical `g` and numeric `x ~ Normal(mu, sd)` per group,
/// rows interleaved by a deterministic shuffle.
pub fn synthetic(groups: &[GroupSpec], seed: u64) -> Relation {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, n, mu, sd) in groups {
        let dist = Normal::new(*mu, *sd).unwrap();
        for _ in 0..*n {
            rows.push(vec![
                Value::Cat(name.clone()),
                Value::Num(dist.sample(&mut rng)),
            ]);
        }
    }
    rows.shuffle(&mut rng);
    let schema = Schema::new(vec![
        ColumnSchema::categorical("g"),
        ColumnSchema::numeric("x"),
    ])
    .unwrap();
    Relation::new(schema, rows).unwrap()
}

/// Like [`synthetic`] with a second categorical `h` drawn uniformly from `h_values`.
pub fn synthetic_two_attrs(groups: &[GroupSpec], h_values: &[&str], seed: u64) -> Relation {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, n, mu, sd) in groups {
        let dist = Normal::new(*mu, *sd).unwrap();
        for _ in 0..*n {
            let h = h_values[rng.random_range(0..h_values.len())];
            rows.push(vec![
                Value::Cat(name.clone()),
                Value::Cat(h.to_string()),
                Value::Num(dist.sample(&mut rng)),
            ]);
        }
    }
    rows.shuffle(&mut rng);
    let schema = Schema::new(vec![
        ColumnSchema::categorical("g"),
        ColumnSchema::categorical("h"),
        ColumnSchema::numeric("x"),
    ])
    .unwrap();
    Relation::new(schema, rows).unwrap()
}

/// Every composition of `total` into `parts` integers within `[lo_i, hi_i]`.
pub fn compositions(total: u64, lo: &[u64], hi: &[u64]) -> Vec<Vec<u64>> {
    fn go(
        i: usize,
        left: u64,
        lo: &[u64],
        hi: &[u64],
        cur: &mut Vec<u64>,
        out: &mut Vec<Vec<u64>>,
    ) {
        if i == lo.len() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let mut v = lo[i];
        while v <= hi[i].min(left) {
            cur.push(v);
            go(i + 1, left - v, lo, hi, cur, out);
            cur.pop();
            v += 1;
        }
    }
    let mut out = Vec::new();
    go(0, total, lo, hi, &mut Vec::new(), &mut out);
    out
}

/// Plan with the given sizes for the strata of `attrs`, in partition order.
pub fn fixed_plan(
    rel: &Relation,
    attrs: &[&str],
    sizes: &[u64],
) -> cvopt_core::alloc::AllocationPlan {
    use cvopt_core::alloc::{AllocationPlan, Method, PlanStratum};
    let part = rel.partition(&strings(attrs)).unwrap();
    assert_eq!(part.len(), sizes.len());
    AllocationPlan {
        method: Method::L2,
        group_attrs: strings(attrs),
        budget: sizes.iter().sum(),
        strata: part
            .groups
            .iter()
            .zip(sizes)
            .map(|((k, rows), &s)| PlanStratum {
                key: k.values.clone(),
                n: rows.len() as u64,
                alpha: None,
                fractional: s as f64,
                integral: s,
                capped: false,
            })
            .collect(),
        objective_fractional: None,
        objective_integral: None,
        linf_q: None,
        max_predicted_cv: None,
        warnings: Vec::new(),
    }
}
