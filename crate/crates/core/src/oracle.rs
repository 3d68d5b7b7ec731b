//! Seeded random instances comparing the sparse hierarchy evaluator with
//! dense enumeration of the unflattened expression.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{brute_force_eval, pi_hte, EvalError, EvalOptions};
use crate::estimand::{flatten, Expr, ProbTerm};
use crate::factor::SparseFactor;
use crate::model::{CausalGraph, Dataset};
use crate::scm::{random_cbn, Distribution};
use crate::Exec;

const NAMES: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

/// A random model, a dataset sampled from it, and an estimand over its
/// variables.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub graph: CausalGraph,
    pub data: Dataset,
    pub expr: Expr,
}

/// Largest entrywise gap between two tables over the same scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Discrepancy {
    pub max_abs: f64,
    pub max_rel: f64,
    pub cells: usize,
}

impl Discrepancy {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

/// Compares two tables cell by cell (absent cells are zero). A scope
/// mismatch counts as an infinite discrepancy.
pub fn compare(a: &SparseFactor, b: &SparseFactor) -> Discrepancy {
    if a.scope() != b.scope() {
        return Discrepancy { max_abs: f64::INFINITY, max_rel: f64::INFINITY, cells: 0 };
    }
    let keys: BTreeSet<Vec<u32>> = a.iter().chain(b.iter()).map(|(k, _)| k.to_vec()).collect();
    let mut d = Discrepancy { cells: keys.len(), ..Default::default() };
    for k in keys {
        let (x, y) = (a.get(&k), b.get(&k));
        let abs = (x - y).abs();
        let scale = x.abs().max(y.abs());
        d.max_abs = d.max_abs.max(abs);
        if abs > 0.0 {
            d.max_rel = d.max_rel.max(abs / scale);
        }
    }
    d
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> CausalGraph {
    let mut s = String::new();
    for name in &NAMES[..n] {
        s.push_str(&format!("var {name} {}\n", rng.random_range(2..=3)));
    }
    for (j, child) in NAMES.iter().enumerate().take(n).skip(1) {
        let mut ps: Vec<usize> = (0..j).collect();
        ps.shuffle(rng);
        for &p in ps.iter().take(rng.random_range(0..=2usize)) {
            s.push_str(&format!("{} -> {child}\n", NAMES[p]));
        }
    }
    if n >= 3 && rng.random_bool(0.5) {
        let a = rng.random_range(0..n - 1);
        let b = rng.random_range(a + 1..n);
        s.push_str(&format!("{} <-> {}\n", NAMES[a], NAMES[b]));
    }
    CausalGraph::parse(&s).expect("generated graph is a DAG")
}

fn random_term(rng: &mut ChaCha8Rng, vars: &[&str]) -> Expr {
    let mut vs = vars.to_vec();
    vs.shuffle(rng);
    let nl = if vs.len() > 1 && rng.random_bool(0.25) { 2 } else { 1 };
    let nr = rng.random_range(0..=2.min(vs.len() - nl));
    Expr::Prob(ProbTerm::new(&vs[..nl], &vs[nl..nl + nr]))
}

fn product(mut items: Vec<Expr>) -> Expr {
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        Expr::Product(items)
    }
}

/// Sums a random non-empty subset of the free variables, leaving `keep`
/// free.
fn maybe_sum(rng: &mut ChaCha8Rng, body: Expr, p: f64, keep: usize) -> Expr {
    let free: Vec<String> = body.free_vars().into_iter().collect();
    if free.len() <= keep || !rng.random_bool(p) {
        return body;
    }
    let mut f = free.clone();
    f.shuffle(rng);
    let k = rng.random_range(1..=free.len() - keep);
    let mut vars: Vec<String> = f.into_iter().take(k).collect();
    vars.sort();
    Expr::Sum { vars, body: Box::new(body) }
}

fn sum_product(rng: &mut ChaCha8Rng, vars: &[&str], depth: usize) -> Expr {
    let mut items: Vec<Expr> = (0..rng.random_range(1..=3)).map(|_| random_term(rng, vars)).collect();
    if depth < 2 && rng.random_bool(0.5) {
        let inner = sum_product(rng, vars, depth + 1);
        items.push(maybe_sum(rng, inner, 0.8, 0));
    }
    product(items)
}

/// Random estimand: a sum-product of depth at most 2, optionally turned
/// into a conditional-style ratio `E / sum[y](E)` (the denominator is a
/// marginal of the numerator, so zero denominators only meet zero
/// numerators), optionally summed again.
pub fn random_expr(rng: &mut ChaCha8Rng, vars: &[&str]) -> Expr {
    let body = sum_product(rng, vars, 0);
    let e = maybe_sum(rng, body, 0.6, 1);
    let free: Vec<String> = e.free_vars().into_iter().collect();
    if free.len() >= 2 && rng.random_bool(0.4) {
        let y = free[rng.random_range(0..free.len())].clone();
        let den = Expr::Sum { vars: vec![y], body: Box::new(e.clone()) };
        let ratio = Expr::Ratio { num: Box::new(e), den: Box::new(den) };
        return maybe_sum(rng, ratio, 0.3, 1);
    }
    e
}

/// Instance `seed`: 3 to 8 variables with 2 or 3 states, 20 to 300 rows.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8);
    let graph = random_graph(&mut rng, n);
    let dist = match rng.random_range(0..3) {
        0 => Distribution::Dirichlet { alpha: 1.0 },
        1 => Distribution::Dirichlet { alpha: 0.3 },
        _ => Distribution::Mixture { alpha: 1.0, weight: 0.5 },
    };
    let cbn = random_cbn(&graph, dist, rng.random());
    let rows = rng.random_range(20..=300);
    let data = cbn.sample(rows, rng.random(), Exec::Sequential);
    let vars: Vec<&str> = NAMES[..n].to_vec();
    let expr = random_expr(&mut rng, &vars);
    Instance { seed, graph, data, expr }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleOutcome {
    pub seed: u64,
    pub estimand: String,
    pub levels: usize,
    pub discrepancy: Discrepancy,
    pub pass: bool,
}

/// Evaluates one instance both ways.
pub fn check_instance(inst: &Instance, tol: f64, dense_limit: f64, exec: Exec) -> Result<OracleOutcome, EvalError> {
    let hier = flatten(&inst.expr);
    let opts = EvalOptions { exec, renormalize: false, ..EvalOptions::default() };
    let report = pi_hte(&hier, &inst.data, &opts)?;
    let brute = brute_force_eval(&inst.expr, &inst.data, &[], dense_limit)?;
    let d = compare(&report.raw_result, &brute);
    Ok(OracleOutcome {
        seed: inst.seed,
        estimand: inst.expr.to_string(),
        levels: hier.levels.len(),
        discrepancy: d,
        pass: d.within(tol),
    })
}

/// Instances `seed .. seed + count`, evaluated with `exec` across
/// instances.
pub fn run_suite(
    count: usize,
    seed: u64,
    tol: f64,
    dense_limit: f64,
    exec: Exec,
) -> Result<Vec<OracleOutcome>, EvalError> {
    exec.map_range(count, |i| {
        let inst = random_instance(seed.wrapping_add(i as u64));
        check_instance(&inst, tol, dense_limit, Exec::Sequential)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible() {
        let a = random_instance(17);
        let b = random_instance(17);
        assert_eq!(a.expr, b.expr);
        assert_eq!(a.data, b.data);
        assert!(a.data.n_rows() >= 20 && a.data.n_rows() <= 300);
        assert!(a.graph.variables().len() <= 8);
    }

    #[test]
    fn estimands_are_well_formed() {
        for s in 0..200 {
            let e = random_instance(s).expr;
            let back = crate::estimand::parse(&e.to_string()).unwrap();
            assert_eq!(back, e, "seed {s}");
        }
    }

    #[test]
    fn compare_flags_scope_mismatch() {
        let a = SparseFactor::scalar(1.0);
        let b = SparseFactor::from_entries(vec![crate::Variable::new("A", 2)], vec![(vec![0], 1.0)]).unwrap();
        assert!(!compare(&a, &b).within(1.0));
        assert!(compare(&b, &b).within(0.0));
    }

    #[test]
    fn small_suite_passes() {
        for o in run_suite(20, 1000, 1e-9, 1e6, Exec::Parallel).unwrap() {
            assert!(o.pass, "{o:?}");
        }
    }
}
