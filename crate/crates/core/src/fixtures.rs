//! Reference models and estimands shipped with the crate, plus generators
//! for the chain family and for stress datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{CausalGraph, Dataset, Variable};

pub const CHAIN7_GRAPH: &str = include_str!("../fixtures/chain7.graph");
pub const CHAIN7_ESTIMAND: &str = include_str!("../fixtures/chain7.est");
/// One cluster per table of the flattened chain-7 level, hyperwidth 1.
pub const CHAIN7_TD: &str = include_str!("../fixtures/chain7.td");

pub const NAPKIN_GRAPH: &str = include_str!("../fixtures/napkin.graph");
pub const NAPKIN_ESTIMAND: &str = include_str!("../fixtures/napkin.est");

pub const CONE_CLOUD_GRAPH: &str = include_str!("../fixtures/cone_cloud.graph");
pub const CONE_CLOUD_ESTIMAND: &str = include_str!("../fixtures/cone_cloud.est");
/// Two-cluster decomposition of the flattened cone-cloud level, hyperwidth 2.
pub const CONE_CLOUD_TD: &str = include_str!("../fixtures/cone_cloud.td");

pub const CHAIN99_GRAPH: &str = include_str!("../fixtures/chain99.graph");
pub const CHAIN99_ESTIMAND: &str = include_str!("../fixtures/chain99.est");

/// Chain `V0 -> ... -> V{n-1}` with `V{2j} <-> V{2j+2}` confounders.
pub fn chain_graph_text(n: usize, k: u32) -> String {
    let mut s = String::new();
    for i in 0..n {
        s.push_str(&format!("var V{i} {k}\n"));
    }
    for i in 0..n.saturating_sub(1) {
        s.push_str(&format!("V{i} -> V{}\n", i + 1));
    }
    for j in 0..n.saturating_sub(1) / 2 {
        s.push_str(&format!("V{} <-> V{}\n", 2 * j, 2 * j + 2));
    }
    s
}

/// `P(V{n-1} | do(V0))` on the chain: odd-indexed conditionals outside,
/// even-indexed ones under an inner sum over `V0`.
pub fn chain_estimand_text(n: usize) -> String {
    assert!(n >= 3, "chain estimand needs at least 3 variables");
    let cond = |i: usize| {
        let ps: Vec<String> = (0..i).map(|j| format!("V{j}")).collect();
        format!("P(V{i}|{})", ps.join(","))
    };
    let odd: Vec<String> = (1..n).filter(|i| i % 2 == 1).map(cond).collect();
    let even: Vec<String> = (2..n).filter(|i| i % 2 == 0).map(cond).collect();
    let sv: Vec<String> = (1..n - 1).map(|i| format!("V{i}")).collect();
    format!("P(V{} | do(V0)) = sum[{}]({} sum[V0]({} P(V0)))", n - 1, sv.join(","), odd.join(" "), even.join(" "))
}

/// The cone-cloud graph with every domain widened to `k` states.
pub fn cone_cloud_graph(k: u32) -> CausalGraph {
    let text: String = CONE_CLOUD_GRAPH
        .lines()
        .map(|l| match l.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["var", name, _] => format!("var {name} {k}\n"),
            _ => format!("{l}\n"),
        })
        .collect();
    CausalGraph::parse(&text).expect("shipped graph is well formed")
}

/// Cone-cloud variables shared by its two widest outer tables.
pub const CONE_CLOUD_SHARED: [&str; 6] = ["V4", "V7", "V8", "V11", "V12", "V13"];

/// Cone-cloud data in which the variables shared by the two widest outer
/// tables are constant and every other variable is uniform over `k` states.
/// Joining those two tables then pairs almost every row with every row,
/// which drives the hyperwidth-2 cluster towards its `n²` table bound.
pub fn cone_cloud_stress_data(n_rows: usize, k: u32, seed: u64) -> (CausalGraph, Dataset) {
    let mut text = String::new();
    for i in 0..15 {
        text.push_str(&format!("var V{i} {k}\n"));
    }
    let graph = CausalGraph::parse(&text).expect("generated graph is well formed");
    let columns: Vec<Variable> = graph.variables().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<u32>> = (0..n_rows)
        .map(|_| {
            columns
                .iter()
                .map(|v| if CONE_CLOUD_SHARED.contains(&v.name()) { 0 } else { rng.random_range(0..k) })
                .collect()
        })
        .collect();
    let data = Dataset::new(columns, rows).expect("generated rows are in range");
    (graph, data)
}
