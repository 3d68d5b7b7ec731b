//! Hypergraphs of flat levels, tree decompositions built from elimination
//! orders, greedy hypertree covers and a validator for the four
//! decomposition conditions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::estimand::FlatLevel;
use crate::names::{natural_cmp, sort_names};
use crate::Exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("level has no factors")]
    EmptyLevel,
    #[error("cluster {cluster} cannot be covered: variable {var} is in no hyperedge")]
    UncoverableCluster { cluster: usize, var: String },
    #[error("malformed decomposition at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid decomposition: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// A factor scope as a set of node indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Hyperedge {
    pub factor_id: usize,
    pub vars: Vec<usize>,
    pub is_child_output: bool,
}

/// Nodes are variable names in natural order; one hyperedge per factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Hypergraph {
    pub nodes: Vec<String>,
    pub edges: Vec<Hyperedge>,
}

impl Hypergraph {
    /// Builds a hypergraph from factor scopes; factor ids are list positions.
    pub fn new(scopes: &[Vec<String>]) -> Self {
        Self::with_child_outputs(scopes, &vec![false; scopes.len()])
    }

    pub fn with_child_outputs(scopes: &[Vec<String>], child: &[bool]) -> Self {
        let mut nodes: Vec<String> = scopes.iter().flatten().cloned().collect();
        sort_names(&mut nodes);
        let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let edges = scopes
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let mut vars: Vec<usize> = s.iter().map(|n| index[n.as_str()]).collect();
                vars.sort_unstable();
                vars.dedup();
                Hyperedge { factor_id: id, vars, is_child_output: child[id] }
            })
            .collect();
        Hypergraph { nodes, edges }
    }

    /// One hyperedge per level factor, child output functions included.
    pub fn from_level(level: &FlatLevel) -> Self {
        let scopes: Vec<Vec<String>> = level.factors.iter().map(|f| f.scope()).collect();
        let child: Vec<bool> = level.factors.iter().map(|f| f.is_child_output()).collect();
        Self::with_child_outputs(&scopes, &child)
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| natural_cmp(n, name)).ok()
    }

    pub fn names(&self, vars: &[usize]) -> Vec<String> {
        vars.iter().map(|&v| self.nodes[v].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Cluster {
    /// Node indices, sorted.
    pub chi: Vec<usize>,
    /// Factors multiplied in this cluster.
    pub psi: Vec<usize>,
    /// Factors whose scopes cover `chi`; only used to measure width.
    pub cover: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TreeDecomposition {
    pub clusters: Vec<Cluster>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TdStats {
    pub treewidth: usize,
    pub hyperwidth: usize,
    pub max_degree: usize,
    pub n_clusters: usize,
}

impl TreeDecomposition {
    pub fn stats(&self) -> TdStats {
        let mut deg = vec![0usize; self.clusters.len()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        TdStats {
            treewidth: self.clusters.iter().map(|c| c.chi.len()).max().unwrap_or(0).saturating_sub(1),
            hyperwidth: self.clusters.iter().map(|c| c.cover.len()).max().unwrap_or(0),
            max_degree: deg.into_iter().max().unwrap_or(0),
            n_clusters: self.clusters.len(),
        }
    }

    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == u {
                    Some(b)
                } else if b == u {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        n.sort_unstable();
        n
    }

    pub fn separator(&self, u: usize, v: usize) -> Vec<usize> {
        intersect(&self.clusters[u].chi, &self.clusters[v].chi)
    }

    /// Parent of every cluster when the tree hangs from `root`.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.clusters.len()];
        let mut seen = vec![false; self.clusters.len()];
        let mut stack = vec![self.root];
        seen[self.root] = true;
        while let Some(u) = stack.pop() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    stack.push(v);
                }
            }
        }
        parent
    }

    /// Picks the cluster holding the most of `free` (ties: lowest id).
    pub fn choose_root(&mut self, h: &Hypergraph, free: &[String]) {
        let ids: BTreeSet<usize> = free.iter().filter_map(|n| h.node_index(n)).collect();
        let mut best = (0, 0);
        for (i, c) in self.clusters.iter().enumerate() {
            let k = c.chi.iter().filter(|v| ids.contains(v)).count();
            if k > best.1 {
                best = (i, k);
            }
        }
        self.root = best.0;
    }

    /// Stable text form, readable by [`parse_decomposition`].
    pub fn to_text(&self, h: &Hypergraph) -> String {
        let mut s = String::new();
        for (i, c) in self.clusters.iter().enumerate() {
            let ids = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            s.push_str(&format!(
                "cluster {i}: chi={{{}}} psi={{{}}} cover={{{}}}\n",
                h.names(&c.chi).join(","),
                ids(&c.psi),
                ids(&c.cover)
            ));
        }
        let mut edges = self.edges.clone();
        for e in &mut edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        for (a, b) in edges {
            s.push_str(&format!("edge {a} {b}\n"));
        }
        s.push_str(&format!("root {}\n", self.root));
        s
    }
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().filter(|x| b.binary_search(x).is_ok()).copied().collect()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.binary_search(x).is_ok())
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut u: Vec<usize> = a.iter().chain(b).copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

// ---- GYO --------------------------------------------------------------------

/// Result of the GYO ear-removal test.
#[derive(Clone, Debug, PartialEq)]
pub struct GyoResult {
    pub is_hypertree: bool,
    pub join_tree: Option<TreeDecomposition>,
}

/// Repeatedly drops nodes that occur in a single live hyperedge and
/// hyperedges contained in another live one. The hypergraph is acyclic iff
/// this leaves a single hyperedge; the containment witnesses then form a
/// join tree with one cluster per hyperedge.
pub fn gyo_acyclic(h: &Hypergraph) -> GyoResult {
    let m = h.edges.len();
    if m == 0 {
        return GyoResult { is_hypertree: true, join_tree: None };
    }
    let mut live: Vec<bool> = vec![true; m];
    let mut sets: Vec<Vec<usize>> = h.edges.iter().map(|e| e.vars.clone()).collect();
    let mut parent: Vec<Option<usize>> = vec![None; m];
    let mut n_live = m;
    loop {
        let mut changed = false;
        let mut count = vec![0usize; h.nodes.len()];
        for (i, s) in sets.iter().enumerate() {
            if live[i] {
                for &v in s {
                    count[v] += 1;
                }
            }
        }
        for (i, s) in sets.iter_mut().enumerate() {
            if live[i] {
                let before = s.len();
                s.retain(|&v| count[v] > 1);
                changed |= s.len() != before;
            }
        }
        if n_live > 1 {
            'find: for i in 0..m {
                if !live[i] {
                    continue;
                }
                for j in 0..m {
                    if i != j && live[j] && is_subset(&sets[i], &sets[j]) {
                        live[i] = false;
                        parent[i] = Some(j);
                        n_live -= 1;
                        changed = true;
                        break 'find;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    if n_live > 1 {
        return GyoResult { is_hypertree: false, join_tree: None };
    }
    let clusters: Vec<Cluster> = h
        .edges
        .iter()
        .map(|e| Cluster { chi: e.vars.clone(), psi: vec![e.factor_id], cover: vec![e.factor_id] })
        .collect();
    let edges: Vec<(usize, usize)> = parent.iter().enumerate().filter_map(|(i, p)| p.map(|p| (p, i))).collect();
    let mut td = TreeDecomposition { clusters, edges, root: 0 };
    merge_subsumed(&mut td);
    GyoResult { is_hypertree: true, join_tree: Some(td) }
}

// ---- elimination orders ------------------------------------------------------

struct Bits {
    words: usize,
    data: Vec<u64>,
}

impl Bits {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Bits { words, data: vec![0; n * words] }
    }
    fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }
    fn set(&mut self, i: usize, j: usize) {
        self.data[i * self.words + j / 64] |= 1 << (j % 64);
    }
    fn clear(&mut self, i: usize, j: usize) {
        self.data[i * self.words + j / 64] &= !(1 << (j % 64));
    }
    fn members(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (w, &word) in self.row(i).iter().enumerate() {
            let mut x = word;
            while x != 0 {
                let b = x.trailing_zeros() as usize;
                out.push(w * 64 + b);
                x &= x - 1;
            }
        }
        out
    }
}

fn primal_graph(h: &Hypergraph) -> Bits {
    let mut adj = Bits::new(h.nodes.len());
    for e in &h.edges {
        for &a in &e.vars {
            for &b in &e.vars {
                if a != b {
                    adj.set(a, b);
                }
            }
        }
    }
    adj
}

/// Greedy min-fill elimination order over the primal graph. Ties on
/// (fill, degree) go to the smallest name, or to a seeded random choice
/// when `tie_seed` is given.
pub fn min_fill_order(h: &Hypergraph, tie_seed: Option<u64>) -> Vec<usize> {
    let n = h.nodes.len();
    let mut adj = primal_graph(h);
    let mut alive = vec![true; n];
    let mut rng = tie_seed.map(ChaCha8Rng::seed_from_u64);
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Vec<usize> = Vec::new();
        let mut best_key = (usize::MAX, usize::MAX);
        for v in (0..n).filter(|&v| alive[v]) {
            let nb = adj.members(v);
            let mut fill = 0;
            for (k, &a) in nb.iter().enumerate() {
                let row = adj.row(a);
                fill += nb[k + 1..].iter().filter(|&&b| row[b / 64] & (1 << (b % 64)) == 0).count();
            }
            let key = (fill, nb.len());
            if key < best_key {
                best_key = key;
                best.clear();
            }
            if key == best_key {
                best.push(v);
            }
        }
        let v = match rng.as_mut() {
            Some(r) => *best.choose(r).expect("at least one live node"),
            None => best[0],
        };
        let nb = adj.members(v);
        for &a in &nb {
            for &b in &nb {
                if a != b {
                    adj.set(a, b);
                }
            }
            adj.clear(a, v);
        }
        alive[v] = false;
        order.push(v);
    }
    order
}

/// Largest cluster size minus one produced by eliminating in `order`.
pub fn induced_width(h: &Hypergraph, order: &[usize]) -> usize {
    let mut adj = primal_graph(h);
    let mut w = 0;
    for &v in order {
        let nb = adj.members(v);
        w = w.max(nb.len());
        for &a in &nb {
            for &b in &nb {
                if a != b {
                    adj.set(a, b);
                }
            }
            adj.clear(a, v);
        }
    }
    w
}

/// Bucket-elimination tree decomposition. Eliminating `v` creates the
/// cluster `{v} ∪ N(v)` over the not yet eliminated neighbours; it hangs
/// below the bucket of the next of those neighbours to be eliminated.
/// Each factor goes to the bucket of the first of its variables to be
/// eliminated, which is the only bucket guaranteed to hold its whole scope.
pub fn tree_decomposition(h: &Hypergraph, order: &[usize]) -> TreeDecomposition {
    let n = h.nodes.len();
    if n == 0 {
        let psi = h.edges.iter().map(|e| e.factor_id).collect();
        return TreeDecomposition {
            clusters: vec![Cluster { chi: vec![], psi, cover: vec![] }],
            edges: vec![],
            root: 0,
        };
    }
    let mut pos = vec![0usize; n];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    let mut adj = primal_graph(h);
    let mut clusters: Vec<Cluster> = Vec::with_capacity(n);
    let mut parent_var: Vec<Option<usize>> = Vec::with_capacity(n);
    for &v in order {
        let nb = adj.members(v);
        let mut chi = nb.clone();
        chi.push(v);
        chi.sort_unstable();
        parent_var.push(nb.iter().copied().min_by_key(|&a| pos[a]));
        clusters.push(Cluster { chi, psi: vec![], cover: vec![] });
        for &a in &nb {
            for &b in &nb {
                if a != b {
                    adj.set(a, b);
                }
            }
            adj.clear(a, v);
        }
    }
    let mut edges = Vec::new();
    let mut roots = Vec::new();
    for (i, p) in parent_var.iter().enumerate() {
        match p {
            Some(a) => edges.push((pos[*a], i)),
            None => roots.push(i),
        }
    }
    for w in roots.windows(2) {
        edges.push((w[1], w[0]));
    }
    let last = *roots.last().expect("elimination leaves at least one root");
    for e in &h.edges {
        let c = e.vars.iter().map(|&v| pos[v]).min().unwrap_or(last);
        clusters[c].psi.push(e.factor_id);
    }
    let mut td = TreeDecomposition { clusters, edges, root: last };
    merge_subsumed(&mut td);
    td
}

/// Folds every cluster whose `chi` is contained in a neighbour's into that
/// neighbour.
pub fn merge_subsumed(td: &mut TreeDecomposition) {
    loop {
        let found = td.edges.iter().enumerate().find_map(|(k, &(a, b))| {
            if is_subset(&td.clusters[a].chi, &td.clusters[b].chi) {
                Some((k, a, b))
            } else if is_subset(&td.clusters[b].chi, &td.clusters[a].chi) {
                Some((k, b, a))
            } else {
                None
            }
        });
        let Some((k, gone, keep)) = found else { break };
        td.edges.remove(k);
        let psi = std::mem::take(&mut td.clusters[gone].psi);
        td.clusters[keep].psi.extend(psi);
        td.clusters[keep].psi.sort_unstable();
        for e in &mut td.edges {
            if e.0 == gone {
                e.0 = keep;
            }
            if e.1 == gone {
                e.1 = keep;
            }
        }
        if td.root == gone {
            td.root = keep;
        }
        td.clusters.remove(gone);
        for e in &mut td.edges {
            if e.0 > gone {
                e.0 -= 1;
            }
            if e.1 > gone {
                e.1 -= 1;
            }
        }
        if td.root > gone {
            td.root -= 1;
        }
    }
    for c in &mut td.clusters {
        c.psi.sort_unstable();
    }
}

// ---- covers -----------------------------------------------------------------

/// Greedy set cover of every cluster's `chi` by hyperedge scopes: largest
/// residual intersection first, ties to the lower factor id. When
/// `allow_child_outputs` is false, child output functions are not used.
pub fn hypertree_cover(
    td: &mut TreeDecomposition,
    h: &Hypergraph,
    allow_child_outputs: bool,
) -> Result<(), DecompError> {
    for (ci, c) in td.clusters.iter_mut().enumerate() {
        c.cover = greedy_cover(&c.chi, h, allow_child_outputs)
            .map_err(|var| DecompError::UncoverableCluster { cluster: ci, var: h.nodes[var].clone() })?;
    }
    Ok(())
}

fn greedy_cover(chi: &[usize], h: &Hypergraph, allow_child_outputs: bool) -> Result<Vec<usize>, usize> {
    let mut residual: Vec<usize> = chi.to_vec();
    let mut cover = Vec::new();
    while !residual.is_empty() {
        let mut best: Option<(usize, usize)> = None;
        for e in &h.edges {
            if e.is_child_output && !allow_child_outputs {
                continue;
            }
            let k = intersect(&residual, &e.vars).len();
            if k > 0 && best.is_none_or(|(bk, _)| k > bk) {
                best = Some((k, e.factor_id));
            }
        }
        let Some((_, id)) = best else { return Err(residual[0]) };
        let e = &h.edges[id];
        residual.retain(|v| e.vars.binary_search(v).is_err());
        cover.push(id);
    }
    Ok(cover)
}

/// Width of the greedy cover when child output functions may not be used,
/// or `None` when some cluster then becomes uncoverable.
pub fn hyperwidth_without_child_outputs(td: &TreeDecomposition, h: &Hypergraph) -> Option<usize> {
    let mut hw = 0;
    for c in &td.clusters {
        hw = hw.max(greedy_cover(&c.chi, h, false).ok()?.len());
    }
    Some(hw)
}

// ---- validation --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Condition {
    /// Every factor sits in exactly one cluster.
    FactorPlacement,
    /// A placed factor's scope lies inside its cluster.
    ScopeContainment,
    /// The clusters holding a variable are connected.
    RunningIntersection,
    /// The cover's scopes contain the cluster's variables.
    Cover,
    /// The cluster graph is a tree.
    Tree,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::FactorPlacement => "condition 1 (factor placement)",
            Condition::ScopeContainment => "condition 2 (scope containment)",
            Condition::RunningIntersection => "condition 3 (running intersection)",
            Condition::Cover => "condition 4 (cover)",
            Condition::Tree => "tree structure",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub condition: Condition,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.condition, self.detail)
    }
}

/// Every violated condition; empty when `td` is a valid decomposition of `h`.
pub fn validate(td: &TreeDecomposition, h: &Hypergraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |condition, detail: String| out.push(Violation { condition, detail });
    let m = td.clusters.len();

    let mut tree_ok = m > 0;
    if m == 0 {
        bad(Condition::Tree, "no clusters".into());
    }
    if td.root >= m && m > 0 {
        bad(Condition::Tree, format!("root {} is not a cluster", td.root));
        tree_ok = false;
    }
    for &(a, b) in &td.edges {
        if a >= m || b >= m || a == b {
            bad(Condition::Tree, format!("edge {a}-{b} is not between two distinct clusters"));
            tree_ok = false;
        }
    }
    if tree_ok {
        if td.edges.len() + 1 != m {
            bad(Condition::Tree, format!("{} clusters need {} edges, found {}", m, m - 1, td.edges.len()));
        }
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in td.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(u) = seen.iter().position(|s| !s) {
            bad(Condition::Tree, format!("cluster {u} is disconnected"));
            tree_ok = false;
        }
    }

    let mut home = vec![Vec::new(); h.edges.len()];
    for (ci, c) in td.clusters.iter().enumerate() {
        for &f in &c.psi {
            match home.get_mut(f) {
                Some(v) => v.push(ci),
                None => bad(Condition::FactorPlacement, format!("cluster {ci} holds unknown factor {f}")),
            }
        }
        for &f in &c.cover {
            if f >= h.edges.len() {
                bad(Condition::Cover, format!("cluster {ci} covers with unknown factor {f}"));
            }
        }
    }
    for (f, cs) in home.iter().enumerate() {
        match cs.len() {
            1 => {
                let c = &td.clusters[cs[0]];
                for &v in &h.edges[f].vars {
                    if c.chi.binary_search(&v).is_err() {
                        bad(
                            Condition::ScopeContainment,
                            format!("factor {f} in cluster {} uses {} outside chi", cs[0], h.nodes[v]),
                        );
                    }
                }
            }
            0 => bad(Condition::FactorPlacement, format!("factor {f} is in no cluster")),
            _ => bad(Condition::FactorPlacement, format!("factor {f} is in clusters {cs:?}")),
        }
    }

    if tree_ok {
        for (v, name) in h.nodes.iter().enumerate() {
            let holders: Vec<usize> = (0..m).filter(|&c| td.clusters[c].chi.binary_search(&v).is_ok()).collect();
            if holders.len() <= 1 {
                continue;
            }
            let mut seen = BTreeSet::from([holders[0]]);
            let mut stack = vec![holders[0]];
            while let Some(u) = stack.pop() {
                for w in td.neighbors(u) {
                    if td.clusters[w].chi.binary_search(&v).is_ok() && seen.insert(w) {
                        stack.push(w);
                    }
                }
            }
            if seen.len() != holders.len() {
                let rest: Vec<usize> = holders.iter().filter(|c| !seen.contains(c)).copied().collect();
                bad(
                    Condition::RunningIntersection,
                    format!("{name} is in clusters {:?} and {:?} without a connecting path", seen, rest),
                );
            }
        }
    }

    for (ci, c) in td.clusters.iter().enumerate() {
        let covered: Vec<usize> =
            c.cover.iter().filter(|&&f| f < h.edges.len()).fold(Vec::new(), |acc, &f| union(&acc, &h.edges[f].vars));
        for &v in &c.chi {
            if covered.binary_search(&v).is_err() {
                bad(Condition::Cover, format!("{} in cluster {ci} is not covered", h.nodes[v]));
            }
        }
    }
    out
}

// ---- text format ----------------------------------------------------------

/// Decompositions read from a file, keyed by level id (level 0 when the
/// file has no `level` lines). Variables are still names at this point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecompositionFile {
    pub levels: BTreeMap<usize, RawDecomposition>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawDecomposition {
    pub clusters: Vec<RawCluster>,
    pub edges: Vec<(usize, usize)>,
    pub root: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCluster {
    pub chi: Vec<String>,
    pub psi: Vec<usize>,
    pub cover: Option<Vec<usize>>,
}

/// Reads `cluster <id>: chi={..} psi={..} [cover={..}]`, `edge <a> <b>`,
/// `root <id>` and `level <n>` lines. Cluster ids are labels; they are
/// renumbered in order of appearance.
pub fn parse_decomposition(text: &str) -> Result<DecompositionFile, DecompError> {
    let mut file = DecompositionFile::default();
    let mut level = 0usize;
    let mut labels: BTreeMap<(usize, String), usize> = BTreeMap::new();
    let mut pending_edges: Vec<(usize, usize, String, String)> = Vec::new();
    let mut pending_roots: Vec<(usize, usize, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| DecompError::Parse { line: line_no, msg: msg.to_string() };
        let (head, rest) =
            line.split_once(char::is_whitespace).ok_or_else(|| err("expected a keyword and arguments"))?;
        match head {
            "level" => level = rest.trim().parse().map_err(|_| err("level id must be an integer"))?,
            "cluster" => {
                let (label, body) = rest.split_once(':').ok_or_else(|| err("expected `cluster <id>: ...`"))?;
                let label = label.trim().to_string();
                let mut chi = None;
                let mut psi = None;
                let mut cover = None;
                let mut body = body.trim();
                while !body.is_empty() {
                    let (key, after) = body.split_once('=').ok_or_else(|| err("expected key={...}"))?;
                    let after = after.trim_start();
                    let inner_end = after.find('}').ok_or_else(|| err("unclosed `{`"))?;
                    let inner = after.strip_prefix('{').ok_or_else(|| err("expected `{`"))?;
                    let items: Vec<String> = inner[..inner_end - 1]
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                    let ids = || -> Result<Vec<usize>, DecompError> {
                        items.iter().map(|s| s.parse().map_err(|_| err("factor ids must be integers"))).collect()
                    };
                    match key.trim() {
                        "chi" => chi = Some(items.clone()),
                        "psi" => psi = Some(ids()?),
                        "cover" => cover = Some(ids()?),
                        other => return Err(err(&format!("unknown key {other}"))),
                    }
                    body = after[inner_end + 1..].trim_start();
                }
                let entry = file.levels.entry(level).or_default();
                let id = entry.clusters.len();
                if labels.insert((level, label), id).is_some() {
                    return Err(err("duplicate cluster id"));
                }
                entry.clusters.push(RawCluster {
                    chi: chi.ok_or_else(|| err("missing chi"))?,
                    psi: psi.ok_or_else(|| err("missing psi"))?,
                    cover,
                });
            }
            "edge" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(err("expected `edge <id> <id>`"));
                }
                pending_edges.push((line_no, level, parts[0].to_string(), parts[1].to_string()));
            }
            "root" => pending_roots.push((line_no, level, rest.trim().to_string())),
            other => return Err(err(&format!("unknown keyword {other}"))),
        }
    }
    let resolve = |line: usize, level: usize, label: &str| {
        labels
            .get(&(level, label.to_string()))
            .copied()
            .ok_or_else(|| DecompError::Parse { line, msg: format!("unknown cluster id {label}") })
    };
    for (line, level, a, b) in pending_edges {
        let (a, b) = (resolve(line, level, &a)?, resolve(line, level, &b)?);
        file.levels.entry(level).or_default().edges.push((a, b));
    }
    for (line, level, r) in pending_roots {
        let r = resolve(line, level, &r)?;
        file.levels.entry(level).or_default().root = Some(r);
    }
    Ok(file)
}

/// Binds a raw decomposition to `h`, fills a greedy cover where none was
/// given, picks a root if none was named, and rejects any violation.
pub fn bind_decomposition(
    raw: &RawDecomposition,
    h: &Hypergraph,
    free: &[String],
) -> Result<TreeDecomposition, DecompError> {
    let mut clusters = Vec::with_capacity(raw.clusters.len());
    for (i, c) in raw.clusters.iter().enumerate() {
        let mut chi = Vec::with_capacity(c.chi.len());
        for name in &c.chi {
            let v = h.node_index(name).ok_or_else(|| DecompError::Parse {
                line: 0,
                msg: format!("cluster {i} names {name}, which no factor of the level uses"),
            })?;
            chi.push(v);
        }
        chi.sort_unstable();
        chi.dedup();
        let cover = match &c.cover {
            Some(cv) => cv.clone(),
            None => greedy_cover(&chi, h, true)
                .map_err(|var| DecompError::UncoverableCluster { cluster: i, var: h.nodes[var].clone() })?,
        };
        let mut psi = c.psi.clone();
        psi.sort_unstable();
        clusters.push(Cluster { chi, psi, cover });
    }
    let mut td = TreeDecomposition { clusters, edges: raw.edges.clone(), root: raw.root.unwrap_or(0) };
    let violations = validate(&td, h);
    if !violations.is_empty() {
        return Err(DecompError::Invalid(violations));
    }
    if raw.root.is_none() {
        td.choose_root(h, free);
    }
    Ok(td)
}

/// Parses and binds a single-level decomposition text.
pub fn load_decomposition(text: &str, h: &Hypergraph, free: &[String]) -> Result<TreeDecomposition, DecompError> {
    let file = parse_decomposition(text)?;
    let raw = file
        .levels
        .get(&0)
        .or_else(|| file.levels.values().next())
        .ok_or(DecompError::Parse { line: 0, msg: "no clusters".into() })?;
    bind_decomposition(raw, h, free)
}

// ---- pipeline -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    JoinTree,
    MinFill,
    Supplied,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DecomposeOptions {
    /// Extra min-fill runs with seeded tie breaking.
    pub restarts: usize,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposed {
    pub td: TreeDecomposition,
    pub stats: TdStats,
    pub hw_without_child_outputs: Option<usize>,
    pub method: Method,
}

impl Decomposed {
    pub fn from_td(td: TreeDecomposition, h: &Hypergraph, method: Method) -> Self {
        let stats = td.stats();
        let hw_without_child_outputs = if h.edges.iter().any(|e| e.is_child_output) {
            hyperwidth_without_child_outputs(&td, h)
        } else {
            Some(stats.hyperwidth)
        };
        Decomposed { td, stats, hw_without_child_outputs, method }
    }
}

/// Join tree when the hypergraph is acyclic, otherwise the best (by
/// hyperwidth, then treewidth) of a deterministic min-fill run and
/// `restarts` seeded ones. The root holds the most free variables.
pub fn decompose(h: &Hypergraph, free: &[String], opts: DecomposeOptions) -> Result<Decomposed, DecompError> {
    if h.is_empty() {
        return Err(DecompError::EmptyLevel);
    }
    let finish = |mut td: TreeDecomposition| -> Result<TreeDecomposition, DecompError> {
        td.choose_root(h, free);
        hypertree_cover(&mut td, h, true)?;
        Ok(td)
    };
    if let Some(jt) = gyo_acyclic(h).join_tree {
        let td = finish(jt)?;
        debug_assert!(validate(&td, h).is_empty());
        return Ok(Decomposed::from_td(td, h, Method::JoinTree));
    }
    let candidates = opts.exec.map_range(opts.restarts + 1, |i| {
        let seed = if i == 0 { None } else { Some(opts.seed.wrapping_add(i as u64)) };
        finish(tree_decomposition(h, &min_fill_order(h, seed)))
    });
    let mut best: Option<TreeDecomposition> = None;
    for td in candidates {
        let td = td?;
        let key = |t: &TreeDecomposition| {
            let s = t.stats();
            (s.hyperwidth, s.treewidth)
        };
        if best.as_ref().is_none_or(|b| key(&td) < key(b)) {
            best = Some(td);
        }
    }
    let td = best.expect("at least one candidate");
    let v = validate(&td, h);
    if !v.is_empty() {
        return Err(DecompError::Invalid(v));
    }
    Ok(Decomposed::from_td(td, h, Method::MinFill))
}
