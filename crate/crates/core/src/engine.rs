//! Cluster-tree elimination over relational factors and the level-by-level
//! driver that evaluates a flattened estimand hierarchy on a dataset.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::decomposition::{
    bind_decomposition, decompose, DecompError, DecomposeOptions, Decomposed, DecompositionFile, Hypergraph, Method,
    TreeDecomposition,
};
use crate::estimand::{dense_expr_eval, DenseError, Estimand, Expr, Hierarchy, LevelFactor, TermBindings};
use crate::factor::{FactorError, SparseFactor};
use crate::model::{empirical_prob_with, Dataset, ModelError, Variable};
use crate::names::{base_name, sort_names};
use crate::Exec;

/// Default cap on the entries of any single materialized table.
pub const DEFAULT_MAX_ENTRIES: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error("factor {0} has no bound table")]
    UnboundFactor(usize),
    #[error("{count} numerator entries meet a zero denominator in level {level}")]
    DivisionInconsistency { level: usize, count: usize },
    #[error("a table reached {entries} entries, above the limit {limit}")]
    ResourceLimit { entries: usize, limit: usize },
    #[error("invalid intervention: {0}")]
    InvalidDo(String),
}

impl EvalError {
    pub fn is_resource(&self) -> bool {
        matches!(self, EvalError::ResourceLimit { .. } | EvalError::Dense(DenseError::DenseLimitExceeded { .. }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CteOptions {
    pub exec: Exec,
    pub max_entries: usize,
}

impl Default for CteOptions {
    fn default() -> Self {
        CteOptions { exec: Exec::default(), max_entries: DEFAULT_MAX_ENTRIES }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CteOutput {
    pub result: SparseFactor,
    pub max_table_entries: usize,
    pub total_entries: usize,
    /// Entries dropped because an inverted factor had no matching entry.
    pub zero_denominator_drops: usize,
}

#[derive(Clone, Copy, Default)]
struct Tally {
    max: usize,
    total: usize,
    drops: usize,
}

impl Tally {
    fn see(&mut self, f: &SparseFactor, limit: usize) -> Result<(), EvalError> {
        self.max = self.max.max(f.len());
        self.total += f.len();
        if f.len() > limit {
            return Err(EvalError::ResourceLimit { entries: f.len(), limit });
        }
        Ok(())
    }

    fn absorb(&mut self, o: Tally) {
        self.max = self.max.max(o.max);
        self.total += o.total;
        self.drops += o.drops;
    }
}

/// Multiplies factors starting from the widest, always adding next the
/// factor that brings in the fewest new variables.
fn multiply_greedy(
    fs: &[&SparseFactor],
    tally: &mut Tally,
    limit: usize,
    exec: Exec,
) -> Result<SparseFactor, EvalError> {
    if fs.is_empty() {
        return Ok(SparseFactor::one());
    }
    let mut left: Vec<usize> = (0..fs.len()).collect();
    let start = *left.iter().max_by_key(|&&i| (fs[i].arity(), std::cmp::Reverse(i))).unwrap();
    left.retain(|&i| i != start);
    let mut acc = fs[start].clone();
    let mut vars: BTreeSet<String> = acc.scope_names().into_iter().map(String::from).collect();
    while !left.is_empty() {
        let key = |i: usize| {
            let names = fs[i].scope_names();
            let new = names.iter().filter(|n| !vars.contains(**n)).count();
            (new, std::cmp::Reverse(names.len() - new), fs[i].len(), i)
        };
        let pos = (0..left.len()).min_by_key(|&p| key(left[p])).unwrap();
        let next = left.remove(pos);
        acc = acc.product_with(fs[next], exec)?;
        tally.see(&acc, limit)?;
        vars.extend(fs[next].scope_names().into_iter().map(String::from));
    }
    Ok(acc)
}

/// Cluster-tree elimination, leaves to root. In cluster `u` the tables of
/// `ψ(u)` are multiplied, then the children's messages, then any inverted
/// child-output tables. The message to the parent keeps the separator and
/// every free variable, so free variables spread over several clusters
/// reach the root. The root projects onto `free`.
///
/// `inverse[f]` marks tables holding `1/O` of a child level. A cluster
/// product entry that finds no partner in such a table is a zero
/// denominator: below the root it is dropped and counted; at the root the
/// numerator is known to be non-zero there, which is an inconsistency.
pub fn cte(
    td: &TreeDecomposition,
    h: &Hypergraph,
    factors: &[SparseFactor],
    inverse: &[bool],
    free: &[String],
    opts: CteOptions,
    level: usize,
) -> Result<CteOutput, EvalError> {
    if factors.len() < h.edges.len() {
        return Err(EvalError::UnboundFactor(factors.len()));
    }
    let parents = td.parents();
    let mut children = vec![Vec::new(); td.clusters.len()];
    for (c, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(c);
        }
    }
    let free_set: BTreeSet<&str> = free.iter().map(|s| s.as_str()).collect();
    let ctx = Ctx { td, h, factors, inverse, free: &free_set, children: &children, parents: &parents, opts, level };
    let (result, tally) = ctx.visit(td.root)?;
    Ok(CteOutput {
        result,
        max_table_entries: tally.max,
        total_entries: tally.total,
        zero_denominator_drops: tally.drops,
    })
}

struct Ctx<'a> {
    td: &'a TreeDecomposition,
    h: &'a Hypergraph,
    factors: &'a [SparseFactor],
    inverse: &'a [bool],
    free: &'a BTreeSet<&'a str>,
    children: &'a [Vec<usize>],
    parents: &'a [Option<usize>],
    opts: CteOptions,
    level: usize,
}

impl Ctx<'_> {
    fn visit(&self, u: usize) -> Result<(SparseFactor, Tally), EvalError> {
        let limit = self.opts.max_entries;
        let msgs = self.opts.exec.map(&self.children[u], |&c| self.visit(c));
        let mut tally = Tally::default();
        let cluster = &self.td.clusters[u];
        let mut plain = Vec::new();
        let mut inv = Vec::new();
        for &f in &cluster.psi {
            let t = self.factors.get(f).ok_or(EvalError::UnboundFactor(f))?;
            tally.see(t, limit)?;
            if self.inverse.get(f).copied().unwrap_or(false) {
                inv.push(t);
            } else {
                plain.push(t);
            }
        }
        let exec = self.opts.exec;
        let mut acc = multiply_greedy(&plain, &mut tally, limit, exec)?;
        for m in msgs {
            let (m, t) = m?;
            tally.absorb(t);
            acc = acc.product_with(&m, exec)?;
            tally.see(&acc, limit)?;
        }
        for g in inv {
            let (p, misses) = acc.product_counting_misses(g, exec)?;
            if misses > 0 {
                if self.parents[u].is_none() {
                    return Err(EvalError::DivisionInconsistency { level: self.level, count: misses });
                }
                tally.drops += misses;
            }
            acc = p;
            tally.see(&acc, limit)?;
        }
        let keep: Vec<&str> = match self.parents[u] {
            None => acc.scope_names().into_iter().filter(|n| self.free.contains(n)).collect(),
            Some(p) => {
                let sep = self.td.separator(u, p);
                let sep: BTreeSet<&str> = sep.iter().map(|&v| self.h.nodes[v].as_str()).collect();
                acc.scope_names().into_iter().filter(|n| sep.contains(n) || self.free.contains(n)).collect()
            }
        };
        let out = acc.project_onto_with(&keep, exec);
        tally.see(&out, limit)?;
        Ok((out, tally))
    }
}

// ---- bounds -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Treewidth,
    Hyperwidth,
}

/// Complexity bounds of one level, as base-10 logarithms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictedBounds {
    pub n: usize,
    pub k: u32,
    pub w: usize,
    pub hw: usize,
    pub t: usize,
    /// `k^(w+1)`: largest dense cluster table.
    pub tw_table_log10: f64,
    /// `n·k^(w+1)`.
    pub tw_time_log10: f64,
    /// `t^hw`: largest relational cluster table.
    pub hw_table_log10: f64,
    /// `n·hw·ln t·t^hw`, floored at `n`.
    pub hw_time_log10: f64,
    pub tighter: BoundKind,
}

impl PredictedBounds {
    pub fn hw_table_bound(&self) -> f64 {
        10f64.powf(self.hw_table_log10)
    }
}

/// `n` variables, largest domain `k`, treewidth `w`, hyperwidth `hw`,
/// tightness `t`.
pub fn predicted_bounds(n: usize, k: u32, w: usize, hw: usize, t: usize) -> PredictedBounds {
    let ln = (n.max(1) as f64).log10();
    let tw_table = (w as f64 + 1.0) * (k.max(1) as f64).log10();
    let tl = (t.max(1) as f64).log10();
    let hw_table = hw as f64 * tl;
    let factor = hw as f64 * (t.max(1) as f64).ln();
    let hw_time = ln + if factor > 1.0 { factor.log10() + hw_table } else { hw_table.max(0.0) };
    PredictedBounds {
        n,
        k,
        w,
        hw,
        t,
        tw_table_log10: tw_table,
        tw_time_log10: ln + tw_table,
        hw_table_log10: hw_table,
        hw_time_log10: hw_time,
        tighter: if hw_time <= ln + tw_table { BoundKind::Hyperwidth } else { BoundKind::Treewidth },
    }
}

/// Exponents of the whole-hierarchy bound `t^(Σ hw)` and its `t^(max hw)`
/// variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HierarchyBounds {
    pub sum_hw: usize,
    pub max_hw: usize,
    pub t: usize,
    pub sum_table_log10: f64,
    pub max_table_log10: f64,
}

pub fn hierarchy_bounds(hws: &[usize], t: usize) -> HierarchyBounds {
    let sum_hw: usize = hws.iter().sum();
    let max_hw = hws.iter().copied().max().unwrap_or(0);
    let tl = (t.max(1) as f64).log10();
    HierarchyBounds { sum_hw, max_hw, t, sum_table_log10: sum_hw as f64 * tl, max_table_log10: max_hw as f64 * tl }
}

// ---- driver -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub exec: Exec,
    pub decompose: DecomposeOptions,
    /// Decompositions to use instead of computing them, by level id.
    pub supplied: Option<DecompositionFile>,
    /// Clamp these free variables before evaluation.
    pub do_assignment: Vec<(String, u32)>,
    /// Variables to renormalize over; the rest of the output is the
    /// conditioning side.
    pub outcome: Option<Vec<String>>,
    pub renormalize: bool,
    pub max_entries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exec: Exec::default(),
            decompose: DecomposeOptions::default(),
            supplied: None,
            do_assignment: vec![],
            outcome: None,
            renormalize: true,
            max_entries: DEFAULT_MAX_ENTRIES,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub id: usize,
    pub parent: Option<usize>,
    pub n_factors: usize,
    pub n_vars: usize,
    pub free_vars: Vec<String>,
    pub method: Method,
    pub w: usize,
    pub hw: usize,
    pub hw_without_child_outputs: Option<usize>,
    pub n_clusters: usize,
    pub max_degree: usize,
    /// Largest input table of the level.
    pub t: usize,
    pub k: u32,
    pub bounds: PredictedBounds,
    pub max_table_entries: usize,
    pub total_entries: usize,
    pub zero_denominator_drops: usize,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub decomposition: Decomposed,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_rows: usize,
    pub free_vars: Vec<String>,
    pub outcome: Option<Vec<String>>,
    pub do_assignment: Vec<(String, u32)>,
    /// Output table, renormalized over the outcome when `normalized`.
    pub result: SparseFactor,
    pub raw_result: SparseFactor,
    pub normalized: bool,
    pub levels: Vec<LevelReport>,
    pub hierarchy: HierarchyBounds,
    pub max_table_entries: usize,
    pub total_entries: usize,
    /// Largest input table over all levels.
    pub t: usize,
    /// `max_table_entries` over the dense size of the widest input scope.
    pub density: f64,
    /// `ln(max_table_entries) / ln(t)`: the table-size exponent realized.
    pub realized_exponent: Option<f64>,
    pub zero_denominator_drops: usize,
    pub wall_time_secs: f64,
}

impl EvalReport {
    pub fn metrics(&self) -> MetricsRow {
        run_metrics(self)
    }
}

/// Empirical tables for each term of a level, restricted by `do`.
fn bind_level_terms(
    factors: &[LevelFactor],
    data: &Dataset,
    do_map: &HashMap<&str, u32>,
    child_outputs: &HashMap<usize, SparseFactor>,
    exec: Exec,
) -> Result<Vec<SparseFactor>, EvalError> {
    let restrict = |mut f: SparseFactor| {
        for (name, v) in do_map {
            if f.position(name).is_some() {
                f = f.restrict(name, *v);
            }
        }
        f
    };
    let bind_one = |lf: &LevelFactor| -> Result<SparseFactor, EvalError> {
        match lf {
            LevelFactor::Term(t) => {
                let l: Vec<&str> = t.left.iter().map(|s| s.as_str()).collect();
                let r: Vec<&str> = t.right.iter().map(|s| s.as_str()).collect();
                Ok(restrict(empirical_prob_with(data, &l, &r, exec)?))
            }
            LevelFactor::ChildOutput { child, .. } => {
                child_outputs.get(child).map(|o| o.invert()).ok_or(EvalError::UnboundFactor(*child))
            }
        }
    };
    exec.map(factors, bind_one).into_iter().collect()
}

fn check_do(hier: &Hierarchy, data: &Dataset, do_assignment: &[(String, u32)]) -> Result<(), EvalError> {
    let free = &hier.root_level().free_vars;
    for (name, v) in do_assignment {
        if !free.contains(name) {
            return Err(EvalError::InvalidDo(format!("{name} is not a free variable of the estimand")));
        }
        let col =
            data.column_index(name).ok_or_else(|| EvalError::InvalidDo(format!("{name} is not a dataset column")))?;
        let k = data.columns()[col].domain_size();
        if *v >= k {
            return Err(EvalError::InvalidDo(format!("{name}={v} is outside its domain of size {k}")));
        }
    }
    Ok(())
}

/// Evaluates a flattened hierarchy on `data`: levels bottom-up, each bound
/// to empirical tables, decomposed and reduced by [`cte`]; a level's output
/// is inverted into its parent's factor list.
pub fn pi_hte(hier: &Hierarchy, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    check_do(hier, data, &opts.do_assignment)?;
    let do_map: HashMap<&str, u32> = opts.do_assignment.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut outputs: HashMap<usize, SparseFactor> = HashMap::new();
    let mut reports: HashMap<usize, LevelReport> = HashMap::new();
    let mut widest_dense = 1.0f64;
    let mut widest_arity = 0usize;

    for id in hier.bottom_up() {
        let lvl_start = Instant::now();
        let level = &hier.levels[id];
        let tables = bind_level_terms(&level.factors, data, &do_map, &outputs, opts.exec)?;
        let h = Hypergraph::from_level(level);
        let inverse: Vec<bool> = level.factors.iter().map(|f| f.is_child_output()).collect();
        let decomposed = match opts.supplied.as_ref().and_then(|s| s.levels.get(&id)) {
            Some(raw) => Decomposed::from_td(bind_decomposition(raw, &h, &level.free_vars)?, &h, Method::Supplied),
            None => decompose(&h, &level.free_vars, DecomposeOptions { exec: opts.exec, ..opts.decompose })?,
        };
        let out = cte(
            &decomposed.td,
            &h,
            &tables,
            &inverse,
            &level.free_vars,
            CteOptions { exec: opts.exec, max_entries: opts.max_entries },
            id,
        )?;
        let t = tables.iter().map(|f| f.len()).max().unwrap_or(0);
        for f in &tables {
            if f.arity() > widest_arity || (f.arity() == widest_arity && f.dense_size() > widest_dense) {
                widest_arity = f.arity();
                widest_dense = f.dense_size();
            }
        }
        let k = h
            .nodes
            .iter()
            .filter_map(|n| data.column_index(n).map(|c| data.columns()[c].domain_size()))
            .max()
            .unwrap_or(1);
        let stats = decomposed.stats;
        reports.insert(
            id,
            LevelReport {
                id,
                parent: level.parent,
                n_factors: level.factors.len(),
                n_vars: h.nodes.len(),
                free_vars: level.free_vars.clone(),
                method: decomposed.method,
                w: stats.treewidth,
                hw: stats.hyperwidth,
                hw_without_child_outputs: decomposed.hw_without_child_outputs,
                n_clusters: stats.n_clusters,
                max_degree: stats.max_degree,
                t,
                k,
                bounds: predicted_bounds(h.nodes.len(), k, stats.treewidth, stats.hyperwidth, t),
                max_table_entries: out.max_table_entries,
                total_entries: out.total_entries,
                zero_denominator_drops: out.zero_denominator_drops,
                wall_time_secs: lvl_start.elapsed().as_secs_f64(),
                decomposition: decomposed,
            },
        );
        outputs.insert(id, out.result);
    }

    let raw = outputs.remove(&hier.root).expect("root level evaluated");
    let free = hier.root_level().free_vars.clone();
    let outcome = opts.outcome.clone().or_else(|| {
        if opts.do_assignment.is_empty() {
            None
        } else {
            Some(free.iter().filter(|v| !do_map.contains_key(v.as_str())).cloned().collect())
        }
    });
    let (result, normalized) = match (&outcome, opts.renormalize) {
        (Some(o), true) if !raw.is_empty() && !o.is_empty() => {
            let names: Vec<&str> = o.iter().map(|s| s.as_str()).filter(|n| raw.position(n).is_some()).collect();
            (raw.normalize_over(&names)?, true)
        }
        _ => (raw.clone(), false),
    };

    let mut levels: Vec<LevelReport> = (0..hier.levels.len()).filter_map(|i| reports.remove(&i)).collect();
    levels.sort_by_key(|l| l.id);
    let hws: Vec<usize> = levels.iter().map(|l| l.hw).collect();
    let t = levels.iter().map(|l| l.t).max().unwrap_or(0);
    let max_table_entries = levels.iter().map(|l| l.max_table_entries).max().unwrap_or(0);
    let realized_exponent =
        if t > 1 && max_table_entries > 0 { Some((max_table_entries as f64).ln() / (t as f64).ln()) } else { None };
    Ok(EvalReport {
        n_rows: data.n_rows(),
        free_vars: free,
        outcome,
        do_assignment: opts.do_assignment.clone(),
        result,
        raw_result: raw,
        normalized,
        hierarchy: hierarchy_bounds(&hws, t),
        max_table_entries,
        total_entries: levels.iter().map(|l| l.total_entries).sum(),
        t,
        density: max_table_entries as f64 / widest_dense,
        realized_exponent,
        zero_denominator_drops: levels.iter().map(|l| l.zero_denominator_drops).sum(),
        levels,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Structure-only analysis of a hierarchy: per-level decompositions and
/// bounds for a nominal tightness `t` (no data needed).
#[derive(Clone, Debug, Serialize)]
pub struct LevelAnalysis {
    pub id: usize,
    pub parent: Option<usize>,
    pub factors: Vec<String>,
    pub sum_vars: Vec<String>,
    pub free_vars: Vec<String>,
    pub hyperedges: Vec<Vec<String>>,
    pub is_hypertree: bool,
    pub method: Method,
    pub w: usize,
    pub hw: usize,
    pub hw_without_child_outputs: Option<usize>,
    pub n_clusters: usize,
    pub max_degree: usize,
    pub k: u32,
    pub bounds: PredictedBounds,
    pub decomposition: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Analysis {
    pub depth: usize,
    pub root: usize,
    pub levels: Vec<LevelAnalysis>,
    pub hierarchy: HierarchyBounds,
}

pub fn analyze(
    hier: &Hierarchy,
    domain: &dyn Fn(&str) -> Option<u32>,
    t: usize,
    decompose_opts: DecomposeOptions,
    supplied: Option<&DecompositionFile>,
) -> Result<Analysis, DecompError> {
    let mut levels = Vec::new();
    for level in &hier.levels {
        let h = Hypergraph::from_level(level);
        let d = match supplied.and_then(|s| s.levels.get(&level.id)) {
            Some(raw) => Decomposed::from_td(bind_decomposition(raw, &h, &level.free_vars)?, &h, Method::Supplied),
            None => decompose(&h, &level.free_vars, decompose_opts)?,
        };
        let k = h.nodes.iter().filter_map(|n| domain(base_name(n))).max().unwrap_or(1);
        levels.push(LevelAnalysis {
            id: level.id,
            parent: level.parent,
            factors: level.factors.iter().map(|f| f.to_string()).collect(),
            sum_vars: level.sum_vars.clone(),
            free_vars: level.free_vars.clone(),
            hyperedges: h.edges.iter().map(|e| h.names(&e.vars)).collect(),
            is_hypertree: crate::decomposition::gyo_acyclic(&h).is_hypertree,
            method: d.method,
            w: d.stats.treewidth,
            hw: d.stats.hyperwidth,
            hw_without_child_outputs: d.hw_without_child_outputs,
            n_clusters: d.stats.n_clusters,
            max_degree: d.stats.max_degree,
            k,
            bounds: predicted_bounds(h.nodes.len(), k, d.stats.treewidth, d.stats.hyperwidth, t),
            decomposition: d.td.to_text(&h),
        });
    }
    let hws: Vec<usize> = levels.iter().map(|l| l.hw).collect();
    Ok(Analysis { depth: hier.depth(), root: hier.root, levels, hierarchy: hierarchy_bounds(&hws, t) })
}

// ---- oracle -------------------------------------------------------------------

/// Dense evaluation of the unflattened expression with the same empirical
/// tables, at every assignment of its free variables (`do` variables held
/// at their values).
pub fn brute_force_eval(
    expr: &Expr,
    data: &Dataset,
    do_assignment: &[(String, u32)],
    dense_limit: f64,
) -> Result<SparseFactor, EvalError> {
    let mut bindings = TermBindings::new();
    for t in expr.terms() {
        let key = t.base_key();
        if bindings.contains_key(&key) {
            continue;
        }
        let l: Vec<&str> = t.left.iter().map(|s| base_name(s)).collect();
        let r: Vec<&str> = t.right.iter().map(|s| base_name(s)).collect();
        bindings.insert(key, empirical_prob_with(data, &l, &r, Exec::Sequential)?);
    }
    let domain = |n: &str| data.column_index(n).map(|c| data.columns()[c].domain_size());
    let mut free: Vec<String> = expr.free_vars().into_iter().collect();
    sort_names(&mut free);
    let mut cells = 1.0f64;
    for n in expr.all_vars() {
        cells *= domain(&n).ok_or_else(|| DenseError::UnknownDomain(n.clone()))? as f64;
    }
    if cells > dense_limit {
        return Err(DenseError::DenseLimitExceeded { cells, limit: dense_limit }.into());
    }
    let fixed: HashMap<&str, u32> = do_assignment.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let scope: Vec<Variable> = free.iter().map(|n| Variable::new(n, domain(n).unwrap())).collect();
    let ranges: Vec<Vec<u32>> = free
        .iter()
        .zip(&scope)
        .map(|(n, v)| match fixed.get(n.as_str()) {
            Some(&x) => vec![x],
            None => (0..v.domain_size()).collect(),
        })
        .collect();
    let mut entries = Vec::new();
    let mut idx = vec![0usize; free.len()];
    'outer: loop {
        let key: Vec<u32> = idx.iter().zip(&ranges).map(|(&i, r)| r[i]).collect();
        let a: HashMap<String, u32> = free.iter().cloned().zip(key.iter().copied()).collect();
        let v = dense_expr_eval(expr, &bindings, &domain, &a, dense_limit)?;
        if v != 0.0 {
            entries.push((key, v));
        }
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < ranges[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    Ok(SparseFactor::from_entries(scope, entries)?)
}

/// Convenience: flatten and evaluate an estimand with its query head
/// supplying the outcome when present.
pub fn estimate(est: &Estimand, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let hier = crate::estimand::flatten(&est.expr);
    let mut opts = opts.clone();
    if opts.outcome.is_none() {
        opts.outcome = est.query.as_ref().map(|q| q.outcome.clone());
    }
    pi_hte(&hier, data, &opts)
}

// ---- metrics ---------------------------------------------------------------

/// One benchmark row: samples, time, max table size, t, density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub samples: usize,
    pub time_secs: f64,
    pub max_table_size: usize,
    pub t: usize,
    pub density: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "samples,time,max_table_size,t,density";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.3},{},{},{:.3e}",
            self.samples,
            self.time_secs.max(0.0),
            self.max_table_size,
            self.t,
            self.density
        )
    }

    /// Wall time in whole microseconds.
    pub fn time_micros(&self) -> u64 {
        (self.time_secs.max(0.0) * 1e6).round() as u64
    }
}

pub fn run_metrics(report: &EvalReport) -> MetricsRow {
    MetricsRow {
        samples: report.n_rows,
        time_secs: report.wall_time_secs.max(0.0),
        max_table_size: report.max_table_entries,
        t: report.t,
        density: report.density,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{parse_decomposition, Cluster};
    use crate::estimand::{flatten, parse, parse_estimand};
    use crate::fixtures;
    use crate::model::CausalGraph;
    use crate::scm::{random_cbn, sample_dataset, Distribution};

    fn f(scope: &[(&str, u32)], entries: &[(&[u32], f64)]) -> SparseFactor {
        SparseFactor::from_entries(
            scope.iter().map(|(n, k)| Variable::new(n, *k)).collect(),
            entries.iter().map(|(k, v)| (k.to_vec(), *v)),
        )
        .unwrap()
    }

    fn single_cluster(h: &Hypergraph) -> TreeDecomposition {
        TreeDecomposition {
            clusters: vec![Cluster {
                chi: (0..h.nodes.len()).collect(),
                psi: (0..h.edges.len()).collect(),
                cover: vec![],
            }],
            edges: vec![],
            root: 0,
        }
    }

    #[test]
    fn single_cluster_marginal() {
        let pa = f(&[("A", 2)], &[(&[0], 0.3), (&[1], 0.7)]);
        let pba = f(&[("A", 2), ("B", 2)], &[(&[0, 0], 0.9), (&[0, 1], 0.1), (&[1, 0], 0.2), (&[1, 1], 0.8)]);
        let h = Hypergraph::new(&[vec!["A".into()], vec!["A".into(), "B".into()]]);
        let td = single_cluster(&h);
        let out = cte(&td, &h, &[pa, pba], &[false, false], &["B".into()], CteOptions::default(), 0).unwrap();
        // Dense oracle: P(B=b) = sum_a P(a) P(b|a).
        let want0 = 0.3 * 0.9 + 0.7 * 0.2;
        let want1 = 0.3 * 0.1 + 0.7 * 0.8;
        assert!((out.result.get(&[0]) - want0).abs() < 1e-15);
        assert!((out.result.get(&[1]) - want1).abs() < 1e-15);
    }

    #[test]
    fn scalars_multiply() {
        let h = Hypergraph::new(&[vec![], vec![]]);
        let td = single_cluster(&h);
        let out = cte(
            &td,
            &h,
            &[SparseFactor::scalar(0.5), SparseFactor::scalar(0.25)],
            &[false, false],
            &[],
            CteOptions::default(),
            0,
        )
        .unwrap();
        assert_eq!(out.result.get(&[]), 0.125);
    }

    fn napkin_data(n: usize, seed: u64) -> (CausalGraph, Dataset) {
        let g = CausalGraph::parse(fixtures::NAPKIN_GRAPH).unwrap();
        let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 1.0 }, seed);
        let d = sample_dataset(&cbn, n, seed + 1, Exec::Sequential);
        (g, d)
    }

    fn assert_close(a: &SparseFactor, b: &SparseFactor, tol: f64) {
        assert_eq!(a.scope(), b.scope());
        let keys: BTreeSet<Vec<u32>> = a.iter().chain(b.iter()).map(|(k, _)| k.to_vec()).collect();
        for k in keys {
            let (x, y) = (a.get(&k), b.get(&k));
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()), "{k:?}: {x} vs {y}");
        }
    }

    #[test]
    fn napkin_matches_brute_force() {
        let (_, data) = napkin_data(1000, 11);
        let est = parse_estimand(fixtures::NAPKIN_ESTIMAND).unwrap();
        let report = estimate(&est, &data, &EvalOptions::default()).unwrap();
        let brute = brute_force_eval(&est.expr, &data, &[], 1e6).unwrap();
        assert_close(&report.raw_result, &brute, 1e-9);
        assert_eq!(report.levels.len(), 2);
        assert!(report.levels.iter().all(|l| l.hw == 1));
        assert_eq!(report.hierarchy.sum_hw, 2);
        assert_eq!(report.hierarchy.max_hw, 1);
        assert!(report.normalized);
    }

    #[test]
    fn napkin_do_slice() {
        let (_, data) = napkin_data(500, 5);
        let est = parse_estimand(fixtures::NAPKIN_ESTIMAND).unwrap();
        let full = estimate(&est, &data, &EvalOptions::default()).unwrap();
        let opts = EvalOptions { do_assignment: vec![("X".into(), 1)], ..EvalOptions::default() };
        let slice = estimate(&est, &data, &opts).unwrap();
        let x = slice.raw_result.position("X").unwrap();
        assert!(slice.raw_result.iter().all(|(k, _)| k[x] == 1));
        for (k, v) in slice.raw_result.iter() {
            assert!((full.raw_result.get(k) - v).abs() <= 1e-12 * v);
        }
        let bad = EvalOptions { do_assignment: vec![("W".into(), 0)], ..EvalOptions::default() };
        assert!(matches!(estimate(&est, &data, &bad), Err(EvalError::InvalidDo(_))));
    }

    #[test]
    fn depth_one_equals_cte() {
        let (_, data) = napkin_data(300, 2);
        let e = parse("sum[W](P(X,Y|R,W) P(W))").unwrap();
        let hier = flatten(&e);
        let report = pi_hte(&hier, &data, &EvalOptions { renormalize: false, ..Default::default() }).unwrap();
        let level = hier.root_level();
        let h = Hypergraph::from_level(level);
        let tables =
            bind_level_terms(&level.factors, &data, &HashMap::new(), &HashMap::new(), Exec::Sequential).unwrap();
        let td = single_cluster(&h);
        let direct = cte(&td, &h, &tables, &[false, false], &level.free_vars, CteOptions::default(), 0).unwrap().result;
        assert_close(&report.result, &direct, 1e-12);
    }

    #[test]
    fn chain7_tables_stay_within_data_size() {
        let g = CausalGraph::parse(fixtures::CHAIN7_GRAPH).unwrap();
        let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 1.0 }, 4);
        let data = sample_dataset(&cbn, 100, 9, Exec::Sequential);
        let est = parse_estimand(fixtures::CHAIN7_ESTIMAND).unwrap();
        let report = estimate(&est, &data, &EvalOptions::default()).unwrap();
        assert!(report.max_table_entries <= 100);
        let brute = brute_force_eval(&est.expr, &data, &[], 1e6).unwrap();
        assert_close(&report.raw_result, &brute, 1e-9);
    }

    #[test]
    fn root_choice_does_not_change_result() {
        let g = CausalGraph::parse(fixtures::CHAIN7_GRAPH).unwrap();
        let cbn = random_cbn(&g, Distribution::Dirichlet { alpha: 0.5 }, 8);
        let data = sample_dataset(&cbn, 200, 3, Exec::Sequential);
        let hier = flatten(&parse_estimand(fixtures::CHAIN7_ESTIMAND).unwrap().expr);
        let level = hier.root_level();
        let h = Hypergraph::from_level(level);
        let tables =
            bind_level_terms(&level.factors, &data, &HashMap::new(), &HashMap::new(), Exec::Sequential).unwrap();
        let raw = parse_decomposition(fixtures::CHAIN7_TD).unwrap();
        let mut td = bind_decomposition(&raw.levels[&0], &h, &level.free_vars).unwrap();
        let inv = vec![false; tables.len()];
        let mut results = Vec::new();
        for r in 0..td.clusters.len() {
            td.root = r;
            results.push(cte(&td, &h, &tables, &inv, &level.free_vars, CteOptions::default(), 0).unwrap().result);
        }
        for r in &results[1..] {
            assert_close(&results[0], r, 1e-9);
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (_, data) = napkin_data(2000, 21);
        let est = parse_estimand(fixtures::NAPKIN_ESTIMAND).unwrap();
        let a = estimate(&est, &data, &EvalOptions { exec: Exec::Sequential, ..Default::default() }).unwrap();
        let b = estimate(&est, &data, &EvalOptions { exec: Exec::Parallel, ..Default::default() }).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.raw_result, b.raw_result);
    }

    #[test]
    fn resource_limit() {
        let (_, data) = napkin_data(300, 1);
        let est = parse_estimand(fixtures::NAPKIN_ESTIMAND).unwrap();
        let err = estimate(&est, &data, &EvalOptions { max_entries: 2, ..Default::default() }).unwrap_err();
        assert!(err.is_resource());
    }

    #[test]
    fn zero_denominator_at_root_is_an_inconsistency() {
        // Numerator P(A,B) sees B=1; the denominator table only has B=0.
        let num = f(&[("A", 2), ("B", 2)], &[(&[0, 0], 0.5), (&[0, 1], 0.5)]);
        let den = f(&[("B", 2)], &[(&[0], 1.0)]).invert();
        let h = Hypergraph::with_child_outputs(&[vec!["A".into(), "B".into()], vec!["B".into()]], &[false, true]);
        let td = single_cluster(&h);
        let err = cte(&td, &h, &[num, den], &[false, true], &["A".into(), "B".into()], CteOptions::default(), 0);
        assert!(matches!(err, Err(EvalError::DivisionInconsistency { count: 1, .. })));
    }

    #[test]
    fn chain99_bounds() {
        let b = predicted_bounds(100, 4, 98, 1, 10_000);
        assert!((b.tw_table_log10 - 99.0 * 4f64.log10()).abs() < 1e-12);
        assert!((b.tw_table_log10 - 59.6).abs() < 0.1);
        assert!((b.hw_table_bound() - 10_000.0).abs() < 1e-6);
        assert_eq!(b.tighter, BoundKind::Hyperwidth);
    }

    #[test]
    fn single_row_bound_floor() {
        let b = predicted_bounds(7, 2, 6, 1, 1);
        assert!((b.hw_time_log10 - 7f64.log10()).abs() < 1e-12);
        let hb = hierarchy_bounds(&[1, 1], 100);
        assert_eq!((hb.sum_hw, hb.max_hw), (2, 1));
    }

    #[test]
    fn metrics_csv() {
        let row = MetricsRow { samples: 100, time_secs: 0.0001234, max_table_size: 100, t: 100, density: 0.5 };
        assert_eq!(row.to_csv(), "100,0.000,100,100,5.000e-1");
        assert_eq!(row.time_micros(), 123);
    }
}
