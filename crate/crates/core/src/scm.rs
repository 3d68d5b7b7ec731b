//! Synthetic causal Bayesian networks: random CPTs, ancestral sampling,
//! and exact interventional distributions by the truncated factorization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::SparseFactor;
use crate::model::{CausalGraph, Dataset, Variable};
use crate::names::natural_cmp;
use crate::Exec;

/// Rows sampled per independent random stream.
const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("enumeration needs {cells} configurations, above the limit {limit}")]
    DenseLimitExceeded { cells: f64, limit: f64 },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Family the conditional tables are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distribution {
    /// Every row is the uniform distribution.
    Uniform,
    /// Every row is a symmetric Dirichlet draw.
    Dirichlet { alpha: f64 },
    /// Every row puts all mass on one random state.
    Deterministic,
    /// Each table is deterministic with probability `weight`, otherwise
    /// Dirichlet.
    Mixture { alpha: f64, weight: f64 },
}

impl Distribution {
    pub fn parse(name: &str, alpha: f64) -> Option<Self> {
        match name {
            "uniform" => Some(Distribution::Uniform),
            "dirichlet" => Some(Distribution::Dirichlet { alpha }),
            "deterministic" => Some(Distribution::Deterministic),
            "mixture" => Some(Distribution::Mixture { alpha, weight: 0.5 }),
            _ => None,
        }
    }
}

/// A variable with its conditional table `P(node | parents)`, stored
/// row-major: one row of `domain_size` probabilities per parent
/// configuration, parent configurations in mixed radix (last parent
/// fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbnNode {
    pub name: String,
    pub domain_size: u32,
    pub parents: Vec<String>,
    pub latent: bool,
    pub cpt: Vec<f64>,
}

/// Nodes in topological order; latent roots stand for bidirected arcs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cbn {
    pub nodes: Vec<CbnNode>,
}

fn sample_row(rng: &mut ChaCha8Rng, k: usize, dist: Distribution, deterministic: bool) -> Vec<f64> {
    let dirichlet = |rng: &mut ChaCha8Rng, alpha: f64| {
        let g = Gamma::new(alpha, 1.0).expect("positive Dirichlet concentration");
        let mut row: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            let j = rng.random_range(0..k);
            row.iter_mut().enumerate().for_each(|(i, x)| *x = if i == j { 1.0 } else { 0.0 });
        }
        row
    };
    let one_hot = |rng: &mut ChaCha8Rng| {
        let j = rng.random_range(0..k);
        (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect()
    };
    match dist {
        Distribution::Uniform => vec![1.0 / k as f64; k],
        Distribution::Dirichlet { alpha } => dirichlet(rng, alpha),
        Distribution::Deterministic => one_hot(rng),
        Distribution::Mixture { alpha, .. } => {
            if deterministic {
                one_hot(rng)
            } else {
                dirichlet(rng, alpha)
            }
        }
    }
}

fn random_cpt(rng: &mut ChaCha8Rng, rows: usize, k: usize, dist: Distribution) -> Vec<f64> {
    let deterministic = match dist {
        Distribution::Mixture { weight, .. } => rng.random_bool(weight.clamp(0.0, 1.0)),
        _ => false,
    };
    (0..rows).flat_map(|_| sample_row(rng, k, dist, deterministic)).collect()
}

/// Draws a CBN over `graph`. Each bidirected arc `a <-> b` becomes a binary
/// latent root `U_a_b` parenting both endpoints; latent tables are always
/// Dirichlet with the family's concentration (1 when it has none).
pub fn random_cbn(graph: &CausalGraph, dist: Distribution, seed: u64) -> Cbn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = graph.variables();
    let latent_alpha = match dist {
        Distribution::Dirichlet { alpha } | Distribution::Mixture { alpha, .. } => alpha,
        _ => 1.0,
    };
    let mut nodes = Vec::new();
    let mut latent_of: Vec<Vec<String>> = vec![Vec::new(); vars.len()];
    for &(a, b) in graph.bidirected_edges() {
        let name = format!("U_{}_{}", vars[a].name(), vars[b].name());
        latent_of[a].push(name.clone());
        latent_of[b].push(name.clone());
        let cpt = random_cpt(&mut rng, 1, 2, Distribution::Dirichlet { alpha: latent_alpha });
        nodes.push(CbnNode { name, domain_size: 2, parents: vec![], latent: true, cpt });
    }
    let order = graph.topological_order().expect("graph was validated as a DAG");
    for v in order {
        let mut parents: Vec<String> = graph.parents(v).into_iter().map(|p| vars[p].name().to_string()).collect();
        parents.extend(latent_of[v].iter().cloned());
        let rows: usize =
            parents.iter().map(|p| graph.variable(p).map(|x| x.domain_size() as usize).unwrap_or(2)).product();
        let k = vars[v].domain_size() as usize;
        let cpt = random_cpt(&mut rng, rows, k, dist);
        nodes.push(CbnNode { name: vars[v].name().to_string(), domain_size: k as u32, parents, latent: false, cpt });
    }
    Cbn { nodes }
}

impl Cbn {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let p = path.as_ref();
        let text =
            std::fs::read_to_string(p).map_err(|source| SimError::Io { path: p.display().to_string(), source })?;
        let cbn: Cbn = serde_json::from_str(&text)?;
        cbn.check()?;
        Ok(cbn)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let p = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(p, text).map_err(|source| SimError::Io { path: p.display().to_string(), source })
    }

    /// Checks topological order, table shapes and row sums.
    pub fn check(&self) -> Result<(), SimError> {
        let mut seen: HashMap<&str, u32> = HashMap::new();
        for n in &self.nodes {
            if n.domain_size == 0 {
                return Err(SimError::Invalid(format!("{} has an empty domain", n.name)));
            }
            if n.latent && !n.parents.is_empty() {
                return Err(SimError::Invalid(format!("latent {} has parents", n.name)));
            }
            let mut rows = 1usize;
            for p in &n.parents {
                rows *= *seen
                    .get(p.as_str())
                    .ok_or_else(|| SimError::Invalid(format!("{} precedes its parent {p}", n.name)))?
                    as usize;
            }
            let k = n.domain_size as usize;
            if n.cpt.len() != rows * k {
                return Err(SimError::Invalid(format!(
                    "{} has {} table cells, expected {}",
                    n.name,
                    n.cpt.len(),
                    rows * k
                )));
            }
            for r in 0..rows {
                let s: f64 = n.cpt[r * k..(r + 1) * k].iter().sum();
                if (s - 1.0).abs() > 1e-9 || n.cpt[r * k..(r + 1) * k].iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(SimError::Invalid(format!("{} row {r} is not a distribution", n.name)));
                }
            }
            if seen.insert(&n.name, n.domain_size).is_some() {
                return Err(SimError::Invalid(format!("{} declared twice", n.name)));
            }
        }
        Ok(())
    }

    pub fn observed(&self) -> Vec<Variable> {
        self.nodes.iter().filter(|n| !n.latent).map(|n| Variable::new(&n.name, n.domain_size)).collect()
    }

    fn parent_index(&self) -> Vec<Vec<usize>> {
        let pos: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        self.nodes.iter().map(|n| n.parents.iter().map(|p| pos[p.as_str()]).collect()).collect()
    }

    fn row_of(&self, parents: &[usize], state: &[u32]) -> usize {
        parents.iter().fold(0usize, |acc, &p| acc * self.nodes[p].domain_size as usize + state[p] as usize)
    }

    /// Conditional probability of `node = x` given the parent states in
    /// `state`.
    fn prob(&self, i: usize, parents: &[usize], state: &[u32], x: u32) -> f64 {
        let k = self.nodes[i].domain_size as usize;
        self.nodes[i].cpt[self.row_of(parents, state) * k + x as usize]
    }

    /// Draws `n_rows` i.i.d. rows by ancestral sampling and keeps the
    /// observed columns. Each block of rows uses its own stream of the
    /// seeded generator, so the output does not depend on `exec`.
    pub fn sample(&self, n_rows: usize, seed: u64, exec: Exec) -> Dataset {
        let parents = self.parent_index();
        let observed: Vec<usize> = (0..self.nodes.len()).filter(|&i| !self.nodes[i].latent).collect();
        let chunks = n_rows.div_ceil(CHUNK_ROWS);
        let blocks = exec.map_range(chunks, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let rows = CHUNK_ROWS.min(n_rows - c * CHUNK_ROWS);
            let mut state = vec![0u32; self.nodes.len()];
            let mut out = Vec::with_capacity(rows * observed.len());
            for _ in 0..rows {
                for i in 0..self.nodes.len() {
                    let k = self.nodes[i].domain_size as usize;
                    let r = self.row_of(&parents[i], &state);
                    let row = &self.nodes[i].cpt[r * k..(r + 1) * k];
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut x = k - 1;
                    for (j, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            x = j;
                            break;
                        }
                    }
                    state[i] = x as u32;
                }
                out.extend(observed.iter().map(|&i| state[i]));
            }
            out
        });
        Dataset::from_cells(self.observed(), blocks.concat())
    }

    fn check_dense(&self, limit: f64) -> Result<(), SimError> {
        let cells: f64 = self.nodes.iter().map(|n| n.domain_size as f64).product();
        if cells > limit {
            return Err(SimError::DenseLimitExceeded { cells, limit });
        }
        Ok(())
    }

    /// Sums `Π P(v | pa)` over all configurations consistent with
    /// `clamp`, skipping the tables of clamped variables, into a table over
    /// `target`.
    fn enumerate(&self, clamp: &HashMap<usize, u32>, target: &[usize]) -> BTreeMap<Vec<u32>, f64> {
        let parents = self.parent_index();
        let mut acc = BTreeMap::new();
        let mut state = vec![0u32; self.nodes.len()];
        self.walk(0, 1.0, &parents, clamp, target, &mut state, &mut acc);
        acc
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        i: usize,
        weight: f64,
        parents: &[Vec<usize>],
        clamp: &HashMap<usize, u32>,
        target: &[usize],
        state: &mut Vec<u32>,
        acc: &mut BTreeMap<Vec<u32>, f64>,
    ) {
        if weight == 0.0 {
            return;
        }
        if i == self.nodes.len() {
            let key: Vec<u32> = target.iter().map(|&t| state[t]).collect();
            *acc.entry(key).or_insert(0.0) += weight;
            return;
        }
        if let Some(&x) = clamp.get(&i) {
            state[i] = x;
            self.walk(i + 1, weight, parents, clamp, target, state, acc);
            return;
        }
        for x in 0..self.nodes[i].domain_size {
            state[i] = x;
            let p = self.prob(i, &parents[i], state, x);
            self.walk(i + 1, weight * p, parents, clamp, target, state, acc);
        }
    }

    fn index_of(&self, name: &str) -> Result<usize, SimError> {
        self.nodes.iter().position(|n| n.name == name).ok_or_else(|| SimError::UnknownVariable(name.to_string()))
    }

    fn table(&self, names: &[usize], acc: BTreeMap<Vec<u32>, f64>) -> SparseFactor {
        let scope: Vec<Variable> =
            names.iter().map(|&i| Variable::new(&self.nodes[i].name, self.nodes[i].domain_size)).collect();
        SparseFactor::from_entries(scope, acc.into_iter().filter(|(_, v)| *v > 0.0))
            .expect("enumerated keys are in range")
    }

    /// Exact `P(target | do(X = x))`: clamps the intervened variables,
    /// drops their tables, sums out everything else (latents included).
    /// The result's scope is `target` plus the intervened variables.
    pub fn interventional_truth(
        &self,
        do_assignment: &[(String, u32)],
        target: &[&str],
        dense_limit: f64,
    ) -> Result<SparseFactor, SimError> {
        self.check_dense(dense_limit)?;
        let mut clamp = HashMap::new();
        for (n, v) in do_assignment {
            let i = self.index_of(n)?;
            if *v >= self.nodes[i].domain_size {
                return Err(SimError::Invalid(format!("{n}={v} is outside its domain")));
            }
            clamp.insert(i, *v);
        }
        let mut names: Vec<usize> = target.iter().map(|t| self.index_of(t)).collect::<Result<_, _>>()?;
        names.extend(clamp.keys().copied());
        names.sort_by(|&a, &b| natural_cmp(&self.nodes[a].name, &self.nodes[b].name));
        names.dedup();
        let acc = self.enumerate(&clamp, &names);
        Ok(self.table(&names, acc))
    }

    /// Exact joint distribution of `vars` (observed or latent).
    pub fn marginal(&self, vars: &[&str], dense_limit: f64) -> Result<SparseFactor, SimError> {
        self.check_dense(dense_limit)?;
        let mut names: Vec<usize> = vars.iter().map(|t| self.index_of(t)).collect::<Result<_, _>>()?;
        names.sort_by(|&a, &b| natural_cmp(&self.nodes[a].name, &self.nodes[b].name));
        names.dedup();
        let acc = self.enumerate(&HashMap::new(), &names);
        Ok(self.table(&names, acc))
    }

    /// Exact `P(left | right)` as a relational table.
    pub fn conditional(&self, left: &[&str], right: &[&str], dense_limit: f64) -> Result<SparseFactor, SimError> {
        let all: Vec<&str> = left.iter().chain(right).copied().collect();
        let joint = self.marginal(&all, dense_limit)?;
        joint.normalize_over(left).map_err(|e| SimError::Invalid(e.to_string()))
    }
}

pub fn sample_dataset(cbn: &Cbn, n_rows: usize, seed: u64, exec: Exec) -> Dataset {
    cbn.sample(n_rows, seed, exec)
}

/// Half the L1 distance between two tables over the same scope.
pub fn total_variation(p: &SparseFactor, q: &SparseFactor) -> f64 {
    let mut keys: Vec<Vec<u32>> = p.iter().chain(q.iter()).map(|(k, _)| k.to_vec()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys.iter().map(|k| (p.get(k) - q.get(k)).abs()).sum::<f64>()
}
