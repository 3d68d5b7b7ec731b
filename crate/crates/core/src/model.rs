//! Variables, causal graphs, datasets and empirical probability tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::SparseFactor;
use crate::names::{base_name, is_identifier, natural_cmp};
use crate::Exec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("directed cycle through {0}")]
    Cycle(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("row {row}, column {column}: value {value} outside domain")]
    DomainViolation { row: usize, column: String, value: i64 },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("invalid probability term: {0}")]
    BadTerm(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A discrete variable with states `0..domain_size`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variable {
    name: Arc<str>,
    domain_size: u32,
}

impl Variable {
    pub fn new(name: &str, domain_size: u32) -> Self {
        Variable { name: Arc::from(name), domain_size }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain_size(&self) -> u32 {
        self.domain_size
    }
}

impl fmt::Debug for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.domain_size)
    }
}

/// A DAG over observed variables plus bidirected arcs standing in for
/// latent confounders.
#[derive(Clone, Debug)]
pub struct CausalGraph {
    variables: Vec<Variable>,
    index: HashMap<String, usize>,
    directed: Vec<(usize, usize)>,
    bidirected: Vec<(usize, usize)>,
}

impl CausalGraph {
    /// Parses the line-oriented graph format. Statements are separated by
    /// newlines or `;`, and `#` starts a comment:
    ///
    /// ```text
    /// var A 2
    /// var B 3
    /// A -> B
    /// A <-> B
    /// ```
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut variables = Vec::new();
        let mut index = HashMap::new();
        let mut edges: Vec<(usize, String, String, bool)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            for stmt in line.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let parse_err = |msg: String| ModelError::Parse { line: ln + 1, msg };
                let toks: Vec<&str> = stmt.split_whitespace().collect();
                match toks.as_slice() {
                    ["var", name, k] => {
                        if !is_identifier(name) {
                            return Err(parse_err(format!("invalid variable name {name:?}")));
                        }
                        let k: u32 = k
                            .parse()
                            .ok()
                            .filter(|&k| k >= 1)
                            .ok_or_else(|| parse_err(format!("invalid domain size {k:?}")))?;
                        if index.insert(name.to_string(), variables.len()).is_some() {
                            return Err(parse_err(format!("variable {name} declared twice")));
                        }
                        variables.push(Variable::new(name, k));
                    }
                    [a, "->", b] => edges.push((ln + 1, a.to_string(), b.to_string(), false)),
                    [a, "<->", b] => edges.push((ln + 1, a.to_string(), b.to_string(), true)),
                    _ => return Err(parse_err(format!("unrecognized statement {stmt:?}"))),
                }
            }
        }
        let mut directed = Vec::new();
        let mut bidirected = Vec::new();
        for (_, a, b, bi) in edges {
            let ia = *index.get(&a).ok_or(ModelError::UnknownVariable(a.clone()))?;
            let ib = *index.get(&b).ok_or(ModelError::UnknownVariable(b.clone()))?;
            if bi {
                bidirected.push((ia.min(ib), ia.max(ib)));
            } else {
                if ia == ib {
                    return Err(ModelError::Cycle(a));
                }
                directed.push((ia, ib));
            }
        }
        let g = CausalGraph { variables, index, directed, bidirected };
        g.topological_order()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.directed
    }

    pub fn bidirected_edges(&self) -> &[(usize, usize)] {
        &self.bidirected
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Looks up a variable; primed names resolve to their original.
    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.index_of(base_name(name)).map(|i| &self.variables[i])
    }

    pub fn parents(&self, v: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self.directed.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    /// Kahn's algorithm; ties broken by declaration order.
    pub fn topological_order(&self) -> Result<Vec<usize>, ModelError> {
        let n = self.variables.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in &self.directed {
            indeg[b] += 1;
            out[a].push(b);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &w in &out[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&v| indeg[v] > 0).unwrap();
            return Err(ModelError::Cycle(self.variables[stuck].name().to_string()));
        }
        Ok(order)
    }
}

/// Integer-coded observational samples, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    columns: Vec<Variable>,
    cells: Vec<u32>,
    n_rows: usize,
}

impl Dataset {
    /// Builds a dataset from rows, range-checking every cell.
    pub fn new(columns: Vec<Variable>, rows: Vec<Vec<u32>>) -> Result<Self, ModelError> {
        let width = columns.len();
        let mut cells = Vec::with_capacity(rows.len() * width);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(ModelError::Parse {
                    line: r + 2,
                    msg: format!("expected {width} cells, got {}", row.len()),
                });
            }
            for (c, &x) in row.iter().enumerate() {
                if x >= columns[c].domain_size() {
                    return Err(ModelError::DomainViolation {
                        row: r + 1,
                        column: columns[c].name().to_string(),
                        value: x as i64,
                    });
                }
            }
            cells.extend_from_slice(row);
        }
        Ok(Dataset { columns, cells, n_rows: rows.len() })
    }

    pub(crate) fn from_cells(columns: Vec<Variable>, cells: Vec<u32>) -> Self {
        let n_rows = if columns.is_empty() { 0 } else { cells.len() / columns.len() };
        Dataset { columns, cells, n_rows }
    }

    /// Reads an RFC-4180 CSV whose header names graph variables.
    pub fn load(path: impl AsRef<Path>, graph: &CausalGraph) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_reader(file, graph)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, graph: &CausalGraph) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut columns = Vec::with_capacity(header.len());
        for name in header.iter() {
            let i = graph.index_of(name).ok_or_else(|| ModelError::UnknownVariable(name.to_string()))?;
            if columns.iter().any(|c: &Variable| c.name() == name) {
                return Err(ModelError::Parse { line: 1, msg: format!("duplicate column {name}") });
            }
            columns.push(graph.variables()[i].clone());
        }
        let mut cells = Vec::new();
        let mut n_rows = 0;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(ModelError::Parse {
                    line: r + 2,
                    msg: format!("expected {} cells, got {}", columns.len(), rec.len()),
                });
            }
            for (c, cell) in rec.iter().enumerate() {
                let v: i64 = cell
                    .parse()
                    .map_err(|_| ModelError::Parse { line: r + 2, msg: format!("non-integer cell {cell:?}") })?;
                if v < 0 || v >= columns[c].domain_size() as i64 {
                    return Err(ModelError::DomainViolation {
                        row: r + 1,
                        column: columns[c].name().to_string(),
                        value: v,
                    });
                }
                cells.push(v as u32);
            }
            n_rows += 1;
        }
        Ok(Dataset { columns, cells, n_rows })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), ModelError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.columns.iter().map(|c| c.name()))?;
        for r in 0..self.n_rows {
            wtr.write_record(self.row(r).iter().map(|x| x.to_string()))?;
        }
        wtr.flush().map_err(|source| ModelError::Io { path: "<csv>".into(), source })?;
        Ok(())
    }

    pub fn columns(&self) -> &[Variable] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn row(&self, r: usize) -> &[u32] {
        let w = self.columns.len();
        &self.cells[r * w..(r + 1) * w]
    }

    /// Column position of a variable; primed names read their original column.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        let base = base_name(name);
        self.columns.iter().position(|c| c.name() == base)
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.n_rows);
        Dataset::from_cells(self.columns.clone(), self.cells[..n * self.columns.len()].to_vec())
    }
}

/// Plug-in estimate `P_D(left | right) = #D(left, right) / #D(right)`, or
/// `#D(left) / n` when `right` is empty. Only observed configurations get
/// an entry, so the result never has more entries than the dataset has rows.
///
/// Primed names (`W'`) read the column of their original (`W`).
pub fn empirical_prob(data: &Dataset, left: &[&str], right: &[&str]) -> Result<SparseFactor, ModelError> {
    empirical_prob_with(data, left, right, Exec::Parallel)
}

pub fn empirical_prob_with(
    data: &Dataset,
    left: &[&str],
    right: &[&str],
    exec: Exec,
) -> Result<SparseFactor, ModelError> {
    if left.is_empty() {
        return Err(ModelError::BadTerm("empty left-hand side".into()));
    }
    if data.n_rows() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let mut names: Vec<&str> = left.iter().chain(right).copied().collect();
    names.sort_by(|a, b| natural_cmp(a, b));
    for w in names.windows(2) {
        if w[0] == w[1] {
            return Err(ModelError::BadTerm(format!("{} appears twice", w[0])));
        }
    }
    let mut cols = Vec::with_capacity(names.len());
    let mut scope = Vec::with_capacity(names.len());
    for n in &names {
        let c = data.column_index(n).ok_or_else(|| ModelError::UnknownVariable(n.to_string()))?;
        if cols.contains(&c) {
            return Err(ModelError::BadTerm(format!("{n} reads the same column as another variable in the term")));
        }
        cols.push(c);
        scope.push(Variable::new(n, data.columns()[c].domain_size()));
    }
    let cond_pos: Vec<usize> = (0..names.len()).filter(|&i| right.contains(&names[i])).collect();

    let (keys, counts) = count_projections(data, &cols, exec);
    let arity = cols.len();
    let n = data.n_rows() as f64;
    let values: Vec<f64> = if cond_pos.is_empty() {
        counts.iter().map(|&c| c as f64 / n).collect()
    } else {
        let rcols: Vec<usize> = cond_pos.iter().map(|&i| cols[i]).collect();
        let (rkeys, rcounts) = count_projections(data, &rcols, exec);
        let rw = rcols.len();
        (0..counts.len())
            .map(|e| {
                let k: Vec<u32> = cond_pos.iter().map(|&i| keys[e * arity + i]).collect();
                let idx = binary_search_rows(&rkeys, rw, &k).expect("conditioning configuration was observed");
                counts[e] as f64 / rcounts[idx] as f64
            })
            .collect()
    };
    Ok(SparseFactor::from_sorted_parts(scope, keys, values))
}

/// Distinct projections of every row onto `cols`, sorted, with counts.
fn count_projections(data: &Dataset, cols: &[usize], exec: Exec) -> (Vec<u32>, Vec<u64>) {
    let a = cols.len();
    let proj: Vec<u32> = (0..data.n_rows()).flat_map(|r| cols.iter().map(move |&c| data.row(r)[c])).collect();
    let pk = |r: usize| &proj[r * a..(r + 1) * a];
    let mut order: Vec<usize> = (0..data.n_rows()).collect();
    exec.sort_by(&mut order, |&x, &y| pk(x).cmp(pk(y)));
    let mut keys = Vec::new();
    let mut counts = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let k = pk(order[i]);
        let j = i + order[i..].iter().take_while(|&&r| pk(r) == k).count();
        keys.extend_from_slice(k);
        counts.push((j - i) as u64);
        i = j;
    }
    (keys, counts)
}

fn binary_search_rows(keys: &[u32], width: usize, key: &[u32]) -> Option<usize> {
    let n = keys.len().checked_div(width).unwrap_or(1);
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        match keys[mid * width..(mid + 1) * width].cmp(key) {
            std::cmp::Ordering::Less => lo = mid + 1,
            std::cmp::Ordering::Greater => hi = mid,
            std::cmp::Ordering::Equal => return Some(mid),
        }
    }
    None
}
