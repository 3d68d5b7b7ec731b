//! Relational factors: only non-zero assignments are stored.
//!
//! Keys are fixed-width `u32` tuples laid out row-major in one buffer and
//! kept in lexicographic order of the scope, which is itself kept in natural
//! name order. Product and marginalization are sort/merge based, so their
//! cost depends on the number of stored entries rather than on the dense
//! table size.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Variable;
use crate::names::natural_cmp;
use crate::Exec;

/// Values below this magnitude are treated as zero and dropped.
pub const UNDERFLOW: f64 = 1e-300;

static UNDERFLOW_DROPS: AtomicU64 = AtomicU64::new(0);

/// Number of entries dropped process-wide because a product underflowed.
pub fn underflow_drops() -> u64 {
    UNDERFLOW_DROPS.load(AtomicOrdering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("variable {name} has domain {left} in one factor and {right} in another")]
    ScopeConflict { name: String, left: u32, right: u32 },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("duplicate variable {0} in scope")]
    DuplicateVariable(String),
    #[error("assignment does not cover variable {0}")]
    IncompleteAssignment(String),
    #[error("value {value} out of domain for {name} (size {domain})")]
    DomainViolation { name: String, value: u32, domain: u32 },
    #[error("key width {got} does not match scope width {expected}")]
    KeyWidth { expected: usize, got: usize },
    #[error("duplicate key {0:?}")]
    DuplicateKey(Vec<u32>),
    #[error("factor value must be finite and non-negative, got {0}")]
    BadValue(f64),
    #[error("malformed factor text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Entry count and fill ratio of a factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FactorStats {
    pub tightness: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseFactor {
    scope: Vec<Variable>,
    keys: Vec<u32>,
    values: Vec<f64>,
}

impl SparseFactor {
    /// A factor over the empty scope holding `value` (absent when zero).
    pub fn scalar(value: f64) -> Self {
        let values = if value.abs() < UNDERFLOW { vec![] } else { vec![value] };
        SparseFactor { scope: vec![], keys: vec![], values }
    }

    /// The multiplicative identity.
    pub fn one() -> Self {
        Self::scalar(1.0)
    }

    /// An entry-less factor over `scope`.
    pub fn empty(scope: Vec<Variable>) -> Result<Self, FactorError> {
        Self::from_entries(scope, std::iter::empty())
    }

    /// Builds a factor from `(key, value)` pairs whose key components follow
    /// the order of `scope` as given. Zero values are dropped.
    pub fn from_entries<I>(scope: Vec<Variable>, entries: I) -> Result<Self, FactorError>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let arity = scope.len();
        let mut perm: Vec<usize> = (0..arity).collect();
        perm.sort_by(|&a, &b| natural_cmp(scope[a].name(), scope[b].name()));
        for w in perm.windows(2) {
            if scope[w[0]].name() == scope[w[1]].name() {
                return Err(FactorError::DuplicateVariable(scope[w[0]].name().to_string()));
            }
        }
        let sorted_scope: Vec<Variable> = perm.iter().map(|&i| scope[i].clone()).collect();
        let mut rows: Vec<(Vec<u32>, f64)> = Vec::new();
        for (key, value) in entries {
            if key.len() != arity {
                return Err(FactorError::KeyWidth { expected: arity, got: key.len() });
            }
            if !value.is_finite() || value < 0.0 {
                return Err(FactorError::BadValue(value));
            }
            for (v, &x) in scope.iter().zip(&key) {
                if x >= v.domain_size() {
                    return Err(FactorError::DomainViolation {
                        name: v.name().to_string(),
                        value: x,
                        domain: v.domain_size(),
                    });
                }
            }
            if value < UNDERFLOW {
                continue;
            }
            let k: Vec<u32> = perm.iter().map(|&i| key[i]).collect();
            rows.push((k, value));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(FactorError::DuplicateKey(w[0].0.clone()));
            }
        }
        let mut keys = Vec::with_capacity(rows.len() * arity);
        let mut values = Vec::with_capacity(rows.len());
        for (k, v) in rows {
            keys.extend_from_slice(&k);
            values.push(v);
        }
        Ok(SparseFactor { scope: sorted_scope, keys, values })
    }

    /// Internal constructor: scope sorted, keys sorted and unique, values non-zero.
    pub(crate) fn from_sorted_parts(scope: Vec<Variable>, keys: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(keys.len(), values.len() * scope.len());
        SparseFactor { scope, keys, values }
    }

    pub fn scope(&self) -> &[Variable] {
        &self.scope
    }

    pub fn scope_names(&self) -> Vec<&str> {
        self.scope.iter().map(|v| v.name()).collect()
    }

    pub fn arity(&self) -> usize {
        self.scope.len()
    }

    /// Tightness: the number of stored (non-zero) entries.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[u32] {
        let a = self.arity();
        &self.keys[i * a..(i + 1) * a]
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], f64)> + '_ {
        (0..self.len()).map(move |i| (self.key(i), self.values[i]))
    }

    /// Sum of all stored values.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.scope.iter().position(|v| v.name() == name)
    }

    /// Stored value at `key` (in scope order), or 0.
    pub fn get(&self, key: &[u32]) -> f64 {
        if key.len() != self.arity() {
            return 0.0;
        }
        match self.search(key) {
            Ok(i) => self.values[i],
            Err(_) => 0.0,
        }
    }

    fn search(&self, key: &[u32]) -> Result<usize, usize> {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.key(mid).cmp(key) {
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
                Ordering::Equal => return Ok(mid),
            }
        }
        Err(lo)
    }

    /// Value under a (possibly larger) assignment given as a lookup.
    pub fn dense_eval<F>(&self, lookup: F) -> Result<f64, FactorError>
    where
        F: Fn(&str) -> Option<u32>,
    {
        let mut key = Vec::with_capacity(self.arity());
        for v in &self.scope {
            let x = lookup(v.name()).ok_or_else(|| FactorError::IncompleteAssignment(v.name().to_string()))?;
            if x >= v.domain_size() {
                return Ok(0.0);
            }
            key.push(x);
        }
        Ok(self.get(&key))
    }

    pub fn stats(&self) -> FactorStats {
        let cells: f64 = self.scope.iter().map(|v| v.domain_size() as f64).product();
        FactorStats { tightness: self.len(), density: self.len() as f64 / cells }
    }

    /// Number of cells of the dense table over this scope.
    pub fn dense_size(&self) -> f64 {
        self.scope.iter().map(|v| v.domain_size() as f64).product()
    }

    /// Entrywise reciprocal over the same key set.
    pub fn invert(&self) -> SparseFactor {
        SparseFactor {
            scope: self.scope.clone(),
            keys: self.keys.clone(),
            values: self.values.iter().map(|v| 1.0 / v).collect(),
        }
    }

    /// Entries whose `name` component equals `value`; the scope is kept.
    pub fn restrict(&self, name: &str, value: u32) -> SparseFactor {
        let Some(p) = self.position(name) else {
            return self.clone();
        };
        let a = self.arity();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (k, v) in self.iter() {
            if k[p] == value {
                keys.extend_from_slice(k);
                values.push(v);
            }
        }
        debug_assert_eq!(keys.len(), values.len() * a);
        SparseFactor { scope: self.scope.clone(), keys, values }
    }

    /// Sums out `out_vars`.
    pub fn marginalize(&self, out_vars: &[&str]) -> Result<SparseFactor, FactorError> {
        self.marginalize_with(out_vars, Exec::Parallel)
    }

    pub fn marginalize_with(&self, out_vars: &[&str], exec: Exec) -> Result<SparseFactor, FactorError> {
        for name in out_vars {
            if self.position(name).is_none() {
                return Err(FactorError::UnknownVariable(name.to_string()));
            }
        }
        let keep: Vec<usize> = (0..self.arity()).filter(|&i| !out_vars.contains(&self.scope[i].name())).collect();
        Ok(self.project_positions(&keep, exec))
    }

    /// Sums out every variable not in `keep`; names absent from the scope are ignored.
    pub fn project_onto(&self, keep: &[&str]) -> SparseFactor {
        self.project_onto_with(keep, Exec::Parallel)
    }

    pub fn project_onto_with(&self, keep: &[&str], exec: Exec) -> SparseFactor {
        let pos: Vec<usize> = (0..self.arity()).filter(|&i| keep.contains(&self.scope[i].name())).collect();
        self.project_positions(&pos, exec)
    }

    fn project_positions(&self, keep: &[usize], exec: Exec) -> SparseFactor {
        let a = self.arity();
        if keep.len() == a {
            return self.clone();
        }
        let scope: Vec<Variable> = keep.iter().map(|&i| self.scope[i].clone()).collect();
        let b = keep.len();
        if b == 0 {
            return SparseFactor::scalar(self.total());
        }
        let proj: Vec<u32> = (0..self.len()).flat_map(|r| keep.iter().map(move |&i| self.keys[r * a + i])).collect();
        let pk = |r: usize| &proj[r * b..(r + 1) * b];
        // A kept prefix of the scope is already in sorted order.
        let prefix = keep.iter().enumerate().all(|(j, &i)| i == j);
        let mut order: Vec<usize> = (0..self.len()).collect();
        if !prefix {
            exec.sort_by(&mut order, |&x, &y| pk(x).cmp(pk(y)));
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let k = pk(order[i]);
            let mut s = 0.0;
            let mut j = i;
            while j < order.len() && pk(order[j]) == k {
                s += self.values[order[j]];
                j += 1;
            }
            if s >= UNDERFLOW {
                keys.extend_from_slice(k);
                values.push(s);
            } else {
                UNDERFLOW_DROPS.fetch_add(1, AtomicOrdering::Relaxed);
            }
            i = j;
        }
        SparseFactor { scope, keys, values }
    }

    /// Pointwise product over the union of both scopes.
    pub fn product(&self, other: &SparseFactor) -> Result<SparseFactor, FactorError> {
        self.product_with(other, Exec::Parallel)
    }

    pub fn product_with(&self, other: &SparseFactor, exec: Exec) -> Result<SparseFactor, FactorError> {
        Ok(self.join(other, false, exec)?.0)
    }

    /// Product that also reports how many entries of `self` found no
    /// partner in `other` on the shared variables.
    pub fn product_counting_misses(
        &self,
        other: &SparseFactor,
        exec: Exec,
    ) -> Result<(SparseFactor, usize), FactorError> {
        self.join(other, true, exec)
    }

    fn join(&self, other: &SparseFactor, count_misses: bool, exec: Exec) -> Result<(SparseFactor, usize), FactorError> {
        let plan = JoinPlan::new(&self.scope, &other.scope)?;
        let (fa, ga) = (self.arity(), other.arity());
        let sh = plan.shared.len();
        let fproj: Vec<u32> =
            (0..self.len()).flat_map(|r| plan.shared.iter().map(move |&(i, _)| self.keys[r * fa + i])).collect();
        let gproj: Vec<u32> =
            (0..other.len()).flat_map(|r| plan.shared.iter().map(move |&(_, j)| other.keys[r * ga + j])).collect();
        let fk = |r: usize| &fproj[r * sh..(r + 1) * sh];
        let gk = |r: usize| &gproj[r * sh..(r + 1) * sh];
        let mut forder: Vec<usize> = (0..self.len()).collect();
        let mut gorder: Vec<usize> = (0..other.len()).collect();
        if sh > 0 {
            exec.sort_by(&mut forder, |&x, &y| fk(x).cmp(fk(y)));
            exec.sort_by(&mut gorder, |&x, &y| gk(x).cmp(gk(y)));
        }

        let ua = plan.union.len();
        let mut keys: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut misses = 0usize;
        let (mut i, mut j) = (0, 0);
        while i < forder.len() {
            let fkey = fk(forder[i]);
            let iend = i + forder[i..].iter().take_while(|&&r| fk(r) == fkey).count();
            while j < gorder.len() && gk(gorder[j]) < fkey {
                j += 1;
            }
            let jstart = j;
            let jend = j + gorder[j..].iter().take_while(|&&r| gk(r) == fkey).count();
            if jstart == jend {
                misses += iend - i;
            }
            for &fr in &forder[i..iend] {
                for &gr in &gorder[jstart..jend] {
                    let v = self.values[fr] * other.values[gr];
                    if v < UNDERFLOW {
                        UNDERFLOW_DROPS.fetch_add(1, AtomicOrdering::Relaxed);
                        continue;
                    }
                    for src in &plan.union {
                        keys.push(match *src {
                            Source::Left(p) => self.keys[fr * fa + p],
                            Source::Right(p) => other.keys[gr * ga + p],
                        });
                    }
                    values.push(v);
                }
            }
            i = iend;
            j = jend;
        }
        if !count_misses {
            misses = 0;
        }
        let out = sort_rows(plan.scope, ua, keys, values, exec);
        Ok((out, misses))
    }

    /// Divides every entry by the sum over `outcome` for the same
    /// configuration of the remaining variables.
    pub fn normalize_over(&self, outcome: &[&str]) -> Result<SparseFactor, FactorError> {
        let z = self.marginalize(outcome)?;
        self.product(&z.invert())
    }

    /// Renames scope variables; the result is re-sorted into canonical order.
    pub fn rename(&self, map: &dyn Fn(&str) -> String) -> Result<SparseFactor, FactorError> {
        let scope: Vec<Variable> = self.scope.iter().map(|v| Variable::new(&map(v.name()), v.domain_size())).collect();
        SparseFactor::from_entries(scope, self.iter().map(|(k, v)| (k.to_vec(), v)))
    }

    /// Text form used by fixtures: a `scope:` header of `name:domain` items,
    /// then one `v1,v2,...,vk=value` line per entry.
    pub fn to_debug_string(&self) -> String {
        let mut s = String::from("scope:");
        let items: Vec<String> = self.scope.iter().map(|v| format!("{}:{}", v.name(), v.domain_size())).collect();
        s.push_str(&items.join(","));
        s.push('\n');
        for (k, v) in self.iter() {
            let ks: Vec<String> = k.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{}={:?}", ks.join(","), v);
        }
        s
    }

    pub fn parse_debug(text: &str) -> Result<SparseFactor, FactorError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(FactorError::Parse { line: 1, msg: "missing scope header".into() })?;
        let header = header
            .trim()
            .strip_prefix("scope:")
            .ok_or(FactorError::Parse { line: 1, msg: "expected `scope:`".into() })?;
        let mut scope = Vec::new();
        for item in header.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, dom) = item
                .split_once(':')
                .ok_or(FactorError::Parse { line: 1, msg: format!("expected name:domain, got {item}") })?;
            let dom: u32 =
                dom.trim().parse().map_err(|_| FactorError::Parse { line: 1, msg: format!("bad domain in {item}") })?;
            scope.push(Variable::new(name.trim(), dom));
        }
        let mut entries = Vec::new();
        for (ln, line) in lines {
            let (k, v) =
                line.split_once('=').ok_or(FactorError::Parse { line: ln + 1, msg: "expected key=value".into() })?;
            let key: Result<Vec<u32>, _> =
                k.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect();
            let key = key.map_err(|_| FactorError::Parse { line: ln + 1, msg: "bad key".into() })?;
            let value: f64 =
                v.trim().parse().map_err(|_| FactorError::Parse { line: ln + 1, msg: "bad value".into() })?;
            entries.push((key, value));
        }
        SparseFactor::from_entries(scope, entries)
    }
}

#[derive(Clone, Copy)]
enum Source {
    Left(usize),
    Right(usize),
}

struct JoinPlan {
    scope: Vec<Variable>,
    union: Vec<Source>,
    shared: Vec<(usize, usize)>,
}

impl JoinPlan {
    fn new(f: &[Variable], g: &[Variable]) -> Result<Self, FactorError> {
        let mut scope = Vec::with_capacity(f.len() + g.len());
        let mut union = Vec::with_capacity(f.len() + g.len());
        let mut shared = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < f.len() || j < g.len() {
            let ord = match (f.get(i), g.get(j)) {
                (Some(a), Some(b)) => natural_cmp(a.name(), b.name()),
                (Some(_), None) => Ordering::Less,
                _ => Ordering::Greater,
            };
            match ord {
                Ordering::Less => {
                    scope.push(f[i].clone());
                    union.push(Source::Left(i));
                    i += 1;
                }
                Ordering::Greater => {
                    scope.push(g[j].clone());
                    union.push(Source::Right(j));
                    j += 1;
                }
                Ordering::Equal => {
                    if f[i].domain_size() != g[j].domain_size() {
                        return Err(FactorError::ScopeConflict {
                            name: f[i].name().to_string(),
                            left: f[i].domain_size(),
                            right: g[j].domain_size(),
                        });
                    }
                    scope.push(f[i].clone());
                    union.push(Source::Left(i));
                    shared.push((i, j));
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(JoinPlan { scope, union, shared })
    }
}

fn sort_rows(scope: Vec<Variable>, arity: usize, keys: Vec<u32>, values: Vec<f64>, exec: Exec) -> SparseFactor {
    let n = values.len();
    let k = |r: usize| &keys[r * arity..(r + 1) * arity];
    if (1..n).all(|r| k(r - 1) < k(r)) {
        return SparseFactor { scope, keys, values };
    }
    let mut order: Vec<usize> = (0..n).collect();
    exec.sort_by(&mut order, |&x, &y| k(x).cmp(k(y)));
    let mut sk = Vec::with_capacity(keys.len());
    let mut sv = Vec::with_capacity(n);
    for r in order {
        sk.extend_from_slice(k(r));
        sv.push(values[r]);
    }
    SparseFactor { scope, keys: sk, values: sv }
}

#[derive(Serialize, Deserialize)]
struct FactorRepr {
    scope: Vec<VarRepr>,
    entries: Vec<EntryRepr>,
}

#[derive(Serialize, Deserialize)]
struct VarRepr {
    name: String,
    domain: u32,
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    key: Vec<u32>,
    value: f64,
}

impl Serialize for SparseFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        FactorRepr {
            scope: self.scope.iter().map(|v| VarRepr { name: v.name().to_string(), domain: v.domain_size() }).collect(),
            entries: self.iter().map(|(k, v)| EntryRepr { key: k.to_vec(), value: v }).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparseFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = FactorRepr::deserialize(d)?;
        let scope = r.scope.iter().map(|v| Variable::new(&v.name, v.domain)).collect();
        SparseFactor::from_entries(scope, r.entries.into_iter().map(|e| (e.key, e.value)))
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn var(n: &str, k: u32) -> Variable {
        Variable::new(n, k)
    }

    fn f_a() -> SparseFactor {
        SparseFactor::from_entries(vec![var("A", 2)], vec![(vec![0], 0.5), (vec![1], 0.5)]).unwrap()
    }

    #[test]
    fn scalar_is_identity_for_product() {
        let g = SparseFactor::from_entries(vec![var("A", 2), var("B", 2)], vec![(vec![0, 0], 1.0), (vec![1, 1], 0.3)])
            .unwrap();
        assert_eq!(SparseFactor::one().product(&g).unwrap(), g);
        assert_eq!(g.product(&SparseFactor::one()).unwrap(), g);
    }

    #[test]
    fn product_matches_dense_cells() {
        let g = SparseFactor::from_entries(vec![var("A", 2), var("B", 2)], vec![(vec![0, 0], 1.0)]).unwrap();
        let p = f_a().product(&g).unwrap();
        // dense enumeration of all four (A,B) cells
        for a in 0..2 {
            for b in 0..2 {
                let expect = f_a().get(&[a]) * g.get(&[a, b]);
                assert_eq!(p.get(&[a, b]), expect);
            }
        }
        assert_eq!(p.len(), 1);
        assert_eq!(p.get(&[0, 0]), 0.5);
    }

    #[test]
    fn product_scope_conflict() {
        let g = SparseFactor::from_entries(vec![var("A", 3)], vec![(vec![2], 1.0)]).unwrap();
        assert!(matches!(f_a().product(&g), Err(FactorError::ScopeConflict { .. })));
    }

    #[test]
    fn marginalize_by_hand() {
        let f = SparseFactor::from_entries(
            vec![var("A", 2), var("B", 2)],
            vec![(vec![0, 0], 0.2), (vec![0, 1], 0.3), (vec![1, 0], 0.5)],
        )
        .unwrap();
        let m = f.marginalize(&["B"]).unwrap();
        assert_eq!(m.scope_names(), vec!["A"]);
        assert!((m.get(&[0]) - 0.5).abs() < 1e-15);
        assert!((m.get(&[1]) - 0.5).abs() < 1e-15);
        assert_eq!(f.marginalize(&[]).unwrap(), f);
        assert!(matches!(f.marginalize(&["C"]), Err(FactorError::UnknownVariable(_))));
        let all = f.marginalize(&["A", "B"]).unwrap();
        assert_eq!(all.arity(), 0);
        assert!((all.get(&[]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invert_cases() {
        let f = SparseFactor::from_entries(vec![var("X", 2)], vec![(vec![0], 0.25), (vec![1], 4.0)]).unwrap();
        let g = f.invert();
        assert_eq!(g.get(&[0]), 4.0);
        assert_eq!(g.get(&[1]), 0.25);
        let one = SparseFactor::from_entries(vec![var("X", 2)], vec![(vec![0], 1.0)]).unwrap();
        assert_eq!(one.invert(), one);
    }

    #[test]
    fn dense_eval_absent_and_present() {
        let f = f_a();
        assert_eq!(f.dense_eval(|_| Some(1)).unwrap(), 0.5);
        let g = SparseFactor::from_entries(vec![var("A", 2)], vec![(vec![0], 0.5)]).unwrap();
        assert_eq!(g.dense_eval(|_| Some(1)).unwrap(), 0.0);
        assert!(matches!(g.dense_eval(|_| None), Err(FactorError::IncompleteAssignment(_))));
    }

    #[test]
    fn stats_cases() {
        let s = SparseFactor::one().stats();
        assert_eq!(s.tightness, 1);
        assert_eq!(s.density, 1.0);
        let f = SparseFactor::from_entries(
            vec![var("A", 2), var("B", 2)],
            vec![(vec![0, 0], 0.2), (vec![0, 1], 0.3), (vec![1, 0], 0.5)],
        )
        .unwrap();
        assert_eq!(f.stats().density, 0.75);
    }

    #[test]
    fn from_entries_reorders_scope() {
        let f =
            SparseFactor::from_entries(vec![var("V10", 3), var("V2", 2)], vec![(vec![2, 1], 0.5), (vec![0, 0], 0.5)])
                .unwrap();
        assert_eq!(f.scope_names(), vec!["V2", "V10"]);
        assert_eq!(f.get(&[1, 2]), 0.5);
        assert_eq!(f.key(0), &[0, 0]);
    }

    #[test]
    fn from_entries_errors() {
        assert!(matches!(
            SparseFactor::from_entries(vec![var("A", 2)], vec![(vec![2], 1.0)]),
            Err(FactorError::DomainViolation { .. })
        ));
        assert!(matches!(
            SparseFactor::from_entries(vec![var("A", 2)], vec![(vec![1], 1.0), (vec![1], 2.0)]),
            Err(FactorError::DuplicateKey(_))
        ));
        assert!(matches!(
            SparseFactor::from_entries(vec![var("A", 2), var("A", 2)], vec![]),
            Err(FactorError::DuplicateVariable(_))
        ));
    }

    #[test]
    fn debug_text_round_trip() {
        let f = SparseFactor::from_entries(
            vec![var("A", 2), var("B'", 3)],
            vec![(vec![0, 2], 0.125), (vec![1, 0], 1.0 / 3.0)],
        )
        .unwrap();
        let text = f.to_debug_string();
        assert!(text.starts_with("scope:A:2,B':3\n0,2=0.125\n"));
        assert_eq!(SparseFactor::parse_debug(&text).unwrap(), f);
        let s = SparseFactor::scalar(2.5);
        assert_eq!(SparseFactor::parse_debug(&s.to_debug_string()).unwrap(), s);
    }

    #[test]
    fn json_round_trip() {
        let f = f_a();
        let j = serde_json::to_string(&f).unwrap();
        let g: SparseFactor = serde_json::from_str(&j).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn misses_are_counted() {
        let h = SparseFactor::from_entries(vec![var("A", 3)], vec![(vec![0], 1.0), (vec![1], 1.0), (vec![2], 1.0)])
            .unwrap();
        let g = SparseFactor::from_entries(vec![var("A", 3)], vec![(vec![1], 2.0)]).unwrap();
        let (p, misses) = h.product_counting_misses(&g, Exec::Sequential).unwrap();
        assert_eq!(misses, 2);
        assert_eq!(p.len(), 1);
    }

    // ---- dense brute-force oracle -------------------------------------

    const NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

    fn domains() -> BTreeMap<&'static str, u32> {
        NAMES.iter().zip([2u32, 3, 2, 3, 2, 3]).map(|(n, k)| (*n, k)).collect()
    }

    fn grid(names: &[&str]) -> Vec<Vec<u32>> {
        let d = domains();
        let mut out = vec![vec![]];
        for n in names {
            let mut next = Vec::new();
            for p in &out {
                for x in 0..d[n] {
                    let mut q = p.clone();
                    q.push(x);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }

    /// Dense value of `f` at the full assignment `a` over NAMES.
    fn at(f: &SparseFactor, a: &[u32]) -> f64 {
        f.dense_eval(|n| NAMES.iter().position(|m| *m == n).map(|i| a[i])).unwrap()
    }

    fn arb_factor() -> impl Strategy<Value = SparseFactor> {
        (proptest::sample::subsequence(NAMES.to_vec(), 0..=4), any::<u64>()).prop_map(|(vars, seed)| {
            let d = domains();
            let scope: Vec<Variable> = vars.iter().map(|n| var(n, d[n])).collect();
            let cells = grid(&vars);
            let mut s = seed | 1;
            let entries = cells.into_iter().filter_map(|c| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                if s % 3 == 0 {
                    None
                } else {
                    Some((c, (s % 1000) as f64 / 997.0 + 0.001))
                }
            });
            SparseFactor::from_entries(scope, entries).unwrap()
        })
    }

    #[test]
    fn large_joins_agree_across_schedules() {
        // Big enough for the parallel sort path.
        let a = Variable::new("A", 200);
        let b = Variable::new("B", 200);
        let c = Variable::new("C", 3);
        let f = SparseFactor::from_entries(
            vec![a.clone(), b.clone()],
            (0..200u32).flat_map(|x| (0..200u32).map(move |y| (vec![x, y], 1.0 + ((x * 7 + y * 13) % 11) as f64))),
        )
        .unwrap();
        let g = SparseFactor::from_entries(
            vec![b, c],
            (0..200u32).flat_map(|y| (0..3u32).map(move |z| (vec![y, z], 0.5 + z as f64))),
        )
        .unwrap();
        let p = f.product_with(&g, Exec::Parallel).unwrap();
        let q = f.product_with(&g, Exec::Sequential).unwrap();
        assert_eq!(p.len(), 120_000);
        assert_eq!(p.to_debug_string(), q.to_debug_string());
        let mp = p.marginalize_with(&["A"], Exec::Parallel).unwrap();
        let mq = p.marginalize_with(&["A"], Exec::Sequential).unwrap();
        assert_eq!(mp.to_debug_string(), mq.to_debug_string());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

        #[test]
        fn product_tightness_bound(f in arb_factor(), g in arb_factor()) {
            let p = f.product(&g).unwrap();
            prop_assert!(p.len() <= f.len() * g.len());
        }

        #[test]
        fn invert_is_involution(f in arb_factor()) {
            let back = f.invert().invert();
            prop_assert_eq!(back.len(), f.len());
            for ((k1, v1), (k2, v2)) in f.iter().zip(back.iter()) {
                prop_assert_eq!(k1, k2);
                prop_assert!((v1 - v2).abs() <= 1e-12 * v1.abs());
            }
        }

        #[test]
        fn dense_sum_equals_entry_sum(f in arb_factor()) {
            let names = f.scope_names();
            let dense: f64 = grid(&names).iter().map(|c| f.get(c)).sum();
            prop_assert!((dense - f.total()).abs() <= 1e-12 * f.total().max(1.0));
        }

        #[test]
        fn product_is_commutative_and_associative(f in arb_factor(), g in arb_factor(), h in arb_factor()) {
            let fg_h = f.product(&g).unwrap().product(&h).unwrap();
            let f_gh = f.product(&g.product(&h).unwrap()).unwrap();
            let hgf = h.product(&g).unwrap().product(&f).unwrap();
            for a in grid(&NAMES) {
                let x = at(&fg_h, &a);
                prop_assert!((x - at(&f_gh, &a)).abs() <= 1e-12 * x.max(1e-300));
                prop_assert!((x - at(&hgf, &a)).abs() <= 1e-12 * x.max(1e-300));
            }
        }

        #[test]
        fn product_then_marginalize_matches_dense(f in arb_factor(), g in arb_factor(), k in 0usize..6) {
            let p = f.product(&g).unwrap();
            let out: Vec<&str> = p.scope_names().into_iter().take(k).collect();
            let m = p.marginalize(&out).unwrap();
            let keep: Vec<&str> = p.scope_names().into_iter().filter(|n| !out.contains(n)).collect();
            for kept in grid(&keep) {
                let mut expect = 0.0;
                for summed in grid(&out) {
                    let lookup = |n: &str| {
                        keep.iter().position(|m| *m == n).map(|i| kept[i])
                            .or_else(|| out.iter().position(|m| *m == n).map(|i| summed[i]))
                    };
                    expect += f.dense_eval(lookup).unwrap() * g.dense_eval(lookup).unwrap();
                }
                let got = m.get(&kept);
                prop_assert!((got - expect).abs() <= 1e-12 * expect.max(1e-300), "{} vs {}", got, expect);
            }
        }

        #[test]
        fn marginalize_commutes(f in arb_factor()) {
            let names = f.scope_names();
            prop_assume!(names.len() >= 2);
            let (a, b) = (names[0], names[names.len() - 1]);
            let two_step = f.marginalize(&[a]).unwrap().marginalize(&[b]).unwrap();
            let one_step = f.marginalize(&[a, b]).unwrap();
            prop_assert_eq!(two_step.len(), one_step.len());
            for ((k1, v1), (k2, v2)) in two_step.iter().zip(one_step.iter()) {
                prop_assert_eq!(k1, k2);
                prop_assert!((v1 - v2).abs() <= 1e-12 * v1.abs());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

        #[test]
        fn marginalize_conserves_mass(f in arb_factor(), k in 0usize..5) {
            let out: Vec<&str> = f.scope_names().into_iter().take(k).collect();
            let m = f.marginalize(&out).unwrap();
            prop_assert!((m.total() - f.total()).abs() <= 1e-9 * f.total().max(1e-300));
        }
    }
}
