//! Estimand expressions: parsing, flattening into sum-product levels, and a
//! literal dense evaluator used as the reference semantics.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! estimand := [ query "=" ] expr
//! query    := "P" "(" varlist "|" dolist ")"
//! dolist   := "do" "(" varlist ")" { "," "do" "(" varlist ")" }
//! expr     := product [ "/" factor ]
//! product  := factor { factor }
//! factor   := prob | sum | "(" expr ")"
//! sum      := "sum" "[" varlist "]" "(" expr ")"
//! prob     := "P" "(" varlist [ "|" varlist ] ")"
//! varlist  := ident { "," ident }
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::factor::{FactorError, SparseFactor};
use crate::names::{base_name, natural_cmp, sort_names};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("variable {name} bound twice in one sum at offset {pos}")]
    DuplicateBoundVar { name: String, pos: usize },
    #[error("variable {name} on both sides of a probability term at offset {pos}")]
    OverlappingTerm { name: String, pos: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("dense evaluation needs {cells} cells, above the limit {limit}")]
    DenseLimitExceeded { cells: f64, limit: f64 },
    #[error("division of {numerator} by zero at {assignment}")]
    DivisionByZero { numerator: f64, assignment: String },
    #[error("no factor bound for term {0}")]
    Unbound(String),
    #[error("no domain known for variable {0}")]
    UnknownDomain(String),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

/// `P(left | right)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ProbTerm {
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl ProbTerm {
    pub fn new(left: &[&str], right: &[&str]) -> Self {
        ProbTerm {
            left: left.iter().map(|s| s.to_string()).collect(),
            right: right.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = &String> {
        self.left.iter().chain(&self.right)
    }

    /// Canonical text of the term with renamer primes removed, so that a
    /// renamed copy binds to the same empirical table as its original.
    pub fn base_key(&self) -> String {
        let mut l: Vec<String> = self.left.iter().map(|s| base_name(s).to_string()).collect();
        let mut r: Vec<String> = self.right.iter().map(|s| base_name(s).to_string()).collect();
        sort_names(&mut l);
        sort_names(&mut r);
        if r.is_empty() {
            format!("P({})", l.join(","))
        } else {
            format!("P({}|{})", l.join(","), r.join(","))
        }
    }

    fn rename(&self, renames: &HashMap<String, String>) -> ProbTerm {
        let m = |v: &String| renames.get(v).cloned().unwrap_or_else(|| v.clone());
        ProbTerm { left: self.left.iter().map(m).collect(), right: self.right.iter().map(m).collect() }
    }
}

impl fmt::Display for ProbTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.right.is_empty() {
            write!(f, "P({})", self.left.join(","))
        } else {
            write!(f, "P({}|{})", self.left.join(","), self.right.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Prob(ProbTerm),
    Product(Vec<Expr>),
    Sum { vars: Vec<String>, body: Box<Expr> },
    Ratio { num: Box<Expr>, den: Box<Expr> },
}

impl Expr {
    pub fn free_vars(&self) -> BTreeSet<String> {
        match self {
            Expr::Prob(t) => t.vars().cloned().collect(),
            Expr::Product(cs) => cs.iter().flat_map(|c| c.free_vars()).collect(),
            Expr::Sum { vars, body } => {
                let mut f = body.free_vars();
                for v in vars {
                    f.remove(v);
                }
                f
            }
            Expr::Ratio { num, den } => {
                let mut f = num.free_vars();
                f.extend(den.free_vars());
                f
            }
        }
    }

    /// Every identifier mentioned anywhere, bound or free.
    pub fn all_vars(&self) -> BTreeSet<String> {
        match self {
            Expr::Prob(t) => t.vars().cloned().collect(),
            Expr::Product(cs) => cs.iter().flat_map(|c| c.all_vars()).collect(),
            Expr::Sum { vars, body } => {
                let mut f = body.all_vars();
                f.extend(vars.iter().cloned());
                f
            }
            Expr::Ratio { num, den } => {
                let mut f = num.all_vars();
                f.extend(den.all_vars());
                f
            }
        }
    }

    /// Free variables in natural order.
    pub fn free_vars_sorted(&self) -> Vec<String> {
        let mut v: Vec<String> = self.free_vars().into_iter().collect();
        sort_names(&mut v);
        v
    }

    pub fn terms(&self) -> Vec<&ProbTerm> {
        let mut out = Vec::new();
        self.collect_terms(&mut out);
        out
    }

    fn collect_terms<'a>(&'a self, out: &mut Vec<&'a ProbTerm>) {
        match self {
            Expr::Prob(t) => out.push(t),
            Expr::Product(cs) => cs.iter().for_each(|c| c.collect_terms(out)),
            Expr::Sum { body, .. } => body.collect_terms(out),
            Expr::Ratio { num, den } => {
                num.collect_terms(out);
                den.collect_terms(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Prob(t) => write!(f, "{t}"),
            Expr::Product(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    match c {
                        Expr::Ratio { .. } | Expr::Product(_) => write!(f, "({c})")?,
                        _ => write!(f, "{c}")?,
                    }
                }
                Ok(())
            }
            Expr::Sum { vars, body } => write!(f, "sum[{}]({})", vars.join(","), body),
            Expr::Ratio { num, den } => {
                match **num {
                    Expr::Ratio { .. } => write!(f, "({num})")?,
                    _ => write!(f, "{num}")?,
                }
                write!(f, " / ({den})")
            }
        }
    }
}

/// The optional `P(Y | do(X))` head of an estimand.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Query {
    pub outcome: Vec<String>,
    pub intervened: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimand {
    pub query: Option<Query>,
    pub expr: Expr,
}

/// Parses an expression without a query head.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let est = parse_estimand(text)?;
    if est.query.is_some() {
        return Err(ParseError::Syntax { pos: 0, msg: "unexpected query head".into() });
    }
    Ok(est.expr)
}

/// Parses an estimand, optionally headed by `P(Y | do(X)) =`.
pub fn parse_estimand(text: &str) -> Result<Estimand, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, i: 0, end: text.len() };
    let query = if p.toks.iter().any(|t| t.kind == Tok::Eq) { Some(p.query()?) } else { None };
    let expr = p.expr()?;
    if p.i < p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(Estimand { query, expr })
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Bar,
    Slash,
    Eq,
}

#[derive(Clone, Debug)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let kind = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            '|' => Tok::Bar,
            '/' => Tok::Slash,
            '=' => Tok::Eq,
            '\'' => {
                return Err(ParseError::Syntax { pos: i, msg: "apostrophes are reserved for renamed variables".into() })
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'\'' {
                    return Err(ParseError::Syntax {
                        pos: i,
                        msg: "apostrophes are reserved for renamed variables".into(),
                    });
                }
                out.push(Token { kind: Tok::Ident(text[start..i].to_string()), pos: start });
                continue;
            }
            other => return Err(ParseError::Syntax { pos: i, msg: format!("unexpected character {other:?}") }),
        };
        out.push(Token { kind, pos: i });
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
    end: usize,
}

impl Parser {
    fn pos(&self) -> usize {
        self.toks.get(self.i).map(|t| t.pos).unwrap_or(self.end)
    }

    fn err(&self, msg: &str) -> ParseError {
        ParseError::Syntax { pos: self.pos(), msg: msg.to_string() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.kind)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.i + 1).map(|t| &t.kind)
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&t) {
            self.i += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected {what}")))
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.i += 1;
                Ok(())
            }
            _ => Err(self.err(&format!("expected `{kw}`"))),
        }
    }

    fn varlist(&mut self) -> Result<Vec<(String, usize)>, ParseError> {
        let mut out = Vec::new();
        loop {
            let pos = self.pos();
            match self.peek() {
                Some(Tok::Ident(s)) => {
                    out.push((s.clone(), pos));
                    self.i += 1;
                }
                _ => return Err(self.err("expected variable name")),
            }
            if self.peek() == Some(&Tok::Comma) {
                self.i += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        self.keyword("P")?;
        self.expect(Tok::LParen, "`(`")?;
        let outcome = self.varlist()?.into_iter().map(|v| v.0).collect();
        self.expect(Tok::Bar, "`|`")?;
        let mut intervened = Vec::new();
        loop {
            self.keyword("do")?;
            self.expect(Tok::LParen, "`(`")?;
            intervened.extend(self.varlist()?.into_iter().map(|v| v.0));
            self.expect(Tok::RParen, "`)`")?;
            if self.peek() == Some(&Tok::Comma) {
                self.i += 1;
            } else {
                break;
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        self.expect(Tok::Eq, "`=`")?;
        Ok(Query { outcome, intervened })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let num = self.product()?;
        if self.peek() == Some(&Tok::Slash) {
            self.i += 1;
            let den = self.factor()?;
            return Ok(Expr::Ratio { num: Box::new(num), den: Box::new(den) });
        }
        Ok(num)
    }

    fn starts_factor(&self) -> bool {
        match self.peek() {
            Some(Tok::LParen) => true,
            Some(Tok::Ident(s)) if s == "P" => self.peek2() == Some(&Tok::LParen),
            Some(Tok::Ident(s)) if s == "sum" => self.peek2() == Some(&Tok::LBracket),
            _ => false,
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut items = vec![self.factor()?];
        while self.starts_factor() {
            items.push(self.factor()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { Expr::Product(items) })
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.i += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(s)) if s == "sum" && self.peek2() == Some(&Tok::LBracket) => {
                self.i += 2;
                let vars = self.varlist()?;
                for (k, (v, pos)) in vars.iter().enumerate() {
                    if vars[..k].iter().any(|w| &w.0 == v) {
                        return Err(ParseError::DuplicateBoundVar { name: v.clone(), pos: *pos });
                    }
                }
                self.expect(Tok::RBracket, "`]`")?;
                self.expect(Tok::LParen, "`(`")?;
                let body = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::Sum { vars: vars.into_iter().map(|v| v.0).collect(), body: Box::new(body) })
            }
            Some(Tok::Ident(s)) if s == "P" && self.peek2() == Some(&Tok::LParen) => {
                self.i += 2;
                let left = self.varlist()?;
                let right = if self.peek() == Some(&Tok::Bar) {
                    self.i += 1;
                    self.varlist()?
                } else {
                    vec![]
                };
                self.expect(Tok::RParen, "`)`")?;
                let all: Vec<&(String, usize)> = left.iter().chain(&right).collect();
                for (k, (v, pos)) in all.iter().map(|x| (&x.0, x.1)).enumerate() {
                    if all[..k].iter().any(|w| &w.0 == v) {
                        return Err(ParseError::OverlappingTerm { name: v.clone(), pos });
                    }
                }
                Ok(Expr::Prob(ProbTerm {
                    left: left.into_iter().map(|v| v.0).collect(),
                    right: right.into_iter().map(|v| v.0).collect(),
                }))
            }
            _ => Err(self.err("expected `P(...)`, `sum[...]` or `(`")),
        }
    }
}

// ---- flattening -------------------------------------------------------------

/// A factor of a flat level: an observational term, or the (to be inverted)
/// output function of a child level.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelFactor {
    Term(ProbTerm),
    ChildOutput { child: usize, scope: Vec<String> },
}

impl LevelFactor {
    pub fn scope(&self) -> Vec<String> {
        match self {
            LevelFactor::Term(t) => {
                let mut v: Vec<String> = t.vars().cloned().collect();
                sort_names(&mut v);
                v
            }
            LevelFactor::ChildOutput { scope, .. } => scope.clone(),
        }
    }

    pub fn is_child_output(&self) -> bool {
        matches!(self, LevelFactor::ChildOutput { .. })
    }
}

impl fmt::Display for LevelFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelFactor::Term(t) => write!(f, "{t}"),
            LevelFactor::ChildOutput { child, scope } => write!(f, "1/O{child}({})", scope.join(",")),
        }
    }
}

/// One sum-product expression with every summation moved to the front.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatLevel {
    pub id: usize,
    pub parent: Option<usize>,
    pub factors: Vec<LevelFactor>,
    pub sum_vars: Vec<String>,
    pub free_vars: Vec<String>,
    pub children: Vec<usize>,
    /// Fresh name -> original name.
    pub rename_map: Vec<(String, String)>,
}

impl FlatLevel {
    /// All variables mentioned by the level's factors.
    pub fn variables(&self) -> Vec<String> {
        let mut v: Vec<String> = self.factors.iter().flat_map(|f| f.scope()).collect();
        sort_names(&mut v);
        v
    }
}

impl fmt::Display for FlatLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}({}) = sum[{}] ", self.id, self.free_vars.join(","), self.sum_vars.join(","))?;
        let fs: Vec<String> = self.factors.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", fs.join(" "))
    }
}

/// Levels linked child (denominator) to parent (numerator).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hierarchy {
    pub levels: Vec<FlatLevel>,
    pub root: usize,
}

impl Hierarchy {
    /// Level ids with every child before its parent.
    pub fn bottom_up(&self) -> Vec<usize> {
        fn visit(h: &Hierarchy, id: usize, out: &mut Vec<usize>) {
            for &c in &h.levels[id].children {
                visit(h, c, out);
            }
            out.push(id);
        }
        let mut out = Vec::new();
        visit(self, self.root, &mut out);
        out
    }

    pub fn depth(&self) -> usize {
        fn d(h: &Hierarchy, id: usize) -> usize {
            1 + h.levels[id].children.iter().map(|&c| d(h, c)).max().unwrap_or(0)
        }
        d(self, self.root)
    }

    pub fn root_level(&self) -> &FlatLevel {
        &self.levels[self.root]
    }
}

/// Hoists every summation to the front of its level, renaming bound
/// variables that would capture another occurrence, and turns each
/// denominator into a child level whose output enters the parent as an
/// inverted factor.
pub fn flatten(expr: &Expr) -> Hierarchy {
    let mut fl = Flattener::default();
    let root = fl.level(None, expr, &HashMap::new());
    Hierarchy { levels: fl.levels, root }
}

#[derive(Default)]
struct Flattener {
    levels: Vec<FlatLevel>,
    taken: BTreeSet<String>,
}

impl Flattener {
    fn level(&mut self, parent: Option<usize>, expr: &Expr, renames: &HashMap<String, String>) -> usize {
        let id = self.levels.len();
        let mut free: Vec<String> =
            expr.free_vars().into_iter().map(|v| renames.get(&v).cloned().unwrap_or(v)).collect();
        sort_names(&mut free);
        self.taken.extend(free.iter().cloned());
        self.levels.push(FlatLevel {
            id,
            parent,
            factors: vec![],
            sum_vars: vec![],
            free_vars: free,
            children: vec![],
            rename_map: vec![],
        });
        let mut r = renames.clone();
        self.fill_level(id, expr, &mut r);
        id
    }

    fn fresh(&self, name: &str) -> String {
        let mut cand = name.to_string();
        while self.taken.contains(&cand) {
            cand.push('\'');
        }
        cand
    }

    fn fill_level(&mut self, id: usize, expr: &Expr, renames: &mut HashMap<String, String>) {
        match expr {
            Expr::Prob(t) => self.levels[id].factors.push(LevelFactor::Term(t.rename(renames))),
            Expr::Product(cs) => {
                for c in cs {
                    self.fill_level(id, c, renames);
                }
            }
            Expr::Sum { vars, body } => {
                let body_free = body.free_vars();
                let saved = renames.clone();
                for v in vars {
                    if !body_free.contains(v) {
                        log::warn!("summation variable {v} does not occur in its body; dropped");
                        continue;
                    }
                    let fresh = self.fresh(v);
                    self.taken.insert(fresh.clone());
                    let lvl = &mut self.levels[id];
                    lvl.sum_vars.push(fresh.clone());
                    if &fresh != v {
                        lvl.rename_map.push((fresh.clone(), v.clone()));
                    }
                    renames.insert(v.clone(), fresh);
                }
                self.fill_level(id, body, renames);
                *renames = saved;
            }
            Expr::Ratio { num, den } => {
                self.fill_level(id, num, renames);
                let child = self.level(Some(id), den, renames);
                let scope = self.levels[child].free_vars.clone();
                let lvl = &mut self.levels[id];
                lvl.children.push(child);
                lvl.factors.push(LevelFactor::ChildOutput { child, scope });
            }
        }
    }
}

// ---- dense reference evaluation --------------------------------------------

/// Empirical (or exact) tables keyed by [`ProbTerm::base_key`].
pub type TermBindings = HashMap<String, SparseFactor>;

/// Evaluates a term's bound factor at an assignment of the term's own
/// (possibly primed) variable names.
fn term_value(t: &ProbTerm, bindings: &TermBindings, lookup: &dyn Fn(&str) -> Option<u32>) -> Result<f64, DenseError> {
    let key = t.base_key();
    let f = bindings.get(&key).ok_or_else(|| DenseError::Unbound(key.clone()))?;
    let v = f.dense_eval(|base| t.vars().find(|n| base_name(n) == base).and_then(|n| lookup(n)))?;
    Ok(v)
}

fn check_dense_limit<'a>(
    names: impl Iterator<Item = &'a String>,
    domains: &dyn Fn(&str) -> Option<u32>,
    limit: f64,
) -> Result<(), DenseError> {
    let mut cells = 1.0f64;
    for n in names {
        cells *= domains(n).ok_or_else(|| DenseError::UnknownDomain(n.clone()))? as f64;
    }
    if cells > limit {
        return Err(DenseError::DenseLimitExceeded { cells, limit });
    }
    Ok(())
}

/// Literal recursive evaluation of `expr` at an assignment of its free
/// variables: sums enumerate their domains, ratios divide (`0/0 = 0`).
pub fn dense_expr_eval(
    expr: &Expr,
    bindings: &TermBindings,
    domains: &dyn Fn(&str) -> Option<u32>,
    assignment: &HashMap<String, u32>,
    dense_limit: f64,
) -> Result<f64, DenseError> {
    check_dense_limit(expr.all_vars().iter(), domains, dense_limit)?;
    let mut env = assignment.clone();
    eval_expr(expr, bindings, domains, &mut env)
}

fn eval_expr(
    expr: &Expr,
    bindings: &TermBindings,
    domains: &dyn Fn(&str) -> Option<u32>,
    env: &mut HashMap<String, u32>,
) -> Result<f64, DenseError> {
    match expr {
        Expr::Prob(t) => term_value(t, bindings, &|n| env.get(n).copied()),
        Expr::Product(cs) => {
            let mut p = 1.0;
            for c in cs {
                p *= eval_expr(c, bindings, domains, env)?;
            }
            Ok(p)
        }
        Expr::Sum { vars, body } => {
            let saved: Vec<Option<u32>> = vars.iter().map(|v| env.get(v).copied()).collect();
            let doms: Vec<u32> = vars
                .iter()
                .map(|v| domains(v).ok_or_else(|| DenseError::UnknownDomain(v.clone())))
                .collect::<Result<_, _>>()?;
            let mut total = 0.0;
            let mut idx = vec![0u32; vars.len()];
            'outer: loop {
                for (v, &x) in vars.iter().zip(&idx) {
                    env.insert(v.clone(), x);
                }
                total += eval_expr(body, bindings, domains, env)?;
                for k in (0..idx.len()).rev() {
                    idx[k] += 1;
                    if idx[k] < doms[k] {
                        continue 'outer;
                    }
                    idx[k] = 0;
                }
                break;
            }
            for (v, s) in vars.iter().zip(saved) {
                match s {
                    Some(x) => env.insert(v.clone(), x),
                    None => env.remove(v),
                };
            }
            Ok(total)
        }
        Expr::Ratio { num, den } => {
            let n = eval_expr(num, bindings, domains, env)?;
            let d = eval_expr(den, bindings, domains, env)?;
            if d == 0.0 {
                if n == 0.0 {
                    return Ok(0.0);
                }
                let mut a: Vec<String> = env.iter().map(|(k, v)| format!("{k}={v}")).collect();
                a.sort_by(|x, y| natural_cmp(x, y));
                return Err(DenseError::DivisionByZero { numerator: n, assignment: a.join(",") });
            }
            Ok(n / d)
        }
    }
}

/// Dense bottom-up evaluation of a flattened hierarchy at an assignment of
/// the root's free variables. A child output of zero makes the term absent.
pub fn dense_hierarchy_eval(
    hier: &Hierarchy,
    bindings: &TermBindings,
    domains: &dyn Fn(&str) -> Option<u32>,
    assignment: &HashMap<String, u32>,
    dense_limit: f64,
) -> Result<f64, DenseError> {
    let all: BTreeSet<String> = hier.levels.iter().flat_map(|l| l.variables()).collect();
    check_dense_limit(all.iter(), domains, dense_limit)?;
    eval_level(hier, hier.root, bindings, domains, assignment)
}

fn eval_level(
    hier: &Hierarchy,
    id: usize,
    bindings: &TermBindings,
    domains: &dyn Fn(&str) -> Option<u32>,
    outer: &HashMap<String, u32>,
) -> Result<f64, DenseError> {
    let lvl = &hier.levels[id];
    let doms: Vec<u32> = lvl
        .sum_vars
        .iter()
        .map(|v| domains(v).ok_or_else(|| DenseError::UnknownDomain(v.clone())))
        .collect::<Result<_, _>>()?;
    let mut env = outer.clone();
    let mut idx = vec![0u32; lvl.sum_vars.len()];
    let mut total = 0.0;
    'outer: loop {
        for (v, &x) in lvl.sum_vars.iter().zip(&idx) {
            env.insert(v.clone(), x);
        }
        let mut p = 1.0;
        for f in &lvl.factors {
            p *= match f {
                LevelFactor::Term(t) => term_value(t, bindings, &|n| env.get(n).copied())?,
                LevelFactor::ChildOutput { child, .. } => {
                    let o = eval_level(hier, *child, bindings, domains, &env)?;
                    if o == 0.0 {
                        0.0
                    } else {
                        1.0 / o
                    }
                }
            };
            if p == 0.0 {
                break;
            }
        }
        total += p;
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < doms[k] {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::Variable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_single_term() {
        assert_eq!(parse("P(A)").unwrap(), Expr::Prob(ProbTerm::new(&["A"], &[])));
    }

    #[test]
    fn parse_napkin_ratio() {
        let e = parse("sum[W](P(X,Y|R,W) P(W)) / sum[W](P(X|R,W) P(W))").unwrap();
        match e {
            Expr::Ratio { num, den } => {
                assert!(matches!(*num, Expr::Sum { .. }));
                assert!(matches!(*den, Expr::Sum { .. }));
            }
            other => panic!("expected a ratio, got {other:?}"),
        }
    }

    #[test]
    fn parenthesized_denominator() {
        let a = parse("P(A,B) / (P(B))").unwrap();
        let b = parse("P(A,B) / P(B)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse("sum[A](P(B|A"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("P(A'"), Err(ParseError::Syntax { pos: 3, .. })));
        assert!(matches!(parse("P(A) )"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("sum[A,A](P(A))"), Err(ParseError::DuplicateBoundVar { .. })));
        assert!(matches!(parse("P(A|A)"), Err(ParseError::OverlappingTerm { .. })));
        assert!(matches!(parse(""), Err(ParseError::Syntax { pos: 0, .. })));
    }

    #[test]
    fn query_head() {
        let e = parse_estimand("P(Y | do(X)) = sum[W](P(Y|X,W) P(W))").unwrap();
        let q = e.query.unwrap();
        assert_eq!(q.outcome, vec!["Y"]);
        assert_eq!(q.intervened, vec!["X"]);
        let e = parse_estimand("P(V16 | do(V0), do(V4)) = P(V16|V0,V4)").unwrap();
        assert_eq!(e.query.unwrap().intervened, vec!["V0", "V4"]);
    }

    #[test]
    fn display_reparses() {
        for text in [fixtures::NAPKIN_ESTIMAND, fixtures::CONE_CLOUD_ESTIMAND, fixtures::CHAIN7_ESTIMAND] {
            let e = parse_estimand(text).unwrap().expr;
            assert_eq!(parse(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn chain7_flattens_to_one_level() {
        let e = parse_estimand(fixtures::CHAIN7_ESTIMAND).unwrap().expr;
        let h = flatten(&e);
        assert_eq!(h.levels.len(), 1);
        let l = h.root_level();
        assert_eq!(l.factors.len(), 7);
        assert_eq!(l.sum_vars, vec!["V1", "V2", "V3", "V4", "V5", "V0'"]);
        assert_eq!(l.free_vars, vec!["V0", "V6"]);
        assert!(l.children.is_empty());
        assert_eq!(l.rename_map, vec![("V0'".to_string(), "V0".to_string())]);
        let scopes: Vec<Vec<String>> = l.factors.iter().map(|f| f.scope()).collect();
        assert!(scopes.contains(&vec![
            "V0'".into(),
            "V1".into(),
            "V2".into(),
            "V3".into(),
            "V4".into(),
            "V5".into(),
            "V6".into()
        ]));
        assert!(scopes.contains(&vec!["V0'".to_string()]));
    }

    #[test]
    fn napkin_hierarchy() {
        let e = parse_estimand(fixtures::NAPKIN_ESTIMAND).unwrap().expr;
        let h = flatten(&e);
        assert_eq!(h.levels.len(), 2);
        assert_eq!(h.depth(), 2);
        let root = h.root_level();
        let child = &h.levels[root.children[0]];
        assert_eq!(child.parent, Some(h.root));
        assert_eq!(
            child.factors,
            vec![
                LevelFactor::Term(ProbTerm::new(&["X"], &["R", "W'"])),
                LevelFactor::Term(ProbTerm::new(&["W'"], &[])),
            ]
        );
        assert_eq!(child.free_vars, vec!["R", "X"]);
        assert_eq!(
            root.factors,
            vec![
                LevelFactor::Term(ProbTerm::new(&["X", "Y"], &["R", "W"])),
                LevelFactor::Term(ProbTerm::new(&["W"], &[])),
                LevelFactor::ChildOutput { child: child.id, scope: vec!["R".into(), "X".into()] },
            ]
        );
        assert_eq!(h.bottom_up(), vec![child.id, h.root]);
    }

    #[test]
    fn cone_cloud_flattens_with_primes() {
        let e = parse_estimand(fixtures::CONE_CLOUD_ESTIMAND).unwrap().expr;
        let h = flatten(&e);
        assert_eq!(h.levels.len(), 1);
        let l = h.root_level();
        assert_eq!(l.factors.len(), 13);
        let primes: Vec<&str> = l.rename_map.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(primes, vec!["V10'", "V11'", "V12'", "V13'", "V14'"]);
        assert_eq!(l.free_vars, vec!["V0", "V4", "V10", "V14"]);
        assert_eq!(l.sum_vars.len(), 16);
    }

    #[test]
    fn unused_sum_variable_is_dropped() {
        let h = flatten(&parse("sum[A,B](P(B))").unwrap());
        assert_eq!(h.root_level().sum_vars, vec!["B"]);
    }

    #[test]
    fn sibling_sums_get_distinct_names() {
        let h = flatten(&parse("sum[A](P(A|B)) sum[A](P(A|C))").unwrap());
        assert_eq!(h.root_level().sum_vars, vec!["A", "A'"]);
        assert_eq!(h.root_level().free_vars, vec!["B", "C"]);
    }

    #[test]
    fn flatten_is_deterministic() {
        let e = parse_estimand(fixtures::CONE_CLOUD_ESTIMAND).unwrap().expr;
        assert_eq!(flatten(&e), flatten(&e));
    }

    fn one_var_binding(p1: f64) -> (TermBindings, impl Fn(&str) -> Option<u32>) {
        let f =
            SparseFactor::from_entries(vec![Variable::new("A", 2)], vec![(vec![0], 1.0 - p1), (vec![1], p1)]).unwrap();
        let mut b = TermBindings::new();
        b.insert("P(A)".into(), f);
        (b, |n: &str| if base_name(n) == "A" { Some(2) } else { None })
    }

    #[test]
    fn dense_eval_term_and_normalization() {
        let (b, d) = one_var_binding(0.7);
        let mut a = HashMap::new();
        a.insert("A".to_string(), 1);
        let v = dense_expr_eval(&parse("P(A)").unwrap(), &b, &d, &a, 1e6).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        let s = dense_expr_eval(&parse("sum[A](P(A))").unwrap(), &b, &d, &HashMap::new(), 1e6).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let err = dense_expr_eval(&parse("sum[A](P(A))").unwrap(), &b, &d, &HashMap::new(), 1.0).unwrap_err();
        assert!(matches!(err, DenseError::DenseLimitExceeded { .. }));
    }

    #[test]
    fn dense_division_rules() {
        let f = SparseFactor::from_entries(vec![Variable::new("A", 2)], vec![(vec![0], 1.0)]).unwrap();
        let g = SparseFactor::from_entries(vec![Variable::new("B", 2)], vec![(vec![0], 1.0)]).unwrap();
        let mut b = TermBindings::new();
        b.insert("P(A)".into(), f);
        b.insert("P(B)".into(), g);
        let d = |_: &str| Some(2);
        let e = parse("P(A) / P(B)").unwrap();
        let at = |a: u32, bb: u32| HashMap::from([("A".to_string(), a), ("B".to_string(), bb)]);
        assert_eq!(dense_expr_eval(&e, &b, &d, &at(1, 1), 1e6).unwrap(), 0.0);
        assert!(matches!(dense_expr_eval(&e, &b, &d, &at(0, 1), 1e6), Err(DenseError::DivisionByZero { .. })));
    }

    // ---- flattening soundness --------------------------------------------

    const VARS: [&str; 5] = ["A", "B", "C", "D", "E"];

    fn random_term(rng: &mut ChaCha8Rng, pool: &[&str]) -> Expr {
        let mut vs: Vec<&str> = pool.to_vec();
        for i in (1..vs.len()).rev() {
            let j = rng.random_range(0..=i);
            vs.swap(i, j);
        }
        let nl = rng.random_range(1..=2.min(vs.len()));
        let nr = rng.random_range(0..=2.min(vs.len() - nl));
        Expr::Prob(ProbTerm::new(&vs[..nl], &vs[nl..nl + nr]))
    }

    fn random_sum_product(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
        let n = rng.random_range(1..=3);
        let mut items: Vec<Expr> = (0..n).map(|_| random_term(rng, &VARS)).collect();
        if depth < 2 && rng.random_bool(0.6) {
            items.push(random_sum_product(rng, depth + 1));
        }
        let body = if items.len() == 1 { items.pop().unwrap() } else { Expr::Product(items) };
        let free: Vec<String> = body.free_vars().into_iter().collect();
        let k = rng.random_range(0..=free.len().min(2));
        if k == 0 {
            return body;
        }
        let vars: Vec<String> = free.into_iter().take(k).collect();
        Expr::Sum { vars, body: Box::new(body) }
    }

    fn random_expr(rng: &mut ChaCha8Rng) -> Expr {
        let e = random_sum_product(rng, 0);
        if rng.random_bool(0.5) {
            let d = random_sum_product(rng, 1);
            Expr::Ratio { num: Box::new(e), den: Box::new(d) }
        } else {
            e
        }
    }

    fn random_positive_bindings(rng: &mut ChaCha8Rng, e: &Expr, doms: &HashMap<&str, u32>) -> TermBindings {
        let mut b = TermBindings::new();
        for t in e.terms() {
            let key = t.base_key();
            if b.contains_key(&key) {
                continue;
            }
            let mut names: Vec<&str> = t.vars().map(|s| s.as_str()).collect();
            names.sort_by(|a, b| natural_cmp(a, b));
            let scope: Vec<Variable> = names.iter().map(|n| Variable::new(n, doms[n])).collect();
            let mut cells = vec![vec![]];
            for n in &names {
                cells = cells
                    .into_iter()
                    .flat_map(|c: Vec<u32>| {
                        (0..doms[n]).map(move |x| {
                            let mut c = c.clone();
                            c.push(x);
                            c
                        })
                    })
                    .collect();
            }
            let entries: Vec<(Vec<u32>, f64)> = cells.into_iter().map(|c| (c, rng.random_range(0.05..1.0))).collect();
            b.insert(key, SparseFactor::from_entries(scope, entries).unwrap());
        }
        b
    }

    fn assignments(names: &[String], doms: &HashMap<&str, u32>) -> Vec<HashMap<String, u32>> {
        let mut out = vec![HashMap::new()];
        for n in names {
            out = out
                .into_iter()
                .flat_map(|a| {
                    (0..doms[base_name(n)]).map(move |x| {
                        let mut a = a.clone();
                        a.insert(n.clone(), x);
                        a
                    })
                })
                .collect();
        }
        out
    }

    fn soundness_run(seed: u64, cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..cases {
            let doms: HashMap<&str, u32> = VARS.iter().map(|v| (*v, rng.random_range(2..=3))).collect();
            let e = random_expr(&mut rng);
            let b = random_positive_bindings(&mut rng, &e, &doms);
            let h = flatten(&e);
            let root = h.root_level();
            assert_eq!(root.free_vars, e.free_vars_sorted(), "case {case}: {e}");
            for l in &h.levels {
                let mut vars = l.variables();
                vars.retain(|v| !l.sum_vars.contains(v));
                assert_eq!(vars, l.free_vars, "level free vars, case {case}: {e}");
            }
            let dom = |n: &str| doms.get(base_name(n)).copied();
            for a in assignments(&root.free_vars, &doms) {
                let want = dense_expr_eval(&e, &b, &dom, &a, 1e7).unwrap();
                let got = dense_hierarchy_eval(&h, &b, &dom, &a, 1e7).unwrap();
                assert!((want - got).abs() <= 1e-10 * want.abs().max(1e-300), "case {case} `{e}`: {want} vs {got}");
            }
        }
    }

    #[test]
    fn flattening_is_sound_seed_1() {
        soundness_run(1, 200);
    }

    #[test]
    fn flattening_is_sound_seed_2() {
        soundness_run(2, 200);
    }

    #[test]
    fn flattening_is_sound_seed_3() {
        soundness_run(3, 200);
    }
}
