//! Plug-in evaluation of causal-effect estimands over empirical data.
//!
//! An estimand such as `sum[W](P(X,Y|R,W) P(W)) / sum[W](P(X|R,W) P(W))` is
//! parsed ([`estimand`]), flattened into a hierarchy of sum-product levels,
//! bound to empirical conditional tables extracted from a dataset
//! ([`model::empirical_prob`]), decomposed into a tree/hypertree
//! decomposition ([`decomposition`]) and evaluated by cluster-tree
//! elimination over relational (zero-suppressed) factors ([`engine`]).
//!
//! Sparse tables keep the cost of every step bounded by the data size raised
//! to the hypertree width, rather than by the domain size raised to the
//! treewidth. [`engine::EvalReport`] records both bounds next to the table
//! sizes actually materialized.

pub mod decomposition;
pub mod engine;
pub mod estimand;
pub mod exec;
pub mod factor;
pub mod fixtures;
pub mod model;
pub mod oracle;
pub mod scm;

mod error;
mod names;

pub use error::Error;
pub use exec::Exec;
pub use factor::SparseFactor;
pub use model::{CausalGraph, Dataset, Variable};
pub use names::{base_name, natural_cmp};
