//! Graph-to-graph optimization passes.
//!
//! Each pass returns the rewritten graph and a [`PassReport`] whose rewrites
//! account for the full change in node count: every rewrite replaces the
//! `matched` nodes with `produced` new ones.

mod attention;
mod dce;
mod fold;
mod fuse;
mod prune;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Graph, IrError, ModuleTag};

pub use attention::fuse_attention;
pub use dce::eliminate_dead_nodes;
pub use fold::fold_constants;
pub use fuse::fuse_basic;
pub use prune::{prune_modules, PruneSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PassError {
    #[error("module `{0}` cannot be pruned")]
    ProtectedModule(ModuleTag),
    #[error("pruning is infeasible: node `{node}` consumed `{tensor}` and no surviving upstream tensor has shape {shape:?}")]
    Infeasible {
        node: String,
        tensor: String,
        shape: Vec<usize>,
    },
    #[error("pruning removes every graph output")]
    NoOutputs,
    #[error("unknown pass `{0}`")]
    UnknownPass(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub pattern: String,
    pub matched: Vec<String>,
    /// Number of nodes introduced in place of `matched`.
    pub produced: usize,
}

impl Rewrite {
    pub(crate) fn new(pattern: &str, matched: Vec<String>, produced: usize) -> Self {
        Self {
            pattern: pattern.to_string(),
            matched,
            produced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass_name: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub rewrites: Vec<Rewrite>,
}

impl PassReport {
    pub(crate) fn new(pass_name: &str, nodes_before: usize) -> Self {
        Self {
            pass_name: pass_name.to_string(),
            nodes_before,
            nodes_after: nodes_before,
            rewrites: Vec::new(),
        }
    }

    /// Node count implied by the rewrite list.
    pub fn accounted_nodes_after(&self) -> usize {
        self.rewrites
            .iter()
            .fold(self.nodes_before as isize, |n, r| {
                n - r.matched.len() as isize + r.produced as isize
            }) as usize
    }
}

/// A step of an optimization pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Fold,
    Dce,
    FuseBasic,
    FuseAttention,
    Prune(PruneSpec),
}

impl Pass {
    /// The standard software optimization order.
    pub fn default_pipeline() -> Vec<Pass> {
        vec![Pass::Fold, Pass::Dce, Pass::FuseBasic, Pass::FuseAttention]
    }

    pub fn run(&self, g: &Graph) -> Result<(Graph, PassReport), PassError> {
        match self {
            Pass::Fold => fold_constants(g),
            Pass::Dce => eliminate_dead_nodes(g),
            Pass::FuseBasic => fuse_basic(g),
            Pass::FuseAttention => fuse_attention(g),
            Pass::Prune(spec) => prune_modules(g, spec),
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Pass::Fold => "fold",
            Pass::Dce => "dce",
            Pass::FuseBasic => "fuse_basic",
            Pass::FuseAttention => "fuse_attention",
            Pass::Prune(_) => "prune",
        };
        f.write_str(name)
    }
}

impl FromStr for Pass {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fold" | "fold_constants" => Ok(Pass::Fold),
            "dce" | "eliminate_dead_nodes" => Ok(Pass::Dce),
            "fuse_basic" => Ok(Pass::FuseBasic),
            "fuse_attention" => Ok(Pass::FuseAttention),
            _ => Err(PassError::UnknownPass(s.to_string())),
        }
    }
}

/// Apply `passes` in order, collecting one report per pass.
pub fn optimize_pipeline(
    g: &Graph,
    passes: &[Pass],
) -> Result<(Graph, Vec<PassReport>), PassError> {
    let mut current = g.clone();
    let mut reports = Vec::with_capacity(passes.len());
    for pass in passes {
        let (next, report) = pass.run(&current)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Remove the nodes whose ids are in `ids` and drop tensors left unreferenced.
pub(crate) fn remove_nodes(g: &mut Graph, ids: &BTreeSet<String>) {
    g.nodes.retain(|n| !ids.contains(&n.id));
    g.prune_unreferenced_tensors();
}

/// Point every consumer of `from` at `to`.
pub(crate) fn rename_uses(g: &mut Graph, from: &str, to: &str) {
    for n in &mut g.nodes {
        for t in &mut n.inputs {
            if t == from {
                *t = to.to_string();
            }
        }
    }
}

/// Finish a pass: validate, fill in `nodes_after`.
pub(crate) fn finish(g: Graph, mut report: PassReport) -> Result<(Graph, PassReport), PassError> {
    g.validate(crate::ir::ParseMode::Optimized)?;
    report.nodes_after = g.nodes.len();
    debug_assert_eq!(
        report.accounted_nodes_after(),
        report.nodes_after,
        "{report:?}"
    );
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_names_parse() {
        for p in Pass::default_pipeline() {
            assert_eq!(p.to_string().parse::<Pass>().unwrap(), p);
        }
        assert!("inline".parse::<Pass>().is_err());
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let g = Graph::default();
        let (out, reports) = optimize_pipeline(&g, &[]).unwrap();
        assert_eq!(out, g);
        assert!(reports.is_empty());
    }
}
